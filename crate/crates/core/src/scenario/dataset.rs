//! Line-delimited JSON datasets: one header line, then one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GenConfig, Scenario, ScenarioError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scenario: Scenario,
    pub split_tag: SplitTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub gen_config: GenConfig,
    /// Half-open seed range `[start, end)`.
    pub seed_range: [u64; 2],
}

pub fn save_dataset(path: &Path, header: &DatasetHeader, records: &[DatasetRecord]) -> Result<(), ScenarioError> {
    let mut w = BufWriter::new(File::create(path)?);
    let io = |e: serde_json::Error| ScenarioError::Io(e.into());
    serde_json::to_writer(&mut w, header).map_err(io)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(io)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>), ScenarioError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or(ScenarioError::Malformed { line: 1, reason: "missing header".into() })??;
    let probe: VersionProbe =
        serde_json::from_str(&first).map_err(|e| ScenarioError::Malformed { line: 1, reason: e.to_string() })?;
    if probe.format_version != FORMAT_VERSION {
        return Err(ScenarioError::FormatVersionMismatch { found: probe.format_version, expected: FORMAT_VERSION });
    }
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| ScenarioError::Malformed { line: 1, reason: e.to_string() })?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| ScenarioError::Malformed { line: i + 2, reason: e.to_string() })?;
        records.push(r);
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::EvaluatorConfig;
    use crate::scenario::generate_scenario;
    use crate::vocab::{GridSpec, TrajectoryVocabulary};

    fn header() -> DatasetHeader {
        DatasetHeader { format_version: FORMAT_VERSION, gen_config: GenConfig::default(), seed_range: [0, 100] }
    }

    #[test]
    fn round_trip_is_exact() {
        let vocab = TrajectoryVocabulary::build(&GridSpec::compact()).unwrap();
        let eval = EvaluatorConfig::default();
        let cfg = GenConfig::default();
        let records: Vec<DatasetRecord> = (0..100)
            .map(|seed| DatasetRecord {
                scenario: generate_scenario(seed, &cfg, &vocab, &eval).unwrap(),
                split_tag: if seed % 5 == 0 { SplitTag::Test } else { SplitTag::Train },
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &header(), &records).unwrap();
        let (h, loaded) = load_dataset(&path).unwrap();
        assert_eq!(h, header());
        assert_eq!(loaded, records);
        // bitwise check on every float of the first record
        let a = serde_json::to_string(&records[0]).unwrap();
        let b = serde_json::to_string(&loaded[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        save_dataset(&path, &header(), &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let (_, records) = load_dataset(&path).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        let mut h = serde_json::to_value(header()).unwrap();
        h["format_version"] = serde_json::json!(99);
        std::fs::write(&path, format!("{h}\n")).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(ScenarioError::FormatVersionMismatch { found: 99, .. })
        ));
    }
}
