//! Per-scenario label sets and their binary sidecar cache.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{aggregate, distance_target, EvaluatorConfig, Metric, MetricVersion, SubscoreVector};

/// Metrics supervised by the planner heads, in column order after the
/// distance column.
pub const LABEL_TARGETS: [Metric; 9] = [
    Metric::Nc,
    Metric::Dac,
    Metric::Ddc,
    Metric::Tlc,
    Metric::Ep,
    Metric::Ttc,
    Metric::Lk,
    Metric::Hc,
    Metric::C,
];

const BINARY_METRICS: [Metric; 9] = [
    Metric::Nc,
    Metric::Dac,
    Metric::Ddc,
    Metric::Tlc,
    Metric::Ttc,
    Metric::Lk,
    Metric::Hc,
    Metric::Ec,
    Metric::C,
];

const CACHE_MAGIC: &[u8; 4] = b"SPLB";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub subscores: Vec<SubscoreVector>,
    /// RMS distance to the expert, meters.
    pub distances: Vec<f64>,
    pub normalized: Vec<f64>,
    pub pdms: Vec<f64>,
    pub epdms: Vec<f64>,
}

impl LabelSet {
    pub fn from_parts(subscores: Vec<SubscoreVector>, distances: Vec<f64>, cfg: &EvaluatorConfig) -> Self {
        assert_eq!(subscores.len(), distances.len());
        let normalized = distances.iter().map(|&d| distance_target(d, cfg)).collect();
        let pdms = subscores.iter().map(|s| aggregate(s, &cfg.v1)).collect();
        let epdms = subscores.iter().map(|s| aggregate(s, &cfg.v2)).collect();
        Self { subscores, distances, normalized, pdms, epdms }
    }

    pub fn len(&self) -> usize {
        self.subscores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subscores.is_empty()
    }

    pub fn aggregates(&self, version: MetricVersion) -> &[f64] {
        match version {
            MetricVersion::V1 => &self.pdms,
            MetricVersion::V2 => &self.epdms,
        }
    }

    /// `[normalized distance, LABEL_TARGETS...]` for entry `i`.
    pub fn target_row(&self, i: usize) -> [f64; 10] {
        let mut row = [0.0; 10];
        row[0] = self.normalized[i];
        for (c, &m) in LABEL_TARGETS.iter().enumerate() {
            row[c + 1] = self.subscores[i].get(m);
        }
        row
    }

    pub fn best(&self, version: MetricVersion) -> f64 {
        self.aggregates(version).iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Error)]
pub enum LabelCacheError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("label cache is stale or foreign (key mismatch)")]
    KeyMismatch,
    #[error("not a label cache file")]
    BadMagic,
    #[error("label cache version {0} unsupported")]
    Version(u32),
}

/// Writes label sets keyed by an opaque provenance string.
pub fn write_label_cache(path: &Path, key: &str, sets: &[LabelSet]) -> Result<(), LabelCacheError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION)?;
    w.write_u32::<LittleEndian>(key.len() as u32)?;
    w.write_all(key.as_bytes())?;
    w.write_u32::<LittleEndian>(sets.len() as u32)?;
    for set in sets {
        w.write_u32::<LittleEndian>(set.len() as u32)?;
        for (sub, &d) in set.subscores.iter().zip(&set.distances) {
            let mut bits = 0u16;
            for (b, &m) in BINARY_METRICS.iter().enumerate() {
                if sub.get(m) >= 0.5 {
                    bits |= 1 << b;
                }
            }
            w.write_u16::<LittleEndian>(bits)?;
            w.write_f64::<LittleEndian>(sub.ep)?;
            w.write_f64::<LittleEndian>(d)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a cache written by [`write_label_cache`]; the key must match.
pub fn read_label_cache(path: &Path, key: &str, cfg: &EvaluatorConfig) -> Result<Vec<LabelSet>, LabelCacheError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(LabelCacheError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CACHE_VERSION {
        return Err(LabelCacheError::Version(version));
    }
    let key_len = r.read_u32::<LittleEndian>()? as usize;
    let mut stored = vec![0u8; key_len];
    r.read_exact(&mut stored)?;
    if stored != key.as_bytes() {
        return Err(LabelCacheError::KeyMismatch);
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut sets = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut subscores = Vec::with_capacity(n);
        let mut distances = Vec::with_capacity(n);
        for _ in 0..n {
            let bits = r.read_u16::<LittleEndian>()?;
            let mut sub = SubscoreVector::default();
            for (b, &m) in BINARY_METRICS.iter().enumerate() {
                sub.set(m, f64::from((bits >> b) & 1));
            }
            sub.ep = r.read_f64::<LittleEndian>()?;
            subscores.push(sub);
            distances.push(r.read_f64::<LittleEndian>()?);
        }
        sets.push(LabelSet::from_parts(subscores, distances, cfg));
    }
    Ok(sets)
}
