//! Evaluation campaigns: ground-truth subscores of the selected entries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::evaluator::{LabelSet, Metric, MetricVersion, SubscoreVector};
use crate::geom::turning_angle;
use crate::planner::{Inference, Selector};
use crate::scenario::Scenario;

/// Expert turning angle beyond which a scene counts as a turn, degrees.
pub const TURN_SPLIT_DEG: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnSplit {
    Left,
    Forward,
    Right,
}

impl TurnSplit {
    pub const ALL: [TurnSplit; 3] = [TurnSplit::Left, TurnSplit::Forward, TurnSplit::Right];

    pub fn name(self) -> &'static str {
        match self {
            TurnSplit::Left => "left",
            TurnSplit::Forward => "forward",
            TurnSplit::Right => "right",
        }
    }

    /// Split of a scene by its expert's turning angle. A stationary expert
    /// has no defined angle and counts as forward.
    pub fn of(scene: &Scenario) -> TurnSplit {
        match turning_angle(&scene.expert) {
            Ok(a) if a > TURN_SPLIT_DEG => TurnSplit::Left,
            Ok(a) if a < -TURN_SPLIT_DEG => TurnSplit::Right,
            _ => TurnSplit::Forward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub seed: u64,
    pub split: TurnSplit,
    pub selected: usize,
    pub subscores: SubscoreVector,
    /// Aggregate of `subscores`, fraction in [0, 1].
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: MetricVersion,
    /// Mean of each subscore over the scenes, percent, in [`Metric::ALL`] order.
    pub subscore_means: Vec<(Metric, f64)>,
    /// Mean aggregate, percent.
    pub aggregate: f64,
    pub rows: Vec<ScenarioRow>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

impl EvalReport {
    /// Report over `rows`; the means are taken in row order.
    pub fn from_rows(
        rows: Vec<ScenarioRow>,
        version: MetricVersion,
        config_hash: &str,
        checkpoint_id: &str,
    ) -> Result<Self, HarnessError> {
        if rows.is_empty() {
            return Err(HarnessError::EmptyDataset);
        }
        let n = rows.len() as f64;
        let subscore_means = Metric::ALL
            .iter()
            .map(|&m| (m, 100.0 * rows.iter().map(|r| r.subscores.get(m)).sum::<f64>() / n))
            .collect();
        let aggregate = 100.0 * rows.iter().map(|r| r.aggregate).sum::<f64>() / n;
        Ok(Self {
            version,
            subscore_means,
            aggregate,
            rows,
            config_hash: config_hash.to_string(),
            checkpoint_id: checkpoint_id.to_string(),
        })
    }

    pub fn scenarios(&self) -> usize {
        self.rows.len()
    }

    pub fn subscore_mean(&self, m: Metric) -> f64 {
        self.subscore_means.iter().find(|(k, _)| *k == m).map_or(f64::NAN, |(_, v)| *v)
    }
}

fn check_lengths(scenes: &[Scenario], labels: &[LabelSet], n: usize) -> Result<(), HarnessError> {
    if scenes.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if labels.len() != scenes.len() || n != scenes.len() {
        return Err(HarnessError::InvalidConfig(format!(
            "{} scenes, {} label sets, {n} selections",
            scenes.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Report for given per-scene selections.
pub fn evaluate_selections(
    scenes: &[Scenario],
    labels: &[LabelSet],
    selected: &[usize],
    version: MetricVersion,
    config_hash: &str,
    checkpoint_id: &str,
) -> Result<EvalReport, HarnessError> {
    check_lengths(scenes, labels, selected.len())?;
    let rows = scenes
        .iter()
        .zip(labels)
        .zip(selected)
        .map(|((s, l), &i)| {
            if i >= l.len() {
                return Err(HarnessError::InvalidConfig(format!("selection {i} outside a vocabulary of {}", l.len())));
            }
            Ok(ScenarioRow {
                seed: s.seed,
                split: TurnSplit::of(s),
                selected: i,
                subscores: l.subscores[i],
                aggregate: l.aggregates(version)[i],
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    EvalReport::from_rows(rows, version, config_hash, checkpoint_id)
}

/// Selector output for every scene, in scene order.
pub fn run_inference(selector: &Selector, scenes: &[Scenario]) -> Result<Vec<Inference>, HarnessError> {
    Ok(scenes.par_iter().map(|s| selector.select(s)).collect::<Result<Vec<_>, _>>()?)
}

/// Runs the selector on every scene and reports the selected entries.
pub fn evaluate(
    selector: &Selector,
    scenes: &[Scenario],
    labels: &[LabelSet],
    version: MetricVersion,
    config_hash: &str,
    checkpoint_id: &str,
) -> Result<(EvalReport, Vec<Inference>), HarnessError> {
    check_lengths(scenes, labels, scenes.len())?;
    let inferences = run_inference(selector, scenes)?;
    let selected: Vec<usize> = inferences.iter().map(|i| i.selected).collect();
    let report = evaluate_selections(scenes, labels, &selected, version, config_hash, checkpoint_id)?;
    Ok((report, inferences))
}

/// Per-split reports; a split without scenes has no report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReports {
    pub left: Option<EvalReport>,
    pub forward: Option<EvalReport>,
    pub right: Option<EvalReport>,
}

impl SplitReports {
    pub fn get(&self, split: TurnSplit) -> Option<&EvalReport> {
        match split {
            TurnSplit::Left => self.left.as_ref(),
            TurnSplit::Forward => self.forward.as_ref(),
            TurnSplit::Right => self.right.as_ref(),
        }
    }
}

/// Partitions a report's rows by turn split.
pub fn split_eval(report: &EvalReport) -> SplitReports {
    let part = |split: TurnSplit| {
        let rows: Vec<ScenarioRow> = report.rows.iter().filter(|r| r.split == split).cloned().collect();
        EvalReport::from_rows(rows, report.version, &report.config_hash, &report.checkpoint_id).ok()
    };
    SplitReports { left: part(TurnSplit::Left), forward: part(TurnSplit::Forward), right: part(TurnSplit::Right) }
}
