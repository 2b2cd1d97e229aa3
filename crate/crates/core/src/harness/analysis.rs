//! Oracle study, heading distribution, random baseline and FOV sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SuprimConfig;
use super::eval::evaluate;
use super::HarnessError;
use crate::evaluator::{oracle_topk, rank_descending, LabelSet, MetricVersion};
use crate::planner::{train, Inference, PlannerConfig, Selector, TrainOptions};
use crate::scenario::{observe_with, Scenario, FOV_FIVE_CAMERA, FOV_ONE_CAMERA, FOV_THREE_CAMERA};
use crate::vocab::TrajectoryVocabulary;

/// Entries at or above this aggregate always count as high-scoring.
pub const HIGH_SCORE: f64 = 0.99;
/// Entries ranked this high within their scene also count.
pub const HIGH_SCORE_RANKS: usize = 3;

/// Mean best-in-top-K aggregate per K, percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub version: MetricVersion,
    pub ks: Vec<usize>,
    pub values: Vec<f64>,
    /// Mean of each scene's best aggregate, percent.
    pub ceiling: f64,
}

/// Best ground-truth aggregate among each scene's `K` top-ranked entries.
pub fn oracle_study(
    inferences: &[Inference],
    labels: &[LabelSet],
    ks: &[usize],
    version: MetricVersion,
) -> Result<OracleTable, HarnessError> {
    if inferences.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if inferences.len() != labels.len() {
        return Err(HarnessError::InvalidConfig(format!(
            "{} inferences for {} label sets",
            inferences.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let rankings: Vec<Vec<f64>> = inferences.iter().map(Inference::ranking_scores).collect();
    let values = ks
        .iter()
        .map(|&k| {
            let mut total = 0.0;
            for (r, l) in rankings.iter().zip(labels) {
                total += oracle_topk(l.aggregates(version), r, k)?;
            }
            Ok(100.0 * total / n)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let ceiling = 100.0 * labels.iter().map(|l| l.best(version)).sum::<f64>() / n;
    Ok(OracleTable { version, ks: ks.to_vec(), values, ceiling })
}

/// Monte-Carlo mean aggregate of uniformly random selections, percent.
pub fn random_baseline(labels: &[LabelSet], samples: usize, seed: u64, version: MetricVersion) -> Result<f64, HarnessError> {
    if labels.is_empty() || samples == 0 {
        return Err(HarnessError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for l in labels {
        let agg = l.aggregates(version);
        for _ in 0..samples {
            total += agg[rng.random_range(0..agg.len())];
        }
    }
    Ok(100.0 * total / (labels.len() * samples) as f64)
}

/// Final-heading distribution of high-scoring entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadingHistogram {
    /// `bins + 1` edges spanning `[-pi, pi]`, radians.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Counts divided by the largest count.
    pub normalized: Vec<f64>,
}

impl HeadingHistogram {
    /// KL divergence of the bin distribution from uniform, nats.
    pub fn kl_to_uniform(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        let bins = self.counts.len() as f64;
        self.counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                p * (p * bins).ln()
            })
            .sum()
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Counts, over all label sets, the final headings of entries that score at
/// least [`HIGH_SCORE`] or rank in their scene's top [`HIGH_SCORE_RANKS`].
pub fn heading_histogram(
    labels: &[LabelSet],
    vocab: &TrajectoryVocabulary,
    bins: usize,
    version: MetricVersion,
) -> Result<HeadingHistogram, HarnessError> {
    if labels.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if bins == 0 {
        return Err(HarnessError::InvalidConfig("histogram needs at least one bin".into()));
    }
    use std::f64::consts::PI;
    let width = 2.0 * PI / bins as f64;
    let bin_of: Vec<usize> = vocab
        .entries()
        .iter()
        .map(|t| (((t.last().heading + PI) / width).floor() as usize).min(bins - 1))
        .collect();
    let mut counts = vec![0usize; bins];
    for l in labels {
        let agg = l.aggregates(version);
        let mut qualifying = vec![false; agg.len()];
        for (q, &a) in qualifying.iter_mut().zip(agg) {
            *q = a >= HIGH_SCORE;
        }
        for i in rank_descending(agg).into_iter().take(HIGH_SCORE_RANKS) {
            qualifying[i] = true;
        }
        for (i, _) in qualifying.iter().enumerate().filter(|(_, &q)| q) {
            counts[bin_of[i]] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let normalized = counts.iter().map(|&c| c as f64 / max).collect();
    let edges = (0..=bins).map(|b| -PI + b as f64 * width).collect();
    Ok(HeadingHistogram { edges, counts, normalized })
}

/// The three observation masks compared by [`fov_sweep`].
pub const FOV_PRESETS: [(&str, f64); 3] =
    [("1-camera", FOV_ONE_CAMERA), ("3-camera", FOV_THREE_CAMERA), ("5-camera", FOV_FIVE_CAMERA)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FovRow {
    pub name: String,
    pub fov_halfangle: f64,
    /// Mean observation tokens per test scene.
    pub mean_tokens: f64,
    /// Mean aggregate on the test scenes, percent.
    pub aggregate: f64,
}

/// Trains and evaluates one model per observation mask.
pub fn fov_sweep(
    train_scenes: &[Scenario],
    train_labels: &[LabelSet],
    test_scenes: &[Scenario],
    test_labels: &[LabelSet],
    vocab: &TrajectoryVocabulary,
    cfg: &SuprimConfig,
    seed: u64,
) -> Result<Vec<FovRow>, HarnessError> {
    if test_scenes.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    FOV_PRESETS
        .iter()
        .map(|&(name, fov)| {
            let planner = PlannerConfig { fov_halfangle: fov, ..cfg.planner.clone() };
            let opts = TrainOptions { eval: cfg.evaluator.clone(), config_hash: cfg.hash(), ..TrainOptions::new(seed) };
            let ck = train(train_scenes, Some(train_labels), vocab, &planner, &opts)?.checkpoint;
            let selector = Selector::from_checkpoint(&ck, cfg.inference.use_teacher)?;
            let (report, _) = evaluate(&selector, test_scenes, test_labels, cfg.inference.version, &cfg.hash(), &ck.id()?)?;
            let tokens: usize =
                test_scenes.iter().map(|s| observe_with(s, fov, &planner.token_caps).tokens.len()).sum();
            Ok(FovRow {
                name: name.to_string(),
                fov_halfangle: fov,
                mean_tokens: tokens as f64 / test_scenes.len() as f64,
                aggregate: report.aggregate,
            })
        })
        .collect()
}
