//! Dataset generation and labelling with ordered parallelism.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::evaluator::{label_vocabulary, EvaluatorConfig, LabelSet};
use crate::scenario::{generate_scenario, rotate_scenario, sample_rotation, DatasetRecord, GenConfig, Scenario, SplitTag};
use crate::vocab::{GridSpec, TrajectoryVocabulary};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "SUPRIM_THREADS";

/// Builds the global worker pool from `SUPRIM_THREADS` when set. Returns the
/// cap in effect, or `None` when the variable is absent.
pub fn configure_threads() -> Result<Option<usize>, HarnessError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a pool that already exists keeps its size; that is not an error
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

/// One scene per seed in `seeds`, in seed order.
pub fn generate_dataset(
    seeds: Range<u64>,
    split: SplitTag,
    gen: &GenConfig,
    vocab: &TrajectoryVocabulary,
    eval: &EvaluatorConfig,
) -> Result<Vec<DatasetRecord>, HarnessError> {
    let seeds: Vec<u64> = seeds.collect();
    seeds
        .par_iter()
        .map(|&s| Ok(DatasetRecord { scenario: generate_scenario(s, gen, vocab, eval)?, split_tag: split }))
        .collect()
}

/// Ground-truth labels for every scene, in order.
pub fn label_dataset(scenes: &[Scenario], vocab: &TrajectoryVocabulary, eval: &EvaluatorConfig) -> Vec<LabelSet> {
    scenes.par_iter().map(|s| label_vocabulary(s, vocab, eval)).collect()
}

/// Labels of one randomly rotated copy per scene; angles come from `seed`
/// and are drawn in scene order.
pub fn rotated_labels(
    scenes: &[Scenario],
    max_angle: f64,
    seed: u64,
    vocab: &TrajectoryVocabulary,
    eval: &EvaluatorConfig,
) -> Vec<LabelSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas: Vec<f64> = scenes.iter().map(|_| sample_rotation(&mut rng, max_angle)).collect();
    scenes
        .par_iter()
        .zip(thetas.par_iter())
        .map(|(s, &t)| label_vocabulary(&rotate_scenario(s, t), vocab, eval))
        .collect()
}

/// Key tying a label cache to the dataset file, evaluator settings and grid.
pub fn label_cache_key(dataset_bytes: &[u8], eval: &EvaluatorConfig, grid: &GridSpec) -> String {
    let mut h = Sha256::new();
    h.update(dataset_bytes);
    h.update(serde_json::to_vec(eval).expect("evaluator config serializes"));
    h.update(serde_json::to_vec(grid).expect("grid spec serializes"));
    hex::encode(h.finalize())
}
