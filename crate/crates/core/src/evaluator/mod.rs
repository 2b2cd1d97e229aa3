//! Rule-based trajectory scoring, score aggregation and vocabulary labelling.

mod labels;
pub mod rules;

pub use labels::{read_label_cache, write_label_cache, LabelCacheError, LabelSet, LABEL_TARGETS};
pub use rules::SceneContext;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Trajectory;
use crate::scenario::Scenario;
use crate::vocab::{l2_distance, normalized_distance, TrajectoryVocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Nc,
    Dac,
    Ddc,
    Tlc,
    Ep,
    Ttc,
    Lk,
    Hc,
    Ec,
    C,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Nc,
        Metric::Dac,
        Metric::Ddc,
        Metric::Tlc,
        Metric::Ep,
        Metric::Ttc,
        Metric::Lk,
        Metric::Hc,
        Metric::Ec,
        Metric::C,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Nc => "NC",
            Metric::Dac => "DAC",
            Metric::Ddc => "DDC",
            Metric::Tlc => "TLC",
            Metric::Ep => "EP",
            Metric::Ttc => "TTC",
            Metric::Lk => "LK",
            Metric::Hc => "HC",
            Metric::Ec => "EC",
            Metric::C => "C",
        }
    }
}

/// Ground-truth subscores of one trajectory; every value lies in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubscoreVector {
    pub nc: f64,
    pub dac: f64,
    pub ddc: f64,
    pub tlc: f64,
    pub ep: f64,
    pub ttc: f64,
    pub lk: f64,
    pub hc: f64,
    pub ec: f64,
    pub c: f64,
}

impl SubscoreVector {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Nc => self.nc,
            Metric::Dac => self.dac,
            Metric::Ddc => self.ddc,
            Metric::Tlc => self.tlc,
            Metric::Ep => self.ep,
            Metric::Ttc => self.ttc,
            Metric::Lk => self.lk,
            Metric::Hc => self.hc,
            Metric::Ec => self.ec,
            Metric::C => self.c,
        }
    }

    pub fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::Nc => self.nc = v,
            Metric::Dac => self.dac = v,
            Metric::Ddc => self.ddc = v,
            Metric::Tlc => self.tlc = v,
            Metric::Ep => self.ep = v,
            Metric::Ttc => self.ttc = v,
            Metric::Lk => self.lk = v,
            Metric::Hc => self.hc = v,
            Metric::Ec => self.ec = v,
            Metric::C => self.c = v,
        }
    }

    pub fn as_array(&self) -> [f64; 10] {
        Metric::ALL.map(|m| self.get(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricVersion {
    V1,
    V2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetric {
    pub metric: Metric,
    pub weight: f64,
}

/// Multiplicative penalty set and weighted-average set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub penalties: Vec<Metric>,
    pub averages: Vec<WeightedMetric>,
}

impl MetricWeights {
    fn new(penalties: &[Metric], averages: &[(Metric, f64)]) -> Self {
        Self {
            penalties: penalties.to_vec(),
            averages: averages.iter().map(|&(metric, weight)| WeightedMetric { metric, weight }).collect(),
        }
    }

    pub fn v1() -> Self {
        Self::new(&[Metric::Nc, Metric::Dac], &[(Metric::Ep, 5.0), (Metric::Ttc, 5.0), (Metric::C, 2.0)])
    }

    pub fn v2() -> Self {
        Self::new(
            &[Metric::Nc, Metric::Dac, Metric::Ddc, Metric::Tlc],
            &[(Metric::Ep, 5.0), (Metric::Ttc, 5.0), (Metric::Lk, 2.0), (Metric::Hc, 1.0), (Metric::Ec, 1.0)],
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.averages.is_empty() {
            return Err("average set is empty".into());
        }
        for w in &self.averages {
            if !(w.weight > 0.0 && w.weight.is_finite()) {
                return Err(format!("weight of {} must be positive", w.metric.name()));
            }
            if self.penalties.contains(&w.metric) {
                return Err(format!("{} is both a penalty and an average", w.metric.name()));
            }
        }
        Ok(())
    }
}

/// Product of penalties times the weighted mean of the averaged metrics.
pub fn aggregate(sub: &SubscoreVector, w: &MetricWeights) -> f64 {
    let penalty: f64 = w.penalties.iter().map(|&m| sub.get(m)).product();
    let total: f64 = w.averages.iter().map(|a| a.weight).sum();
    let avg: f64 = w.averages.iter().map(|a| a.weight * sub.get(a.metric)).sum::<f64>() / total;
    penalty * avg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorConfig {
    pub ttc_horizon_s: f64,
    pub ttc_step_s: f64,
    pub max_lon_accel: f64,
    pub max_lat_accel: f64,
    pub max_jerk: f64,
    pub max_yaw_rate: f64,
    pub lk_max_offset: f64,
    pub ddc_max_deviation_deg: f64,
    pub ec_window_s: f64,
    pub ec_max_accel_change: f64,
    /// Below this expert progress every candidate gets EP = 1.
    pub ep_min_progress: f64,
    /// Scale of the normalized distance to the expert, meters.
    pub distance_scale: f64,
    pub v1: MetricWeights,
    pub v2: MetricWeights,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            ttc_horizon_s: 1.0,
            ttc_step_s: 0.1,
            max_lon_accel: 4.0,
            max_lat_accel: 4.9,
            max_jerk: 8.4,
            max_yaw_rate: 0.95,
            lk_max_offset: 0.5,
            ddc_max_deviation_deg: 90.0,
            ec_window_s: 1.0,
            ec_max_accel_change: 2.0,
            ep_min_progress: 0.5,
            distance_scale: 3.0,
            v1: MetricWeights::v1(),
            v2: MetricWeights::v2(),
        }
    }
}

impl EvaluatorConfig {
    pub fn weights(&self, version: MetricVersion) -> &MetricWeights {
        match version {
            MetricVersion::V1 => &self.v1,
            MetricVersion::V2 => &self.v2,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("ttc_horizon_s", self.ttc_horizon_s),
            ("ttc_step_s", self.ttc_step_s),
            ("max_lon_accel", self.max_lon_accel),
            ("max_lat_accel", self.max_lat_accel),
            ("max_jerk", self.max_jerk),
            ("max_yaw_rate", self.max_yaw_rate),
            ("lk_max_offset", self.lk_max_offset),
            ("ec_window_s", self.ec_window_s),
            ("ec_max_accel_change", self.ec_max_accel_change),
            ("distance_scale", self.distance_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        self.v1.validate()?;
        self.v2.validate()
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Scores candidates against one scene.
pub struct Evaluator<'a> {
    pub cfg: &'a EvaluatorConfig,
    pub ctx: SceneContext<'a>,
}

impl<'a> Evaluator<'a> {
    pub fn new(scenario: &'a Scenario, cfg: &'a EvaluatorConfig) -> Self {
        Self { cfg, ctx: SceneContext::new(scenario) }
    }

    pub fn progress(&self, t: &Trajectory) -> f64 {
        rules::progress(&self.ctx, t)
    }

    pub fn expert_progress(&self) -> f64 {
        self.progress(&self.ctx.scenario.expert)
    }

    /// Penalty-only check used when choosing the progress reference.
    pub fn penalties_pass(&self, t: &Trajectory) -> bool {
        rules::no_collision(&self.ctx, t)
            && rules::drivable_compliant(&self.ctx, t)
            && rules::direction_compliant(&self.ctx, t, self.cfg)
            && rules::light_compliant(&self.ctx, t)
    }

    /// All ten subscores with EP measured against `reference` progress.
    pub fn score_with_reference(&self, t: &Trajectory, reference: f64) -> SubscoreVector {
        let s = self.ctx.scenario;
        SubscoreVector {
            nc: flag(rules::no_collision(&self.ctx, t)),
            dac: flag(rules::drivable_compliant(&self.ctx, t)),
            ddc: flag(rules::direction_compliant(&self.ctx, t, self.cfg)),
            tlc: flag(rules::light_compliant(&self.ctx, t)),
            ep: rules::progress_ratio(self.progress(t), reference, self.cfg),
            ttc: flag(rules::time_to_collision_ok(&self.ctx, t, self.cfg)),
            lk: flag(rules::lane_keeping(&self.ctx, t, self.cfg)),
            hc: flag(rules::history_comfort(s, t, self.cfg)),
            ec: flag(rules::extended_comfort(t, self.cfg)),
            c: flag(rules::comfort(t, self.cfg)),
        }
    }

    pub fn score(&self, t: &Trajectory) -> SubscoreVector {
        self.score_with_reference(t, self.expert_progress())
    }
}

/// Scores `t` in scene `s` against the scene's expert.
pub fn score_trajectory(s: &Scenario, t: &Trajectory, cfg: &EvaluatorConfig) -> SubscoreVector {
    Evaluator::new(s, cfg).score(t)
}

/// Subscores, distances and aggregates for every vocabulary entry.
pub fn label_vocabulary(s: &Scenario, vocab: &TrajectoryVocabulary, cfg: &EvaluatorConfig) -> LabelSet {
    let ev = Evaluator::new(s, cfg);
    let reference = ev.expert_progress();
    let subscores: Vec<SubscoreVector> =
        vocab.entries().par_iter().map(|t| ev.score_with_reference(t, reference)).collect();
    let distances: Vec<f64> = vocab
        .entries()
        .iter()
        .map(|t| l2_distance(t, &s.expert).expect("expert shares the vocabulary shape"))
        .collect();
    LabelSet::from_parts(subscores, distances, cfg)
}

/// Indices sorted by descending score; ties keep ascending index order.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Best ground-truth value among the `k` highest-ranked entries.
pub fn oracle_topk(gt: &[f64], ranking: &[f64], k: usize) -> Result<f64, EvalError> {
    if gt.len() != ranking.len() {
        return Err(EvalError::LengthMismatch(gt.len(), ranking.len()));
    }
    if k == 0 || k > gt.len() {
        return Err(EvalError::KOutOfRange { k, n: gt.len() });
    }
    Ok(rank_descending(ranking)[..k].iter().map(|&i| gt[i]).fold(f64::NEG_INFINITY, f64::max))
}

/// Convenience: normalized distance under the configured scale.
pub fn distance_target(d: f64, cfg: &EvaluatorConfig) -> f64 {
    normalized_distance(d, cfg.distance_scale)
}
