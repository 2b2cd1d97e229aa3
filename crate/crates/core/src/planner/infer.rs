//! Selection with a trained checkpoint.

use super::model::{harness_err, Graph, Planner};
use super::{trajectory_inputs, Checkpoint, PlannerError};
use crate::diffcore::{Array2, ParamStore};
use crate::harness::combine_rows;
use crate::scenario::{observe_with, Scenario};
use crate::vocab::TrajectoryVocabulary;

/// Selected entry plus both stage rankings.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub selected: usize,
    /// Combined coarse score of every entry.
    pub coarse_scores: Vec<f64>,
    /// Filtered entries, best coarse score first.
    pub topk: Vec<usize>,
    /// Combined last-layer score of each filtered entry (coarse scores when
    /// there is no refinement stage).
    pub final_scores: Vec<f64>,
    /// Every entry ordered best first: filtered entries by final score, then
    /// the rest by coarse score.
    pub ranking: Vec<usize>,
}

impl Inference {
    /// Monotone scores that reproduce [`Inference::ranking`], for top-K studies.
    pub fn ranking_scores(&self) -> Vec<f64> {
        let n = self.ranking.len();
        let mut s = vec![0.0; n];
        for (pos, &i) in self.ranking.iter().enumerate() {
            s[i] = (n - pos) as f64;
        }
        s
    }
}

/// A loaded model with its vocabulary and cached entry features.
pub struct Selector {
    planner: Planner,
    params: ParamStore,
    vocab: TrajectoryVocabulary,
    entry_features: Array2,
}

impl Selector {
    pub fn new(planner: Planner, params: ParamStore) -> Result<Self, PlannerError> {
        let vocab = TrajectoryVocabulary::build(&planner.config().vocab)?;
        let inputs = trajectory_inputs(&vocab);
        let entry_features = {
            let mut g = Graph::new(&params);
            let f = planner.encode_trajectories(&mut g, &inputs)?;
            g.tape.value(f).clone()
        };
        Ok(Self { planner, params, vocab, entry_features })
    }

    /// Uses the EMA teacher when `use_teacher`, else the student.
    pub fn from_checkpoint(ck: &Checkpoint, use_teacher: bool) -> Result<Self, PlannerError> {
        let params = if use_teacher { ck.teacher.clone() } else { ck.student.clone() };
        let planner = Planner::bind(&ck.config, &params)?;
        Self::new(planner, params)
    }

    pub fn vocab(&self) -> &TrajectoryVocabulary {
        &self.vocab
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    /// Cached entry features; identical across calls.
    pub fn entry_features(&self) -> &Array2 {
        &self.entry_features
    }

    pub fn select(&self, scene: &Scenario) -> Result<Inference, PlannerError> {
        let cfg = self.planner.config();
        let obs = observe_with(scene, cfg.fov_halfangle, &cfg.token_caps);
        let mut g = Graph::new(&self.params);
        let f = g.tape.leaf(self.entry_features.clone());
        let out = self.planner.forward(&mut g, &obs, f, None)?;
        let coeffs = self.planner.coefficients();
        let selected = out.selected(&coeffs)?;
        let (topk, final_scores) = match out.refine.last() {
            Some(t) => (out.topk.clone(), combine_rows(&t.probs, &coeffs).map_err(harness_err)?),
            None => {
                let k = cfg.effective_top_k().min(out.coarse_combined.len());
                let topk = super::topk_filter(&out.coarse_combined, k)?;
                let scores = topk.iter().map(|&i| out.coarse_combined[i]).collect();
                (topk, scores)
            }
        };
        let mut ranking: Vec<usize> = super::topk_filter(&final_scores, final_scores.len())?
            .into_iter()
            .map(|p| topk[p])
            .collect();
        let mut in_topk = vec![false; out.coarse_combined.len()];
        for &i in &topk {
            in_topk[i] = true;
        }
        let rest = super::topk_filter(&out.coarse_combined, out.coarse_combined.len())?;
        ranking.extend(rest.into_iter().filter(|&i| !in_topk[i]));
        Ok(Inference { selected, coarse_scores: out.coarse_combined, topk, final_scores, ranking })
    }
}

/// One-off selection; builds the selector each call.
pub fn infer(scene: &Scenario, ck: &Checkpoint, use_teacher: bool) -> Result<Inference, PlannerError> {
    Selector::from_checkpoint(ck, use_teacher)?.select(scene)
}
