//! Imitation and score losses, soft targets and the top-k filter.

use crate::diffcore::{Array2, DiffError, Reduction, Tape, Var};
use crate::evaluator::{rank_descending, EvalError, LabelSet};
use crate::geom::{Pose2, Trajectory};
use crate::harness::SCORE_COLUMNS;
use crate::vocab::{l2_distance, TrajectoryVocabulary};

/// Per-waypoint cap on the expert shift toward the teacher's choice, meters.
pub const MAX_EXPERT_SHIFT: f64 = 1.0;

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn topk_filter(scores: &[f64], k: usize) -> Result<Vec<usize>, EvalError> {
    if k == 0 || k > scores.len() {
        return Err(EvalError::KOutOfRange { k, n: scores.len() });
    }
    let mut ranked = rank_descending(scores);
    ranked.truncate(k);
    Ok(ranked)
}

/// `softmax(-d^2 / temperature)` over the given distances.
pub fn imitation_targets(distances: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = distances.iter().map(|d| -d * d / temperature).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Hard targets `[normalized distance, LABEL_TARGETS...]` for `idx` (all entries if `None`).
pub fn target_table(labels: &LabelSet, idx: Option<&[usize]>) -> Array2 {
    let all: Vec<usize>;
    let idx = match idx {
        Some(i) => i,
        None => {
            all = (0..labels.len()).collect();
            &all
        }
    };
    let mut data = Vec::with_capacity(idx.len() * SCORE_COLUMNS);
    for &i in idx {
        data.extend_from_slice(&labels.target_row(i));
    }
    Array2::new(idx.len(), SCORE_COLUMNS, data).expect("target rows have fixed width")
}

/// Loss terms of one stage; `total = imi + bce`.
#[derive(Debug, Clone, Copy)]
pub struct StageLoss {
    pub imi: Var,
    pub bce: Var,
    pub total: Var,
}

fn column(values: &[f64]) -> Array2 {
    Array2::new(values.len(), 1, values.to_vec()).expect("column shape")
}

/// Softmax imitation loss on the first logit column plus summed BCE on all columns.
pub fn stage_loss(tape: &mut Tape, logits: Var, targets: &Array2, imitation: &[f64]) -> Result<StageLoss, DiffError> {
    let rows = tape.shape(logits).0;
    if imitation.len() != rows {
        return Err(DiffError::ShapeMismatch(format!("{} imitation targets for {rows} rows", imitation.len())));
    }
    let imi_logits = tape.slice_cols(logits, 0, 1)?;
    let imi = tape.cross_entropy(imi_logits, &column(imitation))?;
    let probs = tape.sigmoid(logits);
    let bce = tape.bce(probs, targets, Reduction::Sum)?;
    let total = tape.add(imi, bce)?;
    Ok(StageLoss { imi, bce, total })
}

/// Stage loss over the whole vocabulary.
pub fn loss_coarse(tape: &mut Tape, logits: Var, labels: &LabelSet, temperature: f64) -> Result<StageLoss, DiffError> {
    let targets = target_table(labels, None);
    stage_loss(tape, logits, &targets, &imitation_targets(&labels.distances, temperature))
}

fn sum_losses(tape: &mut Tape, parts: &[StageLoss]) -> Result<StageLoss, DiffError> {
    if parts.is_empty() {
        let z = tape.leaf(Array2::zeros(1, 1));
        return Ok(StageLoss { imi: z, bce: z, total: z });
    }
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = StageLoss {
            imi: tape.add(acc.imi, p.imi)?,
            bce: tape.add(acc.bce, p.bce)?,
            total: tape.add(acc.total, p.total)?,
        };
    }
    Ok(acc)
}

/// Stage loss of every refinement layer over the filtered entries, summed.
pub fn loss_refine(
    tape: &mut Tape,
    layer_logits: &[Var],
    labels: &LabelSet,
    topk: &[usize],
    temperature: f64,
) -> Result<StageLoss, DiffError> {
    let targets = target_table(labels, Some(topk));
    let dist: Vec<f64> = topk.iter().map(|&i| labels.distances[i]).collect();
    let imitation = imitation_targets(&dist, temperature);
    let parts = layer_logits
        .iter()
        .map(|&l| stage_loss(tape, l, &targets, &imitation))
        .collect::<Result<Vec<_>, _>>()?;
    sum_losses(tape, &parts)
}

/// `y + clip(teacher - y, -delta, delta)`, elementwise.
pub fn make_soft_labels(teacher: &Array2, hard: &Array2, delta: f64) -> Result<Array2, DiffError> {
    if teacher.shape() != hard.shape() {
        return Err(DiffError::ShapeMismatch("teacher scores vs labels".into()));
    }
    Ok(hard.zip_map(teacher, |y, s| y + (s - y).clamp(-delta, delta)))
}

/// Moves each expert waypoint toward the matching waypoint of `toward` by at
/// most `max_shift` meters. Headings are kept.
pub fn shift_expert(expert: &Trajectory, toward: &Trajectory, max_shift: f64) -> Trajectory {
    let waypoints = expert
        .waypoints
        .iter()
        .zip(&toward.waypoints)
        .map(|(e, t)| {
            let off = t.position - e.position;
            let len = off.norm();
            if len <= max_shift {
                Pose2::new(t.position, e.heading)
            } else {
                Pose2::new(e.position + off * (max_shift / len), e.heading)
            }
        })
        .collect();
    Trajectory { start: expert.start, dt: expert.dt, waypoints }
}

/// Soft targets for one scene derived from teacher predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    /// `N x SCORE_COLUMNS`
    pub coarse: Array2,
    /// `k x SCORE_COLUMNS` over the filtered entries, when refinement runs.
    pub refine: Option<Array2>,
    pub shifted_expert: Trajectory,
    /// Distance of every entry to the shifted expert.
    pub distances: Vec<f64>,
    /// Imitation distribution toward the shifted expert over all entries.
    pub imitation: Vec<f64>,
    pub temperature: f64,
}

impl SoftLabelSet {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        teacher_coarse: &Array2,
        teacher_refine: Option<&Array2>,
        labels: &LabelSet,
        topk: &[usize],
        expert: &Trajectory,
        teacher_choice: &Trajectory,
        vocab: &TrajectoryVocabulary,
        delta: f64,
        temperature: f64,
    ) -> Result<Self, DiffError> {
        let coarse = make_soft_labels(teacher_coarse, &target_table(labels, None), delta)?;
        let refine = match teacher_refine {
            Some(t) => Some(make_soft_labels(t, &target_table(labels, Some(topk)), delta)?),
            None => None,
        };
        let shifted_expert = shift_expert(expert, teacher_choice, MAX_EXPERT_SHIFT);
        let dist = vocab
            .entries()
            .iter()
            .map(|e| l2_distance(e, &shifted_expert))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DiffError::ShapeMismatch(e.to_string()))?;
        let imitation = imitation_targets(&dist, temperature);
        Ok(Self { coarse, refine, shifted_expert, distances: dist, imitation, temperature })
    }

    /// Imitation distribution over the `topk` entries only.
    pub fn imitation_over(&self, topk: &[usize]) -> Vec<f64> {
        let sub: Vec<f64> = topk.iter().map(|&i| self.distances[i]).collect();
        imitation_targets(&sub, self.temperature)
    }
}
