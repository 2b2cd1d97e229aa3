//! Student/teacher training: original, rotated and soft-target losses.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss_coarse, loss_refine, stage_loss, SoftLabelSet, StageLoss};
use super::model::{Graph, Planner, StageOutputs};
use super::{Checkpoint, EmaSchedule, PlannerConfig, PlannerError};
use crate::diffcore::{adam_step, ema_update, Array2, AdamState, ParamStore, Tape, Var};
use crate::evaluator::{label_vocabulary, EvaluatorConfig, LabelSet};
use crate::scenario::{observe_with, rotate_scenario, sample_rotation, Scenario};
use crate::vocab::TrajectoryVocabulary;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub l_ori: f64,
    pub l_aug: f64,
    pub l_soft: f64,
    pub ema_m: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    pub eval: EvaluatorConfig,
    /// Written into the checkpoint to tie it to its full configuration.
    pub config_hash: String,
    /// Line-delimited JSON log, one record per optimizer step.
    pub log_path: Option<PathBuf>,
    /// Overwritten at the end of every epoch.
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, eval: EvaluatorConfig::default(), config_hash: String::new(), log_path: None, checkpoint_path: None }
    }
}

pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
}

/// Loss values of one training item.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ItemLosses {
    pub l_ori: f64,
    pub l_aug: f64,
    pub l_soft: f64,
}

fn branch_loss(
    tape: &mut Tape,
    out: &StageOutputs,
    labels: &LabelSet,
    temperature: f64,
) -> Result<Var, PlannerError> {
    let coarse = loss_coarse(tape, out.coarse_logits, labels, temperature)?;
    if out.refine_logits.is_empty() {
        return Ok(coarse.total);
    }
    let refine = loss_refine(tape, &out.refine_logits, labels, &out.topk, temperature)?;
    Ok(tape.add(coarse.total, refine.total)?)
}

/// Soft-target loss of the student outputs against teacher predictions.
#[allow(clippy::too_many_arguments)]
fn soft_loss(
    planner: &Planner,
    teacher: &ParamStore,
    traj_inputs: &Array2,
    scene: &Scenario,
    out: &StageOutputs,
    labels: &LabelSet,
    vocab: &TrajectoryVocabulary,
    g: &mut Graph,
) -> Result<Var, PlannerError> {
    let cfg = planner.config();
    let obs = observe_with(scene, cfg.fov_halfangle, &cfg.token_caps);
    let mut tg = Graph::new(teacher);
    let tf = planner.encode_trajectories(&mut tg, traj_inputs)?;
    let tout = planner.forward(&mut tg, &obs, tf, None)?;
    let choice = tout.selected(&planner.coefficients())?;
    let teacher_refine = if out.refine_logits.is_empty() {
        None
    } else {
        let filtered = tg.tape.gather_rows(tout.coarse_features, &out.topk)?;
        let layers = planner.refine_stage(&mut tg, tout.tokens, filtered)?;
        let last = *layers.last().expect("refinement has layers");
        Some(tg.tape.value(last).map(|v| 1.0 / (1.0 + (-v).exp())))
    };
    let soft = SoftLabelSet::build(
        &tout.coarse.probs,
        teacher_refine.as_ref(),
        labels,
        &out.topk,
        &scene.expert,
        vocab.entry(choice),
        vocab,
        cfg.delta,
        cfg.imi_temperature,
    )?;
    let mut parts: Vec<StageLoss> = vec![stage_loss(&mut g.tape, out.coarse_logits, &soft.coarse, &soft.imitation)?];
    if let Some(refine_targets) = &soft.refine {
        let imitation = soft.imitation_over(&out.topk);
        for &l in &out.refine_logits {
            parts.push(stage_loss(&mut g.tape, l, refine_targets, &imitation)?);
        }
    }
    let mut total = parts[0].total;
    for p in &parts[1..] {
        total = g.tape.add(total, p.total)?;
    }
    Ok(total)
}

/// Gradients and losses of one scene. `theta` is the augmentation angle;
/// `teacher` enables the soft-target term.
#[allow(clippy::too_many_arguments)]
pub fn train_item(
    planner: &Planner,
    student: &ParamStore,
    teacher: Option<&ParamStore>,
    traj_inputs: &Array2,
    scene: &Scenario,
    labels: &LabelSet,
    theta: Option<f64>,
    vocab: &TrajectoryVocabulary,
    eval: &EvaluatorConfig,
) -> Result<(Vec<Array2>, ItemLosses), PlannerError> {
    let cfg = planner.config();
    let mut g = Graph::new(student);
    let f = planner.encode_trajectories(&mut g, traj_inputs)?;
    let obs = observe_with(scene, cfg.fov_halfangle, &cfg.token_caps);
    let out = planner.forward(&mut g, &obs, f, None)?;
    let ori = branch_loss(&mut g.tape, &out, labels, cfg.imi_temperature)?;
    let mut total = ori;
    let mut losses = ItemLosses { l_ori: g.tape.value(ori).get(0, 0), ..ItemLosses::default() };

    if let Some(theta) = theta {
        let rotated = rotate_scenario(scene, theta);
        let rotated_labels = label_vocabulary(&rotated, vocab, eval);
        let obs_r = observe_with(&rotated, cfg.fov_halfangle, &cfg.token_caps);
        let out_r = planner.forward(&mut g, &obs_r, f, None)?;
        let aug = branch_loss(&mut g.tape, &out_r, &rotated_labels, cfg.imi_temperature)?;
        losses.l_aug = g.tape.value(aug).get(0, 0);
        total = g.tape.add(total, aug)?;
    }

    if let Some(teacher) = teacher {
        let soft = soft_loss(planner, teacher, traj_inputs, scene, &out, labels, vocab, &mut g)?;
        losses.l_soft = g.tape.value(soft).get(0, 0);
        total = g.tape.add(total, soft)?;
    }

    let grads = g.tape.backward(total)?.param_grads(student)?;
    Ok((grads, losses))
}

/// Trains a fresh selector. `labels` holds one set per scene; when it is
/// `None` every set is computed on the fly.
pub fn train(
    scenes: &[Scenario],
    labels: Option<&[LabelSet]>,
    vocab: &TrajectoryVocabulary,
    cfg: &PlannerConfig,
    opts: &TrainOptions,
) -> Result<TrainReport, PlannerError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(PlannerError::EmptyDataset);
    }
    if vocab.spec() != &cfg.vocab {
        return Err(PlannerError::InvalidConfig("vocabulary does not match the configured grid".into()));
    }
    if let Some(l) = labels {
        if l.len() != scenes.len() || l.iter().any(|s| s.len() != vocab.len()) {
            return Err(PlannerError::InvalidConfig("label sets do not match scenes and vocabulary".into()));
        }
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (planner, mut student) = Planner::init(cfg, &mut rng)?;
    let mut teacher = student.clone();
    let mut adam = AdamState::new(&student, cfg.lr);
    let schedule = EmaSchedule::new(cfg.ema_mode);
    let traj_inputs = super::trajectory_inputs(vocab);

    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.map_or(cfg.epochs * steps_per_epoch, |m| m.min(cfg.epochs * steps_per_epoch));
    let mut log_writer = match &opts.log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    let mut epochs_done = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total_steps {
                break 'epochs;
            }
            // angles are drawn even when augmentation is off, keeping runs paired
            let thetas: Vec<f64> = chunk.iter().map(|_| sample_rotation(&mut rng, cfg.rotation_max)).collect();
            let teacher_ref = cfg.self_distillation.then_some(&teacher);
            let results: Vec<Result<(Vec<Array2>, ItemLosses), PlannerError>> = chunk
                .par_iter()
                .zip(thetas.par_iter())
                .map(|(&i, &theta)| {
                    let owned;
                    let item_labels = match labels {
                        Some(l) => &l[i],
                        None => {
                            owned = label_vocabulary(&scenes[i], vocab, &opts.eval);
                            &owned
                        }
                    };
                    train_item(
                        &planner,
                        &student,
                        teacher_ref,
                        &traj_inputs,
                        &scenes[i],
                        item_labels,
                        cfg.augmentation.then_some(theta),
                        vocab,
                        &opts.eval,
                    )
                })
                .collect();

            student.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            let mut sums = ItemLosses::default();
            for r in results {
                let (grads, l) = r?;
                student.accumulate(&grads, scale)?;
                sums.l_ori += l.l_ori * scale;
                sums.l_aug += l.l_aug * scale;
                sums.l_soft += l.l_soft * scale;
            }
            adam_step(&mut student, &mut adam)?;
            // momentum is taken at the start of the step, so a scratch warmup covers whole epochs
            let progress = epoch as f64 + b as f64 / steps_per_epoch as f64;
            let m = schedule.momentum(progress);
            ema_update(&mut teacher, &student, m)?;
            step += 1;

            let record = TrainLogRecord {
                step,
                l_ori: sums.l_ori,
                l_aug: sums.l_aug,
                l_soft: sums.l_soft,
                ema_m: m,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            if let Some(w) = log_writer.as_mut() {
                serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            log.push(record);
        }
        epochs_done = epoch + 1;
        if let Some(path) = &opts.checkpoint_path {
            let ck = Checkpoint {
                config: cfg.clone(),
                config_hash: opts.config_hash.clone(),
                student: student.clone(),
                teacher: teacher.clone(),
                adam: adam.clone(),
                ema_steps: step as u64,
                epochs_done: epochs_done as u32,
            };
            ck.save(path)?;
        }
    }
    if let Some(w) = log_writer.as_mut() {
        w.flush()?;
    }

    let checkpoint = Checkpoint {
        config: cfg.clone(),
        config_hash: opts.config_hash.clone(),
        student,
        teacher,
        adam,
        ema_steps: step as u64,
        epochs_done: epochs_done as u32,
    };
    if let Some(path) = &opts.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainReport { checkpoint, log })
}
