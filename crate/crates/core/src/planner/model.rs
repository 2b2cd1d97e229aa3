//! Parameter layout, layers and the coarse and refinement stages.

use rand::Rng;

use super::{PlannerConfig, PlannerError};
use crate::diffcore::{Array2, ParamId, ParamStore, Tape, Var};
use super::loss::topk_filter;
use crate::harness::{combine_rows, InferenceCoefficients, SCORE_COLUMNS};
use crate::scenario::{ObservationTokens, TokenKind, FEATURE_WIDTH};
use crate::vocab::TrajectoryVocabulary;

/// Per-kind input scaling so every feature is roughly unit-sized.
const TOKEN_SCALE: [[f64; FEATURE_WIDTH]; 5] = [
    [0.1, 0.25, 0.1, 1.0 / 30.0, 1.0 / 30.0, 1.0 / 30.0, 1.0 / 30.0, 0.0],
    [1.0 / 30.0, 1.0 / 30.0, 1.0, 1.0, 0.1, 0.2, 0.5, 5.0],
    [1.0 / 30.0, 1.0 / 30.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 30.0, 1.0 / 30.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
    [1.0 / 30.0, 1.0 / 30.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
];
const WAYPOINT_SCALE: f64 = 1.0 / 30.0;
const WAYPOINT_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy)]
enum Init {
    Glorot,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

#[derive(Debug, Clone)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Mha {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Option<(Mha, Norm)>,
    cross: Mha,
    cross_norm: Norm,
    ffn: Mlp,
    ffn_norm: Norm,
}

#[derive(Debug, Clone)]
struct Heads {
    distance: Mlp,
    metrics: Linear,
}

/// Which stage produced a score table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    /// 0-based refinement layer.
    Refine(usize),
}

/// Post-sigmoid scores: one row per entry, columns `[imi, LABEL_TARGETS...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub stage: Stage,
    pub probs: Array2,
}

/// Everything one forward pass produced, as tape handles plus plain values.
pub struct StageOutputs {
    pub tokens: Var,
    pub coarse_features: Var,
    pub coarse_logits: Var,
    pub coarse: ScoreTable,
    /// Combined score per vocabulary entry.
    pub coarse_combined: Vec<f64>,
    /// Filtered entry indices, best first.
    pub topk: Vec<usize>,
    pub refine_logits: Vec<Var>,
    pub refine: Vec<ScoreTable>,
}

impl StageOutputs {
    /// Combined scores driving the final choice: last refinement layer over
    /// `topk`, or the coarse scores when there is no refinement stage.
    pub fn final_scores(&self, coeffs: &InferenceCoefficients) -> Result<(Vec<usize>, Vec<f64>), PlannerError> {
        match self.refine.last() {
            Some(t) => Ok((self.topk.clone(), combine_rows(&t.probs, coeffs).map_err(harness_err)?)),
            None => Ok(((0..self.coarse_combined.len()).collect(), self.coarse_combined.clone())),
        }
    }

    /// Selected vocabulary index: argmax of the final scores, ties to the
    /// earlier candidate.
    pub fn selected(&self, coeffs: &InferenceCoefficients) -> Result<usize, PlannerError> {
        let (idx, scores) = self.final_scores(coeffs)?;
        let best = topk_filter(&scores, 1)?[0];
        Ok(idx[best])
    }
}

pub(crate) fn harness_err(e: crate::harness::HarnessError) -> PlannerError {
    PlannerError::Harness(e.to_string())
}

/// Flattened, scaled waypoints of every vocabulary entry.
pub fn trajectory_inputs(vocab: &TrajectoryVocabulary) -> Array2 {
    let steps = vocab.entry(0).len();
    let mut data = Vec::with_capacity(vocab.len() * steps * WAYPOINT_FEATURES);
    for t in vocab.entries() {
        for w in &t.waypoints {
            let (s, c) = w.heading.sin_cos();
            data.extend_from_slice(&[w.position.x * WAYPOINT_SCALE, w.position.y * WAYPOINT_SCALE, c, s]);
        }
    }
    Array2::new(vocab.len(), steps * WAYPOINT_FEATURES, data).expect("vocabulary entries share one length")
}

/// Handles to every parameter of the selector.
#[derive(Debug, Clone)]
pub struct Planner {
    cfg: PlannerConfig,
    traj_width: usize,
    token_enc: Vec<Mlp>,
    traj_enc: Mlp,
    coarse: Vec<DecoderLayer>,
    refine: Vec<DecoderLayer>,
    heads: Heads,
}

/// Allocates or looks up a named parameter of the given shape.
type ParamGetter<'f> = dyn FnMut(&str, usize, usize, Init) -> Result<ParamId, PlannerError> + 'f;

struct LayoutBuilder<'a> {
    get: &'a mut ParamGetter<'a>,
}

impl LayoutBuilder<'_> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId, PlannerError> {
        (self.get)(name, rows, cols, init)
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<Linear, PlannerError> {
        Ok(Linear { w: self.param(&format!("{name}.w"), i, o, Init::Glorot)?, b: self.param(&format!("{name}.b"), 1, o, Init::Zeros)? })
    }

    fn mlp(&mut self, name: &str, i: usize, h: usize, o: usize) -> Result<Mlp, PlannerError> {
        Ok(Mlp { l1: self.linear(&format!("{name}.l1"), i, h)?, l2: self.linear(&format!("{name}.l2"), h, o)? })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm, PlannerError> {
        Ok(Norm { g: self.param(&format!("{name}.g"), 1, d, Init::Ones)?, b: self.param(&format!("{name}.b"), 1, d, Init::Zeros)? })
    }

    fn mha(&mut self, name: &str, d: usize) -> Result<Mha, PlannerError> {
        Ok(Mha {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn decoder(&mut self, name: &str, d: usize, ffn: usize, self_attn: bool) -> Result<DecoderLayer, PlannerError> {
        let self_attn = if self_attn {
            Some((self.mha(&format!("{name}.self"), d)?, self.norm(&format!("{name}.self_norm"), d)?))
        } else {
            None
        };
        Ok(DecoderLayer {
            self_attn,
            cross: self.mha(&format!("{name}.cross"), d)?,
            cross_norm: self.norm(&format!("{name}.cross_norm"), d)?,
            ffn: self.mlp(&format!("{name}.ffn"), d, ffn, d)?,
            ffn_norm: self.norm(&format!("{name}.ffn_norm"), d)?,
        })
    }
}

fn kind_name(kind: TokenKind) -> &'static str {
    match kind {
        TokenKind::Ego => "ego",
        TokenKind::Agent => "agent",
        TokenKind::LanePoint => "lane",
        TokenKind::Light => "light",
        TokenKind::BoundaryPoint => "boundary",
    }
}

impl Planner {
    fn layout(
        cfg: &PlannerConfig,
        get: &mut ParamGetter<'_>,
    ) -> Result<Self, PlannerError> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let ffn = d * cfg.ffn_mult;
        let traj_width = cfg.vocab.steps() * WAYPOINT_FEATURES;
        let mut b = LayoutBuilder { get };
        let token_enc = TokenKind::ALL
            .iter()
            .map(|&k| b.mlp(&format!("enc.{}", kind_name(k)), FEATURE_WIDTH, d, d))
            .collect::<Result<Vec<_>, _>>()?;
        let traj_enc = b.mlp("traj", traj_width, d, d)?;
        let coarse = (0..cfg.trans_dec_layers)
            .map(|l| b.decoder(&format!("coarse.{l}"), d, ffn, cfg.coarse_self_attention))
            .collect::<Result<Vec<_>, _>>()?;
        let refine_layers = if cfg.refine_enabled() { cfg.refine_dec_layers } else { 0 };
        let refine = (0..refine_layers)
            .map(|l| b.decoder(&format!("refine.{l}"), d, ffn, cfg.refine_self_attention))
            .collect::<Result<Vec<_>, _>>()?;
        let heads = Heads { distance: b.mlp("head.distance", d, d, 1)?, metrics: b.linear("head.metrics", d, SCORE_COLUMNS - 1)? };
        Ok(Self { cfg: cfg.clone(), traj_width, token_enc, traj_enc, coarse, refine, heads })
    }

    /// Fresh parameters drawn from `rng`.
    pub fn init<R: Rng + ?Sized>(cfg: &PlannerConfig, rng: &mut R) -> Result<(Self, ParamStore), PlannerError> {
        let mut store = ParamStore::new();
        let planner = {
            let mut get = |name: &str, rows: usize, cols: usize, init: Init| -> Result<ParamId, PlannerError> {
                Ok(match init {
                    Init::Glorot => store.add_glorot(name, rows, cols, rng)?,
                    Init::Zeros => store.add(name, Array2::zeros(rows, cols))?,
                    Init::Ones => store.add(name, Array2::filled(rows, cols, 1.0))?,
                })
            };
            Self::layout(cfg, &mut get)?
        };
        Ok((planner, store))
    }

    /// Rebinds the layout to parameters loaded from disk.
    pub fn bind(cfg: &PlannerConfig, store: &ParamStore) -> Result<Self, PlannerError> {
        let mut get = |name: &str, rows: usize, cols: usize, _: Init| -> Result<ParamId, PlannerError> {
            let id = store
                .id(name)
                .ok_or_else(|| PlannerError::MalformedCheckpoint(format!("missing parameter {name}")))?;
            if store.value(id).shape() != (rows, cols) {
                return Err(PlannerError::MalformedCheckpoint(format!("parameter {name} has the wrong shape")));
            }
            Ok(id)
        };
        let planner = Self::layout(cfg, &mut get)?;
        if store.len() != planner.param_count() {
            return Err(PlannerError::MalformedCheckpoint("unexpected extra parameters".into()));
        }
        Ok(planner)
    }

    fn param_count(&self) -> usize {
        let mlp = 4;
        let mha = 8;
        let layer = |l: &DecoderLayer| l.self_attn.as_ref().map_or(0, |_| mha + 2) + mha + 2 + mlp + 2;
        self.token_enc.len() * mlp
            + mlp
            + self.coarse.iter().map(layer).sum::<usize>()
            + self.refine.iter().map(layer).sum::<usize>()
            + mlp
            + 2
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn coefficients(&self) -> InferenceCoefficients {
        InferenceCoefficients::for_version(self.cfg.selection_version)
    }

    /// One `hidden_dim` row per token, in token order.
    pub fn encode_observation(&self, g: &mut Graph, obs: &ObservationTokens) -> Result<Var, PlannerError> {
        if obs.tokens.is_empty() {
            return Err(PlannerError::InvalidConfig("observation has no tokens".into()));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < obs.tokens.len() {
            let kind = obs.tokens[start].kind;
            let end = start + obs.tokens[start..].iter().take_while(|t| t.kind == kind).count();
            let scale = &TOKEN_SCALE[kind.index()];
            let rows: Vec<f64> = obs.tokens[start..end]
                .iter()
                .flat_map(|t| t.features.iter().zip(scale).map(|(f, s)| f * s))
                .collect();
            let x = g.tape.leaf(Array2::new(end - start, FEATURE_WIDTH, rows)?);
            parts.push(g.mlp(&self.token_enc[kind.index()], x)?);
            start = end;
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(g.tape.concat_rows(&parts)?)
    }

    /// Entry features from [`trajectory_inputs`].
    pub fn encode_trajectories(&self, g: &mut Graph, inputs: &Array2) -> Result<Var, PlannerError> {
        if inputs.cols() != self.traj_width {
            return Err(PlannerError::InvalidConfig(format!(
                "trajectory inputs have {} columns, expected {}",
                inputs.cols(),
                self.traj_width
            )));
        }
        let x = g.tape.leaf(inputs.clone());
        g.mlp(&self.traj_enc, x)
    }

    fn heads(&self, g: &mut Graph, x: Var) -> Result<Var, PlannerError> {
        let dist = g.mlp(&self.heads.distance, x)?;
        let metrics = g.linear(&self.heads.metrics, x)?;
        Ok(g.tape.concat_cols(&[dist, metrics])?)
    }

    /// Decoded entry features and their logits.
    pub fn coarse_stage(&self, g: &mut Graph, tokens: Var, entries: Var) -> Result<(Var, Var), PlannerError> {
        let mut x = entries;
        for layer in &self.coarse {
            x = g.decoder(layer, x, tokens, self.cfg.attention_heads)?;
        }
        let logits = self.heads(g, x)?;
        Ok((x, logits))
    }

    /// Logits after every refinement layer.
    pub fn refine_stage(&self, g: &mut Graph, tokens: Var, filtered: Var) -> Result<Vec<Var>, PlannerError> {
        let mut x = filtered;
        let mut out = Vec::with_capacity(self.refine.len());
        for layer in &self.refine {
            x = g.decoder(layer, x, tokens, self.cfg.attention_heads)?;
            out.push(self.heads(g, x)?);
        }
        Ok(out)
    }

    /// Coarse scoring, top-k filtering and refinement. `topk_override`
    /// replaces the filter output, e.g. to re-score a student's candidates.
    pub fn forward(
        &self,
        g: &mut Graph,
        obs: &ObservationTokens,
        entries: Var,
        topk_override: Option<&[usize]>,
    ) -> Result<StageOutputs, PlannerError> {
        let coeffs = self.coefficients();
        let tokens = self.encode_observation(g, obs)?;
        let (features, logits) = self.coarse_stage(g, tokens, entries)?;
        let probs = sigmoid_values(g.tape.value(logits));
        if !probs.is_finite() {
            return Err(crate::diffcore::DiffError::NonFiniteDetected("coarse scores".into()).into());
        }
        let combined = combine_rows(&probs, &coeffs).map_err(harness_err)?;
        let topk = match topk_override {
            Some(idx) => idx.to_vec(),
            None if self.refine.is_empty() => Vec::new(),
            None => topk_filter(&combined, self.cfg.effective_top_k().min(combined.len()))?,
        };
        let (refine_logits, refine) = if self.refine.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let filtered = g.tape.gather_rows(features, &topk)?;
            let logits = self.refine_stage(g, tokens, filtered)?;
            let tables = logits
                .iter()
                .enumerate()
                .map(|(l, &v)| ScoreTable { stage: Stage::Refine(l), probs: sigmoid_values(g.tape.value(v)) })
                .collect::<Vec<_>>();
            if tables.iter().any(|t| !t.probs.is_finite()) {
                return Err(crate::diffcore::DiffError::NonFiniteDetected("refinement scores".into()).into());
            }
            (logits, tables)
        };
        Ok(StageOutputs {
            tokens,
            coarse_features: features,
            coarse_logits: logits,
            coarse: ScoreTable { stage: Stage::Coarse, probs },
            coarse_combined: combined,
            topk,
            refine_logits,
            refine,
        })
    }
}

fn sigmoid_values(a: &Array2) -> Array2 {
    a.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// A tape plus the parameters it reads; each parameter enters the tape once.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.bound[id.index()] = Some(v);
        v
    }

    fn linear(&mut self, l: &Linear, x: Var) -> Result<Var, PlannerError> {
        let (w, b) = (self.p(l.w), self.p(l.b));
        let h = self.tape.matmul(x, w)?;
        Ok(self.tape.add_bias(h, b)?)
    }

    fn mlp(&mut self, m: &Mlp, x: Var) -> Result<Var, PlannerError> {
        let h = self.linear(&m.l1, x)?;
        let h = self.tape.relu(h);
        self.linear(&m.l2, h)
    }

    fn residual_norm(&mut self, n: &Norm, x: Var, delta: Var) -> Result<Var, PlannerError> {
        let s = self.tape.add(x, delta)?;
        let (gm, bt) = (self.p(n.g), self.p(n.b));
        Ok(self.tape.layer_norm(s, gm, bt)?)
    }

    fn mha(&mut self, m: &Mha, queries: Var, memory: Var, heads: usize) -> Result<Var, PlannerError> {
        let q = self.linear(&m.q, queries)?;
        let k = self.linear(&m.k, memory)?;
        let v = self.linear(&m.v, memory)?;
        let a = self.tape.attention(q, k, v, heads)?;
        self.linear(&m.o, a)
    }

    fn decoder(&mut self, layer: &DecoderLayer, x: Var, memory: Var, heads: usize) -> Result<Var, PlannerError> {
        let mut x = x;
        if let Some((sa, norm)) = &layer.self_attn {
            let a = self.mha(sa, x, x, heads)?;
            x = self.residual_norm(norm, x, a)?;
        }
        let c = self.mha(&layer.cross, x, memory, heads)?;
        x = self.residual_norm(&layer.cross_norm, x, c)?;
        let f = self.mlp(&layer.ffn, x)?;
        self.residual_norm(&layer.ffn_norm, x, f)
    }
}
