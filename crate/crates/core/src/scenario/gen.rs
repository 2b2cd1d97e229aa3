//! Seeded procedural scene generation.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Agent, HistoryState, Lane, LightState, RoadKind, Scenario, ScenarioError, TrafficLight};
use crate::evaluator::{aggregate, rules, Evaluator, EvaluatorConfig};
use crate::geom::{footprint, polygons_intersect, ConvexPolygon, Point2, Pose2};
use crate::vocab::{arc_pose, TrajectoryVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub lane_width: f64,
    /// Road length ahead of the ego, meters.
    pub road_ahead: f64,
    /// Road length behind the ego, meters.
    pub road_behind: f64,
    /// Upper bound on agents per scene; the count is drawn uniformly below it.
    pub max_agents: usize,
    /// Probability of a T-junction scene (the ego must turn).
    pub turn_fraction: f64,
    pub curved_fraction: f64,
    pub light_probability: f64,
    pub red_probability: f64,
    pub parked_probability: f64,
    pub max_agent_speed: f64,
    /// Agents are placed within this distance of the ego.
    pub agent_range: f64,
    pub ego_length: f64,
    pub ego_width: f64,
    /// Rejection-sampling budget per agent.
    pub placement_attempts: usize,
    /// Whole-scene resampling budget when no candidate is acceptable.
    pub scene_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            lane_width: 3.5,
            road_ahead: 120.0,
            road_behind: 40.0,
            max_agents: 6,
            turn_fraction: 0.08,
            curved_fraction: 0.3,
            light_probability: 0.3,
            red_probability: 0.6,
            parked_probability: 0.2,
            max_agent_speed: 12.0,
            agent_range: 70.0,
            ego_length: 4.6,
            ego_width: 2.0,
            placement_attempts: 50,
            scene_attempts: 20,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(m.to_string()));
        if self.lane_width.partial_cmp(&self.ego_width) != Some(std::cmp::Ordering::Greater) {
            return bad("lane width must exceed vehicle width");
        }
        if !(self.ego_length > 0.0 && self.ego_width > 0.0) {
            return bad("ego extents must be positive");
        }
        for (name, p) in [
            ("turn_fraction", self.turn_fraction),
            ("curved_fraction", self.curved_fraction),
            ("light_probability", self.light_probability),
            ("red_probability", self.red_probability),
            ("parked_probability", self.parked_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.turn_fraction + self.curved_fraction > 1.0 {
            return bad("turn_fraction + curved_fraction exceeds 1");
        }
        if !(self.road_ahead >= 80.0 && self.road_behind >= 20.0) {
            return bad("road must extend at least 80 m ahead and 20 m behind");
        }
        if !(0.0..=20.0).contains(&self.max_agent_speed) {
            return bad("max_agent_speed must lie in [0, 20]");
        }
        if self.placement_attempts == 0 || self.scene_attempts == 0 {
            return bad("attempt budgets must be positive");
        }
        Ok(())
    }
}

/// Compose a local pose onto a base pose.
fn compose(base: Pose2, local: Pose2) -> Pose2 {
    Pose2::new(base.position + local.position.rotated(base.heading), base.heading + local.heading)
}

/// Constant-curvature lane path. `reversed` flips the travel direction.
#[derive(Debug, Clone, Copy)]
struct LanePath {
    origin: Pose2,
    curvature: f64,
    s_min: f64,
    s_max: f64,
    reversed: bool,
}

impl LanePath {
    fn length(&self) -> f64 {
        self.s_max - self.s_min
    }

    fn forward_pose(&self, s: f64) -> Pose2 {
        compose(self.origin, arc_pose(self.curvature, s))
    }

    /// Pose after `u` meters of travel along the lane.
    fn pose(&self, u: f64) -> Pose2 {
        if self.reversed {
            let p = self.forward_pose(self.s_max - u);
            Pose2::new(p.position, p.heading + PI)
        } else {
            self.forward_pose(self.s_min + u)
        }
    }

    fn travel_curvature(&self) -> f64 {
        if self.reversed {
            -self.curvature
        } else {
            self.curvature
        }
    }

    fn polyline(&self, step: f64) -> Vec<Point2> {
        let n = ((self.length() / step).ceil() as usize).max(1);
        (0..=n).map(|i| self.pose(self.length() * i as f64 / n as f64).position).collect()
    }

    fn lane(&self, step: f64) -> Lane {
        Lane { points: self.polyline(step) }
    }
}

/// Quads covering a band of half-widths `[right, left]` around a path.
fn band_cells(path: &LanePath, right: f64, left: f64, step: f64) -> Vec<ConvexPolygon> {
    let n = ((path.length() / step).ceil() as usize).max(1);
    let sections: Vec<(Point2, Point2)> = (0..=n)
        .map(|i| {
            let p = path.forward_pose(path.s_min + path.length() * i as f64 / n as f64);
            let normal = p.direction().perp();
            (p.position - normal * right, p.position + normal * left)
        })
        .collect();
    sections
        .windows(2)
        .map(|w| {
            ConvexPolygon::new(vec![w[0].0, w[1].0, w[1].1, w[0].1]).expect("road band cells are convex")
        })
        .collect()
}

struct Layout {
    kind: RoadKind,
    paths: Vec<LanePath>,
    ego_path: usize,
    /// Lanes where agents may be placed.
    agent_paths: Vec<usize>,
    drivable: Vec<ConvexPolygon>,
    route: Vec<Point2>,
    /// Signed lateral offsets spanned by a stop line across the ego-direction lanes.
    light_band: Option<(f64, f64)>,
    /// Junction centre; agents there must not approach it.
    junction: Option<Point2>,
}

const LANE_STEP: f64 = 3.0;
const JUNCTION_CLEARANCE: f64 = 12.0;

fn curvature_levels_in(vocab: &TrajectoryVocabulary, lo: f64, hi: f64) -> Vec<f64> {
    vocab.spec().curvatures().into_iter().filter(|k| k.abs() >= lo && k.abs() <= hi).collect()
}

fn road_layout(rng: &mut ChaCha8Rng, cfg: &GenConfig, vocab: &TrajectoryVocabulary, curved: bool) -> Layout {
    let w = cfg.lane_width;
    let same_dir = rng.random_range(1..=2usize);
    let ego_lane = rng.random_range(0..same_dir);
    let levels = curvature_levels_in(vocab, 1e-12, 0.015);
    // coarse grids may have no gentle level; those fall back to a straight road
    let curvature = if curved && !levels.is_empty() { levels[rng.random_range(0..levels.len())] } else { 0.0 };
    let offset_of = |l: usize| (l as f64 - ego_lane as f64) * w;
    let lane_path = |offset: f64, reversed: bool| LanePath {
        origin: Pose2::new(Point2::new(0.0, offset), 0.0),
        curvature: curvature / (1.0 - curvature * offset),
        s_min: -cfg.road_behind,
        s_max: cfg.road_ahead,
        reversed,
    };
    let mut paths: Vec<LanePath> = (0..same_dir).map(|l| lane_path(offset_of(l), false)).collect();
    paths.push(lane_path(offset_of(same_dir), true));
    let right = ego_lane as f64 * w + 0.5 * w;
    let left = offset_of(same_dir) + 0.5 * w;
    let ego = paths[ego_lane];
    let drivable = if curved {
        band_cells(&ego, right, left, 2.0)
    } else {
        vec![ConvexPolygon::rect(-cfg.road_behind, -right, cfg.road_ahead, left).expect("road rect")]
    };
    let route_path = LanePath { s_min: 0.0, ..ego };
    Layout {
        kind: if curved { RoadKind::Curved } else { RoadKind::Straight },
        agent_paths: (0..paths.len()).collect(),
        paths,
        ego_path: ego_lane,
        drivable,
        route: route_path.polyline(LANE_STEP),
        light_band: Some((-right, left - w)),
        junction: None,
    }
}

fn junction_layout(rng: &mut ChaCha8Rng, cfg: &GenConfig, vocab: &TrajectoryVocabulary) -> Layout {
    let w = cfg.lane_width;
    let levels = curvature_levels_in(vocab, 1.0 / 16.0, 1.0 / 9.0);
    let positive: Vec<f64> = levels.iter().copied().filter(|k| *k > 0.0).collect();
    let kappa = positive[rng.random_range(0..positive.len())];
    let turn_left = rng.random_bool(0.5);
    // crossing road occupies x in [x_j, x_j + 2w]; its lanes sit at x_j + 0.5w (southbound)
    // and x_j + 1.5w (northbound)
    let (r_left, r_right) = if turn_left {
        let r = 1.0 / kappa;
        (r, r - w)
    } else {
        let r = 1.0 / kappa;
        (r + w, r)
    };
    let x_j = r_left - 1.5 * w;
    let half_span = cfg.road_ahead * 0.5;
    let line = |x: f64, y: f64, heading: f64, s_min: f64, s_max: f64, reversed: bool| LanePath {
        origin: Pose2::new(Point2::new(x, y), heading),
        curvature: 0.0,
        s_min,
        s_max,
        reversed,
    };
    let ego = line(0.0, 0.0, 0.0, -cfg.road_behind, x_j, false);
    let opposite = line(0.0, w, 0.0, -cfg.road_behind, x_j, true);
    let north = line(x_j + 1.5 * w, 0.0, FRAC_PI_2, -half_span, half_span, false);
    let south = line(x_j + 0.5 * w, 0.0, FRAC_PI_2, -half_span, half_span, true);
    let arc = |k: f64| LanePath {
        origin: Pose2::IDENTITY,
        curvature: k,
        s_min: 0.0,
        s_max: FRAC_PI_2 / k.abs(),
        reversed: false,
    };
    let left_arc = arc(1.0 / r_left);
    let right_arc = arc(-1.0 / r_right);
    let paths = vec![ego, opposite, north, south, left_arc, right_arc];

    let mut drivable = vec![
        ConvexPolygon::rect(-cfg.road_behind, -0.5 * w, x_j, 1.5 * w).expect("main road"),
        ConvexPolygon::rect(x_j, -half_span, x_j + 2.0 * w, half_span).expect("crossing road"),
    ];
    let margin = 0.5 * w + 0.6;
    drivable.extend(band_cells(&left_arc, margin, margin, 1.0));
    drivable.extend(band_cells(&right_arc, margin, margin, 1.0));

    let (turn, exit, exit_x, dir) = if turn_left {
        (left_arc, r_left, x_j + 1.5 * w, 1.0)
    } else {
        (right_arc, r_right, x_j + 0.5 * w, -1.0)
    };
    let mut route = turn.polyline(LANE_STEP);
    let tail_start = exit;
    let mut y = tail_start + LANE_STEP;
    while y <= half_span {
        route.push(Point2::new(exit_x, dir * y));
        y += LANE_STEP;
    }
    Layout {
        kind: RoadKind::TJunction,
        paths,
        ego_path: 0,
        agent_paths: vec![1, 2, 3],
        drivable,
        route,
        light_band: None,
        junction: Some(Point2::new(x_j + w, 0.0)),
    }
}

fn place_agents(
    rng: &mut ChaCha8Rng,
    cfg: &GenConfig,
    layout: &Layout,
    seed: u64,
) -> Result<Vec<Agent>, ScenarioError> {
    let count = rng.random_range(0..=cfg.max_agents);
    let ego_box = footprint(Pose2::IDENTITY, cfg.ego_length + 2.0, cfg.ego_width + 1.0);
    let mut agents: Vec<Agent> = Vec::with_capacity(count);
    let mut boxes: Vec<ConvexPolygon> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..cfg.placement_attempts {
            let path_idx = layout.agent_paths[rng.random_range(0..layout.agent_paths.len())];
            let path = &layout.paths[path_idx];
            let length = rng.random_range(4.0..5.2);
            let width = rng.random_range(1.8..2.1);
            let speed = if rng.random_bool(cfg.parked_probability) {
                0.0
            } else {
                rng.random_range(0.0..=cfg.max_agent_speed)
            };
            let u = if path_idx == layout.ego_path {
                // ego lane: only ahead of the ego, leaving a gap
                let ego_u = -path.s_min;
                let lo = ego_u + 0.5 * (cfg.ego_length + length) + 8.0;
                let hi = (ego_u + cfg.agent_range).min(path.length() - 5.0);
                if lo >= hi {
                    continue;
                }
                rng.random_range(lo..hi)
            } else {
                rng.random_range(5.0..path.length() - 5.0)
            };
            let pose = path.pose(u);
            if pose.position.norm() > cfg.agent_range {
                continue;
            }
            if let Some(c) = layout.junction {
                let away = (pose.position - c).dot(pose.direction()) >= 0.0;
                if pose.position.distance(c) < JUNCTION_CLEARANCE || !(away || speed == 0.0) {
                    continue;
                }
            }
            let b = footprint(pose, length + 1.0, width + 0.5);
            if polygons_intersect(&b, &ego_box) || boxes.iter().any(|o| polygons_intersect(&b, o)) {
                continue;
            }
            agents.push(Agent { pose, speed, length, width, curvature: path.travel_curvature() });
            boxes.push(b);
            placed = true;
            break;
        }
        if !placed {
            return Err(ScenarioError::GenerationFailed {
                seed,
                reason: format!("could not place agent {} of {count}", agents.len() + 1),
            });
        }
    }
    Ok(agents)
}

fn build_scene(
    rng: &mut ChaCha8Rng,
    seed: u64,
    cfg: &GenConfig,
    vocab: &TrajectoryVocabulary,
) -> Result<Scenario, ScenarioError> {
    let roll: f64 = rng.random();
    let layout = if roll < cfg.turn_fraction {
        junction_layout(rng, cfg, vocab)
    } else {
        road_layout(rng, cfg, vocab, roll < cfg.turn_fraction + cfg.curved_fraction)
    };

    // ego speed near one of the vocabulary start speeds
    let starts = vocab.spec().start_speeds();
    let cap = if layout.kind == RoadKind::TJunction { 7.5 } else { f64::INFINITY };
    let allowed: Vec<f64> = starts.iter().copied().filter(|&v| v <= cap).collect();
    let base = allowed[rng.random_range(0..allowed.len())];
    let ego_speed = (base + rng.random_range(-0.3..=0.3)).max(0.0);
    let ego_accel = if ego_speed > 1.0 { rng.random_range(-1.0..=1.0) } else { 0.0 };
    let ego_path = layout.paths[layout.ego_path];
    let history = [-1.0, -0.5]
        .iter()
        .map(|&t: &f64| {
            let u = ego_speed * t + 0.5 * ego_accel * t * t;
            HistoryState {
                time: t,
                pose: ego_path.forward_pose(u),
                speed: ego_speed + ego_accel * t,
                accel: ego_accel,
            }
        })
        .collect();

    let mut lights = Vec::new();
    if let Some((lo, hi)) = layout.light_band {
        if rng.random_bool(cfg.light_probability) {
            let stop = ego_speed * ego_speed / (2.0 * vocab.spec().ramp_accel) + 0.5 * cfg.ego_length + 1.0;
            let d = stop + rng.random_range(2.0..20.0);
            let p = ego_path.forward_pose(d);
            let n = p.direction().perp();
            let state = if rng.random_bool(cfg.red_probability) { LightState::Red } else { LightState::Green };
            lights.push(TrafficLight {
                stop_line: [p.position + n * lo, p.position + n * hi],
                state,
            });
        }
    }

    let agents = place_agents(rng, cfg, &layout, seed)?;
    Ok(Scenario {
        seed,
        kind: layout.kind,
        ego_pose: Pose2::IDENTITY,
        ego_speed,
        ego_accel,
        ego_length: cfg.ego_length,
        ego_width: cfg.ego_width,
        history,
        agents,
        drivable: layout.drivable,
        lanes: layout.paths.iter().map(|p| p.lane(LANE_STEP)).collect(),
        route: layout.route,
        lights,
        expert: vocab.entry(0).clone(),
    })
}

/// Index of the best vocabulary entry under the extended aggregate.
///
/// Progress is measured against the farthest entry that passes every
/// penalty. Ties prefer higher progress, then the lower index.
pub fn select_expert(
    s: &Scenario,
    vocab: &TrajectoryVocabulary,
    eval: &EvaluatorConfig,
) -> Result<usize, ScenarioError> {
    let ev = Evaluator::new(s, eval);
    let scored: Vec<_> = vocab
        .entries()
        .par_iter()
        .map(|t| (ev.score_with_reference(t, 1.0), ev.progress(t)))
        .collect();
    let reference = scored
        .iter()
        .filter(|(sub, _)| sub.nc * sub.dac * sub.ddc * sub.tlc > 0.0)
        .map(|&(_, p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    if reference == f64::NEG_INFINITY {
        return Err(ScenarioError::NoSafeTrajectory);
    }
    let mut best: Option<(f64, f64, usize)> = None;
    for (i, (sub, p)) in scored.iter().enumerate() {
        let mut sub = *sub;
        sub.ep = rules::progress_ratio(*p, reference, eval);
        let score = aggregate(&sub, &eval.v2);
        let better = match best {
            None => true,
            Some((bs, bep, _)) => score > bs || (score == bs && sub.ep > bep),
        };
        if better {
            best = Some((score, sub.ep, i));
        }
    }
    match best {
        Some((score, _, i)) if score > 0.0 => Ok(i),
        _ => Err(ScenarioError::NoSafeTrajectory),
    }
}

/// Deterministic scene for `seed`, with the expert chosen from `vocab`.
pub fn generate_scenario(
    seed: u64,
    cfg: &GenConfig,
    vocab: &TrajectoryVocabulary,
    eval: &EvaluatorConfig,
) -> Result<Scenario, ScenarioError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.scene_attempts {
        let mut scene = build_scene(&mut rng, seed, cfg, vocab)?;
        match select_expert(&scene, vocab, eval) {
            Ok(i) => {
                scene.expert = vocab.entry(i).clone();
                return Ok(scene);
            }
            Err(ScenarioError::NoSafeTrajectory) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(ScenarioError::GenerationFailed {
        seed,
        reason: format!("no acceptable scene in {} attempts", cfg.scene_attempts),
    })
}
