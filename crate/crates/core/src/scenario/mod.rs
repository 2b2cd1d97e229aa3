//! Procedural driving scenes in the ego frame.
//!
//! A scene holds everything the evaluator needs to score a candidate
//! trajectory: constant-velocity agents, a drivable area made of convex
//! cells, lane centerlines, a route, traffic lights and the expert plan.

mod dataset;
mod gen;
mod observe;

pub use dataset::{load_dataset, save_dataset, DatasetHeader, DatasetRecord, SplitTag, FORMAT_VERSION};
pub use gen::{generate_scenario, select_expert, GenConfig};
pub use observe::{boundary_points, observe, observe_with, ObservationTokens, Token, TokenCaps, TokenKind, FEATURE_WIDTH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{rotate_point, rotate_pose, rotate_trajectory, ConvexPolygon, Point2, Pose2, Trajectory};
use crate::vocab::arc_pose;

/// Default observation half-angles for the 1-, 3- and 5-camera analogues.
pub const FOV_ONE_CAMERA: f64 = std::f64::consts::FRAC_PI_3;
pub const FOV_THREE_CAMERA: f64 = 3.0 * std::f64::consts::FRAC_PI_4;
pub const FOV_FIVE_CAMERA: f64 = std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario generation failed for seed {seed}: {reason}")]
    GenerationFailed { seed: u64, reason: String },
    #[error("no vocabulary entry scores above zero")]
    NoSafeTrajectory,
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format version {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("malformed dataset line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub pose: Pose2,
    /// m/s along the heading
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    /// Signed path curvature, 1/m; zero for straight-line motion.
    #[serde(default)]
    pub curvature: f64,
}

impl Agent {
    /// Pose after `t` seconds at constant speed along its lane.
    pub fn pose_at(&self, t: f64) -> Pose2 {
        let local = arc_pose(self.curvature, self.speed * t);
        Pose2::new(
            self.pose.position + local.position.rotated(self.pose.heading),
            self.pose.heading + local.heading,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightState {
    Red,
    Green,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub stop_line: [Point2; 2],
    pub state: LightState,
}

impl TrafficLight {
    pub fn midpoint(&self) -> Point2 {
        (self.stop_line[0] + self.stop_line[1]) * 0.5
    }
}

/// Lane centerline; travel direction follows vertex order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub points: Vec<Point2>,
}

impl Lane {
    pub fn segments(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadKind {
    Straight,
    Curved,
    TJunction,
}

/// Past ego state, `time` seconds relative to now (negative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryState {
    pub time: f64,
    pub pose: Pose2,
    pub speed: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub kind: RoadKind,
    /// Always the identity pose.
    pub ego_pose: Pose2,
    pub ego_speed: f64,
    pub ego_accel: f64,
    pub ego_length: f64,
    pub ego_width: f64,
    /// Oldest first.
    pub history: Vec<HistoryState>,
    pub agents: Vec<Agent>,
    pub drivable: Vec<ConvexPolygon>,
    pub lanes: Vec<Lane>,
    pub route: Vec<Point2>,
    pub lights: Vec<TrafficLight>,
    pub expert: Trajectory,
}

/// Rotates every piece of world geometry by `-theta` about the origin and
/// the expert by `-theta` about its start, keeping the ego at the identity.
pub fn rotate_scenario(s: &Scenario, theta: f64) -> Scenario {
    if theta == 0.0 {
        return s.clone();
    }
    let a = -theta;
    let o = Point2::ORIGIN;
    let rp = |p: Point2| rotate_point(p, o, a);
    Scenario {
        seed: s.seed,
        kind: s.kind,
        ego_pose: s.ego_pose,
        ego_speed: s.ego_speed,
        ego_accel: s.ego_accel,
        ego_length: s.ego_length,
        ego_width: s.ego_width,
        history: s
            .history
            .iter()
            .map(|h| HistoryState { pose: rotate_pose(h.pose, o, a), ..*h })
            .collect(),
        agents: s
            .agents
            .iter()
            .map(|ag| Agent { pose: rotate_pose(ag.pose, o, a), ..ag.clone() })
            .collect(),
        drivable: s.drivable.iter().map(|c| c.rotated(o, a)).collect(),
        lanes: s.lanes.iter().map(|l| Lane { points: l.points.iter().map(|&p| rp(p)).collect() }).collect(),
        route: s.route.iter().map(|&p| rp(p)).collect(),
        lights: s
            .lights
            .iter()
            .map(|l| TrafficLight { stop_line: [rp(l.stop_line[0]), rp(l.stop_line[1])], state: l.state })
            .collect(),
        expert: rotate_trajectory(&s.expert, a),
    }
}

/// Reflects the scene across the ego's x-axis: left and right swap.
pub fn mirror_scenario(s: &Scenario) -> Scenario {
    let mp = |p: Point2| Point2::new(p.x, -p.y);
    let mpose = |p: Pose2| Pose2::new(mp(p.position), -p.heading);
    Scenario {
        history: s.history.iter().map(|h| HistoryState { pose: mpose(h.pose), ..*h }).collect(),
        agents: s
            .agents
            .iter()
            .map(|ag| Agent { pose: mpose(ag.pose), curvature: -ag.curvature, ..ag.clone() })
            .collect(),
        drivable: s.drivable.iter().map(ConvexPolygon::mirrored).collect(),
        lanes: s.lanes.iter().map(|l| Lane { points: l.points.iter().map(|&p| mp(p)).collect() }).collect(),
        route: s.route.iter().map(|&p| mp(p)).collect(),
        lights: s
            .lights
            .iter()
            .map(|l| TrafficLight { stop_line: [mp(l.stop_line[1]), mp(l.stop_line[0])], state: l.state })
            .collect(),
        expert: s.expert.mirrored(),
        ..s.clone()
    }
}

/// Uniform draw from `[-max_angle, max_angle]`.
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> f64 {
    rng.random_range(-max_angle..=max_angle)
}
