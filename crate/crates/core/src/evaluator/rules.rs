//! Individual rule checks. Every threshold comparison carries a small slack
//! so that results do not flip under rigid motions of the whole scene.

use crate::geom::{
    closest_on_segment, footprint, normalize_angle, point_in_region, polygons_intersect, segments_intersect,
    ConvexPolygon, Point2, Pose2, Trajectory,
};
use crate::scenario::{LightState, Scenario};

use super::EvaluatorConfig;

const SLACK: f64 = 1e-9;

/// Per-scene data shared by every candidate.
pub struct SceneContext<'a> {
    pub scenario: &'a Scenario,
    lane_segments: Vec<(Point2, Point2)>,
    route_cumulative: Vec<f64>,
    agent_radius: Vec<f64>,
    ego_radius: f64,
}

impl<'a> SceneContext<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        let lane_segments = scenario.lanes.iter().flat_map(|l| l.segments()).collect();
        let mut route_cumulative = Vec::with_capacity(scenario.route.len());
        let mut acc = 0.0;
        for (i, p) in scenario.route.iter().enumerate() {
            if i > 0 {
                acc += p.distance(scenario.route[i - 1]);
            }
            route_cumulative.push(acc);
        }
        let radius = |l: f64, w: f64| 0.5 * (l * l + w * w).sqrt();
        Self {
            scenario,
            lane_segments,
            route_cumulative,
            agent_radius: scenario.agents.iter().map(|a| radius(a.length, a.width)).collect(),
            ego_radius: radius(scenario.ego_length, scenario.ego_width),
        }
    }

    fn ego_footprint(&self, pose: Pose2) -> ConvexPolygon {
        footprint(pose, self.scenario.ego_length, self.scenario.ego_width)
    }

    /// True iff the ego at `pose` overlaps any agent at absolute time `t`.
    fn collides(&self, pose: Pose2, t: f64) -> bool {
        let mut ego: Option<ConvexPolygon> = None;
        for (agent, &r) in self.scenario.agents.iter().zip(&self.agent_radius) {
            let ap = agent.pose_at(t);
            let reach = r + self.ego_radius + SLACK;
            if ap.position.distance(pose.position) > reach {
                continue;
            }
            let e = ego.get_or_insert_with(|| self.ego_footprint(pose));
            if polygons_intersect(e, &footprint(ap, agent.length, agent.width)) {
                return true;
            }
        }
        false
    }

    /// Nearest lane segment to `p`: (distance, unit direction). Ties go to the
    /// first segment in lane order.
    fn nearest_lane(&self, p: Point2) -> Option<(f64, Point2)> {
        let mut best: Option<(f64, Point2)> = None;
        for &(a, b) in &self.lane_segments {
            let d = closest_on_segment(p, a, b).0.distance(p);
            if best.is_none_or(|(bd, _)| d < bd) {
                let dir = b - a;
                best = Some((d, dir * (1.0 / dir.norm())));
            }
        }
        best
    }

    /// Arc length along the route of the projection of `p`.
    pub fn route_progress(&self, p: Point2) -> f64 {
        let route = &self.scenario.route;
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..route.len() {
            let (a, b) = (route[i - 1], route[i]);
            let (q, t) = closest_on_segment(p, a, b);
            let d = q.distance(p);
            if d < best.0 {
                best = (d, self.route_cumulative[i - 1] + t * a.distance(b));
            }
        }
        best.1
    }
}

fn sample_time(t: &Trajectory, i: usize) -> f64 {
    t.dt * i as f64
}

pub fn no_collision(ctx: &SceneContext, t: &Trajectory) -> bool {
    t.poses_with_start().enumerate().all(|(i, pose)| !ctx.collides(pose, sample_time(t, i)))
}

pub fn drivable_compliant(ctx: &SceneContext, t: &Trajectory) -> bool {
    let cells = &ctx.scenario.drivable;
    t.waypoints.iter().all(|&pose| {
        ctx.ego_footprint(pose).vertices().iter().all(|&v| point_in_region(v, cells))
    })
}

pub fn direction_compliant(ctx: &SceneContext, t: &Trajectory, cfg: &EvaluatorConfig) -> bool {
    let limit = cfg.ddc_max_deviation_deg.to_radians() + SLACK;
    t.waypoints.iter().all(|pose| match ctx.nearest_lane(pose.position) {
        Some((_, dir)) => normalize_angle(pose.heading - dir.bearing()).abs() <= limit,
        None => true,
    })
}

pub fn light_compliant(ctx: &SceneContext, t: &Trajectory) -> bool {
    let half = 0.5 * ctx.scenario.ego_length;
    let bumper: Vec<Point2> = t.poses_with_start().map(|p| p.position + p.direction() * half).collect();
    ctx.scenario.lights.iter().filter(|l| l.state == LightState::Red).all(|light| {
        bumper
            .windows(2)
            .all(|w| !segments_intersect(w[0], w[1], light.stop_line[0], light.stop_line[1]))
    })
}

/// Route progress of the final waypoint relative to the start.
pub fn progress(ctx: &SceneContext, t: &Trajectory) -> f64 {
    ctx.route_progress(t.last().position) - ctx.route_progress(t.start.position)
}

pub fn progress_ratio(progress: f64, reference: f64, cfg: &EvaluatorConfig) -> f64 {
    if reference < cfg.ep_min_progress {
        1.0
    } else {
        (progress / reference).clamp(0.0, 1.0)
    }
}

/// Constant-velocity look-ahead from every sample.
pub fn time_to_collision_ok(ctx: &SceneContext, t: &Trajectory, cfg: &EvaluatorConfig) -> bool {
    let poses: Vec<Pose2> = t.poses_with_start().collect();
    let n = poses.len();
    let steps = (cfg.ttc_horizon_s / cfg.ttc_step_s).round() as usize;
    (0..n).all(|i| {
        let j = if i + 1 < n { i } else { i - 1 };
        let speed = poses[j + 1].position.distance(poses[j].position) / t.dt;
        let vel = poses[i].direction() * speed;
        let t0 = sample_time(t, i);
        (1..=steps).all(|k| {
            let tau = cfg.ttc_step_s * k as f64;
            let pose = Pose2 { position: poses[i].position + vel * tau, heading: poses[i].heading };
            !ctx.collides(pose, t0 + tau)
        })
    })
}

/// Finite-difference comfort over timed poses.
pub fn comfortable(samples: &[(f64, Pose2)], cfg: &EvaluatorConfig) -> bool {
    let n = samples.len();
    if n < 2 {
        return true;
    }
    let mut speeds = Vec::with_capacity(n - 1);
    for w in samples.windows(2) {
        let (t0, p0) = w[0];
        let (t1, p1) = w[1];
        let h = t1 - t0;
        let v = p1.position.distance(p0.position) / h;
        let yaw = normalize_angle(p1.heading - p0.heading) / h;
        if yaw.abs() > cfg.max_yaw_rate + SLACK || (v * yaw).abs() > cfg.max_lat_accel + SLACK {
            return false;
        }
        speeds.push(v);
    }
    let mut accels = Vec::with_capacity(n.saturating_sub(2));
    for i in 0..speeds.len().saturating_sub(1) {
        let h = 0.5 * (samples[i + 2].0 - samples[i].0);
        let a = (speeds[i + 1] - speeds[i]) / h;
        if a.abs() > cfg.max_lon_accel + SLACK {
            return false;
        }
        accels.push(a);
    }
    for i in 0..accels.len().saturating_sub(1) {
        let h = 0.5 * (samples[i + 3].0 - samples[i + 1].0);
        if ((accels[i + 1] - accels[i]) / h).abs() > cfg.max_jerk + SLACK {
            return false;
        }
    }
    true
}

fn trajectory_samples(t: &Trajectory) -> Vec<(f64, Pose2)> {
    t.poses_with_start().enumerate().map(|(i, p)| (sample_time(t, i), p)).collect()
}

pub fn comfort(t: &Trajectory, cfg: &EvaluatorConfig) -> bool {
    comfortable(&trajectory_samples(t), cfg)
}

pub fn history_comfort(s: &Scenario, t: &Trajectory, cfg: &EvaluatorConfig) -> bool {
    let mut samples: Vec<(f64, Pose2)> = s.history.iter().map(|h| (h.time, h.pose)).collect();
    samples.extend(trajectory_samples(t));
    comfortable(&samples, cfg)
}

pub fn lane_keeping(ctx: &SceneContext, t: &Trajectory, cfg: &EvaluatorConfig) -> bool {
    t.waypoints.iter().all(|pose| match ctx.nearest_lane(pose.position) {
        Some((d, _)) => d <= cfg.lk_max_offset + SLACK,
        None => false,
    })
}

/// Mean acceleration over consecutive windows must not jump.
pub fn extended_comfort(t: &Trajectory, cfg: &EvaluatorConfig) -> bool {
    let stride = ((cfg.ec_window_s / t.dt).round() as usize).max(1);
    let window = stride as f64 * t.dt;
    let poses: Vec<Point2> = t.poses_with_start().step_by(stride).map(|p| p.position).collect();
    let vel: Vec<Point2> = poses.windows(2).map(|w| (w[1] - w[0]) * (1.0 / window)).collect();
    let acc: Vec<Point2> = vel.windows(2).map(|w| (w[1] - w[0]) * (1.0 / window)).collect();
    acc.windows(2).all(|w| (w[1] - w[0]).norm() <= cfg.ec_max_accel_change + SLACK)
}
