//! Entity tokens seen through an angular field-of-view mask.

use serde::{Deserialize, Serialize};

use super::{LightState, Scenario};
use crate::geom::Point2;

pub const FEATURE_WIDTH: usize = 8;
const LANE_SAMPLE_STEP: f64 = 3.0;
const BOUNDARY_SAMPLE_STEP: f64 = 3.0;
const FOV_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Ego,
    Agent,
    LanePoint,
    Light,
    BoundaryPoint,
}

impl TokenKind {
    pub const ALL: [TokenKind; 5] =
        [TokenKind::Ego, TokenKind::Agent, TokenKind::LanePoint, TokenKind::Light, TokenKind::BoundaryPoint];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    /// Ego-frame position of the entity the token describes.
    pub source: Point2,
    pub features: [f64; FEATURE_WIDTH],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTokens {
    pub tokens: Vec<Token>,
    pub fov_halfangle: f64,
}

impl ObservationTokens {
    pub fn count(&self, kind: TokenKind) -> usize {
        self.tokens.iter().filter(|t| t.kind == kind).count()
    }
}

/// Per-kind caps and sensing range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenCaps {
    pub agents: usize,
    pub lane_points: usize,
    pub lights: usize,
    pub boundary_points: usize,
    pub range: f64,
}

impl Default for TokenCaps {
    fn default() -> Self {
        Self { agents: 8, lane_points: 32, lights: 2, boundary_points: 24, range: 60.0 }
    }
}

/// Point `distance` meters along a polyline (clamped to its end).
fn along_polyline(points: &[Point2], distance: f64) -> Point2 {
    let mut left = distance;
    for w in points.windows(2) {
        let len = w[0].distance(w[1]);
        if left <= len && len > 0.0 {
            return w[0] + (w[1] - w[0]) * (left / len);
        }
        left -= len;
    }
    *points.last().unwrap_or(&Point2::ORIGIN)
}

fn sample_polyline(points: &[Point2], step: f64) -> Vec<(Point2, Point2)> {
    let mut out = Vec::new();
    let mut carry = 0.0;
    for w in points.windows(2) {
        let d = w[1] - w[0];
        let len = d.norm();
        if len == 0.0 {
            continue;
        }
        let dir = d * (1.0 / len);
        let mut s = carry;
        while s < len {
            out.push((w[0] + dir * s, dir));
            s += step;
        }
        carry = s - len;
    }
    out
}

/// Points on exterior edges of the drivable union.
pub fn boundary_points(s: &Scenario) -> Vec<Point2> {
    let mut out = Vec::new();
    for (ci, cell) in s.drivable.iter().enumerate() {
        let v = cell.vertices();
        for i in 0..v.len() {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            let m = ((a.distance(b) / BOUNDARY_SAMPLE_STEP).ceil() as usize).max(1);
            for k in 0..m {
                let p = a + (b - a) * ((k as f64 + 0.5) / m as f64);
                let interior = s.drivable.iter().enumerate().any(|(cj, other)| cj != ci && other.contains(p));
                if !interior {
                    out.push(p);
                }
            }
        }
    }
    out
}

fn visible(p: Point2, fov: f64, range: f64) -> bool {
    p.norm() <= range && (p.norm() == 0.0 || p.bearing().abs() <= fov + FOV_SLACK)
}

fn pad(values: &[f64]) -> [f64; FEATURE_WIDTH] {
    let mut f = [0.0; FEATURE_WIDTH];
    f[..values.len()].copy_from_slice(values);
    f
}

fn push_nearest(out: &mut Vec<Token>, mut group: Vec<Token>, cap: usize) {
    group.sort_by(|a, b| {
        a.source
            .norm()
            .total_cmp(&b.source.norm())
            .then(a.source.bearing().total_cmp(&b.source.bearing()))
    });
    group.truncate(cap);
    out.extend(group);
}

pub fn observe(s: &Scenario, fov_halfangle: f64) -> ObservationTokens {
    observe_with(s, fov_halfangle, &TokenCaps::default())
}

/// Tokens ordered by kind, then distance, then bearing.
pub fn observe_with(s: &Scenario, fov_halfangle: f64, caps: &TokenCaps) -> ObservationTokens {
    let fov = fov_halfangle;
    let mut tokens = Vec::new();

    let prev_speed = s.history.last().map_or(s.ego_speed, |h| h.speed);
    let near = along_polyline(&s.route, 10.0);
    let far = along_polyline(&s.route, 30.0);
    tokens.push(Token {
        kind: TokenKind::Ego,
        source: Point2::ORIGIN,
        features: pad(&[s.ego_speed, s.ego_accel, prev_speed, near.x, near.y, far.x, far.y]),
    });

    let agents = s
        .agents
        .iter()
        .filter(|a| visible(a.pose.position, fov, caps.range))
        .map(|a| {
            let p = a.pose.position;
            let (sin, cos) = a.pose.heading.sin_cos();
            Token {
                kind: TokenKind::Agent,
                source: p,
                features: pad(&[p.x, p.y, cos, sin, a.speed, a.length, a.width, a.curvature]),
            }
        })
        .collect();
    push_nearest(&mut tokens, agents, caps.agents);

    let lane_points = s
        .lanes
        .iter()
        .flat_map(|l| sample_polyline(&l.points, LANE_SAMPLE_STEP))
        .filter(|(p, _)| visible(*p, fov, caps.range))
        .map(|(p, d)| Token { kind: TokenKind::LanePoint, source: p, features: pad(&[p.x, p.y, d.x, d.y]) })
        .collect();
    push_nearest(&mut tokens, lane_points, caps.lane_points);

    let lights = s
        .lights
        .iter()
        .filter(|l| visible(l.midpoint(), fov, caps.range))
        .map(|l| {
            let m = l.midpoint();
            let d = l.stop_line[1] - l.stop_line[0];
            let d = d * (1.0 / d.norm());
            let red = if l.state == LightState::Red { 1.0 } else { 0.0 };
            Token { kind: TokenKind::Light, source: m, features: pad(&[m.x, m.y, d.x, d.y, red]) }
        })
        .collect();
    push_nearest(&mut tokens, lights, caps.lights);

    let boundary = boundary_points(s)
        .into_iter()
        .filter(|&p| visible(p, fov, caps.range))
        .map(|p| Token { kind: TokenKind::BoundaryPoint, source: p, features: pad(&[p.x, p.y]) })
        .collect();
    push_nearest(&mut tokens, boundary, caps.boundary_points);

    ObservationTokens { tokens, fov_halfangle }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::EvaluatorConfig;
    use crate::geom::{rotate_point, Pose2};
    use crate::scenario::{generate_scenario, rotate_scenario, Agent, GenConfig};
    use crate::vocab::{GridSpec, TrajectoryVocabulary};
    use std::f64::consts::PI;

    fn scene(seed: u64) -> Scenario {
        let vocab = TrajectoryVocabulary::build(&GridSpec::compact()).unwrap();
        generate_scenario(seed, &GenConfig::default(), &vocab, &EvaluatorConfig::default()).unwrap()
    }

    #[test]
    fn agent_behind_is_masked() {
        let mut s = scene(4);
        s.agents = vec![Agent {
            pose: Pose2::new(Point2::new(-10.0, 0.0), 0.0),
            speed: 3.0,
            length: 4.5,
            width: 2.0,
            curvature: 0.0,
        }];
        assert_eq!(observe(&s, PI / 2.0).count(TokenKind::Agent), 0);
        assert_eq!(observe(&s, PI).count(TokenKind::Agent), 1);
    }

    #[test]
    fn tokens_respect_fov_and_order() {
        for seed in 0..5 {
            let s = scene(seed);
            for fov in [PI / 3.0, 3.0 * PI / 4.0, PI] {
                let obs = observe(&s, fov);
                assert_eq!(obs.tokens[0].kind, TokenKind::Ego);
                assert_eq!(obs.count(TokenKind::Ego), 1);
                for w in obs.tokens.windows(2) {
                    assert!(w[0].kind <= w[1].kind);
                    if w[0].kind == w[1].kind {
                        assert!(w[0].source.norm() <= w[1].source.norm());
                    }
                }
                for t in obs.tokens.iter().skip(1) {
                    assert!(t.source.bearing().abs() <= fov + 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_fov_sees_every_agent() {
        let caps = TokenCaps { agents: 100, range: 1e9, ..TokenCaps::default() };
        for seed in 0..5 {
            let s = scene(seed);
            assert_eq!(observe_with(&s, PI, &caps).count(TokenKind::Agent), s.agents.len());
        }
    }

    #[test]
    fn wider_fov_never_sees_fewer() {
        for seed in 0..5 {
            let s = scene(seed);
            let n: Vec<usize> = [PI / 3.0, 3.0 * PI / 4.0, PI].iter().map(|&f| observe(&s, f).tokens.len()).collect();
            assert!(n[0] <= n[1] && n[1] <= n[2]);
        }
    }

    #[test]
    fn observation_commutes_with_rotation() {
        let caps = TokenCaps { agents: 100, lane_points: 10_000, lights: 10, boundary_points: 10_000, range: 1e9 };
        let theta = 0.4;
        for seed in 0..4 {
            let s = scene(seed);
            let a = observe_with(&s, PI, &caps);
            let b = observe_with(&rotate_scenario(&s, theta), PI, &caps);
            assert_eq!(a.tokens.len(), b.tokens.len());
            for kind in [TokenKind::Agent, TokenKind::Light] {
                for t in a.tokens.iter().filter(|t| t.kind == kind) {
                    let want = rotate_point(t.source, Point2::ORIGIN, -theta);
                    let hit = b.tokens.iter().filter(|u| u.kind == kind).any(|u| {
                        u.source.distance(want) < 1e-9
                            && (u.features[2] - (t.features[2] * (-theta).cos() - t.features[3] * (-theta).sin())).abs() < 1e-9
                    });
                    assert!(hit, "seed {seed}: {kind:?} token not found after rotation");
                }
            }
            let ego_a = &a.tokens[0].features;
            let ego_b = &b.tokens[0].features;
            let r = rotate_point(Point2::new(ego_a[3], ego_a[4]), Point2::ORIGIN, -theta);
            assert!((r.x - ego_b[3]).abs() < 1e-9 && (r.y - ego_b[4]).abs() < 1e-9);
        }
    }

    #[test]
    fn observe_is_deterministic() {
        let s = scene(11);
        assert_eq!(observe(&s, 1.0), observe(&s, 1.0));
    }
}
