//! Planar rigid-frame geometry.
//!
//! Ego frame convention: `x` points forward, `y` points left, and positive
//! angles rotate counter-clockwise (towards the left). Regions are closed:
//! a point on a boundary is inside, and polygons that only touch intersect.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used by every closed-region predicate.
pub const GEOM_EPS: f64 = 1e-9;

/// Upper bound on the speed implied by consecutive waypoints.
pub const MAX_WAYPOINT_SPEED: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("trajectory displacement {0:.3} m is too small to define a turning angle")]
    DegenerateTrajectory(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { x: c, y: s }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    /// Bearing of the point seen from the origin, in (-pi, pi].
    pub fn bearing(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Rotation about the origin.
    pub fn rotated(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub position: Point2,
    /// Radians in (-pi, pi].
    pub heading: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        position: Point2::ORIGIN,
        heading: 0.0,
    };

    pub fn new(position: Point2, heading: f64) -> Self {
        Self {
            position,
            heading: normalize_angle(heading),
        }
    }

    pub fn direction(&self) -> Point2 {
        Point2::from_angle(self.heading)
    }
}

/// Timed waypoint sequence `u_1..u_l` sampled every `dt` seconds after the
/// start pose `u_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: Pose2,
    pub dt: f64,
    pub waypoints: Vec<Pose2>,
}

impl Trajectory {
    pub fn new(start: Pose2, dt: f64, waypoints: Vec<Pose2>) -> Result<Self, GeomError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(GeomError::InvalidTrajectory(format!("dt must be positive, got {dt}")));
        }
        if waypoints.len() < 2 {
            return Err(GeomError::InvalidTrajectory(format!(
                "need at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        let max_step = MAX_WAYPOINT_SPEED * dt + GEOM_EPS;
        let mut prev = start.position;
        for (i, w) in waypoints.iter().enumerate() {
            if !w.position.is_finite() || !w.heading.is_finite() {
                return Err(GeomError::InvalidTrajectory(format!("waypoint {i} is not finite")));
            }
            let step = w.position.distance(prev);
            if step > max_step {
                return Err(GeomError::InvalidTrajectory(format!(
                    "waypoint {i} is {step:.3} m from its predecessor (limit {max_step:.3})"
                )));
            }
            prev = w.position;
        }
        Ok(Self { start, dt, waypoints })
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.waypoints.len() as f64
    }

    pub fn last(&self) -> Pose2 {
        *self.waypoints.last().expect("trajectory has waypoints")
    }

    /// Start pose followed by every waypoint.
    pub fn poses_with_start(&self) -> impl Iterator<Item = Pose2> + '_ {
        std::iter::once(self.start).chain(self.waypoints.iter().copied())
    }

    pub fn mirrored(&self) -> Trajectory {
        let mirror = |p: Pose2| Pose2 {
            position: Point2::new(p.position.x, -p.position.y),
            heading: normalize_angle(-p.heading),
        };
        Trajectory {
            start: mirror(self.start),
            dt: self.dt,
            waypoints: self.waypoints.iter().map(|&p| mirror(p)).collect(),
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point2,
    pub max: Point2,
}

impl Aabb {
    pub fn of_points(points: &[Point2]) -> Self {
        let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        Self { min, max }
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.min.x - GEOM_EPS
            && p.x <= self.max.x + GEOM_EPS
            && p.y >= self.min.y - GEOM_EPS
            && p.y <= self.max.y + GEOM_EPS
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        self.min.x <= other.max.x + GEOM_EPS
            && other.min.x <= self.max.x + GEOM_EPS
            && self.min.y <= other.max.y + GEOM_EPS
            && other.min.y <= self.max.y + GEOM_EPS
    }
}

/// Strictly convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
    aabb: Aabb,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Point2>) -> Result<Self, GeomError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeomError::InvalidPolygon(format!("need 3 vertices, got {n}")));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::InvalidPolygon("non-finite vertex".into()));
        }
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if (b - a).cross(c - b) <= 0.0 {
                return Err(GeomError::InvalidPolygon(format!(
                    "vertices {i}..{} are not a strict left turn",
                    i + 2
                )));
            }
        }
        // Left turns everywhere still admit a star polygon winding twice.
        let angle_sum: f64 = (0..n)
            .map(|i| {
                let e0 = vertices[(i + 1) % n] - vertices[i];
                let e1 = vertices[(i + 2) % n] - vertices[(i + 1) % n];
                e0.cross(e1).atan2(e0.dot(e1))
            })
            .sum();
        if (angle_sum - 2.0 * PI).abs() > 1e-6 {
            return Err(GeomError::InvalidPolygon("polygon winds more than once".into()));
        }
        let aabb = Aabb::of_points(&vertices);
        Ok(Self { vertices, aabb })
    }

    /// Rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeomError> {
        Self::new(vec![
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        0.5 * (0..n)
            .map(|i| self.vertices[i].cross(self.vertices[(i + 1) % n]))
            .sum::<f64>()
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len() as f64;
        let sum = self.vertices.iter().fold(Point2::ORIGIN, |acc, &v| acc + v);
        sum * (1.0 / n)
    }

    /// Closed containment test.
    pub fn contains(&self, p: Point2) -> bool {
        if !self.aabb.contains(p) {
            return false;
        }
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let edge = self.vertices[(i + 1) % n] - a;
            edge.cross(p - a) >= -GEOM_EPS * edge.norm()
        })
    }

    pub fn rotated(&self, center: Point2, angle: f64) -> ConvexPolygon {
        let vertices: Vec<Point2> =
            self.vertices.iter().map(|&v| rotate_point(v, center, angle)).collect();
        let aabb = Aabb::of_points(&vertices);
        ConvexPolygon { vertices, aabb }
    }

    /// Reflection across the x-axis; vertex order is reversed to keep the winding.
    pub fn mirrored(&self) -> ConvexPolygon {
        let vertices: Vec<Point2> = self.vertices.iter().rev().map(|v| Point2::new(v.x, -v.y)).collect();
        let aabb = Aabb::of_points(&vertices);
        ConvexPolygon { vertices, aabb }
    }

    fn project(&self, axis: Point2) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.vertices {
            let d = v.dot(axis);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (lo, hi)
    }
}

impl TryFrom<Vec<Point2>> for ConvexPolygon {
    type Error = GeomError;
    fn try_from(vertices: Vec<Point2>) -> Result<Self, GeomError> {
        ConvexPolygon::new(vertices)
    }
}

impl From<ConvexPolygon> for Vec<Point2> {
    fn from(p: ConvexPolygon) -> Vec<Point2> {
        p.vertices
    }
}

/// `R(angle) * (p - center) + center`.
pub fn rotate_point(p: Point2, center: Point2, angle: f64) -> Point2 {
    (p - center).rotated(angle) + center
}

pub fn rotate_pose(p: Pose2, center: Point2, angle: f64) -> Pose2 {
    Pose2::new(rotate_point(p.position, center, angle), p.heading + angle)
}

/// Rotates every waypoint about `u_0` (the start position) and shifts all
/// headings, including the start heading, by `angle`.
pub fn rotate_trajectory(t: &Trajectory, angle: f64) -> Trajectory {
    let center = t.start.position;
    Trajectory {
        start: Pose2::new(center, t.start.heading + angle),
        dt: t.dt,
        waypoints: t.waypoints.iter().map(|&w| rotate_pose(w, center, angle)).collect(),
    }
}

/// Signed angle in degrees (+ = left) between the start heading and the
/// chord from `u_0` to the final waypoint.
pub fn turning_angle(t: &Trajectory) -> Result<f64, GeomError> {
    let chord = t.last().position - t.start.position;
    let len = chord.norm();
    if len < 0.1 {
        return Err(GeomError::DegenerateTrajectory(len));
    }
    Ok(normalize_angle(chord.bearing() - t.start.heading).to_degrees())
}

/// Oriented rectangle centred on the pose.
pub fn footprint(pose: Pose2, length: f64, width: f64) -> ConvexPolygon {
    let f = pose.direction() * (0.5 * length);
    let l = pose.direction().perp() * (0.5 * width);
    let c = pose.position;
    let vertices = vec![c - f - l, c + f - l, c + f + l, c - f + l];
    let aabb = Aabb::of_points(&vertices);
    ConvexPolygon { vertices, aabb }
}

/// Separating-axis test on closed convex polygons.
pub fn polygons_intersect(a: &ConvexPolygon, b: &ConvexPolygon) -> bool {
    if !a.aabb.overlaps(&b.aabb) {
        return false;
    }
    for poly in [a, b] {
        let n = poly.vertices.len();
        for i in 0..n {
            let edge = poly.vertices[(i + 1) % n] - poly.vertices[i];
            let len = edge.norm();
            let axis = edge.perp() * (1.0 / len);
            let (a_lo, a_hi) = a.project(axis);
            let (b_lo, b_hi) = b.project(axis);
            if a_hi < b_lo - GEOM_EPS || b_hi < a_lo - GEOM_EPS {
                return false;
            }
        }
    }
    true
}

/// True iff `p` lies in the closed union of the cells.
pub fn point_in_region(p: Point2, region: &[ConvexPolygon]) -> bool {
    region.iter().any(|cell| cell.contains(p))
}

/// Closest point on segment `[a, b]` to `p`, with its segment parameter in [0, 1].
pub fn closest_on_segment(p: Point2, a: Point2, b: Point2) -> (Point2, f64) {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return (a, 0.0);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    (a + ab * t, t)
}

/// Closed segment intersection, collinear overlaps included.
pub fn segments_intersect(p0: Point2, p1: Point2, q0: Point2, q1: Point2) -> bool {
    let d1 = (p1 - p0).cross(q0 - p0);
    let d2 = (p1 - p0).cross(q1 - p0);
    let d3 = (q1 - q0).cross(p0 - q0);
    let d4 = (q1 - q0).cross(p1 - q0);
    let straddles = |u: f64, v: f64| (u > GEOM_EPS && v < -GEOM_EPS) || (u < -GEOM_EPS && v > GEOM_EPS);
    if straddles(d1, d2) && straddles(d3, d4) {
        return true;
    }
    let on = |d: f64, a: Point2, b: Point2, p: Point2| {
        d.abs() <= GEOM_EPS * (b - a).norm().max(1.0) && closest_on_segment(p, a, b).0.distance(p) <= GEOM_EPS
    };
    on(d1, p0, p1, q0) || on(d2, p0, p1, q1) || on(d3, q0, q1, p0) || on(d4, q0, q1, p1)
}
