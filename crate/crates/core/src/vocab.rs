//! Fixed trajectory vocabulary.
//!
//! Every entry is a constant-curvature arc driven with a trapezoidal speed
//! profile: the speed ramps linearly from a start speed to a target speed at
//! a fixed acceleration magnitude, then holds. Entries are indexed
//! curvature-major, then target speed, then start-speed profile.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Point2, Pose2, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("invalid vocabulary spec: {0}")]
    InvalidSpec(String),
    #[error("trajectory shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub curvature_levels: usize,
    pub speed_levels: usize,
    pub profile_levels: usize,
    /// Expected vocabulary size; must equal the product of the level counts.
    pub size: usize,
    /// 1/m
    pub max_curvature: f64,
    /// m/s
    pub max_speed: f64,
    /// m/s^2, magnitude of the speed ramp
    pub ramp_accel: f64,
    pub dt: f64,
    pub horizon_s: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            curvature_levels: 64,
            speed_levels: 16,
            profile_levels: 8,
            size: 8192,
            max_curvature: 0.2,
            max_speed: 15.0,
            ramp_accel: 3.0,
            dt: 0.5,
            horizon_s: 4.0,
        }
    }
}

impl GridSpec {
    /// Reduced grid used for quick experiments: 32 x 8 x 4 = 1024 entries.
    pub fn compact() -> Self {
        Self {
            curvature_levels: 32,
            speed_levels: 8,
            profile_levels: 4,
            size: 1024,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> usize {
        (self.horizon_s / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), VocabError> {
        let product = self.curvature_levels * self.speed_levels * self.profile_levels;
        if product != self.size {
            return Err(VocabError::InvalidSpec(format!(
                "{} x {} x {} = {product} != {}",
                self.curvature_levels, self.speed_levels, self.profile_levels, self.size
            )));
        }
        if self.curvature_levels < 2 || self.speed_levels < 2 || self.profile_levels < 1 {
            return Err(VocabError::InvalidSpec("need >= 2 curvature and speed levels".into()));
        }
        if !(self.max_curvature > 0.0 && self.max_curvature <= 0.2 + 1e-12) {
            return Err(VocabError::InvalidSpec(format!(
                "max curvature {} outside (0, 0.2]",
                self.max_curvature
            )));
        }
        if !(self.max_speed > 0.0 && self.max_speed <= 15.0 + 1e-12) {
            return Err(VocabError::InvalidSpec(format!("max speed {} outside (0, 15]", self.max_speed)));
        }
        if !(self.ramp_accel > 0.0 && self.dt > 0.0 && self.horizon_s > 0.0) {
            return Err(VocabError::InvalidSpec("accel, dt and horizon must be positive".into()));
        }
        let steps = self.horizon_s / self.dt;
        if (steps - steps.round()).abs() > 1e-9 || steps.round() < 2.0 {
            return Err(VocabError::InvalidSpec("horizon must be >= 2 whole timesteps".into()));
        }
        Ok(())
    }

    /// Sorted curvature levels, closed under negation. Spacing is quadratic
    /// so that near-straight arcs are resolved finely.
    pub fn curvatures(&self) -> Vec<f64> {
        let n = self.curvature_levels;
        let mags: Vec<f64> = if n.is_multiple_of(2) {
            let half = n / 2;
            (0..half)
                .map(|j| {
                    let u = (j as f64 + 0.5) / (half as f64 - 0.5);
                    self.max_curvature * u * u
                })
                .collect()
        } else {
            let half = (n - 1) / 2;
            (0..=half)
                .map(|j| {
                    let u = j as f64 / half as f64;
                    self.max_curvature * u * u
                })
                .collect()
        };
        let mut levels: Vec<f64> = mags.iter().rev().map(|m| -m).collect();
        let skip = usize::from(n % 2 == 1);
        levels.extend(mags.iter().skip(skip));
        if n % 2 == 1 {
            let mid = n / 2;
            levels[mid] = 0.0;
        }
        levels
    }

    pub fn target_speeds(&self) -> Vec<f64> {
        let n = self.speed_levels;
        (0..n).map(|s| self.max_speed * s as f64 / (n - 1) as f64).collect()
    }

    pub fn start_speeds(&self) -> Vec<f64> {
        let n = self.profile_levels;
        (0..n).map(|p| self.max_speed * p as f64 / n as f64).collect()
    }
}

/// Parameters that generated one vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryParams {
    pub curvature: f64,
    pub target_speed: f64,
    pub start_speed: f64,
}

/// Distance travelled after `t` seconds of the trapezoidal profile.
fn ramp_distance(start: f64, target: f64, accel: f64, t: f64) -> f64 {
    let gap = target - start;
    let sign = gap.signum();
    let t_ramp = gap.abs() / accel;
    if t <= t_ramp {
        start * t + 0.5 * sign * accel * t * t
    } else {
        start * t_ramp + 0.5 * sign * accel * t_ramp * t_ramp + target * (t - t_ramp)
    }
}

/// Pose after arc length `s` along a constant-curvature path from the identity.
pub fn arc_pose(curvature: f64, s: f64) -> Pose2 {
    if curvature == 0.0 {
        return Pose2::new(Point2::new(s, 0.0), 0.0);
    }
    let phi = curvature * s;
    let half = 0.5 * phi;
    let x = phi.sin() / curvature;
    // 1 - cos(phi) = 2 sin^2(phi/2), without the cancellation
    let y = 2.0 * half.sin() * half.sin() / curvature;
    Pose2::new(Point2::new(x, y), phi)
}

/// Builds one arc trajectory from the identity pose.
pub fn arc_trajectory(params: EntryParams, accel: f64, dt: f64, steps: usize) -> Trajectory {
    let waypoints = (1..=steps)
        .map(|i| {
            let s = ramp_distance(params.start_speed, params.target_speed, accel, dt * i as f64);
            arc_pose(params.curvature, s)
        })
        .collect();
    Trajectory::new(Pose2::IDENTITY, dt, waypoints).expect("arc trajectories are well formed")
}

#[derive(Debug, Clone)]
pub struct TrajectoryVocabulary {
    spec: GridSpec,
    entries: Vec<Trajectory>,
    params: Vec<EntryParams>,
}

impl TrajectoryVocabulary {
    pub fn build(spec: &GridSpec) -> Result<Self, VocabError> {
        spec.validate()?;
        let steps = spec.steps();
        let curvatures = spec.curvatures();
        let targets = spec.target_speeds();
        let starts = spec.start_speeds();
        let mut entries = Vec::with_capacity(spec.size);
        let mut params = Vec::with_capacity(spec.size);
        for &curvature in &curvatures {
            for &target_speed in &targets {
                for &start_speed in &starts {
                    let p = EntryParams {
                        curvature,
                        target_speed,
                        start_speed,
                    };
                    entries.push(arc_trajectory(p, spec.ramp_accel, spec.dt, steps));
                    params.push(p);
                }
            }
        }
        Ok(Self { spec: spec.clone(), entries, params })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Trajectory] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &Trajectory {
        &self.entries[index]
    }

    pub fn params(&self, index: usize) -> EntryParams {
        self.params[index]
    }

    pub fn dt(&self) -> f64 {
        self.spec.dt
    }

    pub fn horizon_s(&self) -> f64 {
        self.spec.horizon_s
    }

    pub fn index_of(&self, curvature_level: usize, speed_level: usize, profile_level: usize) -> usize {
        (curvature_level * self.spec.speed_levels + speed_level) * self.spec.profile_levels + profile_level
    }

    /// Index of the entry reflected across the x-axis.
    pub fn mirror_index(&self, index: usize) -> usize {
        let per_curvature = self.spec.speed_levels * self.spec.profile_levels;
        let c = index / per_curvature;
        let rest = index % per_curvature;
        (self.spec.curvature_levels - 1 - c) * per_curvature + rest
    }

    /// Index of the closest entry by [`l2_distance`]; ties go to the lowest index.
    pub fn nearest_entry(&self, t: &Trajectory) -> Result<usize, VocabError> {
        let mut best = (f64::INFINITY, 0);
        for (i, e) in self.entries.iter().enumerate() {
            let d = l2_distance(e, t)?;
            if d < best.0 {
                best = (d, i);
            }
        }
        Ok(best.1)
    }
}

/// Root-mean-square of per-waypoint Euclidean distances.
pub fn l2_distance(a: &Trajectory, b: &Trajectory) -> Result<f64, VocabError> {
    if a.len() != b.len() || (a.dt - b.dt).abs() > 1e-12 {
        return Err(VocabError::ShapeMismatch(format!(
            "{} waypoints @ {} s vs {} waypoints @ {} s",
            a.len(),
            a.dt,
            b.len(),
            b.dt
        )));
    }
    let sum: f64 = a
        .waypoints
        .iter()
        .zip(&b.waypoints)
        .map(|(p, q)| (p.position - q.position).norm_sq())
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Squared-exponential map of a distance into (0, 1].
pub fn normalized_distance(d: f64, scale: f64) -> f64 {
    (-(d * d) / (scale * scale)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> TrajectoryVocabulary {
        TrajectoryVocabulary::build(&GridSpec::default()).unwrap()
    }

    #[test]
    fn default_size_and_shape() {
        let v = vocab();
        assert_eq!(v.len(), 8192);
        for e in v.entries() {
            assert_eq!(e.len(), 8);
            assert_eq!(e.start, Pose2::IDENTITY);
            assert_eq!(e.dt, 0.5);
            let mut prev = e.start.position;
            for w in &e.waypoints {
                assert!(w.position.distance(prev) <= 15.0 * 0.5 + 1e-12);
                prev = w.position;
            }
        }
        for i in 0..v.len() {
            let p = v.params(i);
            assert!(p.curvature.abs() <= 0.2 && (0.0..=15.0).contains(&p.target_speed));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = GridSpec { size: 1000, ..GridSpec::default() };
        assert!(matches!(TrajectoryVocabulary::build(&bad), Err(VocabError::InvalidSpec(_))));
        let fast = GridSpec { max_speed: 30.0, ..GridSpec::default() };
        assert!(TrajectoryVocabulary::build(&fast).is_err());
        let curvy = GridSpec { max_curvature: 0.5, ..GridSpec::default() };
        assert!(TrajectoryVocabulary::build(&curvy).is_err());
    }

    #[test]
    fn zero_curvature_is_collinear() {
        let p = EntryParams { curvature: 0.0, target_speed: 10.0, start_speed: 10.0 };
        let t = arc_trajectory(p, 3.0, 0.5, 8);
        for (i, w) in t.waypoints.iter().enumerate() {
            assert_eq!(w.position, Point2::new(5.0 * (i + 1) as f64, 0.0));
            assert_eq!(w.heading, 0.0);
        }
    }

    #[test]
    fn trapezoid_profile_distances() {
        // 0 -> 6 m/s at 3 m/s^2 reaches cruise after 2 s (6 m), then +6 m/s
        assert!((ramp_distance(0.0, 6.0, 3.0, 1.0) - 1.5).abs() < 1e-12);
        assert!((ramp_distance(0.0, 6.0, 3.0, 2.0) - 6.0).abs() < 1e-12);
        assert!((ramp_distance(0.0, 6.0, 3.0, 4.0) - 18.0).abs() < 1e-12);
        // braking 6 -> 0 stops after 6 m
        assert!((ramp_distance(6.0, 0.0, 3.0, 4.0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn mirror_pairs_reflect() {
        let v = vocab();
        for i in (0..v.len()).step_by(37) {
            let j = v.mirror_index(i);
            assert_eq!(v.params(j).curvature, -v.params(i).curvature);
            for (a, b) in v.entry(i).waypoints.iter().zip(&v.entry(j).waypoints) {
                assert!((a.position.x - b.position.x).abs() <= 1e-12);
                assert!((a.position.y + b.position.y).abs() <= 1e-12);
                assert!((a.heading + b.heading).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn odd_curvature_grid_contains_zero() {
        let spec = GridSpec { curvature_levels: 5, speed_levels: 2, profile_levels: 1, size: 10, ..GridSpec::default() };
        let k = spec.curvatures();
        assert_eq!(k.len(), 5);
        assert_eq!(k[2], 0.0);
        assert_eq!(k[0], -k[4]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = vocab();
        let b = vocab();
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn l2_examples() {
        let v = vocab();
        let a = v.entry(100);
        assert_eq!(l2_distance(a, a).unwrap(), 0.0);
        let mut b = a.clone();
        for w in &mut b.waypoints {
            w.position = w.position + Point2::new(3.0, 4.0);
        }
        assert!((l2_distance(a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(l2_distance(a, &b).unwrap(), l2_distance(&b, a).unwrap());

        let short = Trajectory::new(Pose2::IDENTITY, 0.5, a.waypoints[..4].to_vec()).unwrap();
        assert!(matches!(l2_distance(a, &short), Err(VocabError::ShapeMismatch(_))));
    }

    #[test]
    fn normalized_distance_examples() {
        assert_eq!(normalized_distance(0.0, 3.0), 1.0);
        assert!((normalized_distance(3.0, 3.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((normalized_distance(3.0, 3.0) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn nearest_entry_examples() {
        let v = TrajectoryVocabulary::build(&GridSpec::compact()).unwrap();
        assert_eq!(v.nearest_entry(v.entry(7)).unwrap(), 7);
        let mut t = v.entry(7).clone();
        for w in &mut t.waypoints {
            w.position = w.position + Point2::new(0.01, 0.0);
        }
        // brute-force scan as the oracle
        let brute = (0..v.len())
            .min_by(|&a, &b| {
                let da = l2_distance(v.entry(a), &t).unwrap();
                let db = l2_distance(v.entry(b), &t).unwrap();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap();
        assert_eq!(brute, 7);
        assert_eq!(v.nearest_entry(&t).unwrap(), 7);
        assert_eq!(v.nearest_entry(&t).unwrap(), v.nearest_entry(&t).unwrap());
    }

    #[test]
    fn entry_set_closed_under_mirroring() {
        let v = TrajectoryVocabulary::build(&GridSpec::compact()).unwrap();
        for i in 0..v.len() {
            let m = v.entry(i).mirrored();
            let j = v.nearest_entry(&m).unwrap();
            assert!(l2_distance(v.entry(j), &m).unwrap() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn normalized_distance_monotone(d1 in 0.0..50.0f64, gap in 1e-6..10.0f64) {
            prop_assert!(normalized_distance(d1, 3.0) > normalized_distance(d1 + gap, 3.0)
                || normalized_distance(d1 + gap, 3.0) == 0.0);
            prop_assert!(normalized_distance(d1, 3.0) <= 1.0);
        }
    }
}
