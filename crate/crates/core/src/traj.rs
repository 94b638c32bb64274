//! Trajectory and pose types, action-space normalization and time resampling.

use crate::error::{invalid, Result};
use crate::tensor::Mat;
use crate::Scalar;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::f64::consts::PI;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let two_pi = 2.0 * PI;
    a - two_pi * ((a - PI) / two_pi).ceil()
}

/// A planar pose: position in meters and heading in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading) }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }

    /// Maps a pose expressed in this pose's frame into the parent frame.
    pub fn compose(&self, local: &Waypoint) -> Waypoint {
        let (s, c) = self.heading.sin_cos();
        Waypoint::new(
            self.x + c * local.x - s * local.y,
            self.y + s * local.x + c * local.y,
            self.heading + local.heading,
        )
    }

    /// Expresses a parent-frame pose in this pose's frame.
    pub fn relative(&self, global: &Waypoint) -> Waypoint {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (global.x - self.x, global.y - self.y);
        Waypoint::new(c * dx + s * dy, -s * dx + c * dy, global.heading - self.heading)
    }

    pub fn distance(&self, other: &Waypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl Serialize for Waypoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x, self.y, self.heading].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Waypoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y, heading] = <[f64; 3]>::deserialize(d)?;
        Ok(Waypoint { x, y, heading })
    }
}

/// Future ego poses at a fixed spacing, in the ego frame.
///
/// Serialized as `{"dt": <s>, "points": [[x, y, heading], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "dt")]
    pub dt_waypoint: f64,
    #[serde(rename = "points")]
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>, dt_waypoint: f64) -> Result<Self> {
        let t = Self { dt_waypoint, waypoints };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return invalid(format!("trajectory needs at least 2 waypoints, got {}", self.waypoints.len()));
        }
        if !(self.dt_waypoint > 0.0 && self.dt_waypoint.is_finite()) {
            return invalid(format!("waypoint spacing must be positive, got {}", self.dt_waypoint));
        }
        if let Some(i) = self.waypoints.iter().position(|w| !w.is_finite()) {
            return invalid(format!("waypoint {i} is not finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.len() as f64 * self.dt_waypoint
    }
}

/// Past ego poses, most recent last, in the current ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryTrajectory {
    #[serde(rename = "dt")]
    pub dt_waypoint: f64,
    #[serde(rename = "points")]
    pub waypoints: Vec<Waypoint>,
}

impl HistoryTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return invalid("history needs at least one waypoint");
        }
        if self.waypoints.iter().any(|w| !w.is_finite()) {
            return invalid("history contains a non-finite waypoint");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoStatus {
    pub speed: f64,
    pub acceleration: f64,
    pub yaw_rate: f64,
}

impl EgoStatus {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed.is_finite() && self.acceleration.is_finite() && self.yaw_rate.is_finite()) {
            return invalid("ego status contains a non-finite value");
        }
        if self.speed < 0.0 {
            return invalid(format!("ego speed must be non-negative, got {}", self.speed));
        }
        Ok(())
    }
}

/// Per-component scales mapping metric trajectories into the `[-1, 1]` action space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub scale_x: f64,
    pub scale_y: f64,
    pub scale_heading: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self { scale_x: 80.0, scale_y: 20.0, scale_heading: PI }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("scale_x", self.scale_x), ("scale_y", self.scale_y), ("scale_heading", self.scale_heading)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("normalization {name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    fn scales(&self) -> [f64; 3] {
        [self.scale_x, self.scale_y, self.scale_heading]
    }
}

fn normalize_points<T: Scalar>(points: &[Waypoint], spec: &NormalizationSpec) -> Result<Mat<T>> {
    spec.validate()?;
    if let Some(i) = points.iter().position(|w| !w.is_finite()) {
        return invalid(format!("waypoint {i} is not finite"));
    }
    let s = spec.scales();
    Ok(Mat::from_fn(points.len(), 3, |r, c| {
        let w = &points[r];
        let v = [w.x, w.y, w.heading][c] / s[c];
        T::lit(v.clamp(-1.0, 1.0))
    }))
}

/// Scales a trajectory into the `N × 3` action tensor, clamping to `[-1, 1]`.
pub fn normalize<T: Scalar>(traj: &Trajectory, spec: &NormalizationSpec) -> Result<Mat<T>> {
    normalize_points(&traj.waypoints, spec)
}

pub fn normalize_history<T: Scalar>(hist: &HistoryTrajectory, spec: &NormalizationSpec) -> Result<Mat<T>> {
    normalize_points(&hist.waypoints, spec)
}

/// Inverse of [`normalize`] for in-range tensors; headings are re-wrapped.
pub fn denormalize<T: Scalar>(tensor: &Mat<T>, spec: &NormalizationSpec, dt_waypoint: f64) -> Result<Trajectory> {
    spec.validate()?;
    if tensor.cols() != 3 {
        return invalid(format!("action tensor must have 3 columns, got {}", tensor.cols()));
    }
    if !tensor.is_finite() {
        return invalid("action tensor is not finite");
    }
    let waypoints = (0..tensor.rows())
        .map(|r| {
            Waypoint::new(
                tensor.get(r, 0).as_f64() * spec.scale_x,
                tensor.get(r, 1).as_f64() * spec.scale_y,
                tensor.get(r, 2).as_f64() * spec.scale_heading,
            )
        })
        .collect();
    Trajectory::new(waypoints, dt_waypoint)
}

/// Interpolates `traj` (same frame as `start_pose`) onto a uniform tick grid.
///
/// Tick 0 is `start_pose`, waypoint `i` sits at time `(i + 1) · dt_waypoint`,
/// and `dt_waypoint` must be an integer multiple of `dt_tick`. Positions are
/// linearly interpolated, headings along the shortest arc.
pub fn resample_to_ticks(traj: &Trajectory, start_pose: &Waypoint, dt_tick: f64) -> Result<Vec<Waypoint>> {
    if traj.waypoints.is_empty() {
        return invalid("cannot resample an empty trajectory");
    }
    if !(dt_tick > 0.0) || dt_tick > traj.dt_waypoint + 1e-12 {
        return invalid(format!("tick spacing {dt_tick} must lie in (0, {}]", traj.dt_waypoint));
    }
    let ratio = traj.dt_waypoint / dt_tick;
    let sub = ratio.round();
    if (ratio - sub).abs() > 1e-9 {
        return invalid(format!("waypoint spacing {} is not a multiple of tick spacing {dt_tick}", traj.dt_waypoint));
    }
    let sub = sub as usize;
    let mut ticks = Vec::with_capacity(traj.waypoints.len() * sub + 1);
    ticks.push(*start_pose);
    let mut prev = *start_pose;
    for wp in &traj.waypoints {
        let dh = wrap_angle(wp.heading - prev.heading);
        for j in 1..sub {
            let f = j as f64 / sub as f64;
            ticks.push(Waypoint::new(
                prev.x + (wp.x - prev.x) * f,
                prev.y + (wp.y - prev.y) * f,
                prev.heading + dh * f,
            ));
        }
        ticks.push(*wp);
        prev = *wp;
    }
    Ok(ticks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[(f64, f64, f64)], dt: f64) -> Trajectory {
        Trajectory::new(points.iter().map(|&(x, y, h)| Waypoint::new(x, y, h)).collect(), dt).unwrap()
    }

    #[test]
    fn wrap_angle_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5 - 4.0 * PI) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn normalize_zero_and_linear_and_clamped() {
        let spec = NormalizationSpec::default();
        let z: Mat<f64> = normalize(&traj(&[(0.0, 0.0, 0.0), (0.0, 0.0, 0.0)], 0.5), &spec).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let m: Mat<f64> = normalize(&traj(&[(40.0, 0.0, 0.0), (100.0, 0.0, 0.0)], 0.5), &spec).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.0, 0.0]);
        assert_eq!(m.get(1, 0), 1.0);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let t = Trajectory { dt_waypoint: 0.5, waypoints: vec![Waypoint::default(), Waypoint { x: f64::NAN, y: 0.0, heading: 0.0 }] };
        assert!(normalize::<f64>(&t, &NormalizationSpec::default()).is_err());
    }

    #[test]
    fn denormalize_zero_and_heading_boundary() {
        let spec = NormalizationSpec::default();
        let t = denormalize(&Mat::<f64>::zeros(8, 3), &spec, 0.5).unwrap();
        assert!(t.waypoints.iter().all(|w| w.x == 0.0 && w.y == 0.0 && w.heading == 0.0));
        let mut m = Mat::<f64>::zeros(2, 3);
        m.set(0, 2, 1.0);
        let t = denormalize(&m, &spec, 0.5).unwrap();
        assert_eq!(t.waypoints[0].heading, PI);
        assert!(denormalize(&Mat::<f64>::zeros(2, 2), &spec, 0.5).is_err());
    }

    #[test]
    fn resample_midpoint_and_identity_stride() {
        let t = traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)], 0.5);
        let start = Waypoint::default();
        let ticks = resample_to_ticks(&t, &start, 0.25).unwrap();
        assert_eq!(ticks.len(), 5);
        assert_eq!(ticks[3], Waypoint::new(0.5, 0.0, 0.0));
        assert_eq!(ticks[4], t.waypoints[1]);

        let same = resample_to_ticks(&t, &start, 0.5).unwrap();
        assert_eq!(same, vec![start, t.waypoints[0], t.waypoints[1]]);
    }

    #[test]
    fn resample_heading_takes_shortest_arc() {
        // 3.0 -> -3.0 spans 2π - 6 ≈ 0.2832 rad through ±π; midpoint is 3.0 + 0.1416.
        let oracle = 3.0 + (2.0 * PI - 6.0) / 2.0;
        let t = traj(&[(0.0, 0.0, 3.0), (1.0, 0.0, -3.0)], 0.5);
        let ticks = resample_to_ticks(&t, &Waypoint::new(0.0, 0.0, 3.0), 0.25).unwrap();
        assert!((ticks[3].heading.abs() - oracle).abs() < 1e-12);
        assert!((ticks[3].heading.abs() - PI).abs() < 1e-3);
    }

    #[test]
    fn resample_rejects_bad_ticks() {
        let t = traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)], 0.5);
        assert!(resample_to_ticks(&t, &Waypoint::default(), 0.0).is_err());
        assert!(resample_to_ticks(&t, &Waypoint::default(), 0.6).is_err());
        assert!(resample_to_ticks(&t, &Waypoint::default(), 0.3).is_err());
        let empty = Trajectory { dt_waypoint: 0.5, waypoints: vec![] };
        assert!(resample_to_ticks(&empty, &Waypoint::default(), 0.1).is_err());
    }

    #[test]
    fn compose_and_relative_are_inverse() {
        let base = Waypoint::new(3.0, -2.0, 0.7);
        let g = Waypoint::new(-1.0, 4.0, -2.5);
        let back = base.compose(&base.relative(&g));
        assert!((back.x - g.x).abs() < 1e-12 && (back.y - g.y).abs() < 1e-12);
        assert!(wrap_angle(back.heading - g.heading).abs() < 1e-12);
    }

    #[test]
    fn trajectory_json_schema() {
        let t = traj(&[(1.0, 2.0, 0.5), (3.0, 4.0, 0.25)], 0.5);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"dt":0.5,"points":[[1.0,2.0,0.5],[3.0,4.0,0.25]]}"#);
        let back: Trajectory = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
