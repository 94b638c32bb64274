//! World state handed to the simulator and the conditioning featurizer.

use crate::error::{invalid, Result};
use crate::geometry::{dot, point_segment_distance, sub, Point, Polygon, Rect};
use crate::traj::{EgoStatus, HistoryTrajectory, Waypoint};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NavCommand {
    FollowLane,
    TurnLeft,
    TurnRight,
    Stop,
}

impl NavCommand {
    pub const ALL: [NavCommand; 4] = [Self::FollowLane, Self::TurnLeft, Self::TurnRight, Self::Stop];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioKind {
    Straight,
    Curve,
    IntersectionTurn,
    LeadBrake,
    Narrowing,
    Fork,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] =
        [Self::Straight, Self::Curve, Self::IntersectionTurn, Self::LeadBrake, Self::Narrowing, Self::Fork];
}

/// Polyline with cumulative arc length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Route {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

impl TryFrom<Vec<Point>> for Route {
    type Error = crate::Error;
    fn try_from(points: Vec<Point>) -> Result<Self> {
        Route::new(points)
    }
}

impl From<Route> for Vec<Point> {
    fn from(r: Route) -> Self {
        r.points
    }
}

/// Position on a route: arc length, signed lateral offset (left positive) and tangent heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouteProjection {
    pub s: f64,
    pub lateral: f64,
    pub heading: f64,
}

impl Route {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return invalid("route needs at least 2 points");
        }
        if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return invalid("route has non-finite points");
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for w in points.windows(2) {
            let d = sub(w[1], w[0]);
            let len = dot(d, d).sqrt();
            if len == 0.0 {
                return invalid("route has repeated points");
            }
            cumulative.push(cumulative.last().copied().unwrap_or(0.0) + len);
        }
        Ok(Self { points, cumulative })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("route has points")
    }

    fn segment_heading(&self, i: usize) -> f64 {
        let d = sub(self.points[i + 1], self.points[i]);
        d[1].atan2(d[0])
    }

    /// Nearest-point projection; ties go to the earliest segment.
    pub fn project(&self, p: Point) -> RouteProjection {
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..self.points.len() - 1 {
            let d = point_segment_distance(p, self.points[i], self.points[i + 1]);
            if d < best.0 {
                best = (d, i);
            }
        }
        let i = best.1;
        let (a, b) = (self.points[i], self.points[i + 1]);
        let ab = sub(b, a);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let t = (dot(sub(p, a), ab) / (len * len)).clamp(0.0, 1.0);
        let heading = self.segment_heading(i);
        let (s, c) = heading.sin_cos();
        let rel = sub(p, a);
        RouteProjection { s: self.cumulative[i] + t * len, lateral: -s * rel[0] + c * rel[1], heading }
    }

    /// Pose at arc length `s`, clamped to the route ends.
    pub fn pose_at(&self, s: f64) -> Waypoint {
        let s = s.clamp(0.0, self.length());
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let f = (s - self.cumulative[i]) / len;
        let (a, b) = (self.points[i], self.points[i + 1]);
        Waypoint::new(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), self.segment_heading(i))
    }
}

/// Non-reactive background agent moving at constant speed along a fixed heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub pose: Waypoint,
    /// Speed along `pose.heading`, m/s.
    pub velocity: f64,
    pub length: f64,
    pub width: f64,
}

impl Agent {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0 && self.length.is_finite() && self.width.is_finite()) {
            return invalid(format!("agent {} has a non-positive extent", self.id));
        }
        if !self.velocity.is_finite() || !self.pose.is_finite() {
            return invalid(format!("agent {} is not finite", self.id));
        }
        Ok(())
    }

    /// Pose after `t` seconds.
    pub fn pose_at(&self, t: f64) -> Waypoint {
        let (s, c) = self.pose.heading.sin_cos();
        Waypoint { x: self.pose.x + self.velocity * t * c, y: self.pose.y + self.velocity * t * s, heading: self.pose.heading }
    }

    pub fn velocity_vector(&self) -> Point {
        let (s, c) = self.pose.heading.sin_cos();
        [self.velocity * c, self.velocity * s]
    }

    pub fn footprint_at(&self, t: f64) -> Rect {
        let p = self.pose_at(t);
        Rect::new([p.x, p.y], p.heading, self.length, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoInit {
    pub pose: Waypoint,
    pub status: EgoStatus,
}

/// One driving situation. Coordinates are in the scene frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub kind: ScenarioKind,
    pub drivable_area: Polygon,
    pub route: Route,
    pub ego: EgoInit,
    /// Past ego poses in the ego frame, most recent last.
    pub history: HistoryTrajectory,
    pub agents: Vec<Agent>,
    pub nav: NavCommand,
    pub speed_limit: f64,
    pub duration: f64,
    /// Alternative centerlines an expert may follow instead of `route` (the detours of a fork).
    #[serde(default)]
    pub alternatives: Vec<Route>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.drivable_area.validate()?;
        self.ego.status.validate()?;
        self.history.validate()?;
        if !self.ego.pose.is_finite() {
            return invalid(format!("scene {}: ego pose is not finite", self.id));
        }
        if !self.drivable_area.contains([self.ego.pose.x, self.ego.pose.y]) {
            return invalid(format!("scene {}: ego start lies outside the drivable area", self.id));
        }
        let r0 = self.route.points()[0];
        if !self.drivable_area.contains(r0) {
            return invalid(format!("scene {}: route starts outside the drivable area", self.id));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return invalid(format!("scene {}: duration must be positive", self.id));
        }
        if !(self.speed_limit > 0.0 && self.speed_limit.is_finite()) {
            return invalid(format!("scene {}: speed limit must be positive", self.id));
        }
        for a in &self.agents {
            a.validate()?;
        }
        Ok(())
    }

    /// Maps an ego-frame pose into the scene frame.
    pub fn to_scene_frame(&self, local: &Waypoint) -> Waypoint {
        self.ego.pose.compose(local)
    }

    /// Maps a scene-frame pose into the ego frame.
    pub fn to_ego_frame(&self, global: &Waypoint) -> Waypoint {
        self.ego.pose.relative(global)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_projection_and_pose() {
        let r = Route::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]).unwrap();
        assert_eq!(r.length(), 20.0);
        let p = r.project([4.0, 1.5]);
        assert_eq!((p.s, p.lateral), (4.0, 1.5));
        let q = r.project([11.0, 5.0]);
        assert_eq!(q.s, 15.0);
        assert!((q.lateral + 1.0).abs() < 1e-12);
        let w = r.pose_at(15.0);
        assert_eq!((w.x, w.y), (10.0, 5.0));
        assert!((w.heading - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(r.pose_at(100.0).y, 10.0);
    }

    #[test]
    fn agent_kinematics() {
        let a = Agent { id: 1, pose: Waypoint::new(10.0, 0.0, 0.0), velocity: 2.0, length: 4.0, width: 2.0 };
        let p = a.pose_at(1.0);
        assert_eq!((p.x, p.y), (12.0, 0.0));
    }

    #[test]
    fn route_rejects_degenerate() {
        assert!(Route::new(vec![[0.0, 0.0]]).is_err());
        assert!(Route::new(vec![[0.0, 0.0], [0.0, 0.0]]).is_err());
    }
}
