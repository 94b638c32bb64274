//! Non-reactive rollout and PDM scoring.
//!
//! The ego follows the planned trajectory exactly (interpolated onto a tick
//! grid); agents move at constant velocity and never react. Each rollout is
//! scored with five sub-metrics:
//!
//! * NC: no overlap between the ego footprint and any agent while the ego moves.
//! * DAC: every ego corner stays inside (or on) the drivable polygon.
//! * TTC: no straight-line projection of the moving ego hits an agent sooner than `tau`.
//! * Comfort: longitudinal/lateral acceleration, jerk and yaw rate within limits.
//! * EP: route progress relative to `min(speed_limit · duration, remaining route)`.
//!
//! and aggregated as `nc · dac · (5·ep + 5·ttc + 2·comfort) / 12`.

use crate::error::{invalid, Result};
use crate::geometry::{Point, Rect};
use crate::scene::{Route, Scene};
use crate::traj::{resample_to_ticks, wrap_angle, Trajectory, Waypoint};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComfortLimits {
    pub max_lon_accel: f64,
    pub max_lat_accel: f64,
    pub max_jerk: f64,
    pub max_yaw_rate: f64,
    /// Width of the local polynomial fit used for derivatives, seconds.
    pub fit_window: f64,
}

impl Default for ComfortLimits {
    fn default() -> Self {
        Self { max_lon_accel: 4.0, max_lat_accel: 4.9, max_jerk: 8.4, max_yaw_rate: 0.95, fit_window: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt_tick: f64,
    /// TTC threshold, seconds.
    pub ttc_tau: f64,
    /// Ego speeds at or below this are treated as stationary (never at fault).
    pub stationary_speed: f64,
    pub ego_length: f64,
    pub ego_width: f64,
    pub comfort: ComfortLimits,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt_tick: 0.1, ttc_tau: 1.0, stationary_speed: 0.1, ego_length: 4.0, ego_width: 2.0, comfort: ComfortLimits::default() }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.comfort;
        for (name, v) in [
            ("dt_tick", self.dt_tick),
            ("ttc_tau", self.ttc_tau),
            ("ego_length", self.ego_length),
            ("ego_width", self.ego_width),
            ("comfort.max_lon_accel", c.max_lon_accel),
            ("comfort.max_lat_accel", c.max_lat_accel),
            ("comfort.max_jerk", c.max_jerk),
            ("comfort.max_yaw_rate", c.max_yaw_rate),
            ("comfort.fit_window", c.fit_window),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(crate::Error::Config(format!("sim.{name} must be positive, got {v}")));
            }
        }
        if !(self.stationary_speed >= 0.0) {
            return Err(crate::Error::Config("sim.stationary_speed must be non-negative".into()));
        }
        Ok(())
    }

    pub fn ego_footprint(&self, pose: &Waypoint) -> Rect {
        Rect::new([pose.x, pose.y], pose.heading, self.ego_length, self.ego_width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub id: u32,
    pub footprint: Rect,
    pub velocity: Point,
}

/// World state at one tick, scene frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Tick {
    pub time: f64,
    pub ego: Waypoint,
    pub ego_velocity: Point,
    pub agents: Vec<AgentState>,
}

impl Tick {
    pub fn ego_speed(&self) -> f64 {
        self.ego_velocity[0].hypot(self.ego_velocity[1])
    }
}

/// Number of ticks covering `duration`, endpoints included.
pub fn tick_count(duration: f64, dt_tick: f64) -> usize {
    (duration / dt_tick + 1e-9).floor() as usize + 1
}

/// Plays `traj` (ego frame) forward in `scene`. The ego holds its last pose
/// once the trajectory is exhausted.
pub fn rollout(scene: &Scene, traj: &Trajectory, dt_tick: f64) -> Result<Vec<Tick>> {
    traj.validate()?;
    if !(dt_tick > 0.0) {
        return invalid("tick spacing must be positive");
    }
    if traj.duration() > scene.duration + 1e-9 {
        return invalid(format!("trajectory lasts {} s but the scene only {} s", traj.duration(), scene.duration));
    }
    let global = Trajectory {
        dt_waypoint: traj.dt_waypoint,
        waypoints: traj.waypoints.iter().map(|w| scene.to_scene_frame(w)).collect(),
    };
    let mut poses = resample_to_ticks(&global, &scene.ego.pose, dt_tick)?;
    let n = tick_count(scene.duration, dt_tick);
    let last = *poses.last().expect("resampling keeps the start pose");
    poses.resize(n, last);
    poses.truncate(n);
    let velocity = |i: usize| -> Point {
        if n == 1 {
            let (s, c) = scene.ego.pose.heading.sin_cos();
            return [scene.ego.status.speed * c, scene.ego.status.speed * s];
        }
        let (a, b) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
        [(poses[b].x - poses[a].x) / dt_tick, (poses[b].y - poses[a].y) / dt_tick]
    };
    Ok((0..n)
        .map(|i| {
            let time = i as f64 * dt_tick;
            Tick {
                time,
                ego: poses[i],
                ego_velocity: velocity(i),
                agents: scene
                    .agents
                    .iter()
                    .map(|a| AgentState { id: a.id, footprint: a.footprint_at(time), velocity: a.velocity_vector() })
                    .collect(),
            }
        })
        .collect())
}

fn moving(t: &Tick, cfg: &SimConfig) -> bool {
    t.ego_speed() > cfg.stationary_speed
}

pub fn score_nc(ticks: &[Tick], cfg: &SimConfig) -> f64 {
    let hit = ticks.iter().filter(|t| moving(t, cfg)).any(|t| {
        let ego = cfg.ego_footprint(&t.ego);
        t.agents.iter().any(|a| crate::geometry::rects_overlap(&ego, &a.footprint))
    });
    if hit {
        0.0
    } else {
        1.0
    }
}

pub fn score_dac(ticks: &[Tick], area: &crate::geometry::Polygon, cfg: &SimConfig) -> Result<f64> {
    area.validate()?;
    let ok = ticks.iter().all(|t| cfg.ego_footprint(&t.ego).corners().iter().all(|&c| area.contains(c)));
    Ok(if ok { 1.0 } else { 0.0 })
}

/// Smallest projected time to overlap over ticks (moving ego only) and agents.
pub fn min_time_to_collision(ticks: &[Tick], cfg: &SimConfig) -> f64 {
    ticks
        .iter()
        .filter(|t| moving(t, cfg))
        .flat_map(|t| {
            let ego = cfg.ego_footprint(&t.ego);
            t.agents
                .iter()
                .filter_map(move |a| crate::geometry::time_to_overlap(&ego, t.ego_velocity, &a.footprint, a.velocity))
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn score_ttc(ticks: &[Tick], cfg: &SimConfig) -> Result<f64> {
    if !(cfg.ttc_tau > 0.0) {
        return invalid("ttc tau must be positive");
    }
    Ok(if min_time_to_collision(ticks, cfg) >= cfg.ttc_tau { 1.0 } else { 0.0 })
}

/// First three derivatives of samples `ys` at every tick, from a least-squares
/// cubic fitted over a window of `2·half + 1` ticks (shifted inward at the ends).
pub fn local_derivatives(ys: &[f64], dt: f64, half: usize) -> Vec<[f64; 3]> {
    let n = ys.len();
    let width = (2 * half + 1).min(n);
    let degree = 3.min(width.saturating_sub(1));
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half).min(n - width);
            let taus: Vec<f64> = (lo..lo + width).map(|j| (j as f64 - i as f64) * dt).collect();
            let c = polyfit(&taus, &ys[lo..lo + width], degree);
            [c[1], 2.0 * c[2], 6.0 * c[3]]
        })
        .collect()
}

/// Least-squares polynomial coefficients (ascending powers, padded to 4).
fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> [f64; 4] {
    let m = degree + 1;
    let mut a = [[0.0f64; 5]; 4];
    for (&x, &y) in xs.iter().zip(ys) {
        let mut pw = [1.0f64; 7];
        for k in 1..7 {
            pw[k] = pw[k - 1] * x;
        }
        for r in 0..m {
            for c in 0..m {
                a[r][c] += pw[r + c];
            }
            a[r][m] += pw[r] * y;
        }
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap_or(col);
        a.swap(col, piv);
        let d = a[col][col];
        if d == 0.0 {
            continue;
        }
        for r in 0..m {
            if r != col {
                let f = a[r][col] / d;
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut out = [0.0; 4];
    for k in 0..m {
        if a[k][k] != 0.0 {
            out[k] = a[k][m] / a[k][k];
        }
    }
    out
}

/// Peak kinematic quantities of an ego tick sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ComfortPeaks {
    pub lon_accel: f64,
    pub lat_accel: f64,
    pub jerk: f64,
    pub yaw_rate: f64,
}

pub fn comfort_peaks(ticks: &[Tick], dt: f64, limits: &ComfortLimits) -> Result<ComfortPeaks> {
    if ticks.len() < 3 {
        return invalid(format!("comfort needs at least 3 ticks, got {}", ticks.len()));
    }
    let half = ((limits.fit_window / dt / 2.0).round() as usize).max(1);
    let xs: Vec<f64> = ticks.iter().map(|t| t.ego.x).collect();
    let ys: Vec<f64> = ticks.iter().map(|t| t.ego.y).collect();
    let mut hs = Vec::with_capacity(ticks.len());
    for t in ticks {
        let h = match hs.last() {
            Some(&prev) => prev + wrap_angle(t.ego.heading - prev),
            None => t.ego.heading,
        };
        hs.push(h);
    }
    let (dx, dy, dh) = (local_derivatives(&xs, dt, half), local_derivatives(&ys, dt, half), local_derivatives(&hs, dt, half));
    let mut peaks = ComfortPeaks::default();
    for i in 0..ticks.len() {
        let v = [dx[i][0], dy[i][0]];
        let a = [dx[i][1], dy[i][1]];
        let j = [dx[i][2], dy[i][2]];
        let speed = v[0].hypot(v[1]);
        let tangent = if speed > 0.1 {
            [v[0] / speed, v[1] / speed]
        } else {
            let (s, c) = ticks[i].ego.heading.sin_cos();
            [c, s]
        };
        let lon = a[0] * tangent[0] + a[1] * tangent[1];
        let lat = tangent[0] * a[1] - tangent[1] * a[0];
        peaks.lon_accel = peaks.lon_accel.max(lon.abs());
        peaks.lat_accel = peaks.lat_accel.max(lat.abs());
        peaks.jerk = peaks.jerk.max(j[0].hypot(j[1]));
        peaks.yaw_rate = peaks.yaw_rate.max(dh[i][0].abs());
    }
    Ok(peaks)
}

pub fn score_comfort(ticks: &[Tick], dt: f64, limits: &ComfortLimits) -> Result<f64> {
    let p = comfort_peaks(ticks, dt, limits)?;
    let ok = p.lon_accel <= limits.max_lon_accel
        && p.lat_accel <= limits.max_lat_accel
        && p.jerk <= limits.max_jerk
        && p.yaw_rate <= limits.max_yaw_rate;
    Ok(if ok { 1.0 } else { 0.0 })
}

pub fn score_ep(ticks: &[Tick], route: &Route, speed_limit: f64, duration: f64) -> Result<f64> {
    let (first, last) = match (ticks.first(), ticks.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return invalid("no ticks to score"),
    };
    let s0 = route.project([first.ego.x, first.ego.y]).s;
    let s1 = route.project([last.ego.x, last.ego.y]).s;
    let reference = (speed_limit * duration).min(route.length() - s0);
    Ok(((s1 - s0) / reference.max(0.1)).clamp(0.0, 1.0))
}

/// Sub-scores and the aggregate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdmsBreakdown {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
    pub pdms: f64,
}

impl PdmsBreakdown {
    pub fn new(nc: f64, dac: f64, ttc: f64, comfort: f64, ep: f64) -> Result<Self> {
        Ok(Self { nc, dac, ttc, comfort, ep, pdms: pdms(nc, dac, ttc, comfort, ep)? })
    }

    pub fn zero() -> Self {
        Self { nc: 0.0, dac: 0.0, ttc: 0.0, comfort: 0.0, ep: 0.0, pdms: 0.0 }
    }
}

/// `nc · dac · (5·ep + 5·ttc + 2·comfort) / 12`.
pub fn pdms(nc: f64, dac: f64, ttc: f64, comfort: f64, ep: f64) -> Result<f64> {
    for (name, v) in [("nc", nc), ("dac", dac), ("ttc", ttc), ("comfort", comfort)] {
        if v != 0.0 && v != 1.0 {
            return invalid(format!("{name} must be 0 or 1, got {v}"));
        }
    }
    if !(0.0..=1.0).contains(&ep) {
        return invalid(format!("ep must lie in [0, 1], got {ep}"));
    }
    Ok(nc * dac * (5.0 * ep + 5.0 * ttc + 2.0 * comfort) / 12.0)
}

/// Rolls out and scores one trajectory.
pub fn score_trajectory(scene: &Scene, traj: &Trajectory, cfg: &SimConfig) -> Result<PdmsBreakdown> {
    let ticks = rollout(scene, traj, cfg.dt_tick)?;
    PdmsBreakdown::new(
        score_nc(&ticks, cfg),
        score_dac(&ticks, &scene.drivable_area, cfg)?,
        score_ttc(&ticks, cfg)?,
        score_comfort(&ticks, cfg.dt_tick, &cfg.comfort)?,
        score_ep(&ticks, &scene.route, scene.speed_limit, scene.duration)?,
    )
}

/// Straight-ahead waypoints at the current speed and heading.
pub fn constant_velocity_planner(scene: &Scene, waypoints: usize, dt_waypoint: f64) -> Result<Trajectory> {
    let v = scene.ego.status.speed;
    Trajectory::new((1..=waypoints).map(|i| Waypoint::new(v * dt_waypoint * i as f64, 0.0, 0.0)).collect(), dt_waypoint)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneResult {
    pub scene_id: u64,
    pub breakdown: PdmsBreakdown,
    /// Planner or simulator failure; the breakdown is all zeros when set.
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
    pub pdms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneResult>,
    pub means: MetricMeans,
}

impl EvalReport {
    pub fn from_results(scenes: Vec<SceneResult>) -> Result<Self> {
        if scenes.is_empty() {
            return invalid("cannot summarize an empty evaluation");
        }
        let n = scenes.len() as f64;
        let mean = |f: fn(&PdmsBreakdown) -> f64| scenes.iter().map(|s| f(&s.breakdown)).sum::<f64>() / n;
        let means = MetricMeans {
            nc: mean(|b| b.nc),
            dac: mean(|b| b.dac),
            ttc: mean(|b| b.ttc),
            comfort: mean(|b| b.comfort),
            ep: mean(|b| b.ep),
            pdms: mean(|b| b.pdms),
        };
        Ok(Self { scenes, means })
    }

    pub fn failures(&self) -> Vec<u64> {
        self.scenes.iter().filter(|s| s.error.is_some()).map(|s| s.scene_id).collect()
    }

    /// `scene_id,nc,dac,ttc,comfort,ep,pdms`, one row per scene.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene_id,nc,dac,ttc,comfort,ep,pdms\n");
        for s in &self.scenes {
            let b = &s.breakdown;
            let _ = writeln!(out, "{},{},{},{},{},{},{}", s.scene_id, b.nc, b.dac, b.ttc, b.comfort, b.ep, b.pdms);
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "scenes": self.scenes.len(),
            "failures": self.failures(),
            "means": self.means,
        })
    }
}

/// Plans and scores every scene in parallel; results keep corpus order.
pub fn evaluate<F>(planner: F, scenes: &[Scene], cfg: &SimConfig) -> Result<EvalReport>
where
    F: Fn(&Scene) -> Result<Trajectory> + Sync,
{
    cfg.validate()?;
    let results = scenes
        .par_iter()
        .map(|scene| match planner(scene).and_then(|t| score_trajectory(scene, &t, cfg)) {
            Ok(b) => SceneResult { scene_id: scene.id, breakdown: b, error: None },
            Err(e) => SceneResult { scene_id: scene.id, breakdown: PdmsBreakdown::zero(), error: Some(e.to_string()) },
        })
        .collect();
    EvalReport::from_results(results)
}

/// SVG sketch of a scene: drivable area, route, agents, plan and ego trace.
pub fn render_svg(scene: &Scene, plan: Option<&Trajectory>, ticks: Option<&[Tick]>, cfg: &SimConfig) -> String {
    let pts = scene.drivable_area.points();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let scale = 8.0;
    let (w, h) = ((x1 - x0) * scale, (y1 - y0) * scale);
    // SVG y grows downward.
    let map = |p: Point| format!("{:.2},{:.2}", (p[0] - x0) * scale, (y1 - p[1]) * scale);
    let poly = |ps: &[Point]| ps.iter().map(|&p| map(p)).collect::<Vec<_>>().join(" ");
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(s, r##"<polygon points="{}" fill="#e6e6e6" stroke="#555555" stroke-width="1"/>"##, poly(pts));
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#999999" stroke-dasharray="4 3"/>"##, poly(scene.route.points()));
    for a in &scene.agents {
        let c = a.footprint_at(0.0).corners();
        let _ = writeln!(s, r##"<polygon points="{}" fill="#d9534f" fill-opacity="0.7"/>"##, poly(&c));
    }
    let ego = cfg.ego_footprint(&scene.ego.pose).corners();
    let _ = writeln!(s, r##"<polygon points="{}" fill="#337ab7" fill-opacity="0.8"/>"##, poly(&ego));
    if let Some(ticks) = ticks {
        let trace: Vec<Point> = ticks.iter().map(|t| [t.ego.x, t.ego.y]).collect();
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#5cb85c" stroke-width="2"/>"##, poly(&trace));
    }
    if let Some(plan) = plan {
        for w in &plan.waypoints {
            let g = scene.to_scene_frame(w);
            let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#f0ad4e"/>"##, (g.x - x0) * scale, (y1 - g.y) * scale);
        }
    }
    s.push_str("</svg>\n");
    s
}
