//! Seeded synthetic scenes, the scripted expert and corpus files.
//!
//! Every scene starts with the ego at the scene origin facing `+x`, on the
//! route. The expert is a kinematic pure-pursuit follower with a
//! curvature-, lead- and comfort-aware speed profile. Fork scenes carry two
//! detour centerlines in [`Scene::alternatives`]; the expert picks one at
//! random, which makes the demonstrations bimodal.
//!
//! Corpus file: JSON Lines. Line 1 is a header
//! `{"format":"diffplan-corpus","version":1,"scenes":<n>}`, then one scene per
//! line. All floats are rounded to 9 significant digits at generation time so
//! the text is platform independent and `load(save(c)) == c`.

use crate::error::{invalid, Error, Result};
use crate::geometry::{Point, Polygon};
use crate::rng::derive_rng;
use crate::scene::{Agent, EgoInit, NavCommand, Route, ScenarioKind, Scene};
use crate::simulator::{rollout, score_nc, score_trajectory, PdmsBreakdown, SimConfig};
use crate::traj::{EgoStatus, HistoryTrajectory, Trajectory, Waypoint};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{BufRead, Write};
use std::path::Path;

pub const CORPUS_FORMAT: &str = "diffplan-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// Route and road extent behind the ego, meters.
const BEHIND: f64 = 40.0;
/// Route and road extent ahead of the ego, meters.
const AHEAD: f64 = 160.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub counts: BTreeMap<ScenarioKind, usize>,
    pub lane_width: [f64; 2],
    pub ego_speed: [f64; 2],
    pub agent_count: [usize; 2],
    /// Absolute curvature range of CURVE scenes, 1/m.
    pub curvature: [f64; 2],
    /// Turn radius range of INTERSECTION_TURN scenes, m.
    pub turn_radius: [f64; 2],
    /// Lateral offset of each fork detour, m.
    pub fork_offset: f64,
    pub waypoints: usize,
    pub dt_waypoint: f64,
    pub history: usize,
    /// Minimum oracle PDMS a scene must reach to be kept.
    pub oracle_floor: f64,
    pub max_retries: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 20240601,
            counts: reference_counts(200),
            lane_width: [3.0, 4.0],
            ego_speed: [0.0, 15.0],
            agent_count: [0, 6],
            curvature: [0.01, 0.04],
            turn_radius: [8.0, 14.0],
            fork_offset: 3.5,
            waypoints: 8,
            dt_waypoint: 0.5,
            history: 4,
            oracle_floor: 0.8,
            max_retries: 200,
        }
    }
}

/// Kind mix used by the reference corpora, scaled to `total` scenes.
pub fn reference_counts(total: usize) -> BTreeMap<ScenarioKind, usize> {
    let weights = [
        (ScenarioKind::Straight, 3),
        (ScenarioKind::Curve, 4),
        (ScenarioKind::IntersectionTurn, 4),
        (ScenarioKind::LeadBrake, 3),
        (ScenarioKind::Narrowing, 3),
        (ScenarioKind::Fork, 3),
    ];
    let sum: usize = weights.iter().map(|w| w.1).sum();
    let mut counts: BTreeMap<_, _> = weights.iter().map(|&(k, w)| (k, total * w / sum)).collect();
    let mut left = total - counts.values().sum::<usize>();
    for (k, _) in weights.iter().cycle() {
        if left == 0 {
            break;
        }
        *counts.get_mut(k).expect("present") += 1;
        left -= 1;
    }
    counts
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2]| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::Config(format!("corpus.{name} must be an ordered finite range")))
            }
        };
        ordered("lane_width", self.lane_width)?;
        ordered("ego_speed", self.ego_speed)?;
        ordered("curvature", self.curvature)?;
        ordered("turn_radius", self.turn_radius)?;
        if self.agent_count[0] > self.agent_count[1] {
            return Err(Error::Config("corpus.agent_count must be ordered".into()));
        }
        if self.lane_width[0] < 2.6 {
            return Err(Error::Config("corpus.lane_width must be at least 2.6 m".into()));
        }
        if self.ego_speed[0] < 0.0 {
            return Err(Error::Config("corpus.ego_speed must be non-negative".into()));
        }
        if self.curvature[0] <= 0.0 || self.turn_radius[0] <= 4.0 {
            return Err(Error::Config("corpus.curvature must be positive and corpus.turn_radius above 4 m".into()));
        }
        if self.fork_offset <= 0.0 || self.fork_offset - self.lane_width[1] / 2.0 < 1.0 {
            return Err(Error::Config("corpus.fork_offset must leave a median at least 1 m wide on each side".into()));
        }
        if self.waypoints < 2 || !(self.dt_waypoint > 0.0) || self.history == 0 {
            return Err(Error::Config("corpus.waypoints >= 2, corpus.dt_waypoint > 0, corpus.history >= 1 required".into()));
        }
        if !(0.0..=1.0).contains(&self.oracle_floor) {
            return Err(Error::Config("corpus.oracle_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn duration(&self) -> f64 {
        self.waypoints as f64 * self.dt_waypoint
    }

    /// Kinds in scene order: blocks per kind, interleaved round-robin.
    fn schedule(&self) -> Vec<ScenarioKind> {
        let mut left = self.counts.clone();
        let mut out = Vec::with_capacity(self.total());
        while out.len() < self.total() {
            for (k, n) in left.iter_mut() {
                if *n > 0 {
                    out.push(*k);
                    *n -= 1;
                }
            }
        }
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Rounds to 9 significant digits.
pub fn quantize(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

fn quantize_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) => {
            if !(n.is_i64() || n.is_u64()) {
                if let Some(f) = n.as_f64() {
                    if let Some(q) = serde_json::Number::from_f64(quantize(f)) {
                        *n = q;
                    }
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(quantize_json),
        serde_json::Value::Object(o) => o.values_mut().for_each(quantize_json),
        _ => {}
    }
}

fn quantize_scene(scene: &Scene) -> Result<Scene> {
    let mut v = serde_json::to_value(scene)?;
    quantize_json(&mut v);
    Ok(serde_json::from_value(v)?)
}

/// Offsets a centerline sideways (left positive) point by point.
fn offset_polyline(route: &[Point], d: f64) -> Vec<Point> {
    let n = route.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i + 1 < n { (route[i], route[i + 1]) } else { (route[i - 1], route[i]) };
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = dx.hypot(dy);
            [route[i][0] - d * dy / len, route[i][1] + d * dx / len]
        })
        .collect()
}

/// Corridor polygon of half-width `w` around a polyline.
fn corridor(route: &[Point], w: f64) -> Vec<Point> {
    let mut pts = offset_polyline(route, -w);
    let mut left = offset_polyline(route, w);
    left.reverse();
    pts.extend(left);
    pts
}

fn straight_points(x0: f64, x1: f64, step: f64) -> Vec<Point> {
    let n = ((x1 - x0) / step).ceil() as usize;
    (0..=n).map(|i| [x0 + (x1 - x0) * i as f64 / n as f64, 0.0]).collect()
}

/// Straight lead-in, circular arc of signed curvature `k` through `angle`, straight run-out.
fn arc_route(lead_in: f64, k: f64, angle: f64, run_out: f64) -> Vec<Point> {
    let mut pts = straight_points(-BEHIND, lead_in, 2.0);
    let r = 1.0 / k.abs();
    let sign = k.signum();
    let arc_len = angle * r;
    let n = (arc_len / 1.0).ceil().max(2.0) as usize;
    let center = [lead_in, sign * r];
    for i in 1..=n {
        let phi = angle * i as f64 / n as f64;
        pts.push([center[0] + r * phi.sin(), center[1] - sign * r * phi.cos()]);
    }
    let end = *pts.last().expect("non-empty");
    let h = sign * angle;
    let m = (run_out / 2.0).ceil() as usize;
    for i in 1..=m {
        let d = run_out * i as f64 / m as f64;
        pts.push([end[0] + d * h.cos(), end[1] + d * h.sin()]);
    }
    pts
}

/// Centerline shifting sideways by `shift` with a half-cosine blend over `[x_a, x_b]`.
fn shifted_route(x_a: f64, x_b: f64, shift: f64, x_end: f64) -> Vec<Point> {
    let mut pts = straight_points(-BEHIND, x_a, 2.0);
    let n = ((x_b - x_a) / 0.5).ceil() as usize;
    for i in 1..=n {
        let x = x_a + (x_b - x_a) * i as f64 / n as f64;
        let f = (x - x_a) / (x_b - x_a);
        pts.push([x, shift * 0.5 * (1.0 - (PI * f).cos())]);
    }
    let m = ((x_end - x_b) / 2.0).ceil() as usize;
    for i in 1..=m {
        pts.push([x_b + (x_end - x_b) * i as f64 / m as f64, shift]);
    }
    pts
}

/// Parked cars well outside a straight road of half-width `w`.
fn parked_agents(rng: &mut ChaCha8Rng, count: usize, w: f64, x_range: [f64; 2], first_id: u32) -> Vec<Agent> {
    (0..count)
        .map(|i| {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let y = side * (w + 2.5 + rng.random_range(0.0..3.0));
            let x = uniform(rng, x_range);
            let heading = if rng.random_bool(0.5) { 0.0 } else { PI };
            Agent { id: first_id + i as u32, pose: Waypoint::new(x, y, heading), velocity: 0.0, length: 4.5, width: 1.9 }
        })
        .collect()
}

fn history_along(route: &Route, s_ego: f64, speed: f64, spec: &CorpusSpec, ego: &Waypoint) -> HistoryTrajectory {
    let waypoints = (0..spec.history)
        .map(|k| {
            let back = (spec.history - k) as f64 * spec.dt_waypoint * speed;
            ego.relative(&route.pose_at(s_ego - back))
        })
        .collect();
    HistoryTrajectory { dt_waypoint: spec.dt_waypoint, waypoints }
}

struct Draft {
    polygon: Vec<Point>,
    route: Vec<Point>,
    alternatives: Vec<Vec<Point>>,
    agents: Vec<Agent>,
    nav: NavCommand,
    speed: f64,
    yaw_rate: f64,
    speed_limit: f64,
}

fn limit_from(rng: &mut ChaCha8Rng, v0: f64, cap: f64) -> f64 {
    (v0 + rng.random_range(0.0..3.0)).min(cap).max(3.0).max(v0)
}

fn draft_scene(kind: ScenarioKind, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Draft {
    let lw = uniform(rng, spec.lane_width);
    let [vmin, vmax] = spec.ego_speed;
    let clutter = |rng: &mut ChaCha8Rng, reserved: usize| {
        let hi = spec.agent_count[1].saturating_sub(reserved);
        let lo = spec.agent_count[0].min(hi);
        rng.random_range(lo..=hi)
    };
    match kind {
        ScenarioKind::Straight => {
            let v0 = uniform(rng, [vmin, vmax]);
            let limit = if v0 >= 3.0 && rng.random_bool(0.3) { v0 } else { limit_from(rng, v0, f64::INFINITY) };
            let route = straight_points(-BEHIND, AHEAD, 4.0);
            let n = clutter(rng, 0);
            Draft {
                polygon: corridor(&route, lw),
                route,
                alternatives: vec![],
                agents: parked_agents(rng, n, lw, [-10.0, 80.0], 1),
                nav: NavCommand::FollowLane,
                speed: v0,
                yaw_rate: 0.0,
                speed_limit: limit,
            }
        }
        ScenarioKind::Curve => {
            let k = uniform(rng, spec.curvature) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let v_curve = (2.5 / k.abs()).sqrt();
            let v0 = uniform(rng, [vmin, vmax.min(v_curve)]);
            let lead_in = rng.random_range(0.0..15.0);
            let angle = (FRAC_PI_2).min(120.0 * k.abs());
            let route = arc_route(lead_in, k, angle, AHEAD);
            let limit = limit_from(rng, v0, v_curve);
            Draft {
                polygon: corridor(&route, lw),
                route,
                alternatives: vec![],
                agents: vec![],
                nav: NavCommand::FollowLane,
                speed: v0,
                yaw_rate: if lead_in < 1e-9 { v0 * k } else { 0.0 },
                speed_limit: limit,
            }
        }
        ScenarioKind::IntersectionTurn => {
            let r = uniform(rng, spec.turn_radius);
            let left = rng.random_bool(0.5);
            let v_turn = (2.5 * r).sqrt();
            let v0 = uniform(rng, [vmin, vmax.min(12.0)]);
            let x_s = rng.random_range(3.0..12.0) + v0 * 1.5;
            let x_c = x_s + r;
            let k = if left { 1.0 / r } else { -1.0 / r };
            let route = arc_route(x_s, k, FRAC_PI_2, 100.0);
            let w = lw;
            let e = (0.586 * r - 2.0 * w + 4.5).max(1.0);
            let n_end = r + 100.0;
            let polygon = vec![
                [-BEHIND, -w],
                [x_c - w - e, -w],
                [x_c - w, -w - e],
                [x_c - w, -n_end],
                [x_c + w, -n_end],
                [x_c + w, -w - e],
                [x_c + w, w + e],
                [x_c + w, n_end],
                [x_c - w, n_end],
                [x_c - w, w + e],
                [x_c - w - e, w],
                [-BEHIND, w],
            ];
            let n = clutter(rng, 0);
            let agents = parked_agents(rng, n, w, [-20.0, (x_c - w - e - 4.0).max(-19.0)], 1);
            Draft {
                polygon,
                route,
                alternatives: vec![],
                agents,
                nav: if left { NavCommand::TurnLeft } else { NavCommand::TurnRight },
                speed: v0,
                yaw_rate: 0.0,
                speed_limit: limit_from(rng, v0, v_turn + 3.0),
            }
        }
        ScenarioKind::LeadBrake => {
            let v0 = uniform(rng, [vmin.max(5.0), vmax.max(5.0)]);
            let stopped = rng.random_bool(0.3);
            let v_lead = if stopped { 0.0 } else { rng.random_range(0.3..0.7) * v0 };
            let dv = v0 - v_lead;
            let gap = dv * dv / 3.0 + 8.0 + v0 * 0.5 + rng.random_range(0.0..8.0);
            let lead_len = 4.5;
            let x_lead = 2.0 + gap + lead_len / 2.0;
            let route = straight_points(-BEHIND, AHEAD, 4.0);
            let mut agents = vec![Agent { id: 1, pose: Waypoint::new(x_lead, 0.0, 0.0), velocity: v_lead, length: lead_len, width: 1.9 }];
            let n = clutter(rng, 1);
            agents.extend(parked_agents(rng, n, lw, [-10.0, 80.0], 2));
            Draft {
                polygon: corridor(&route, lw),
                route,
                alternatives: vec![],
                agents,
                nav: if stopped { NavCommand::Stop } else { NavCommand::FollowLane },
                speed: v0,
                yaw_rate: 0.0,
                speed_limit: limit_from(rng, v0, f64::INFINITY),
            }
        }
        ScenarioKind::Narrowing => {
            let v0 = uniform(rng, [vmin.max(3.0), vmax.max(3.0)]);
            let y_r = rng.random_range(-0.7..0.0);
            let x_n = v0 * 1.5 + 12.0 + rng.random_range(0.0..10.0);
            let shift = (lw + y_r) / 2.0;
            let route = shifted_route(x_n - 18.0, x_n + 4.0, shift, AHEAD);
            let polygon = vec![[-BEHIND, -lw], [x_n - 6.0, -lw], [x_n + 4.0, y_r], [AHEAD, y_r], [AHEAD, lw], [-BEHIND, lw]];
            let n = clutter(rng, 0);
            Draft {
                polygon,
                route,
                alternatives: vec![],
                agents: parked_agents(rng, n, lw, [-10.0, 80.0], 1),
                nav: NavCommand::FollowLane,
                speed: v0,
                yaw_rate: 0.0,
                speed_limit: limit_from(rng, v0, f64::INFINITY),
            }
        }
        ScenarioKind::Fork => {
            let v0 = uniform(rng, [vmin.max(6.0), vmax.min(12.0).max(6.0)]);
            let a = spec.fork_offset;
            let outer = a + lw / 2.0;
            let median = a - lw / 2.0;
            let obs_len = 4.5;
            let x_obs = v0 * 3.0 + rng.random_range(5.0..8.0);
            let x_m = x_obs - obs_len / 2.0;
            let x_b = x_m - 4.0;
            let x_a = 2.0;
            let route = straight_points(-BEHIND, AHEAD, 4.0);
            let polygon = vec![
                [-BEHIND, -outer],
                [AHEAD, -outer],
                [AHEAD, -median],
                [x_m, -median],
                [x_m, median],
                [AHEAD, median],
                [AHEAD, outer],
                [-BEHIND, outer],
            ];
            let mut agents = vec![Agent { id: 1, pose: Waypoint::new(x_obs, 0.0, 0.0), velocity: 0.0, length: obs_len, width: 1.9 }];
            let n = clutter(rng, 1);
            agents.extend(parked_agents(rng, n, outer, [-10.0, 80.0], 2));
            Draft {
                polygon,
                route,
                alternatives: vec![shifted_route(x_a, x_b, a, AHEAD), shifted_route(x_a, x_b, -a, AHEAD)],
                agents,
                nav: NavCommand::FollowLane,
                speed: v0,
                yaw_rate: 0.0,
                speed_limit: limit_from(rng, v0, f64::INFINITY),
            }
        }
    }
}

fn build_scene(id: u64, kind: ScenarioKind, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let d = draft_scene(kind, spec, rng);
    let route = Route::new(d.route)?;
    let s_ego = route.project([0.0, 0.0]).s;
    let pose = Waypoint::new(0.0, 0.0, 0.0);
    let history = history_along(&route, s_ego, d.speed, spec, &pose);
    let scene = Scene {
        id,
        kind,
        drivable_area: Polygon::new(d.polygon)?,
        route,
        ego: EgoInit { pose, status: EgoStatus { speed: d.speed, acceleration: 0.0, yaw_rate: d.yaw_rate } },
        history,
        agents: d.agents,
        nav: d.nav,
        speed_limit: d.speed_limit,
        duration: spec.duration(),
        alternatives: d.alternatives.into_iter().map(Route::new).collect::<Result<_>>()?,
    };
    let scene = quantize_scene(&scene)?;
    scene.validate()?;
    Ok(scene)
}

/// Expert tuning. Limits sit inside the simulator's comfort bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub max_accel: f64,
    pub max_decel: f64,
    /// Deceleration assumed when previewing speed limits ahead.
    pub preview_decel: f64,
    pub max_jerk: f64,
    pub max_lat_accel: f64,
    pub max_yaw_rate: f64,
    /// Maximum change of path curvature per second.
    pub max_curvature_rate: f64,
    pub speed_gain: f64,
    pub standstill_gap: f64,
    pub time_headway: f64,
    pub dt: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            max_accel: 1.8,
            max_decel: 3.0,
            preview_decel: 1.5,
            max_jerk: 3.0,
            max_lat_accel: 2.5,
            max_yaw_rate: 0.7,
            max_curvature_rate: 0.25,
            speed_gain: 1.5,
            standstill_gap: 5.0,
            time_headway: 1.0,
            dt: 0.1,
        }
    }
}

/// Curvature of the route at arc length `s` from the heading change over ±1 m.
fn route_curvature(route: &Route, s: f64) -> f64 {
    let a = route.pose_at(s - 1.0);
    let b = route.pose_at(s + 1.0);
    let ds = ((s + 1.0).min(route.length()) - (s - 1.0).max(0.0)).max(1e-9);
    crate::traj::wrap_angle(b.heading - a.heading) / ds
}

/// Expert along a specific centerline (`None` for the scene route).
pub fn expert_on(scene: &Scene, variant: Option<usize>, waypoints: usize, dt_waypoint: f64, cfg: &ExpertConfig) -> Result<Trajectory> {
    let path = match variant {
        None => &scene.route,
        Some(i) => scene.alternatives.get(i).ok_or_else(|| Error::Validation(format!("scene {} has no detour {i}", scene.id)))?,
    };
    let steps_per_wp = (dt_waypoint / cfg.dt).round() as usize;
    if steps_per_wp == 0 || ((dt_waypoint / cfg.dt) - steps_per_wp as f64).abs() > 1e-9 {
        return invalid("waypoint spacing must be a multiple of the expert step");
    }
    let dt = cfg.dt;
    let mut pose = scene.ego.pose;
    let mut v = scene.ego.status.speed;
    let mut acc = scene.ego.status.acceleration;
    let mut kappa = if v > 0.1 { scene.ego.status.yaw_rate / v } else { 0.0 };
    let mut out = Vec::with_capacity(waypoints);
    let leads: Vec<_> = scene.agents.iter().filter(|a| path.project([a.pose.x, a.pose.y]).lateral.abs() < 2.0).collect();
    for step in 1..=waypoints * steps_per_wp {
        let t = (step - 1) as f64 * dt;
        let here = path.project([pose.x, pose.y]);
        // Speed target: limit, curvature preview and lead following.
        let mut v_des = scene.speed_limit;
        let horizon = (v * v / (2.0 * cfg.preview_decel) + 10.0).min(80.0);
        let mut ds = 0.0;
        while ds <= horizon {
            let k = route_curvature(path, here.s + ds).abs();
            if k > 1e-6 {
                let cap = (cfg.max_lat_accel / k).sqrt().min((cfg.max_yaw_rate / k).max(0.0));
                v_des = v_des.min((cap * cap + 2.0 * cfg.preview_decel * ds).sqrt());
            }
            ds += 1.0;
        }
        for a in &leads {
            let p = a.pose_at(t);
            let lp = path.project([p.x, p.y]);
            let gap = lp.s - here.s - (a.length + 4.0) / 2.0;
            if lp.s <= here.s {
                continue;
            }
            let lead_v = a.velocity;
            let room = (gap - cfg.standstill_gap - cfg.time_headway * lead_v).max(0.0);
            v_des = v_des.min(lead_v + (2.0 * cfg.preview_decel * room).sqrt());
        }
        let a_cmd = (cfg.speed_gain * (v_des - v)).clamp(-cfg.max_decel, cfg.max_accel);
        acc += (a_cmd - acc).clamp(-cfg.max_jerk * dt, cfg.max_jerk * dt);
        if v + acc * dt < 0.0 {
            acc = -v / dt;
        }
        v += acc * dt;
        // Pure pursuit steering.
        let look = (4.0 + 0.8 * v).min(20.0);
        let target = path.pose_at(here.s + look);
        let alpha = (target.y - pose.y).atan2(target.x - pose.x) - pose.heading;
        let dist = (target.x - pose.x).hypot(target.y - pose.y).max(1e-6);
        let mut k_cmd = 2.0 * alpha.sin() / dist;
        if v > 1e-6 {
            let cap = (cfg.max_lat_accel / (v * v)).min(cfg.max_yaw_rate / v);
            k_cmd = k_cmd.clamp(-cap, cap);
        }
        kappa += (k_cmd - kappa).clamp(-cfg.max_curvature_rate * dt, cfg.max_curvature_rate * dt);
        let heading = pose.heading + v * kappa * dt;
        let mid = pose.heading + 0.5 * v * kappa * dt;
        pose = Waypoint::new(pose.x + v * dt * mid.cos(), pose.y + v * dt * mid.sin(), heading);
        if step % steps_per_wp == 0 {
            out.push(scene.to_ego_frame(&pose));
        }
    }
    Trajectory::new(out, dt_waypoint)
}

/// Scripted expert. On scenes with detours, `rng` picks one uniformly.
pub fn oracle_expert<R: Rng + ?Sized>(scene: &Scene, rng: &mut R, waypoints: usize, dt_waypoint: f64, cfg: &ExpertConfig) -> Result<Trajectory> {
    let variant = match scene.alternatives.len() {
        0 => None,
        n => Some(rng.random_range(0..n)),
    };
    expert_on(scene, variant, waypoints, dt_waypoint, cfg)
}

/// All expert variants of a scene (one, or one per detour).
pub fn expert_variants(scene: &Scene, waypoints: usize, dt_waypoint: f64, cfg: &ExpertConfig) -> Result<Vec<Trajectory>> {
    if scene.alternatives.is_empty() {
        Ok(vec![expert_on(scene, None, waypoints, dt_waypoint, cfg)?])
    } else {
        (0..scene.alternatives.len()).map(|i| expert_on(scene, Some(i), waypoints, dt_waypoint, cfg)).collect()
    }
}

/// Waypoint-wise mean of several trajectories.
pub fn average_trajectory(trajs: &[Trajectory]) -> Result<Trajectory> {
    let first = trajs.first().ok_or_else(|| Error::Validation("nothing to average".into()))?;
    let n = trajs.len() as f64;
    let wps = (0..first.len())
        .map(|i| {
            let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
            for t in trajs {
                let w = t.waypoints[i];
                x += w.x;
                y += w.y;
                s += w.heading.sin();
                c += w.heading.cos();
            }
            Waypoint::new(x / n, y / n, s.atan2(c))
        })
        .collect();
    Trajectory::new(wps, first.dt_waypoint)
}

/// Oracle scores of a scene, one per variant; errors if any variant is
/// infeasible or (for forks) the averaged demonstration misses the obstacle.
pub fn check_feasibility(scene: &Scene, spec: &CorpusSpec, expert: &ExpertConfig, sim: &SimConfig) -> Result<Vec<PdmsBreakdown>> {
    let variants = expert_variants(scene, spec.waypoints, spec.dt_waypoint, expert)?;
    let mut out = Vec::with_capacity(variants.len());
    for t in &variants {
        let b = score_trajectory(scene, t, sim)?;
        if b.nc < 1.0 || b.dac < 1.0 || b.comfort < 1.0 || b.ttc < 1.0 || b.pdms < spec.oracle_floor {
            return invalid(format!("scene {}: oracle scored {b:?}", scene.id));
        }
        out.push(b);
    }
    if scene.kind == ScenarioKind::Fork {
        let mean = average_trajectory(&variants)?;
        let ticks = rollout(scene, &mean, sim.dt_tick)?;
        let obstacle_hit = score_nc(&ticks, sim) == 0.0;
        if !obstacle_hit {
            return invalid(format!("scene {}: averaged fork demonstration misses the obstacle", scene.id));
        }
    }
    Ok(out)
}

/// Generated scenes with the oracle scores found while checking them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub scenes: Vec<Scene>,
    pub oracle: Vec<Vec<PdmsBreakdown>>,
    /// Rejected draws per scene.
    pub retries: Vec<usize>,
}

pub fn generate_corpus(spec: &CorpusSpec, expert: &ExpertConfig, sim: &SimConfig) -> Result<GeneratedCorpus> {
    use rayon::prelude::*;
    spec.validate()?;
    let kinds = spec.schedule();
    let built: Vec<Result<(Scene, Vec<PdmsBreakdown>, usize)>> = kinds
        .par_iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mut rng = derive_rng(spec.seed, "corpus.scene", i as u64);
            let mut last_err = None;
            for attempt in 0..=spec.max_retries {
                match build_scene(i as u64, kind, spec, &mut rng).and_then(|s| {
                    let b = check_feasibility(&s, spec, expert, sim)?;
                    Ok((s, b))
                }) {
                    Ok((s, b)) => return Ok((s, b, attempt)),
                    Err(e) => last_err = Some(e),
                }
            }
            Err(Error::Validation(format!(
                "scene {i} ({kind:?}) infeasible after {} draws: {}",
                spec.max_retries + 1,
                last_err.map(|e| e.to_string()).unwrap_or_default()
            )))
        })
        .collect();
    let mut out = GeneratedCorpus { scenes: vec![], oracle: vec![], retries: vec![] };
    for r in built {
        let (s, b, n) = r?;
        out.scenes.push(s);
        out.oracle.push(b);
        out.retries.push(n);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    scenes: usize,
}

pub fn corpus_to_string(scenes: &[Scene]) -> Result<String> {
    let mut s = serde_json::to_string(&CorpusHeader { format: CORPUS_FORMAT.into(), version: CORPUS_VERSION, scenes: scenes.len() })?;
    s.push('\n');
    for scene in scenes {
        s.push_str(&serde_json::to_string(scene)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn save_corpus(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(corpus_to_string(scenes)?.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Scene>> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty corpus file".into() })??;
    let header: CorpusHeader = serde_json::from_str(&header).map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if header.format != CORPUS_FORMAT {
        return Err(Error::Parse { line: 1, msg: format!("not a corpus file (format {:?})", header.format) });
    }
    if header.version != CORPUS_VERSION {
        return Err(Error::Version { found: header.version, expected: CORPUS_VERSION });
    }
    let mut scenes = Vec::with_capacity(header.scenes);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        scene.validate().map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        scenes.push(scene);
    }
    if scenes.len() != header.scenes {
        return Err(Error::Parse { line: scenes.len() + 2, msg: format!("header promises {} scenes, found {}", header.scenes, scenes.len()) });
    }
    Ok(scenes)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Scene>> {
    parse_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Companion summary of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub scenes: usize,
    pub counts: BTreeMap<ScenarioKind, usize>,
    /// Lowest oracle PDMS over all scenes and variants.
    pub oracle_pdms_floor: f64,
    pub oracle_pdms_mean: f64,
    pub spec: CorpusSpec,
}

impl CorpusManifest {
    pub fn new(spec: &CorpusSpec, corpus: &GeneratedCorpus) -> Self {
        let all: Vec<f64> = corpus.oracle.iter().flatten().map(|b| b.pdms).collect();
        let floor = all.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
        Self {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            seed: spec.seed,
            scenes: corpus.scenes.len(),
            counts: spec.counts.clone(),
            oracle_pdms_floor: if all.is_empty() { 0.0 } else { quantize(floor) },
            oracle_pdms_mean: quantize(mean),
            spec: spec.clone(),
        }
    }
}
