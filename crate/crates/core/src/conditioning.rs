//! Deterministic scene featurizer producing the denoiser's conditioning.
//!
//! Token layout (`L = route_samples + max_agents + 2` rows):
//!
//! ```text
//! route_samples  centerline samples every `route_spacing` m ahead of the ego:
//!                [x/40, y/20, cos h, sin h, left clearance/5, right clearance/5, inside, 1]
//! max_agents     nearest agents first (ties by id), zero rows as padding:
//!                [x/40, y/20, cos h, sin h, vx/15, vy/15, length/5, width/5, 1]
//! 1              navigation command one-hot
//! 1              ego status [speed/15, acceleration/4, yaw rate, speed limit/15, 1]
//! ```
//!
//! All features are in the ego frame. Each token type has its own fixed
//! Gaussian projection to `D` derived from the featurizer seed; nothing here
//! is trained.

use crate::denoiser::ConditioningBundle;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::rng::derive_rng;
use crate::scene::{NavCommand, Scene};
use crate::tensor::Mat;
use crate::traj::{normalize_history, EgoStatus, HistoryTrajectory, NormalizationSpec};
use crate::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const ROUTE_FEATURES: usize = 8;
pub const AGENT_FEATURES: usize = 9;
pub const NAV_FEATURES: usize = 4;
pub const EGO_FEATURES: usize = 5;

/// Clearances beyond this are reported as this value, meters.
const MAX_CLEARANCE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFeaturizerConfig {
    /// Token count `L`.
    pub tokens: usize,
    /// Token width `D`.
    pub width: usize,
    pub route_samples: usize,
    pub max_agents: usize,
    /// Spacing between route samples, meters.
    pub route_spacing: f64,
    pub seed: u64,
}

impl Default for SceneFeaturizerConfig {
    fn default() -> Self {
        Self { tokens: 16, width: 64, route_samples: 8, max_agents: 6, route_spacing: 8.0, seed: 7 }
    }
}

impl SceneFeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.route_samples + self.max_agents + 2 != self.tokens {
            return Err(Error::Config(format!(
                "conditioning.route_samples ({}) + conditioning.max_agents ({}) + 2 must equal conditioning.tokens ({})",
                self.route_samples, self.max_agents, self.tokens
            )));
        }
        if self.width == 0 || self.route_samples == 0 {
            return Err(Error::Config("conditioning.width and conditioning.route_samples must be at least 1".into()));
        }
        if !(self.route_spacing > 0.0) {
            return Err(Error::Config("conditioning.route_spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Featurizer with its projections materialized.
#[derive(Clone, Debug)]
pub struct SceneFeaturizer {
    cfg: SceneFeaturizerConfig,
    norm: NormalizationSpec,
    route: Mat<f64>,
    agent: Mat<f64>,
    nav: Mat<f64>,
    ego_token: Mat<f64>,
    ego_vector: Mat<f64>,
}

fn projection(seed: u64, label: &str, rows: usize, cols: usize) -> Mat<f64> {
    let mut rng = derive_rng(seed, label, 0);
    let std = 1.0 / (rows as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

impl SceneFeaturizer {
    pub fn new(cfg: SceneFeaturizerConfig, norm: NormalizationSpec) -> Result<Self> {
        cfg.validate()?;
        norm.validate()?;
        let d = cfg.width;
        Ok(Self {
            cfg,
            norm,
            route: projection(cfg.seed, "proj.route", ROUTE_FEATURES, d),
            agent: projection(cfg.seed, "proj.agent", AGENT_FEATURES, d),
            nav: projection(cfg.seed, "proj.nav", NAV_FEATURES, d),
            ego_token: projection(cfg.seed, "proj.ego_token", EGO_FEATURES, d),
            ego_vector: projection(cfg.seed, "proj.ego_vector", EGO_FEATURES, d),
        })
    }

    pub fn config(&self) -> &SceneFeaturizerConfig {
        &self.cfg
    }

    /// Raw feature rows before projection, in token order.
    pub fn raw_tokens(&self, scene: &Scene, nav: NavCommand, ego: &EgoStatus) -> Result<Vec<Vec<f64>>> {
        scene.validate()?;
        let mut rows = Vec::with_capacity(self.cfg.tokens);
        let s0 = scene.route.project([scene.ego.pose.x, scene.ego.pose.y]).s;
        for k in 0..self.cfg.route_samples {
            let g = scene.route.pose_at(s0 + k as f64 * self.cfg.route_spacing);
            let l = scene.to_ego_frame(&g);
            let p: Point = [g.x, g.y];
            let inside = scene.drivable_area.contains(p);
            let (sn, cs) = g.heading.sin_cos();
            let clearance = |dir: Point| {
                if inside {
                    scene.drivable_area.ray_distance(p, dir).unwrap_or(MAX_CLEARANCE).min(MAX_CLEARANCE)
                } else {
                    0.0
                }
            };
            let (cl, cr) = (clearance([-sn, cs]), clearance([sn, -cs]));
            let (hs, hc) = l.heading.sin_cos();
            rows.push(vec![l.x / 40.0, l.y / 20.0, hc, hs, cl / 5.0, cr / 5.0, if inside { 1.0 } else { 0.0 }, 1.0]);
        }
        let mut agents: Vec<_> = scene.agents.iter().collect();
        let ego_pos = scene.ego.pose;
        agents.sort_by(|a, b| {
            let da = (a.pose.x - ego_pos.x).hypot(a.pose.y - ego_pos.y);
            let db = (b.pose.x - ego_pos.x).hypot(b.pose.y - ego_pos.y);
            da.total_cmp(&db).then(a.id.cmp(&b.id))
        });
        for k in 0..self.cfg.max_agents {
            rows.push(match agents.get(k) {
                Some(a) => {
                    let l = scene.to_ego_frame(&a.pose);
                    let (hs, hc) = l.heading.sin_cos();
                    vec![
                        l.x / 40.0,
                        l.y / 20.0,
                        hc,
                        hs,
                        a.velocity * hc / 15.0,
                        a.velocity * hs / 15.0,
                        a.length / 5.0,
                        a.width / 5.0,
                        1.0,
                    ]
                }
                None => vec![0.0; AGENT_FEATURES],
            });
        }
        let mut one_hot = vec![0.0; NAV_FEATURES];
        one_hot[nav.index()] = 1.0;
        rows.push(one_hot);
        rows.push(ego_features(ego, scene.speed_limit));
        Ok(rows)
    }

    /// Builds the conditioning bundle for a scene.
    pub fn embed<T: Scalar>(&self, scene: &Scene, nav: NavCommand, ego: &EgoStatus, hist: &HistoryTrajectory) -> Result<ConditioningBundle<T>> {
        ego.validate()?;
        let raw = self.raw_tokens(scene, nav, ego)?;
        let r = self.cfg.route_samples;
        let a = self.cfg.max_agents;
        let mut tokens = Mat::zeros(self.cfg.tokens, self.cfg.width);
        for (i, row) in raw.iter().enumerate() {
            let proj = if i < r {
                &self.route
            } else if i < r + a {
                &self.agent
            } else if i == r + a {
                &self.nav
            } else {
                &self.ego_token
            };
            let out = Mat::row_vector(row.clone()).matmul(proj);
            for (c, v) in out.data().iter().enumerate() {
                tokens.set(i, c, T::lit(*v));
            }
        }
        let ego_vec = Mat::row_vector(ego_features(ego, scene.speed_limit)).matmul(&self.ego_vector).cast::<T>();
        let history = normalize_history::<T>(hist, &self.norm)?;
        ConditioningBundle::new(tokens, ego_vec, history)
    }

    /// Conditioning for a scene's own command, ego status and history.
    pub fn embed_scene_defaults<T: Scalar>(&self, scene: &Scene) -> Result<ConditioningBundle<T>> {
        self.embed(scene, scene.nav, &scene.ego.status, &scene.history)
    }
}

fn ego_features(ego: &EgoStatus, speed_limit: f64) -> Vec<f64> {
    vec![ego.speed / 15.0, ego.acceleration / 4.0, ego.yaw_rate, speed_limit / 15.0, 1.0]
}

/// One-shot form of [`SceneFeaturizer::embed`].
pub fn embed_scene<T: Scalar>(
    scene: &Scene,
    nav: NavCommand,
    ego: &EgoStatus,
    hist: &HistoryTrajectory,
    cfg: &SceneFeaturizerConfig,
    norm: &NormalizationSpec,
) -> Result<ConditioningBundle<T>> {
    SceneFeaturizer::new(*cfg, *norm)?.embed(scene, nav, ego, hist)
}
