//! Trajectory planner wrapping a trained denoiser and the strided sampler.

use crate::conditioning::SceneFeaturizer;
use crate::denoiser::{ConditioningBundle, DenoiserParams};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::scene::Scene;
use crate::scheduler::{sample_chain_with, strided_timesteps, ClipConfig, DiffusionChain, NoiseSchedule};
use crate::tensor::Mat;
use crate::traj::{denormalize, NormalizationSpec, Trajectory};
use crate::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Denoising steps at inference, strided evenly over the schedule.
    pub steps: usize,
    /// Floor on the per-step sampling std.
    pub sigma_min: f64,
    pub clip: ClipConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 5, sigma_min: 0.02, clip: ClipConfig::default() }
    }
}

impl SamplerConfig {
    pub fn validate(&self, max_timestep: usize) -> Result<()> {
        if self.steps == 0 || self.steps > max_timestep {
            return Err(Error::Config(format!("sampler.steps must lie in 1..={max_timestep}")));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Config("sampler.sigma_min must lie in (0, 1)".into()));
        }
        if !(self.clip.x0_clip > 0.0 && self.clip.noise_clip > 0.0) {
            return Err(Error::Config("sampler.clip bounds must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to turn a scene into a planned trajectory.
#[derive(Clone, Copy, Debug)]
pub struct Planner<'a, T> {
    pub params: &'a DenoiserParams<T>,
    pub featurizer: &'a SceneFeaturizer,
    pub norm: NormalizationSpec,
    pub sched: &'a NoiseSchedule<T>,
    pub dt_waypoint: f64,
}

impl<T: Scalar> Planner<'_, T> {
    pub fn condition(&self, scene: &Scene) -> Result<ConditioningBundle<T>> {
        self.featurizer.embed_scene_defaults(scene)
    }

    /// Samples one chain of `steps` strided steps with std floor `sigma_min`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        cond: &ConditioningBundle<T>,
        steps: usize,
        sigma_min: f64,
        clip: &ClipConfig,
        rng: &mut R,
    ) -> Result<DiffusionChain<T>> {
        self.sample_with(cond, steps, sigma_min, clip, false, rng)
    }

    /// [`Planner::sample`], optionally drawing the final step from its floored std too.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        cond: &ConditioningBundle<T>,
        steps: usize,
        sigma_min: f64,
        clip: &ClipConfig,
        final_noise: bool,
        rng: &mut R,
    ) -> Result<DiffusionChain<T>> {
        let timesteps = strided_timesteps(self.sched.steps(), steps)?;
        let shape = (self.params.config().waypoints, 3);
        let predict = |x: &Mat<T>, t| self.params.predict_noise(x, t, cond);
        sample_chain_with(predict, shape, self.sched, &timesteps, T::lit(sigma_min), clip, final_noise, rng)
    }

    pub fn decode(&self, chain: &DiffusionChain<T>) -> Result<Trajectory> {
        denormalize(chain.final_state(), &self.norm, self.dt_waypoint)
    }

    /// Plans a scene with the sampling stream `(seed, "plan", scene.id)`.
    pub fn plan(&self, scene: &Scene, cfg: &SamplerConfig, seed: u64) -> Result<Trajectory> {
        let cond = self.condition(scene)?;
        let mut rng = derive_rng(seed, "plan", scene.id);
        let chain = self.sample(&cond, cfg.steps, cfg.sigma_min, &cfg.clip, &mut rng)?;
        self.decode(&chain)
    }
}
