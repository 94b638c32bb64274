//! The unified run configuration: one JSON document for every stage.

use diffplan_core::conditioning::SceneFeaturizerConfig;
use diffplan_core::corpus::{reference_counts, CorpusSpec, ExpertConfig};
use diffplan_core::denoiser::DenoiserConfig;
use diffplan_core::il::IlConfig;
use diffplan_core::policy::SamplerConfig;
use diffplan_core::rl::RlConfig;
use diffplan_core::rng::derive_seed;
use diffplan_core::simulator::SimConfig;
use diffplan_core::traj::NormalizationSpec;
use diffplan_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "DIFFPLAN_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Diffusion steps `T`.
    pub steps: usize,
    /// Floor on every per-step std.
    pub sigma_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 100, sigma_min: 0.02 }
    }
}

/// The held-out split: same generator settings as `corpus`, its own seed stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeldoutConfig {
    pub scenes: usize,
}

impl Default for HeldoutConfig {
    fn default() -> Self {
        Self { scenes: 50 }
    }
}

/// Every module's settings plus the master seed.
///
/// Module seed fields (`corpus.seed`, `conditioning.seed`, `il.seed`,
/// `rl.seed`) are not read from the document: [`RunConfig::resolve`]
/// derives them from `seed` so all randomness flows from one number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub conditioning: SceneFeaturizerConfig,
    pub normalization: NormalizationSpec,
    pub corpus: CorpusSpec,
    pub heldout: HeldoutConfig,
    pub expert: ExpertConfig,
    pub sim: SimConfig,
    /// Imitation stage. Desk defaults; the reference run used lr 1e-4, batch 512, 200 epochs.
    pub il: IlConfig,
    /// Fine-tuning stage: gamma 0.6, lambda_bc 0.01 and sampling floor 0.02 are the best ablation values.
    pub rl: RlConfig,
    /// Inference sampler used by evaluation (5 strided steps).
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20240601,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            conditioning: SceneFeaturizerConfig::default(),
            normalization: NormalizationSpec::default(),
            corpus: CorpusSpec { counts: reference_counts(200), ..CorpusSpec::default() },
            heldout: HeldoutConfig::default(),
            expert: ExpertConfig::default(),
            sim: SimConfig::default(),
            il: IlConfig { steps: Some(2000), ..IlConfig::default() },
            rl: RlConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Named seed streams derived from the master seed.
pub mod stream {
    pub const CORPUS: &str = "corpus";
    pub const HELDOUT: &str = "corpus.heldout";
    pub const FORKS: &str = "corpus.forks";
    pub const CONDITIONING: &str = "conditioning";
    pub const INIT: &str = "denoiser.init";
    pub const IL: &str = "il";
    pub const RL: &str = "rl";
    pub const EVAL: &str = "eval";
}

impl RunConfig {
    /// Parses a config document. Fields not present keep their defaults;
    /// unknown fields are rejected by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn from_value(value: Value) -> Result<Self> {
        let mut full = serde_json::to_value(Self::default())?;
        merge(&mut full, &value, "")?;
        serde_json::from_value(full).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Applies one `dotted.path=value` override. The value is read as JSON,
    /// falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form path=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut full = serde_json::to_value(&*self)?;
        let mut slot = &mut full;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown config field `{path}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(full).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    /// Fills the module seeds from the master seed.
    pub fn resolve(mut self) -> Self {
        let s = self.seed;
        self.corpus.seed = derive_seed(s, stream::CORPUS, 0);
        self.conditioning.seed = derive_seed(s, stream::CONDITIONING, 0);
        self.il.seed = derive_seed(s, stream::IL, 0);
        self.rl.seed = derive_seed(s, stream::RL, 0);
        self
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, stream::INIT, 0)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, stream::EVAL, 0)
    }

    /// Spec of the held-out split.
    pub fn heldout_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: derive_seed(self.seed, stream::HELDOUT, 0),
            counts: reference_counts(self.heldout.scenes),
            ..self.corpus.clone()
        }
    }

    /// Every module's own checks plus agreement of the shared sizes.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.denoiser.validate()?;
        self.conditioning.validate()?;
        self.corpus.validate()?;
        self.sim.validate()?;
        self.il.validate()?;
        self.normalization.validate().map_err(|e| Error::Config(format!("normalization: {e}")))?;
        let t = self.schedule.steps;
        if t == 0 {
            return cfg_err("schedule.steps must be at least 1".into());
        }
        if !(self.schedule.sigma_min > 0.0 && self.schedule.sigma_min < 1.0) {
            return cfg_err("schedule.sigma_min must lie in (0, 1)".into());
        }
        self.rl.validate(t)?;
        self.sampler.validate(t)?;
        let agree = [
            ("denoiser.waypoints", self.denoiser.waypoints, "corpus.waypoints", self.corpus.waypoints),
            ("denoiser.width", self.denoiser.width, "conditioning.width", self.conditioning.width),
            ("denoiser.cond_tokens", self.denoiser.cond_tokens, "conditioning.tokens", self.conditioning.tokens),
            ("denoiser.history", self.denoiser.history, "corpus.history", self.corpus.history),
            ("denoiser.max_timestep", self.denoiser.max_timestep, "schedule.steps", t),
        ];
        for (a, va, b, vb) in agree {
            if va != vb {
                return cfg_err(format!("{a} ({va}) must equal {b} ({vb})"));
            }
        }
        if self.sampler.sigma_min < self.schedule.sigma_min || self.rl.sampling_sigma_min < self.schedule.sigma_min {
            return cfg_err("sampler.sigma_min and rl.sampling_sigma_min must be at least schedule.sigma_min".into());
        }
        let ratio = self.corpus.dt_waypoint / self.sim.dt_tick;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return cfg_err(format!(
                "corpus.dt_waypoint ({}) must be a whole multiple of sim.dt_tick ({})",
                self.corpus.dt_waypoint, self.sim.dt_tick
            ));
        }
        if self.corpus.total() == 0 || self.heldout.scenes == 0 {
            return cfg_err("corpus.counts and heldout.scenes must name at least one scene".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

/// Overlays `patch` onto `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    match (base.as_object_mut(), patch.as_object()) {
        (Some(b), Some(p)) => {
            for (k, v) in p {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| Error::Config(format!("unknown config field `{path}`")))?;
                // Maps keyed by data (scene counts) are replaced wholesale.
                if path == "corpus.counts" {
                    *slot = v.clone();
                } else {
                    merge(slot, v, &path)?;
                }
            }
            Ok(())
        }
        (_, _) => {
            *base = patch.clone();
            Ok(())
        }
    }
}
