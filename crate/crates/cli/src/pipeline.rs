//! Stage functions shared by the command-line verbs and the integration tests.

use crate::config::{stream, RunConfig};
use diffplan_core::checkpoint::Checkpoint;
use diffplan_core::conditioning::SceneFeaturizer;
use diffplan_core::corpus::{generate_corpus, CorpusSpec, GeneratedCorpus};
use diffplan_core::denoiser::DenoiserParams;
use diffplan_core::il::{build_demonstrations, train_il, IlRun};
use diffplan_core::policy::Planner;
use diffplan_core::rl::{rl_update, RlContext, RlRun};
use diffplan_core::rng::derive_seed;
use diffplan_core::scene::{ScenarioKind, Scene};
use diffplan_core::scheduler::build_cosine_schedule;
use diffplan_core::simulator::{constant_velocity_planner, evaluate, EvalReport};
use diffplan_core::{Real, Result, Schedule};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
    /// `n` FORK scenes from their own stream.
    Forks(usize),
}

impl Split {
    pub fn spec(self, cfg: &RunConfig) -> CorpusSpec {
        match self {
            Split::Train => cfg.corpus.clone(),
            Split::Heldout => cfg.heldout_spec(),
            Split::Forks(n) => CorpusSpec {
                seed: derive_seed(cfg.seed, stream::FORKS, 0),
                counts: BTreeMap::from([(ScenarioKind::Fork, n)]),
                ..cfg.corpus.clone()
            },
        }
    }
}

pub fn schedule(cfg: &RunConfig) -> Result<Schedule> {
    build_cosine_schedule(cfg.schedule.steps, cfg.schedule.sigma_min)
}

pub fn generate(cfg: &RunConfig, split: Split) -> Result<(CorpusSpec, GeneratedCorpus)> {
    let spec = split.spec(cfg);
    let corpus = generate_corpus(&spec, &cfg.expert, &cfg.sim)?;
    Ok((spec, corpus))
}

/// A trained network with the featurizer and normalization it was trained under.
pub struct Model {
    pub params: DenoiserParams<Real>,
    pub featurizer: SceneFeaturizer,
    pub checkpoint: Checkpoint<Real>,
}

impl Model {
    pub fn from_checkpoint(checkpoint: Checkpoint<Real>) -> Result<Self> {
        let featurizer = SceneFeaturizer::new(checkpoint.conditioning, checkpoint.normalization)?;
        Ok(Self { params: checkpoint.params.clone(), featurizer, checkpoint })
    }

    pub fn planner<'a>(&'a self, sched: &'a Schedule, cfg: &RunConfig) -> Planner<'a, Real> {
        Planner {
            params: &self.params,
            featurizer: &self.featurizer,
            norm: self.checkpoint.normalization,
            sched,
            dt_waypoint: cfg.corpus.dt_waypoint,
        }
    }
}

pub fn checkpoint(cfg: &RunConfig, params: DenoiserParams<Real>, meta: serde_json::Value) -> Checkpoint<Real> {
    Checkpoint { params, normalization: cfg.normalization, conditioning: cfg.conditioning, meta }
}

/// Imitation stage from a fresh initialization.
pub fn run_il(cfg: &RunConfig, scenes: &[Scene]) -> Result<IlRun<Real>> {
    let sched = schedule(cfg)?;
    let featurizer = SceneFeaturizer::new(cfg.conditioning, cfg.normalization)?;
    let demos = build_demonstrations(scenes, &featurizer, &cfg.normalization, cfg.corpus.waypoints, cfg.corpus.dt_waypoint, &cfg.expert)?;
    let params = DenoiserParams::init(cfg.denoiser, cfg.init_seed())?;
    train_il(params, &demos, &cfg.il, &sched)
}

/// Fine-tuning stage starting from (and regularized towards) `init`.
pub fn run_rl(cfg: &RunConfig, init: &Model, scenes: &[Scene], eval_scenes: Option<&[Scene]>) -> Result<RlRun<Real>> {
    let sched = schedule(cfg)?;
    let eval_seed = cfg.eval_seed();
    let ctx = RlContext {
        planner: init.planner(&sched, cfg),
        reference: &init.params,
        sim: &cfg.sim,
        clip: &cfg.sampler.clip,
        eval: eval_scenes.map(|s| (s, &cfg.sampler, eval_seed)),
    };
    rl_update(&ctx, scenes, &cfg.rl)
}

pub fn evaluate_model(cfg: &RunConfig, model: &Model, scenes: &[Scene]) -> Result<EvalReport> {
    let sched = schedule(cfg)?;
    let planner = model.planner(&sched, cfg);
    let seed = cfg.eval_seed();
    evaluate(|s| planner.plan(s, &cfg.sampler, seed), scenes, &cfg.sim)
}

pub fn evaluate_baseline(cfg: &RunConfig, scenes: &[Scene]) -> Result<EvalReport> {
    evaluate(|s| constant_velocity_planner(s, cfg.corpus.waypoints, cfg.corpus.dt_waypoint), scenes, &cfg.sim)
}
