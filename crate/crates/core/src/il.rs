//! Imitation learning: noise-prediction regression onto expert trajectories.

use crate::autodiff::{zero_grads, Tape};
use crate::conditioning::SceneFeaturizer;
use crate::corpus::{expert_variants, ExpertConfig};
use crate::denoiser::{ConditioningBundle, DenoiserParams};
use crate::error::{invalid, Error, Result};
use crate::optim::{AdamConfig, AdamW, LrSchedule};
use crate::rng::derive_rng;
use crate::scene::Scene;
use crate::scheduler::{forward_noise_to, standard_normal, NoiseSchedule};
use crate::tensor::Mat;
use crate::traj::{normalize, NormalizationSpec};
use crate::Scalar;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Samples per sequential accumulation chunk. Chunks are reduced in index
/// order, so gradients do not depend on the thread count.
const CHUNK: usize = 4;

/// Desk defaults. The large-scale reference run used lr 1e-4, batch 512 and
/// 200 epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fixed step budget; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Size of the fixed batch used to report initial and final loss.
    pub probe_samples: usize,
}

impl Default for IlConfig {
    fn default() -> Self {
        Self {
            epochs: 640,
            batch_size: 64,
            steps: None,
            lr: LrSchedule { peak: 3e-3, ..LrSchedule::default() },
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 11,
            probe_samples: 256,
        }
    }
}

impl IlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("il.batch_size must be at least 1".into()));
        }
        if self.epochs == 0 && self.steps.is_none() {
            return Err(Error::Config("il.epochs must be at least 1".into()));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("il.steps must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("il.weight_decay and il.grad_clip must be non-negative".into()));
        }
        if self.probe_samples == 0 {
            return Err(Error::Config("il.probe_samples must be at least 1".into()));
        }
        self.lr.validate("il")
    }

    pub fn steps_per_epoch(&self, scenes: usize) -> usize {
        scenes.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, scenes: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(scenes))
    }
}

/// One scene's conditioning and its normalized expert trajectories (two on a fork).
#[derive(Clone, Debug)]
pub struct Demonstration<T> {
    pub scene_id: u64,
    pub cond: ConditioningBundle<T>,
    pub targets: Vec<Mat<T>>,
}

pub fn build_demonstrations<T: Scalar>(
    scenes: &[Scene],
    featurizer: &SceneFeaturizer,
    norm: &NormalizationSpec,
    waypoints: usize,
    dt_waypoint: f64,
    expert: &ExpertConfig,
) -> Result<Vec<Demonstration<T>>> {
    scenes
        .par_iter()
        .map(|s| {
            let cond = featurizer.embed_scene_defaults(s)?;
            let targets = expert_variants(s, waypoints, dt_waypoint, expert)?
                .iter()
                .map(|t| normalize(t, norm))
                .collect::<Result<Vec<_>>>()?;
            Ok(Demonstration { scene_id: s.id, cond, targets })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct IlSample<'a, T> {
    pub x0: Mat<T>,
    pub cond: &'a ConditioningBundle<T>,
    pub t: usize,
    pub eps: Mat<T>,
}

pub type IlBatch<'a, T> = Vec<IlSample<'a, T>>;

/// Draws the expert variant, timestep and noise for one sample.
pub fn draw_sample<'a, T: Scalar, R: Rng + ?Sized>(demo: &'a Demonstration<T>, steps: usize, rng: &mut R) -> IlSample<'a, T> {
    let x0 = demo.targets[rng.random_range(0..demo.targets.len())].clone();
    let t = rng.random_range(1..=steps);
    let eps = standard_normal(x0.rows(), x0.cols(), rng);
    IlSample { x0, cond: &demo.cond, t, eps }
}

fn check_batch<T: Scalar>(batch: &[IlSample<'_, T>]) -> Result<()> {
    if batch.is_empty() {
        return invalid("IL batch is empty");
    }
    for s in batch {
        if !(s.x0.is_finite() && s.eps.is_finite()) {
            return invalid("IL sample contains non-finite values");
        }
        if s.x0.shape() != s.eps.shape() {
            return invalid("IL sample noise shape differs from its target");
        }
    }
    Ok(())
}

/// Mean squared noise-prediction error over samples, waypoints and components.
pub fn il_loss<T: Scalar>(params: &DenoiserParams<T>, batch: &[IlSample<'_, T>], sched: &NoiseSchedule<T>) -> Result<T> {
    check_batch(batch)?;
    let mut total = T::zero();
    let mut count = 0usize;
    for s in batch {
        let x_t = forward_noise_to(&s.x0, s.t, &s.eps, sched)?;
        let pred = params.predict_noise(&x_t, s.t, s.cond)?;
        total = total + pred.zip_map(&s.eps, |a, b| a - b).sum_sq();
        count += s.eps.len();
    }
    Ok(total / T::lit(count as f64))
}

/// [`il_loss`] and its exact parameter gradient.
pub fn il_loss_and_grad<T: Scalar>(
    params: &DenoiserParams<T>,
    batch: &[IlSample<'_, T>],
    sched: &NoiseSchedule<T>,
) -> Result<(T, Vec<Mat<T>>)> {
    check_batch(batch)?;
    let count: usize = batch.iter().map(|s| s.eps.len()).sum();
    let inv = T::lit(1.0 / count as f64);
    let partials = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = zero_grads(params.tensors());
            let mut loss = T::zero();
            for s in chunk {
                let x_t = forward_noise_to(&s.x0, s.t, &s.eps, sched)?;
                let mut tape = Tape::new(params.tensors());
                let x = tape.constant(x_t);
                let pred = params.predict_noise_on(&mut tape, x, s.t, s.cond)?;
                let eps = tape.constant(s.eps.clone());
                let diff = tape.sub(pred, eps);
                let sq = tape.sum_sq(diff);
                loss = loss + tape.value(sq).get(0, 0);
                tape.backward(sq, inv, &mut grads);
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("batch is nonempty");
    for (l, g) in iter {
        loss = loss + l;
        for (a, b) in grads.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    Ok((loss * inv, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    /// Training stopped at a non-finite loss or update; parameters are the last finite ones.
    Diverged { step: usize, reason: String },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }
}

#[derive(Clone, Debug)]
pub struct IlRun<T> {
    pub params: DenoiserParams<T>,
    pub curve: Vec<CurvePoint>,
    pub epoch_losses: Vec<f64>,
    /// Loss on the fixed probe batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub status: RunStatus,
}

impl<T> IlRun<T> {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for p in &self.curve {
            out.push_str(&format!("{},{:.9e},{:.9e}\n", p.step, p.loss, p.lr));
        }
        out
    }
}

/// Fixed evaluation batch cycling through the demonstrations.
pub fn probe_batch<T: Scalar>(demos: &[Demonstration<T>], samples: usize, steps: usize, seed: u64) -> Vec<IlSample<'_, T>> {
    (0..samples)
        .map(|i| {
            let mut rng = derive_rng(seed, "il.probe", i as u64);
            draw_sample(&demos[i % demos.len()], steps, &mut rng)
        })
        .collect()
}

/// Mini-batch AdamW training. Scenes are reshuffled every epoch; every
/// sample draws its variant, timestep and noise from its own derived stream.
pub fn train_il<T: Scalar>(
    params: DenoiserParams<T>,
    demos: &[Demonstration<T>],
    cfg: &IlConfig,
    sched: &NoiseSchedule<T>,
) -> Result<IlRun<T>> {
    cfg.validate()?;
    if demos.is_empty() {
        return invalid("IL corpus is empty");
    }
    if sched.steps() != params.config().max_timestep {
        return invalid("schedule length differs from the denoiser's timestep count");
    }
    let steps = sched.steps();
    let probe = probe_batch(demos, cfg.probe_samples, steps, cfg.seed);
    let initial_loss = il_loss(&params, &probe, sched)?.as_f64();
    let adam = AdamConfig { weight_decay: cfg.weight_decay, grad_clip: cfg.grad_clip, ..AdamConfig::default() };
    let mut opt = AdamW::new(adam, params.names(), params.tensors());
    let mut params = params;
    let total = cfg.total_steps(demos.len());
    let per_epoch = cfg.steps_per_epoch(demos.len());
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(total);
    let mut epoch_losses = Vec::new();
    let mut epoch_sum = 0.0;
    let mut status = RunStatus::Completed;
    for step in 0..total {
        let epoch = step / per_epoch;
        let slot = step % per_epoch;
        if slot == 0 {
            order = (0..demos.len()).collect();
            order.shuffle(&mut derive_rng(cfg.seed, "il.shuffle", epoch as u64));
        }
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|j| {
                let k = (slot * cfg.batch_size + j) % order.len();
                let mut rng = derive_rng(cfg.seed, "il.sample", (step * cfg.batch_size + j) as u64);
                draw_sample(&demos[order[k]], steps, &mut rng)
            })
            .collect();
        let (loss, grads) = match il_loss_and_grad(&params, &batch, sched) {
            Ok(v) => v,
            Err(Error::Diverged(reason)) => {
                status = RunStatus::Diverged { step, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = loss.as_f64();
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            status = RunStatus::Diverged { step, reason: format!("non-finite loss {loss}") };
            break;
        }
        let lr = cfg.lr.at(step, total);
        let before = params.tensors().to_vec();
        opt.update(params.tensors_mut(), &grads, lr);
        if !params.is_finite() {
            params.tensors_mut().clone_from_slice(&before);
            status = RunStatus::Diverged { step, reason: "parameters became non-finite".into() };
            break;
        }
        curve.push(CurvePoint { step, loss, lr });
        epoch_sum += loss;
        if slot + 1 == per_epoch || step + 1 == total {
            epoch_losses.push(epoch_sum / (slot + 1) as f64);
            epoch_sum = 0.0;
        }
    }
    let final_loss = il_loss(&params, &probe, sched)?.as_f64();
    Ok(IlRun { params, curve, epoch_losses, initial_loss, final_loss, status })
}
