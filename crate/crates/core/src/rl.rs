//! Simulator-rewarded policy-gradient fine-tuning of the denoising chain.
//!
//! Each reverse step is a Gaussian policy `N(x_prev; μ_θ(x_t, t), σ²I)`.
//! Step weights use the index `k = 1` for the final (cleanest) step, so the
//! weight `γ^(k-1)` shrinks toward the noisy start of the chain.

use crate::autodiff::{zero_grads, Tape};
use crate::denoiser::{ConditioningBundle, DenoiserParams};
use crate::error::{invalid, Error, Result};
use crate::optim::{AdamConfig, AdamW, LrSchedule};
use crate::policy::Planner;
use crate::rng::{derive_rng, derive_seed};
use crate::scene::Scene;
use crate::scheduler::{reverse_mean, reverse_mean_on_tape, ClipConfig, DiffusionChain, StepCoeffs};
use crate::simulator::{evaluate, score_trajectory, MetricMeans, SimConfig};
use crate::tensor::Mat;
use crate::Scalar;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Defaults follow the best ablation settings (discount 0.6, BC weight 0.01,
/// sampling floor 0.02). The large-scale run used 10 epochs over batches of
/// 128 scenes; `batch_scenes` is scaled down for desk runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    /// Group size `G`.
    pub group_size: usize,
    pub gamma: f64,
    pub lambda_bc: f64,
    pub sampling_sigma_min: f64,
    /// Rollout and reference chains also draw their final step from
    /// `N(μ, sampling_sigma_min²)`. Inference keeps the final step noise-free.
    pub explore_final_step: bool,
    pub logprob_sigma_floor: f64,
    pub chain_steps: usize,
    pub epochs: usize,
    pub batch_scenes: usize,
    pub lr: LrSchedule,
    pub grad_clip: f64,
    pub seed: u64,
    pub adv_epsilon: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            gamma: 0.6,
            lambda_bc: 0.01,
            sampling_sigma_min: 0.02,
            explore_final_step: true,
            logprob_sigma_floor: 0.10,
            chain_steps: 5,
            epochs: 10,
            batch_scenes: 16,
            lr: LrSchedule { warmup_fraction: 0.0, peak: 5e-6, floor: 5e-6 },
            grad_clip: 0.0,
            seed: 23,
            adv_epsilon: 1e-8,
        }
    }
}

impl RlConfig {
    pub fn validate(&self, max_timestep: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("rl.{m}")));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.lambda_bc >= 0.0) {
            return bad("lambda_bc must be non-negative");
        }
        if !(self.sampling_sigma_min > 0.0 && self.sampling_sigma_min <= self.logprob_sigma_floor) {
            return bad("sampling_sigma_min must be positive and at most logprob_sigma_floor");
        }
        if self.chain_steps == 0 || self.chain_steps > max_timestep {
            return bad(&format!("chain_steps must lie in 1..={max_timestep}"));
        }
        if self.epochs == 0 || self.batch_scenes == 0 {
            return bad("epochs and batch_scenes must be at least 1");
        }
        if !(self.adv_epsilon >= 0.0 && self.grad_clip >= 0.0) {
            return bad("adv_epsilon and grad_clip must be non-negative");
        }
        self.lr.validate("rl")
    }

    /// Weight of chain step `i` (`i = 0` is the first, noisiest step) in a chain of `len` steps.
    pub fn step_weight(&self, i: usize, len: usize) -> f64 {
        self.gamma.powi((len - 1 - i) as i32)
    }

    /// Weights `γ^(k-1)` for `k = 1..=len`, final step first.
    pub fn discount_weights(&self, len: usize) -> Vec<f64> {
        (0..len).map(|k| self.gamma.powi(k as i32)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RolloutGroup<T> {
    pub scene_id: u64,
    pub chains: Vec<DiffusionChain<T>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Chains whose trajectory could not be scored; their reward is 0.
    pub failures: Vec<(usize, String)>,
}

/// Samples `G` chains on one scene and scores each with PDMS. Chain `i`
/// draws from the stream `(seed, "rl.chain", scene.id·G + i)`.
pub fn sample_group<T: Scalar>(
    planner: &Planner<'_, T>,
    scene: &Scene,
    cond: &ConditioningBundle<T>,
    cfg: &RlConfig,
    sim: &SimConfig,
    clip: &ClipConfig,
    seed: u64,
) -> Result<RolloutGroup<T>> {
    let g = cfg.group_size as u64;
    let mut chains = Vec::with_capacity(cfg.group_size);
    let mut rewards = Vec::with_capacity(cfg.group_size);
    let mut failures = Vec::new();
    for i in 0..cfg.group_size {
        let mut rng = derive_rng(seed, "rl.chain", scene.id.wrapping_mul(g).wrapping_add(i as u64));
        let chain = planner.sample_with(cond, cfg.chain_steps, cfg.sampling_sigma_min, clip, cfg.explore_final_step, &mut rng)?;
        let reward = planner.decode(&chain).and_then(|t| score_trajectory(scene, &t, sim));
        match reward {
            Ok(b) => rewards.push(b.pdms),
            Err(e) => {
                failures.push((i, e.to_string()));
                rewards.push(0.0);
            }
        }
        chains.push(chain);
    }
    Ok(RolloutGroup { scene_id: scene.id, chains, rewards, advantages: Vec::new(), failures })
}

/// Group-standardized advantages with population variance. A group with
/// exactly zero variance gets all-zero advantages.
pub fn group_advantages(rewards: &[f64], adv_epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return invalid("advantages need at least 2 rewards");
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let sd = (var + adv_epsilon).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / sd).collect())
}

fn gaussian_norm(d: usize, sigma: f64) -> f64 {
    -(d as f64) * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// Isotropic Gaussian log-density of `x_prev` around `mean` with std `max(sigma, floor)`.
pub fn step_logprob<T: Scalar>(x_prev: &Mat<T>, mean: &Mat<T>, sigma: f64, floor: f64) -> Result<f64> {
    if x_prev.shape() != mean.shape() {
        return invalid("state and mean shapes differ");
    }
    let s = sigma.max(floor);
    let sq = x_prev.zip_map(mean, |a, b| a - b).sum_sq().as_f64();
    Ok(gaussian_norm(x_prev.len(), s) - sq / (2.0 * s * s))
}

/// Per-step log-densities of a recorded chain with the means recomputed under `params`.
pub fn chain_logprob<T: Scalar>(
    chain: &DiffusionChain<T>,
    cond: &ConditioningBundle<T>,
    params: &DenoiserParams<T>,
    floor: f64,
    clip: &ClipConfig,
) -> Result<Vec<f64>> {
    check_chain(chain)?;
    chain
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let x_t = &chain.states[i];
            let eps = params.predict_noise(x_t, step.t, cond)?;
            let mu = reverse_mean(x_t, &eps, step, clip)?;
            step_logprob(&chain.states[i + 1], &mu, step.sigma.as_f64(), floor)
        })
        .collect()
}

fn check_chain<T: Scalar>(chain: &DiffusionChain<T>) -> Result<()> {
    if chain.steps.is_empty() || chain.states.len() != chain.steps.len() + 1 {
        return invalid("chain is empty or its states do not match its steps");
    }
    Ok(())
}

/// A chain together with the conditioning it was sampled under.
#[derive(Clone, Copy, Debug)]
pub struct ChainRef<'a, T> {
    pub chain: &'a DiffusionChain<T>,
    pub cond: &'a ConditioningBundle<T>,
}

/// Policy-gradient groups paired with their conditioning.
#[derive(Clone, Copy, Debug)]
pub struct GroupRef<'a, T> {
    pub group: &'a RolloutGroup<T>,
    pub cond: &'a ConditioningBundle<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlLossParts {
    /// Advantage-weighted term (already negated, as minimized).
    pub policy: f64,
    /// Mean per-step reference log-likelihood (before weighting by `-λ`).
    pub bc_logprob: f64,
    pub total: f64,
}

/// One weighted log-density term: coefficient on `logπ` plus its chain step.
struct Term<'a, T> {
    coeff: f64,
    x_t: &'a Mat<T>,
    x_prev: &'a Mat<T>,
    step: &'a StepCoeffs<T>,
    cond: &'a ConditioningBundle<T>,
    bc: bool,
}

fn collect_terms<'a, T: Scalar>(groups: &[GroupRef<'a, T>], refs: &[ChainRef<'a, T>], cfg: &RlConfig) -> Result<Vec<Term<'a, T>>> {
    if groups.is_empty() {
        return invalid("rl loss needs at least one group");
    }
    let n_chains: usize = groups.iter().map(|g| g.group.chains.len()).sum();
    let mut terms = Vec::new();
    for g in groups {
        if g.group.advantages.len() != g.group.chains.len() {
            return invalid(format!("group for scene {} has no advantages", g.group.scene_id));
        }
        for (chain, &adv) in g.group.chains.iter().zip(&g.group.advantages) {
            check_chain(chain)?;
            let len = chain.steps.len();
            for (i, step) in chain.steps.iter().enumerate() {
                let coeff = -cfg.step_weight(i, len) * adv / (n_chains as f64 * len as f64);
                terms.push(Term { coeff, x_t: &chain.states[i], x_prev: &chain.states[i + 1], step, cond: g.cond, bc: false });
            }
        }
    }
    if cfg.lambda_bc > 0.0 && !refs.is_empty() {
        for r in refs {
            check_chain(r.chain)?;
            let len = r.chain.steps.len();
            for (i, step) in r.chain.steps.iter().enumerate() {
                let coeff = -cfg.lambda_bc / (refs.len() as f64 * len as f64);
                terms.push(Term { coeff, x_t: &r.chain.states[i], x_prev: &r.chain.states[i + 1], step, cond: r.cond, bc: true });
            }
        }
    }
    Ok(terms)
}

/// Value of the fine-tuning loss: the negated advantage-weighted, discounted
/// chain log-likelihood minus `λ` times the reference chains' mean per-step
/// log-likelihood.
pub fn rl_loss<T: Scalar>(
    params: &DenoiserParams<T>,
    groups: &[GroupRef<'_, T>],
    refs: &[ChainRef<'_, T>],
    cfg: &RlConfig,
    clip: &ClipConfig,
) -> Result<RlLossParts> {
    rl_loss_impl(params, groups, refs, cfg, clip, false).map(|(p, _)| p)
}

/// [`rl_loss`] with its exact parameter gradient. Terms with a zero
/// coefficient, and steps whose recomputed mean equals the recorded next
/// state bitwise, are not back-propagated: their gradient is exactly zero.
pub fn rl_loss_and_grad<T: Scalar>(
    params: &DenoiserParams<T>,
    groups: &[GroupRef<'_, T>],
    refs: &[ChainRef<'_, T>],
    cfg: &RlConfig,
    clip: &ClipConfig,
) -> Result<(RlLossParts, Vec<Mat<T>>)> {
    rl_loss_impl(params, groups, refs, cfg, clip, true).map(|(p, g)| (p, g.expect("gradient requested")))
}

#[allow(clippy::type_complexity)]
fn rl_loss_impl<T: Scalar>(
    params: &DenoiserParams<T>,
    groups: &[GroupRef<'_, T>],
    refs: &[ChainRef<'_, T>],
    cfg: &RlConfig,
    clip: &ClipConfig,
    want_grad: bool,
) -> Result<(RlLossParts, Option<Vec<Mat<T>>>)> {
    let terms = collect_terms(groups, refs, cfg)?;
    let floor = cfg.logprob_sigma_floor;
    const CHUNK: usize = 4;
    let partials = terms
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = want_grad.then(|| zero_grads(params.tensors()));
            let (mut policy, mut bc) = (0.0, 0.0);
            for term in chunk {
                let s = term.step.sigma.as_f64().max(floor);
                let mut tape = Tape::new(params.tensors());
                let x = tape.constant(term.x_t.clone());
                let eps = params.predict_noise_on(&mut tape, x, term.step.t, term.cond)?;
                let mu = reverse_mean_on_tape(&mut tape, x, eps, term.step, clip);
                let target = tape.constant(term.x_prev.clone());
                let diff = tape.sub(target, mu);
                let sq = tape.sum_sq(diff);
                let sq_val = tape.value(sq).get(0, 0).as_f64();
                let logp = gaussian_norm(term.x_prev.len(), s) - sq_val / (2.0 * s * s);
                if term.bc {
                    bc += logp * term.coeff;
                } else {
                    policy += logp * term.coeff;
                }
                if let Some(g) = grads.as_mut() {
                    if term.coeff != 0.0 && sq_val != 0.0 {
                        tape.backward(sq, T::lit(-term.coeff / (2.0 * s * s)), g);
                    }
                }
            }
            Ok((policy, bc, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut policy, mut bc) = (0.0, 0.0);
    let mut grads: Option<Vec<Mat<T>>> = None;
    for (p, b, g) in partials {
        policy += p;
        bc += b;
        match (&mut grads, g) {
            (None, g) => grads = g,
            (Some(acc), Some(g)) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            _ => {}
        }
    }
    let bc_logprob = if cfg.lambda_bc > 0.0 { -bc / cfg.lambda_bc } else { 0.0 };
    let grads = if want_grad { Some(grads.unwrap_or_else(|| zero_grads(params.tensors()))) } else { None };
    Ok((RlLossParts { policy, bc_logprob, total: policy + bc }, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardPoint {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_advantage_magnitude: f64,
    pub rl_loss: f64,
    pub bc_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RlRun<T> {
    pub params: DenoiserParams<T>,
    pub curve: Vec<RewardPoint>,
    /// Held-out means after each epoch, when evaluation scenes were given.
    pub epoch_eval: Vec<MetricMeans>,
    pub status: crate::il::RunStatus,
}

impl<T> RlRun<T> {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,mean_reward,mean_advantage_magnitude,rl_loss,bc_loss\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                p.epoch, p.mean_reward, p.mean_advantage_magnitude, p.rl_loss, p.bc_loss
            ));
        }
        out
    }
}

/// Inputs shared by every fine-tuning iteration.
#[derive(Clone, Copy, Debug)]
pub struct RlContext<'a, T> {
    pub planner: Planner<'a, T>,
    /// Frozen reference (imitation) parameters for the regularizer.
    pub reference: &'a DenoiserParams<T>,
    pub sim: &'a SimConfig,
    pub clip: &'a ClipConfig,
    /// Evaluation after every epoch, as `(scenes, sampler, seed)`.
    pub eval: Option<(&'a [Scene], &'a crate::policy::SamplerConfig, u64)>,
}

/// Strictly on-policy fine-tuning: every iteration samples fresh groups under
/// the current parameters and fresh reference chains, then takes one step.
pub fn rl_update<T: Scalar>(ctx: &RlContext<'_, T>, scenes: &[Scene], cfg: &RlConfig) -> Result<RlRun<T>> {
    let planner = ctx.planner;
    cfg.validate(planner.sched.steps())?;
    if scenes.is_empty() {
        return invalid("RL corpus is empty");
    }
    let conds: Vec<ConditioningBundle<T>> = scenes.par_iter().map(|s| planner.condition(s)).collect::<Result<_>>()?;
    let per_epoch = scenes.len().div_ceil(cfg.batch_scenes);
    let total = cfg.epochs * per_epoch;
    let mut params = planner.params.clone();
    let adam = AdamConfig { weight_decay: 0.0, grad_clip: cfg.grad_clip, ..AdamConfig::default() };
    let mut opt = AdamW::new(adam, params.names(), params.tensors());
    let mut curve = Vec::new();
    let mut epoch_eval = Vec::new();
    let mut status = crate::il::RunStatus::Completed;
    let mut order: Vec<usize> = Vec::new();
    let mut acc = [0.0f64; 4];
    let mut acc_n = 0usize;
    'outer: for it in 0..total {
        let (epoch, slot) = (it / per_epoch, it % per_epoch);
        if slot == 0 {
            order = (0..scenes.len()).collect();
            order.shuffle(&mut derive_rng(cfg.seed, "rl.shuffle", epoch as u64));
        }
        let batch: Vec<usize> = order.iter().skip(slot * cfg.batch_scenes).take(cfg.batch_scenes).copied().collect();
        let iter_seed = derive_seed(cfg.seed, "rl.iteration", it as u64);
        let current = Planner { params: &params, ..planner };
        let reference = Planner { params: ctx.reference, ..planner };
        let sampled = batch
            .par_iter()
            .map(|&k| {
                let mut g = sample_group(&current, &scenes[k], &conds[k], cfg, ctx.sim, ctx.clip, iter_seed)?;
                g.advantages = group_advantages(&g.rewards, cfg.adv_epsilon)?;
                let refs = (0..cfg.group_size)
                    .map(|i| {
                        let idx = scenes[k].id.wrapping_mul(cfg.group_size as u64).wrapping_add(i as u64);
                        let mut rng = derive_rng(iter_seed, "rl.reference", idx);
                        reference.sample_with(&conds[k], cfg.chain_steps, cfg.sampling_sigma_min, ctx.clip, cfg.explore_final_step, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((k, g, refs))
            })
            .collect::<Result<Vec<_>>>();
        let sampled = match sampled {
            Ok(s) => s,
            Err(Error::Diverged(reason)) => {
                status = crate::il::RunStatus::Diverged { step: it, reason };
                break 'outer;
            }
            Err(e) => return Err(e),
        };
        let conds = &conds;
        let groups: Vec<GroupRef<'_, T>> = sampled.iter().map(|(k, g, _)| GroupRef { group: g, cond: &conds[*k] }).collect();
        let refs: Vec<ChainRef<'_, T>> =
            sampled.iter().flat_map(|(k, _, r)| r.iter().map(move |c| ChainRef { chain: c, cond: &conds[*k] })).collect();
        let (parts, grads) = match rl_loss_and_grad(&params, &groups, &refs, cfg, ctx.clip) {
            Ok(v) => v,
            Err(Error::Diverged(reason)) => {
                status = crate::il::RunStatus::Diverged { step: it, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        if !parts.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            status = crate::il::RunStatus::Diverged { step: it, reason: format!("non-finite loss {}", parts.total) };
            break;
        }
        let before = params.tensors().to_vec();
        opt.update(params.tensors_mut(), &grads, cfg.lr.at(it, total));
        if !params.is_finite() {
            params.tensors_mut().clone_from_slice(&before);
            status = crate::il::RunStatus::Diverged { step: it, reason: "parameters became non-finite".into() };
            break;
        }
        let rewards: Vec<f64> = sampled.iter().flat_map(|(_, g, _)| g.rewards.iter().copied()).collect();
        let advs: Vec<f64> = sampled.iter().flat_map(|(_, g, _)| g.advantages.iter().map(|a| a.abs())).collect();
        acc[0] += rewards.iter().sum::<f64>() / rewards.len() as f64;
        acc[1] += advs.iter().sum::<f64>() / advs.len() as f64;
        acc[2] += parts.policy;
        acc[3] += -cfg.lambda_bc * parts.bc_logprob;
        acc_n += 1;
        if slot + 1 == per_epoch {
            let n = acc_n as f64;
            curve.push(RewardPoint {
                epoch,
                mean_reward: acc[0] / n,
                mean_advantage_magnitude: acc[1] / n,
                rl_loss: acc[2] / n,
                bc_loss: acc[3] / n,
            });
            acc = [0.0; 4];
            acc_n = 0;
            if let Some((eval_scenes, sampler, seed)) = ctx.eval {
                let p = Planner { params: &params, ..planner };
                let report = evaluate(|s| p.plan(s, sampler, seed), eval_scenes, ctx.sim)?;
                epoch_eval.push(report.means);
            }
        }
    }
    Ok(RlRun { params, curve, epoch_eval, status })
}
