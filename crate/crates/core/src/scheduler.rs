//! DDPM noise schedule, forward noising and ancestral sampling with recorded chains.
//!
//! The per-step noise std `σ_t` defines the forward kernel
//! `x_t = sqrt(1 - σ_t²)·x_{t-1} + σ_t·ε`, with cumulative signal level
//! `ᾱ_t = ∏_{k≤t} (1 - σ_k²)`. Sampling can run over any descending subset
//! of timesteps; a strided step `t → t'` uses `β = 1 - ᾱ_t/ᾱ_{t'}`.

use crate::error::{invalid, Error, Result};
use crate::tensor::Mat;
use crate::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;

/// Offset `s` of the squared-cosine profile.
pub const COSINE_OFFSET: f64 = 0.008;
/// Cap on the per-step variance before flooring; keeps `σ_t < 1` at `t = T`.
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    sigmas: Vec<T>,
    alpha_bars: Vec<T>,
    sigma_min: T,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.sigmas.len()
    }

    /// `σ_t` for `1 ≤ t ≤ T`.
    pub fn sigma(&self, t: usize) -> T {
        self.sigmas[t - 1]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bars[t]
    }

    pub fn sigmas(&self) -> &[T] {
        &self.sigmas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    pub fn sigma_min(&self) -> T {
        self.sigma_min
    }

    /// CSV dump with header `t,sigma,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,sigma,alpha_bar\n");
        for t in 1..=self.steps() {
            out.push_str(&format!("{},{},{}\n", t, self.sigma(t).as_f64(), self.alpha_bar(t).as_f64()));
        }
        out
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid(format!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }
}

/// Squared-cosine schedule with a floor on every `σ_t`.
pub fn build_cosine_schedule<T: Scalar>(steps: usize, sigma_min: T) -> Result<NoiseSchedule<T>> {
    if steps == 0 {
        return invalid("schedule needs at least one step");
    }
    if !(sigma_min > T::zero() && sigma_min < T::one()) {
        return invalid(format!("sigma_min must lie in (0, 1), got {sigma_min}"));
    }
    let s = T::lit(COSINE_OFFSET);
    let total = T::lit(steps as f64);
    let half_pi = T::FRAC_PI_2();
    let f = |t: usize| {
        let c = ((T::lit(t as f64) / total + s) / (T::one() + s) * half_pi).cos();
        c * c
    };
    let f0 = f(0);
    let raw: Vec<T> = (0..=steps).map(|t| f(t) / f0).collect();
    let max_beta = T::lit(MAX_BETA);
    let sigmas: Vec<T> = (1..=steps)
        .map(|t| {
            let beta = (T::one() - raw[t] / raw[t - 1]).min(max_beta);
            beta.sqrt().max(sigma_min)
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(T::one());
    for (k, &sg) in sigmas.iter().enumerate() {
        let prev = alpha_bars[k];
        alpha_bars.push(prev * (T::one() - sg * sg));
    }
    Ok(NoiseSchedule { sigmas, alpha_bars, sigma_min })
}

fn same_shape<T: Scalar>(a: &Mat<T>, b: &Mat<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("{what}: shape {:?} does not match {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// One forward kernel step: `sqrt(1 - σ²)·x_prev + σ·eps`.
pub fn forward_noise_step<T: Scalar>(x_prev: &Mat<T>, sigma: T, eps: &Mat<T>) -> Result<Mat<T>> {
    same_shape(x_prev, eps, "forward_noise_step")?;
    if !(sigma > T::zero() && sigma < T::one()) {
        return invalid(format!("sigma must lie in (0, 1), got {sigma}"));
    }
    let a = (T::one() - sigma * sigma).sqrt();
    Ok(x_prev.zip_map(eps, |x, e| a * x + sigma * e))
}

/// Closed-form marginal: `sqrt(ᾱ_t)·x0 + sqrt(1 - ᾱ_t)·eps`.
pub fn forward_noise_to<T: Scalar>(x0: &Mat<T>, t: usize, eps: &Mat<T>, sched: &NoiseSchedule<T>) -> Result<Mat<T>> {
    sched.check_t(t)?;
    same_shape(x0, eps, "forward_noise_to")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// How the reverse mean removes the predicted noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanRule {
    /// `μ = (x_t - β/sqrt(1 - ᾱ_t)·ε)/sqrt(1 - β)`, the Gaussian posterior mean.
    #[default]
    Posterior,
    /// `μ = (x_t - σ²·ε)/sqrt(1 - σ²)`: the noise term is not rescaled by
    /// `sqrt(1 - ᾱ_t)`. Kept for comparison; with injected noise it leaves
    /// residual noise in `x_0`.
    Unscaled,
}

/// Std of the noise injected by a (possibly strided) reverse step `t → t_prev`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRule {
    /// `sqrt(β·(1 - ᾱ_prev)/(1 - ᾱ_t))`, the std of the Gaussian posterior.
    #[default]
    Posterior,
    /// `sqrt(β)` with `β = 1 - ᾱ_t/ᾱ_prev`. Over strided steps this injects
    /// more noise than the forward process removed.
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClipConfig {
    /// Bound on the reconstructed clean estimate.
    pub x0_clip: f64,
    /// Bound on each standard-normal sample.
    pub noise_clip: f64,
    pub mean_rule: MeanRule,
    #[serde(default)]
    pub variance: VarianceRule,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { x0_clip: 1.0, noise_clip: 3.0, mean_rule: MeanRule::Posterior, variance: VarianceRule::Posterior }
    }
}

/// Coefficients of one reverse transition `t → t_prev`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoeffs<T> {
    pub t: usize,
    pub t_prev: usize,
    pub alpha_bar: T,
    pub alpha_bar_prev: T,
    /// Noise std of the transition after flooring.
    pub sigma: T,
}

impl<T: Scalar> StepCoeffs<T> {
    /// Unstrided step `t → t-1` using the schedule's own `σ_t`.
    pub fn single(sched: &NoiseSchedule<T>, t: usize) -> Result<Self> {
        sched.check_t(t)?;
        Ok(Self {
            t,
            t_prev: t - 1,
            alpha_bar: sched.alpha_bar(t),
            alpha_bar_prev: sched.alpha_bar(t - 1),
            sigma: sched.sigma(t),
        })
    }

    /// Variance of the (possibly strided) forward transition.
    pub fn beta(&self) -> T {
        T::one() - self.alpha_bar / self.alpha_bar_prev
    }

    pub fn is_final(&self) -> bool {
        self.t_prev == 0
    }

    /// `(k, 1/d)` such that `μ = (x_t - k·ε')·(1/d)`.
    fn mean_terms(&self, rule: MeanRule) -> (T, T) {
        match rule {
            MeanRule::Posterior => {
                let beta = self.beta();
                (beta / (T::one() - self.alpha_bar).sqrt(), T::one() / (T::one() - beta).sqrt())
            }
            MeanRule::Unscaled => {
                let s2 = self.sigma * self.sigma;
                (s2, T::one() / (T::one() - s2).sqrt())
            }
        }
    }
}

/// Transition coefficients for a descending timestep list, each `σ` floored at `sigma_floor`.
pub fn step_plan<T: Scalar>(
    sched: &NoiseSchedule<T>,
    timesteps: &[usize],
    sigma_floor: T,
    rule: VarianceRule,
) -> Result<Vec<StepCoeffs<T>>> {
    if timesteps.is_empty() {
        return invalid("timestep list is empty");
    }
    for &t in timesteps {
        sched.check_t(t)?;
    }
    if timesteps.windows(2).any(|w| w[0] <= w[1]) {
        return invalid("timesteps must be strictly descending");
    }
    Ok(timesteps
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
            let (ab, abp) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
            let beta = T::one() - ab / abp;
            let var = match rule {
                VarianceRule::Posterior => beta * (T::one() - abp) / (T::one() - ab),
                VarianceRule::Forward => beta,
            };
            StepCoeffs { t, t_prev, alpha_bar: ab, alpha_bar_prev: abp, sigma: var.sqrt().max(sigma_floor) }
        })
        .collect())
}

/// `count` evenly strided timesteps from `total` down, e.g. 100, 80, 60, 40, 20.
pub fn strided_timesteps(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return invalid(format!("cannot stride {count} steps over {total}"));
    }
    Ok((0..count)
        .map(|i| (((count - i) as f64) * total as f64 / count as f64).round() as usize)
        .collect())
}

/// Reverse mean `μ_θ(x_t, t)` from the predicted noise, with `x̂0` clipping.
///
/// The arithmetic mirrors [`reverse_mean_on_tape`] operation for operation.
pub fn reverse_mean<T: Scalar>(x_t: &Mat<T>, eps_hat: &Mat<T>, step: &StepCoeffs<T>, clip: &ClipConfig) -> Result<Mat<T>> {
    same_shape(x_t, eps_hat, "reverse_step")?;
    if !eps_hat.is_finite() {
        return Err(Error::Diverged("predicted noise is not finite".into()));
    }
    let ab = step.alpha_bar;
    let (sa, sb) = (ab.sqrt(), (T::one() - ab).sqrt());
    let (inv_sa, inv_sb) = (T::one() / sa, T::one() / sb);
    let lim = T::lit(clip.x0_clip);
    let (k, inv_d) = step.mean_terms(clip.mean_rule);
    let x0_hat = x_t.zip_map(eps_hat, |x, e| ((x - e * sb) * inv_sa).max(-lim).min(lim));
    let eps_c = x_t.zip_map(&x0_hat, |x, x0| (x - x0 * sa) * inv_sb);
    Ok(x_t.zip_map(&eps_c, |x, e| (x - e * k) * inv_d))
}

/// One ancestral step. Returns `(x_prev, mean)`; the final step adds no noise.
pub fn reverse_step<T: Scalar>(
    x_t: &Mat<T>,
    eps_hat: &Mat<T>,
    step: &StepCoeffs<T>,
    z: &Mat<T>,
    clip: &ClipConfig,
) -> Result<(Mat<T>, Mat<T>)> {
    same_shape(x_t, z, "reverse_step noise")?;
    let mean = reverse_mean(x_t, eps_hat, step, clip)?;
    if step.is_final() {
        return Ok((mean.clone(), mean));
    }
    let lim = T::lit(clip.noise_clip);
    let sigma = step.sigma;
    let x_prev = mean.zip_map(z, |m, zv| m + sigma * zv.max(-lim).min(lim));
    Ok((x_prev, mean))
}

/// Differentiable twin of [`reverse_mean`].
pub fn reverse_mean_on_tape<T: Scalar>(
    tape: &mut crate::autodiff::Tape<'_, T>,
    x_t: crate::autodiff::Var,
    eps_hat: crate::autodiff::Var,
    step: &StepCoeffs<T>,
    clip: &ClipConfig,
) -> crate::autodiff::Var {
    let ab = step.alpha_bar;
    let (sa, sb) = (ab.sqrt(), (T::one() - ab).sqrt());
    let (inv_sa, inv_sb) = (T::one() / sa, T::one() / sb);
    let lim = T::lit(clip.x0_clip);
    let (k, inv_d) = step.mean_terms(clip.mean_rule);
    let e = tape.scale(eps_hat, sb);
    let r = tape.sub(x_t, e);
    let r = tape.scale(r, inv_sa);
    let x0_hat = tape.clamp(r, -lim, lim);
    let s = tape.scale(x0_hat, sa);
    let c = tape.sub(x_t, s);
    let eps_c = tape.scale(c, inv_sb);
    let ke = tape.scale(eps_c, k);
    let m = tape.sub(x_t, ke);
    tape.scale(m, inv_d)
}

/// Recorded denoising trajectory `x_T … x_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionChain<T> {
    pub steps: Vec<StepCoeffs<T>>,
    /// `states[0] = x_T`, `states[len-1] = x_0`.
    pub states: Vec<Mat<T>>,
    /// `means[i]` is the Gaussian mean of the transition `states[i] → states[i+1]`.
    pub means: Vec<Mat<T>>,
    /// Clipped standard-normal draws actually added (zero on the final step).
    pub noises: Vec<Mat<T>>,
}

impl<T: Scalar> DiffusionChain<T> {
    pub fn timesteps(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.t).collect()
    }

    pub fn step_sigmas(&self) -> Vec<T> {
        self.steps.iter().map(|s| s.sigma).collect()
    }

    pub fn final_state(&self) -> &Mat<T> {
        self.states.last().expect("chain has states")
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Samples a full denoising chain from `x_T ~ N(0, I)` over `timesteps`.
/// The final step adds no noise.
///
/// `predict(x_t, t)` returns the predicted noise for the current state.
pub fn sample_chain<T, R, F>(
    predict: F,
    shape: (usize, usize),
    sched: &NoiseSchedule<T>,
    timesteps: &[usize],
    sampling_sigma_min: T,
    clip: &ClipConfig,
    rng: &mut R,
) -> Result<DiffusionChain<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&Mat<T>, usize) -> Result<Mat<T>>,
{
    sample_chain_with(predict, shape, sched, timesteps, sampling_sigma_min, clip, false, rng)
}

/// [`sample_chain`] with the choice of drawing the final step from its
/// floored std as well. Exploration chains do; on the strided chain the
/// floor is otherwise inactive, since every earlier step's std is far above it.
#[allow(clippy::too_many_arguments)]
pub fn sample_chain_with<T, R, F>(
    mut predict: F,
    shape: (usize, usize),
    sched: &NoiseSchedule<T>,
    timesteps: &[usize],
    sampling_sigma_min: T,
    clip: &ClipConfig,
    final_noise: bool,
    rng: &mut R,
) -> Result<DiffusionChain<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&Mat<T>, usize) -> Result<Mat<T>>,
{
    if sampling_sigma_min < sched.sigma_min() {
        return invalid("sampling sigma floor is below the schedule floor");
    }
    let steps = step_plan(sched, timesteps, sampling_sigma_min, clip.variance)?;
    let lim = T::lit(clip.noise_clip);
    let x_init = standard_normal::<T, R>(shape.0, shape.1, rng).map(|v| v.max(-lim).min(lim));
    let mut states = Vec::with_capacity(steps.len() + 1);
    let mut means = Vec::with_capacity(steps.len());
    let mut noises = Vec::with_capacity(steps.len());
    states.push(x_init);
    for step in &steps {
        let x_t = states.last().expect("non-empty");
        let eps_hat = predict(x_t, step.t)?;
        let z = if step.is_final() && !final_noise {
            Mat::zeros(shape.0, shape.1)
        } else {
            standard_normal::<T, R>(shape.0, shape.1, rng).map(|v| v.max(-lim).min(lim))
        };
        let (x_prev, mean) = if step.is_final() && final_noise {
            let mean = reverse_mean(x_t, &eps_hat, step, clip)?;
            (mean.zip_map(&z, |m, zv| m + step.sigma * zv), mean)
        } else {
            reverse_step(x_t, &eps_hat, step, &z, clip)?
        };
        if !x_prev.is_finite() {
            return Err(Error::Diverged(format!("chain state at t={} is not finite", step.t_prev)));
        }
        states.push(x_prev);
        means.push(mean);
        noises.push(z);
    }
    Ok(DiffusionChain { steps, states, means, noises })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_respects_floor_and_monotonicity() {
        let s = build_cosine_schedule::<f64>(100, 0.02).unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=100 {
            assert!(s.sigma(t) >= 0.02 && s.sigma(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn degenerate_single_step_schedule() {
        let s = build_cosine_schedule::<f64>(1, 0.02).unwrap();
        let f = |t: f64| (((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let ab1 = f(1.0) / f(0.0);
        let want = (1.0 - ab1).min(MAX_BETA).sqrt().max(0.02);
        assert_eq!(s.sigma(1), want);
    }

    #[test]
    fn schedule_rejects_bad_floor() {
        assert!(build_cosine_schedule::<f64>(10, 1.0).is_err());
        assert!(build_cosine_schedule::<f64>(10, 0.0).is_err());
        assert!(build_cosine_schedule::<f64>(0, 0.02).is_err());
    }

    #[test]
    fn forward_step_examples() {
        let x = Mat::from_vec(1, 1, vec![0.8_f64]);
        let e = Mat::from_vec(1, 1, vec![1.0]);
        let out = forward_noise_step(&x, 0.6, &e).unwrap();
        assert!((out.get(0, 0) - 1.24).abs() < 1e-12);
        let noiseless = forward_noise_step(&x, 0.6, &Mat::zeros(1, 1)).unwrap();
        assert!((noiseless.get(0, 0) - 0.64).abs() < 1e-12);
        let zero_signal = forward_noise_step(&Mat::zeros(1, 1), 0.6, &e).unwrap();
        assert!((zero_signal.get(0, 0) - 0.6).abs() < 1e-12);
        assert!(forward_noise_step(&x, 1.0, &e).is_err());
        assert!(forward_noise_step(&x, 0.0, &e).is_err());
    }

    #[test]
    fn forward_to_edge_cases() {
        let s = build_cosine_schedule::<f64>(100, 0.02).unwrap();
        let x0 = Mat::from_vec(1, 3, vec![0.5, -0.2, 0.1]);
        let e = Mat::from_vec(1, 3, vec![0.3, 0.3, -1.0]);
        let near = forward_noise_to(&x0, 1, &e, &s).unwrap();
        assert!(near.max_abs_diff(&x0) < 0.03);
        let z = forward_noise_to(&Mat::zeros(1, 3), 50, &e, &s).unwrap();
        assert!(z.max_abs_diff(&e.scale((1.0 - s.alpha_bar(50)).sqrt())) < 1e-15);
        assert!(forward_noise_to(&x0, 0, &e, &s).is_err());
        assert!(forward_noise_to(&x0, 101, &e, &s).is_err());
    }

    fn coeffs(alpha_bar: f64, sigma: f64) -> StepCoeffs<f64> {
        StepCoeffs { t: 2, t_prev: 1, alpha_bar, alpha_bar_prev: alpha_bar / (1.0 - sigma * sigma), sigma }
    }

    #[test]
    fn reverse_step_noise_free_zero_prediction() {
        let step = coeffs(0.5, 0.1);
        let x = Mat::from_vec(1, 2, vec![0.3, -0.2]);
        for rule in [MeanRule::Posterior, MeanRule::Unscaled] {
            let clip = ClipConfig { mean_rule: rule, ..ClipConfig::default() };
            let (xp, _) = reverse_step(&x, &Mat::zeros(1, 2), &step, &Mat::zeros(1, 2), &clip).unwrap();
            let want = x.scale(1.0 / (1.0f64 - 0.01).sqrt());
            assert!(xp.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn reverse_step_scalar_oracle() {
        let step = coeffs(0.5, 0.1);
        let x = Mat::from_vec(1, 1, vec![0.9]);
        let eps = Mat::from_vec(1, 1, vec![1.9]);
        let x0_hat = (0.9 - 0.5f64.sqrt() * 1.9) / 0.5f64.sqrt();
        assert!((x0_hat + 0.6273).abs() < 1e-4);
        let clip = ClipConfig { mean_rule: MeanRule::Unscaled, ..ClipConfig::default() };
        let mean = reverse_mean(&x, &eps, &step, &clip).unwrap().get(0, 0);
        assert!((mean - (0.9 - 0.01 * 1.9) / 0.99f64.sqrt()).abs() < 1e-12);
        assert!((mean - 0.8854).abs() < 1e-4);
        // Posterior form: the noise term carries an extra 1/sqrt(1 - ᾱ) factor.
        let post = reverse_mean(&x, &eps, &step, &ClipConfig::default()).unwrap().get(0, 0);
        let beta = 1.0 - 0.5 / step.alpha_bar_prev;
        assert!((post - (0.9 - beta / 0.5f64.sqrt() * 1.9) / (1.0 - beta).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_clips_noise_and_skips_final_noise() {
        let step = coeffs(0.5, 0.1);
        let x = Mat::zeros(1, 1);
        let z = Mat::from_vec(1, 1, vec![5.0]);
        let (xp, mean) = reverse_step(&x, &Mat::zeros(1, 1), &step, &z, &ClipConfig::default()).unwrap();
        assert!((xp.get(0, 0) - mean.get(0, 0) - 0.1 * 3.0).abs() < 1e-15);
        let last = StepCoeffs { t: 1, t_prev: 0, alpha_bar: 0.9, alpha_bar_prev: 1.0, sigma: 0.3 };
        let (xp, mean) = reverse_step(&x, &Mat::zeros(1, 1), &last, &z, &ClipConfig::default()).unwrap();
        assert_eq!(xp, mean);
    }

    #[test]
    fn reverse_step_rejects_non_finite_prediction() {
        let step = coeffs(0.5, 0.1);
        let bad = Mat::from_vec(1, 1, vec![f64::NAN]);
        let r = reverse_step(&Mat::zeros(1, 1), &bad, &step, &Mat::zeros(1, 1), &ClipConfig::default());
        assert!(matches!(r, Err(Error::Diverged(_))));
    }

    #[test]
    fn reverse_with_true_noise_reconstructs_x0() {
        let s = build_cosine_schedule::<f64>(100, 0.02).unwrap();
        let x0 = Mat::from_vec(2, 3, vec![0.5, -0.2, 0.1, 0.7, 0.0, -0.9]);
        let e = Mat::from_vec(2, 3, vec![0.3, 1.3, -1.0, 0.2, -0.4, 0.8]);
        for t in [1, 10, 50, 90] {
            let xt = forward_noise_to(&x0, t, &e, &s).unwrap();
            let ab = s.alpha_bar(t);
            let x0_hat = xt.zip_map(&e, |x, ev| (x - (1.0 - ab).sqrt() * ev) / ab.sqrt());
            assert!(x0_hat.max_abs_diff(&x0) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn strided_plan_shapes() {
        assert_eq!(strided_timesteps(100, 5).unwrap(), vec![100, 80, 60, 40, 20]);
        assert_eq!(strided_timesteps(3, 3).unwrap(), vec![3, 2, 1]);
        assert!(strided_timesteps(3, 4).is_err());
        let s = build_cosine_schedule::<f64>(100, 0.02).unwrap();
        let plan = step_plan(&s, &[100, 80, 60, 40, 20], 0.02, VarianceRule::Forward).unwrap();
        assert_eq!(plan.last().unwrap().t_prev, 0);
        assert!(step_plan(&s, &[20, 40], 0.02, VarianceRule::Forward).is_err());
        assert!(step_plan(&s, &[], 0.02, VarianceRule::Forward).is_err());
    }

    #[test]
    fn sample_chain_records_consistent_states() {
        let s = build_cosine_schedule::<f64>(100, 0.02).unwrap();
        let ts = strided_timesteps(100, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let chain = sample_chain(|x, _| Ok(x.scale(0.5)), (8, 3), &s, &ts, 0.02, &ClipConfig::default(), &mut rng).unwrap();
        assert_eq!(chain.states.len(), 6);
        assert_eq!(chain.means.len(), 5);
        assert_eq!(chain.step_sigmas().len(), 5);
        for i in 0..5 {
            let sigma = chain.steps[i].sigma;
            let rebuilt = chain.means[i].zip_map(&chain.noises[i], |m, z| m + sigma * z);
            assert_eq!(rebuilt, chain.states[i + 1]);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let again = sample_chain(|x, _| Ok(x.scale(0.5)), (8, 3), &s, &ts, 0.02, &ClipConfig::default(), &mut rng2).unwrap();
        assert_eq!(chain, again);
        let mut rng3 = ChaCha8Rng::seed_from_u64(7);
        assert!(sample_chain(|x, _| Ok(x.clone()), (8, 3), &s, &[], 0.02, &ClipConfig::default(), &mut rng3).is_err());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let s = build_cosine_schedule::<f64>(4, 0.02).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with("t,sigma,alpha_bar\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
