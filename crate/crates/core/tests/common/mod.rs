#![allow(dead_code)]

use diffplan_core::denoiser::{ConditioningBundle, DenoiserConfig, DenoiserParams};
use diffplan_core::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn small_config() -> DenoiserConfig {
    DenoiserConfig { waypoints: 4, width: 16, heads: 2, layers: 1, cond_tokens: 5, max_timestep: 20, history: 2, ffn_hidden: 24 }
}

pub fn random_bundle(cfg: &DenoiserConfig, seed: u64) -> ConditioningBundle<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = |r, c| Mat::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let tokens = g(cfg.cond_tokens, cfg.width);
    let ego = g(1, cfg.width);
    let hist = g(cfg.history, 3).scale(0.1);
    ConditioningBundle::new(tokens, ego, hist).unwrap()
}

/// Parameters with every tensor, modulation and head included, set to noise.
pub fn random_params(cfg: DenoiserConfig, seed: u64, scale: f64) -> DenoiserParams<f64> {
    let mut p = DenoiserParams::init(cfg, seed).unwrap();
    p.randomize_all(seed + 1, scale);
    p
}

/// `|a - n| / max(|a|, |n|, 1e-6)` maximized over the chosen parameter
/// entries, where `n` is the central difference with step `h`.
pub fn max_fd_error<F>(params: &DenoiserParams<f64>, analytic: &[Mat<f64>], h: f64, every: usize, loss: F) -> f64
where
    F: Fn(&DenoiserParams<f64>) -> f64,
{
    let mut worst = 0.0f64;
    let mut p = params.clone();
    let mut k = 0usize;
    for ti in 0..params.tensors().len() {
        for idx in 0..params.tensors()[ti].len() {
            k += 1;
            if (k - 1) % every != 0 {
                continue;
            }
            let orig = params.tensors()[ti].data()[idx];
            p.tensors_mut()[ti].data_mut()[idx] = orig + h;
            let up = loss(&p);
            p.tensors_mut()[ti].data_mut()[idx] = orig - h;
            let down = loss(&p);
            p.tensors_mut()[ti].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
