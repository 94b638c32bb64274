use diffplan_core::scheduler::*;
use diffplan_core::tensor::Mat;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Plain scalar recomputation of the squared-cosine schedule, kept free of
/// any crate types.
fn oracle_schedule(steps: usize, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let s = 0.008;
    let mut profile = Vec::new();
    for t in 0..=steps {
        let angle = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::PI / 2.0;
        profile.push(angle.cos().powi(2));
    }
    let mut sig = Vec::new();
    let mut bars = vec![1.0];
    for t in 1..=steps {
        let ratio = (profile[t] / profile[0]) / (profile[t - 1] / profile[0]);
        let mut beta = 1.0 - ratio;
        if beta > 0.999 {
            beta = 0.999;
        }
        let sg = if beta.sqrt() < floor { floor } else { beta.sqrt() };
        sig.push(sg);
        bars.push(bars[t - 1] * (1.0 - sg * sg));
    }
    (sig, bars)
}

fn scalar(v: f64) -> Mat<f64> {
    Mat::from_vec(1, 1, vec![v])
}

#[test]
fn cosine_schedule_matches_scalar_oracle() {
    let sched = build_cosine_schedule::<f64>(100, 0.02).unwrap();
    let (sig, bars) = oracle_schedule(100, 0.02);
    for t in 1..=100 {
        assert!((sched.sigma(t) - sig[t - 1]).abs() <= 1e-12, "sigma at {t}");
        assert!((sched.alpha_bar(t) - bars[t]).abs() <= 1e-12, "alpha_bar at {t}");
    }
}

#[test]
fn single_step_schedule() {
    let sched = build_cosine_schedule::<f64>(1, 0.02).unwrap();
    assert_eq!(sched.steps(), 1);
    let (sig, _) = oracle_schedule(1, 0.02);
    assert_eq!(sched.sigma(1), sig[0]);
    assert!(build_cosine_schedule::<f64>(10, 1.0).is_err());
    assert!(build_cosine_schedule::<f64>(0, 0.02).is_err());
}

#[test]
fn forward_marginal_variance_monte_carlo() {
    let sched = build_cosine_schedule::<f64>(100, 0.02).unwrap();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &t in &[1usize, 10, 50, 90] {
        // Composed single steps, each with fresh noise.
        let mut stepped = Vec::with_capacity(n);
        let mut direct = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = scalar(0.0);
            for k in 1..=t {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = forward_noise_step(&x, sched.sigma(k), &scalar(e)).unwrap();
            }
            stepped.push(x.get(0, 0));
            let e: f64 = StandardNormal.sample(&mut rng);
            direct.push(forward_noise_to(&scalar(0.5), t, &scalar(e), &sched).unwrap().get(0, 0));
        }
        let target = 1.0 - sched.alpha_bar(t);
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
        };
        let (_, vs) = var(&stepped);
        let (md, vd) = var(&direct);
        assert!((vs / target - 1.0).abs() < 0.02, "stepped variance {vs} vs {target} at t={t}");
        assert!((vd / target - 1.0).abs() < 0.02, "direct variance {vd} vs {target} at t={t}");
        let mean_target = sched.alpha_bar(t).sqrt() * 0.5;
        assert!((md - mean_target).abs() < 0.02 * target.sqrt().max(0.05), "direct mean {md} vs {mean_target}");
    }
}

#[test]
fn forward_examples() {
    let x = forward_noise_step(&scalar(0.8), 0.6, &scalar(1.0)).unwrap();
    assert!((x.get(0, 0) - 1.24).abs() < 1e-12);
    assert!(forward_noise_step(&scalar(0.8), 1.0, &scalar(1.0)).is_err());
    let sched = build_cosine_schedule::<f64>(100, 0.02).unwrap();
    let z = forward_noise_to(&scalar(0.0), 30, &scalar(1.5), &sched).unwrap();
    assert!((z.get(0, 0) - (1.0 - sched.alpha_bar(30)).sqrt() * 1.5).abs() < 1e-15);
    assert!(forward_noise_to(&scalar(0.0), 101, &scalar(1.5), &sched).is_err());
}

fn step(alpha_bar: f64, sigma: f64) -> StepCoeffs<f64> {
    StepCoeffs { t: 2, t_prev: 1, alpha_bar, alpha_bar_prev: alpha_bar / (1.0 - sigma * sigma), sigma }
}

#[test]
fn reverse_step_scalar_example() {
    let clip = ClipConfig { mean_rule: MeanRule::Unscaled, ..ClipConfig::default() };
    let (x_prev, mean) = reverse_step(&scalar(0.9), &scalar(1.9), &step(0.5, 0.1), &scalar(0.0), &clip).unwrap();
    let x0_hat = (0.9 - 0.5f64.sqrt() * 1.9) / 0.5f64.sqrt();
    assert!((x0_hat + 0.6273).abs() < 1e-4);
    let expected = (0.9 - 0.01 * 1.9) / 0.99f64.sqrt();
    assert!((mean.get(0, 0) - expected).abs() < 1e-12);
    assert!((expected - 0.8854).abs() < 1e-4);
    assert_eq!(x_prev, mean);
}

#[test]
fn reverse_step_zero_prediction_rescales() {
    for rule in [MeanRule::Unscaled, MeanRule::Posterior] {
        let clip = ClipConfig { mean_rule: rule, ..ClipConfig::default() };
        let (x_prev, _) = reverse_step(&scalar(0.3), &scalar(0.0), &step(0.8, 0.2), &scalar(0.0), &clip).unwrap();
        assert!((x_prev.get(0, 0) - 0.3 / (1.0 - 0.04f64).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn reverse_step_clips_noise_and_final_step_is_noise_free() {
    let clip = ClipConfig::default();
    let s = step(0.8, 0.2);
    let (x_prev, mean) = reverse_step(&scalar(0.1), &scalar(0.0), &s, &scalar(5.0), &clip).unwrap();
    assert!((x_prev.get(0, 0) - (mean.get(0, 0) + 0.2 * 3.0)).abs() < 1e-15);
    let last = StepCoeffs { t_prev: 0, ..s };
    let (x_prev, mean) = reverse_step(&scalar(0.1), &scalar(0.0), &last, &scalar(5.0), &clip).unwrap();
    assert_eq!(x_prev, mean);
    assert!(reverse_step(&scalar(0.1), &scalar(f64::NAN), &s, &scalar(0.0), &clip).is_err());
}

#[test]
fn reverse_step_clamps_clean_estimate() {
    let clip = ClipConfig::default();
    // x̂0 = (0.9 + sqrt(0.5)·3)/sqrt(0.5) ≈ 4.27 clamps to 1, so ε' = (0.9 - sqrt(0.5))/sqrt(0.5).
    let s = step(0.5, 0.1);
    let (_, mean) = reverse_step(&scalar(0.9), &scalar(-3.0), &s, &scalar(0.0), &ClipConfig { mean_rule: MeanRule::Unscaled, ..clip }).unwrap();
    let eps = (0.9 - 0.5f64.sqrt()) / 0.5f64.sqrt();
    assert!((mean.get(0, 0) - (0.9 - 0.01 * eps) / 0.99f64.sqrt()).abs() < 1e-12);
}

#[test]
fn strided_chain_records_five_transitions() {
    let sched = build_cosine_schedule::<f64>(100, 0.02).unwrap();
    let ts = strided_timesteps(100, 5).unwrap();
    assert_eq!(ts, vec![100, 80, 60, 40, 20]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chain = sample_chain(|x, _| Ok(x.map(|v| 0.1 * v)), (8, 3), &sched, &ts, 0.02, &ClipConfig::default(), &mut rng).unwrap();
    assert_eq!(chain.states.len(), 6);
    assert_eq!(chain.means.len(), 5);
    assert_eq!(chain.step_sigmas().len(), 5);
    assert!(chain.step_sigmas().iter().all(|&s| s >= 0.02));
    assert!(sample_chain(|x, _| Ok(x.clone()), (8, 3), &sched, &[], 0.02, &ClipConfig::default(), &mut rng).is_err());
    assert!(sample_chain(|x, _| Ok(x.clone()), (8, 3), &sched, &ts, 0.01, &ClipConfig::default(), &mut rng).is_err());
}

#[test]
fn chain_sampling_is_deterministic() {
    let sched = build_cosine_schedule::<f64>(100, 0.02).unwrap();
    let ts = strided_timesteps(100, 5).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        sample_chain(|x, t| Ok(x.map(|v| v * (t as f64 / 200.0))), (8, 3), &sched, &ts, 0.02, &ClipConfig::default(), &mut rng).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn exploring_chains_draw_the_final_step_at_the_floor() {
    let sched = build_cosine_schedule::<f64>(100, 0.02).unwrap();
    let ts = strided_timesteps(100, 5).unwrap();
    let predict = |x: &Mat<f64>, _| Ok(x.map(|v| 0.1 * v));
    let clip = ClipConfig::default();
    let plain = sample_chain(predict, (8, 3), &sched, &ts, 0.05, &clip, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let noisy = sample_chain_with(predict, (8, 3), &sched, &ts, 0.05, &clip, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let last = plain.steps.len() - 1;
    // Identical up to the final step, which only the exploring chain perturbs.
    assert_eq!(plain.states[..=last], noisy.states[..=last]);
    assert_eq!(plain.means, noisy.means);
    assert_eq!(plain.states[last + 1], plain.means[last]);
    assert_eq!(noisy.steps[last].sigma, 0.05);
    let expected = noisy.means[last].zip_map(&noisy.noises[last], |m, z| m + 0.05 * z);
    assert_eq!(noisy.states[last + 1], expected);
    assert!(noisy.noises[last].data().iter().any(|&z| z != 0.0));
    assert!(noisy.noises[last].data().iter().all(|z| z.abs() <= clip.noise_clip));
    let off = noisy.states[last + 1].max_abs_diff(&noisy.means[last]);
    assert!(off > 0.0 && off <= 0.05 * clip.noise_clip);
}

#[test]
fn full_chain_with_oracle_noise_lands_on_target() {
    // With the exact noise predictor for a single memorized target, every
    // x̂0 equals the target, so the final state reproduces it.
    let sched = build_cosine_schedule::<f64>(100, 0.02).unwrap();
    let target = Mat::from_vec(2, 3, vec![0.3, -0.2, 0.05, 0.6, 0.1, -0.4]);
    let ts: Vec<usize> = (1..=100).rev().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let chain = sample_chain(
        |x, t| {
            let ab = sched.alpha_bar(t);
            Ok(x.zip_map(&target, |xv, x0| (xv - ab.sqrt() * x0) / (1.0 - ab).sqrt()))
        },
        (2, 3),
        &sched,
        &ts,
        0.02,
        &ClipConfig::default(),
        &mut rng,
    )
    .unwrap();
    assert!(chain.final_state().max_abs_diff(&target) < 0.05);
}

proptest! {
    #[test]
    fn schedules_are_floored_and_decreasing(steps in 1usize..300, floor in 0.001f64..0.5) {
        let sched = build_cosine_schedule::<f64>(steps, floor).unwrap();
        for t in 1..=steps {
            prop_assert!(sched.sigma(t) >= floor && sched.sigma(t) < 1.0);
            prop_assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
        }
    }

    #[test]
    fn true_noise_recovers_clean_estimate(x0 in -0.9f64..0.9, e in -2.0f64..2.0, t in 1usize..=100) {
        let sched = build_cosine_schedule::<f64>(100, 0.02).unwrap();
        let x_t = forward_noise_to(&scalar(x0), t, &scalar(e), &sched).unwrap();
        let ab = sched.alpha_bar(t);
        let x0_hat = (x_t.get(0, 0) - (1.0 - ab).sqrt() * e) / ab.sqrt();
        prop_assert!((x0_hat - x0).abs() <= 1e-9);
        // The reverse mean built from the true noise is the posterior mean around x0.
        let s = StepCoeffs::single(&sched, t).unwrap();
        let (_, mean) = reverse_step(&x_t, &scalar(e), &s, &scalar(0.0), &ClipConfig::default()).unwrap();
        let abp = sched.alpha_bar(t - 1);
        let beta = s.beta();
        let post = (abp.sqrt() * beta / (1.0 - ab)) * x0 + ((1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab)) * x_t.get(0, 0);
        prop_assert!((mean.get(0, 0) - post).abs() <= 1e-8 * (1.0 + post.abs()));
    }

    #[test]
    fn recorded_states_follow_means_and_noises(seed in 0u64..1000, steps in 1usize..8) {
        let sched = build_cosine_schedule::<f64>(100, 0.02).unwrap();
        let ts = strided_timesteps(100, steps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = sample_chain(|x, _| Ok(x.map(|v| 0.3 * v.sin())), (4, 3), &sched, &ts, 0.05, &ClipConfig::default(), &mut rng).unwrap();
        for i in 0..chain.len() {
            let sigma = chain.steps[i].sigma;
            let rebuilt = chain.means[i].zip_map(&chain.noises[i], |m, z| m + sigma * z);
            prop_assert_eq!(&rebuilt, &chain.states[i + 1]);
            prop_assert!(chain.noises[i].data().iter().all(|z| z.abs() <= 3.0));
        }
        prop_assert!(chain.states[0].data().iter().all(|z| z.abs() <= 3.0));
    }
}
