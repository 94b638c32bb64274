mod common;

use common::*;
use diffplan_core::denoiser::*;
use diffplan_core::tensor::Mat;

#[test]
fn output_shape_and_zero_init() {
    let cfg = small_config();
    let cond = random_bundle(&cfg, 1);
    let x = Mat::from_fn(4, 3, |r, c| 0.1 * (r + c) as f64);
    let zero = DenoiserParams::<f64>::init(cfg, 2).unwrap();
    assert!(zero.predict_noise(&x, 3, &cond).unwrap().data().iter().all(|&v| v == 0.0));
    let p = random_params(cfg, 3, 1.0);
    let out = p.predict_noise(&x, 3, &cond).unwrap();
    assert_eq!(out.shape(), (4, 3));
    assert!(out.is_finite());
    assert!(p.predict_noise(&Mat::zeros(5, 3), 3, &cond).is_err());
}

#[test]
fn history_encoder_sees_every_component() {
    let cfg = small_config();
    let p = random_params(cfg, 4, 1.0);
    let hist = Mat::from_fn(cfg.history, 3, |r, c| 0.05 * (r * 3 + c) as f64);
    let base = p.encode_history(&hist).unwrap();
    assert_eq!(base, p.encode_history(&hist).unwrap());
    for i in 0..hist.len() {
        let mut h = hist.clone();
        h.data_mut()[i] += 1e-3;
        assert!(p.encode_history(&h).unwrap().max_abs_diff(&base) > 0.0, "component {i}");
    }
    let mut zero_bias = DenoiserParams::<f64>::init(cfg, 5).unwrap();
    for name in ["hist.l1.b", "hist.l2.b"] {
        zero_bias.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let z = zero_bias.encode_history(&Mat::zeros(cfg.history, 3)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn sequence_layout_and_ego_sensitivity() {
    let cfg = small_config();
    let p = random_params(cfg, 6, 1.0);
    let cond = random_bundle(&cfg, 7);
    let x = Mat::from_fn(4, 3, |r, c| 0.2 * (r as f64 - c as f64));
    let actions = p.encode_actions(&x).unwrap();
    let hist = p.encode_history(&cond.history).unwrap();
    let seq = p.assemble_input(&actions, &hist, &cond.pooled).unwrap();
    assert_eq!(seq.shape(), (6, 16));
    assert_eq!(seq.row(4), hist.row(0));
    assert_eq!(seq.row(5), cond.pooled.row(0));

    let base = p.predict_noise(&x, 5, &cond).unwrap();
    let mut other = cond.clone();
    other.ego.data_mut()[0] += 0.5;
    assert!(p.predict_noise(&x, 5, &other).unwrap().max_abs_diff(&base) > 1e-9);
    assert!(p.predict_noise(&x, 6, &cond).unwrap().max_abs_diff(&base) > 1e-9);
}

#[test]
fn pooling_examples() {
    let v = Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
    assert_eq!(pool_semantic(&v).unwrap(), v);
    let pair = Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, -1.0, 2.0, -0.5]);
    assert_eq!(pool_semantic(&pair).unwrap(), Mat::zeros(1, 3));
    let ones_threes = Mat::from_vec(2, 2, vec![1.0, 1.0, 3.0, 3.0]);
    assert_eq!(pool_semantic(&ones_threes).unwrap(), Mat::from_vec(1, 2, vec![2.0, 2.0]));
    assert!(pool_semantic(&Mat::<f64>::zeros(0, 3)).is_err());
}

#[test]
fn parameters_are_named_and_shaped_stably() {
    let cfg = small_config();
    let a = DenoiserParams::<f64>::init(cfg, 1).unwrap();
    let b = DenoiserParams::<f64>::init(cfg, 2).unwrap();
    assert_eq!(a.names(), b.names());
    let named: Vec<_> = a.names().iter().cloned().zip(a.tensors().iter().cloned()).collect();
    assert_eq!(DenoiserParams::from_named(cfg, named.clone()).unwrap(), a);
    let mut wrong = named;
    wrong[0].1 = Mat::zeros(1, 1);
    assert!(DenoiserParams::from_named(cfg, wrong).is_err());
    assert!(DenoiserConfig { heads: 3, ..cfg }.validate().is_err());
}
