use diffplan_core::checkpoint::*;
use diffplan_core::conditioning::SceneFeaturizerConfig;
use diffplan_core::denoiser::{DenoiserConfig, DenoiserParams};
use diffplan_core::traj::NormalizationSpec;
use diffplan_core::Error;

fn sample() -> Checkpoint<f64> {
    let cfg = DenoiserConfig { width: 16, heads: 2, layers: 1, ffn_hidden: 24, ..DenoiserConfig::default() };
    let mut params = DenoiserParams::init(cfg, 3).unwrap();
    params.randomize_all(4, 1.0);
    Checkpoint {
        params,
        normalization: NormalizationSpec::default(),
        conditioning: SceneFeaturizerConfig { width: 16, ..SceneFeaturizerConfig::default() },
        meta: serde_json::json!({"stage": "il", "steps": 12}),
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let ck = sample();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(back.params, ck.params);
    assert_eq!(back.normalization, ck.normalization);
    assert_eq!(back.conditioning, ck.conditioning);
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = sample().to_bytes().unwrap();
    assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::<f64>::from_bytes(&bytes[..10]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::<f64>::from_bytes(&longer).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::<f64>::from_bytes(&magic).is_err());
    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(Checkpoint::<f64>::from_bytes(&version), Err(Error::Version { found: 7, expected: CHECKPOINT_VERSION })));
}
