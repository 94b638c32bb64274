use diffplan_core::conditioning::*;
use diffplan_core::corpus::{generate_corpus, CorpusSpec, ExpertConfig};
use diffplan_core::scene::{Agent, NavCommand, ScenarioKind, Scene};
use diffplan_core::simulator::SimConfig;
use diffplan_core::traj::{NormalizationSpec, Waypoint};
use std::collections::BTreeMap;

fn scenes(kind: ScenarioKind, n: usize) -> Vec<Scene> {
    let spec = CorpusSpec { seed: 15, counts: BTreeMap::from([(kind, n)]), ..CorpusSpec::default() };
    generate_corpus(&spec, &ExpertConfig::default(), &SimConfig::default()).unwrap().scenes
}

fn featurizer() -> SceneFeaturizer {
    SceneFeaturizer::new(SceneFeaturizerConfig::default(), NormalizationSpec::default()).unwrap()
}

#[test]
fn embedding_is_deterministic() {
    let f = featurizer();
    for s in scenes(ScenarioKind::IntersectionTurn, 3) {
        let a = f.embed_scene_defaults::<f64>(&s).unwrap();
        let b = featurizer().embed_scene_defaults::<f64>(&s).unwrap();
        assert_eq!(a, b);
        let c = embed_scene::<f64>(&s, s.nav, &s.ego.status, &s.history, &SceneFeaturizerConfig::default(), &NormalizationSpec::default()).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.tokens.shape(), (16, 64));
        assert_eq!(a.ego.shape(), (1, 64));
        assert_eq!(a.history.shape(), (4, 3));
    }
}

#[test]
fn token_count_is_fixed_and_padding_is_zero() {
    let f = featurizer();
    let cfg = *f.config();
    let mut s = scenes(ScenarioKind::Straight, 1).remove(0);
    for count in [0usize, 2, 6, 11] {
        s.agents = (0..count)
            .map(|i| Agent { id: i as u32, pose: Waypoint::new(10.0 + 7.0 * i as f64, 9.0, 0.0), velocity: 0.0, length: 4.0, width: 2.0 })
            .collect();
        let raw = f.raw_tokens(&s, s.nav, &s.ego.status).unwrap();
        assert_eq!(raw.len(), cfg.tokens);
        let bundle = f.embed_scene_defaults::<f64>(&s).unwrap();
        assert_eq!(bundle.tokens.rows(), cfg.tokens);
        for k in count.min(cfg.max_agents)..cfg.max_agents {
            assert!(raw[cfg.route_samples + k].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn truncation_keeps_nearest_agents_with_id_ties() {
    let f = featurizer();
    let cfg = *f.config();
    let mut s = scenes(ScenarioKind::Straight, 1).remove(0);
    let ego = s.ego.pose;
    // Eight agents on a circle (equal distance) plus one far away.
    s.agents = (0..8)
        .map(|i| {
            let a = i as f64 * std::f64::consts::FRAC_PI_4;
            Agent { id: 20 - i as u32, pose: Waypoint::new(ego.x + 12.0 * a.cos(), ego.y + 12.0 * a.sin(), 0.0), velocity: 0.0, length: 4.0, width: 2.0 }
        })
        .chain(std::iter::once(Agent { id: 0, pose: Waypoint::new(ego.x + 90.0, ego.y, 0.0), velocity: 0.0, length: 4.0, width: 2.0 }))
        .collect();
    let raw = f.raw_tokens(&s, s.nav, &s.ego.status).unwrap();
    // Ids 13..=18 win the tie; the far agent (id 0) is dropped.
    let expected: Vec<u32> = (13..=18).collect();
    for (k, id) in expected.iter().enumerate() {
        let a = s.agents.iter().find(|a| a.id == *id).unwrap();
        let l = s.to_ego_frame(&a.pose);
        assert!((raw[cfg.route_samples + k][0] - l.x / 40.0).abs() < 1e-12, "slot {k}");
        assert!((raw[cfg.route_samples + k][1] - l.y / 20.0).abs() < 1e-12, "slot {k}");
    }
}

#[test]
fn navigation_command_changes_one_raw_token() {
    let f = featurizer();
    let s = scenes(ScenarioKind::Curve, 1).remove(0);
    let a = f.raw_tokens(&s, NavCommand::FollowLane, &s.ego.status).unwrap();
    let b = f.raw_tokens(&s, NavCommand::TurnLeft, &s.ego.status).unwrap();
    let differing: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
    assert_eq!(differing, vec![f.config().route_samples + f.config().max_agents]);
}

#[test]
fn inconsistent_config_is_rejected() {
    let bad = SceneFeaturizerConfig { tokens: 15, ..SceneFeaturizerConfig::default() };
    let err = bad.validate().unwrap_err().to_string();
    assert!(err.contains("conditioning.tokens"), "{err}");
    assert!(SceneFeaturizer::new(bad, NormalizationSpec::default()).is_err());
}
