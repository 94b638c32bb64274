use diffplan_core::corpus::*;
use diffplan_core::rng::derive_rng;
use diffplan_core::scene::ScenarioKind;
use diffplan_core::simulator::{constant_velocity_planner, rollout, score_nc, score_trajectory, SimConfig};
use diffplan_core::Error;
use std::collections::BTreeMap;

fn spec_with(seed: u64, counts: &[(ScenarioKind, usize)]) -> CorpusSpec {
    CorpusSpec { seed, counts: counts.iter().copied().collect::<BTreeMap<_, _>>(), ..CorpusSpec::default() }
}

fn generate(spec: &CorpusSpec) -> GeneratedCorpus {
    generate_corpus(spec, &ExpertConfig::default(), &SimConfig::default()).unwrap()
}

#[test]
fn generation_is_deterministic_and_counts_match() {
    let spec = CorpusSpec { seed: 41, counts: reference_counts(24), ..CorpusSpec::default() };
    let a = corpus_to_string(&generate(&spec).scenes).unwrap();
    let b = corpus_to_string(&generate(&spec).scenes).unwrap();
    assert_eq!(a, b);
    let only = generate(&spec_with(5, &[(ScenarioKind::Straight, 10)]));
    assert_eq!(only.scenes.len(), 10);
    assert!(only.scenes.iter().all(|s| s.kind == ScenarioKind::Straight));
    assert_eq!(reference_counts(200).values().sum::<usize>(), 200);
    assert_eq!(reference_counts(50).values().sum::<usize>(), 50);
}

#[test]
fn every_scene_is_valid_and_its_oracle_is_feasible() {
    let spec = CorpusSpec { seed: 9, counts: reference_counts(30), ..CorpusSpec::default() };
    let corpus = generate(&spec);
    let sim = SimConfig::default();
    for (scene, oracle) in corpus.scenes.iter().zip(&corpus.oracle) {
        scene.validate().unwrap();
        let variants = expert_variants(scene, spec.waypoints, spec.dt_waypoint, &ExpertConfig::default()).unwrap();
        assert_eq!(variants.len(), oracle.len());
        for t in &variants {
            let b = score_trajectory(scene, t, &sim).unwrap();
            assert!(b.dac == 1.0 && b.comfort == 1.0 && b.nc == 1.0);
            assert!(b.pdms >= spec.oracle_floor);
        }
    }
    let manifest = CorpusManifest::new(&spec, &corpus);
    assert!(manifest.oracle_pdms_floor >= spec.oracle_floor);
    assert_eq!(manifest.scenes, 30);
}

#[test]
fn forks_are_bimodal_with_an_infeasible_average() {
    let spec = spec_with(77, &[(ScenarioKind::Fork, 6)]);
    let corpus = generate(&spec);
    let sim = SimConfig::default();
    let expert = ExpertConfig::default();
    for scene in &corpus.scenes {
        assert_eq!(scene.alternatives.len(), 2);
        let (l, r) = (&scene.alternatives[0], &scene.alternatives[1]);
        assert!((l.length() - r.length()).abs() < 1e-6 * l.length());
        let variants = expert_variants(scene, 8, 0.5, &expert).unwrap();
        let lat: Vec<f64> = variants.iter().map(|t| t.waypoints.last().unwrap().y).collect();
        assert!(lat[0] * lat[1] < 0.0, "detours should leave on opposite sides: {lat:?}");
        let mean = average_trajectory(&variants).unwrap();
        assert_eq!(score_nc(&rollout(scene, &mean, sim.dt_tick).unwrap(), &sim), 0.0);
    }
}

#[test]
fn fork_variant_choice_is_balanced() {
    let corpus = generate(&spec_with(3, &[(ScenarioKind::Fork, 1)]));
    let scene = &corpus.scenes[0];
    let expert = ExpertConfig::default();
    let left = expert_on(scene, Some(0), 8, 0.5, &expert).unwrap();
    let mut hits = 0;
    for i in 0..1000 {
        let t = oracle_expert(scene, &mut derive_rng(99, "fork.draw", i), 8, 0.5, &expert).unwrap();
        hits += usize::from(t == left);
    }
    let frac = hits as f64 / 1000.0;
    assert!((0.45..=0.55).contains(&frac), "left fraction {frac}");
}

#[test]
fn straight_expert_at_the_limit_is_constant_velocity() {
    let corpus = generate(&spec_with(31, &[(ScenarioKind::Straight, 30)]));
    let mut checked = 0;
    for scene in corpus.scenes.iter().filter(|s| s.ego.status.speed == s.speed_limit && s.ego.status.acceleration == 0.0) {
        let expert = expert_on(scene, None, 8, 0.5, &ExpertConfig::default()).unwrap();
        let cv = constant_velocity_planner(scene, 8, 0.5).unwrap();
        for (a, b) in expert.waypoints.iter().zip(&cv.waypoints) {
            assert!((a.x - b.x).abs() <= 1e-9 && (a.y - b.y).abs() <= 1e-9 && (a.heading - b.heading).abs() <= 1e-9, "{a:?} vs {b:?}");
        }
        checked += 1;
    }
    assert!(checked > 0, "no straight scene starts at its speed limit");
}

#[test]
fn constant_velocity_leaves_curved_roads() {
    let corpus = generate(&spec_with(8, &[(ScenarioKind::Curve, 10)]));
    let sim = SimConfig::default();
    let mut violations = 0;
    for scene in &corpus.scenes {
        let b = score_trajectory(scene, &constant_velocity_planner(scene, 8, 0.5).unwrap(), &sim).unwrap();
        if b.dac == 0.0 {
            assert_eq!(b.pdms, 0.0);
            violations += 1;
        }
    }
    assert!(violations >= 5, "only {violations} of 10 curve scenes");
}

#[test]
fn corpus_files_round_trip() {
    let spec = CorpusSpec { seed: 2, counts: reference_counts(12), ..CorpusSpec::default() };
    let scenes = generate(&spec).scenes;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    save_corpus(&path, &scenes).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(back, scenes);
    assert_eq!(corpus_to_string(&back).unwrap(), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn damaged_corpus_files_are_rejected() {
    let scenes = generate(&spec_with(4, &[(ScenarioKind::Straight, 3)])).scenes;
    let text = corpus_to_string(&scenes).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    let mut cut = lines.clone();
    let half = &lines[2][..lines[2].len() / 2];
    cut[2] = half;
    match parse_corpus(cut.join("\n").as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error on line 3, got {other:?}"),
    }

    let bumped = text.replacen(&format!("\"version\":{CORPUS_VERSION}"), "\"version\":99", 1);
    assert!(matches!(parse_corpus(bumped.as_bytes()), Err(Error::Version { found: 99, .. })));

    let short = lines[..3].join("\n");
    assert!(matches!(parse_corpus(short.as_bytes()), Err(Error::Parse { .. })));
    assert!(matches!(parse_corpus("".as_bytes()), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn values_are_written_with_nine_significant_digits() {
    assert_eq!(quantize(1.0 / 3.0), 0.333333333);
    assert_eq!(quantize(123456.7891234), 123456.789);
    assert_eq!(quantize(0.0), 0.0);
    let scenes = generate(&spec_with(6, &[(ScenarioKind::Curve, 2)])).scenes;
    for s in &scenes {
        assert_eq!(s.speed_limit, quantize(s.speed_limit));
        assert!(s.route.points().iter().flatten().all(|&v| v == quantize(v)));
    }
}
