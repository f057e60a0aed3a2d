use opg_core::config::Config;
use opg_core::evalbench::{
    aggregate, challenging_layout, generate_case, run_protocol, run_trial, write_metrics_csv,
    EvalRewards, MotionOutcome, Protocol, ProtocolKind, TrialRecord,
};
use opg_core::perception::{occlusion_report, OcclusionOptions};
use opg_core::policy::Policy;
use opg_core::reward::{RewardParams, ThresholdState};
use opg_core::sim::{ActionKind, ObjectSpec, Pose, Scene, SceneObject};
use opg_core::trainer::Trainer;

fn fresh_policy(use_coordinator: bool) -> Policy {
    let mut cfg = Config::default();
    cfg.workspace = 32;
    let t = Trainer::new(cfg).unwrap();
    Policy::from_records(&t.checkpoint_records().unwrap(), use_coordinator)
        .unwrap()
        .0
}

/// A policy whose maps are flat: every best action lands on cell (0, 0), rotation 0.
fn flat_policy(push_bias: f32, grasp_bias: f32) -> Policy {
    let mut p = fresh_policy(false);
    for (head, bias) in [("push", push_bias), ("grasp", grasp_bias)] {
        let w = p.qnet.params.id(&format!("{head}.2.w")).unwrap();
        let b = p.qnet.params.id(&format!("{head}.2.b")).unwrap();
        p.qnet.params.value_mut(w).fill(0.0);
        p.qnet.params.value_mut(b).fill(bias);
    }
    p
}

fn rewards() -> EvalRewards {
    let params = RewardParams::default();
    EvalRewards {
        params,
        threshold: ThresholdState::from_params(&params),
    }
}

fn one_block(half: f64, x: f64, y: f64) -> Scene {
    let mut scene = Scene::new(32, 32, 0);
    let v = vec![[-half, -half], [half, -half], [half, half], [-half, half]];
    scene.objects.push(SceneObject {
        spec: ObjectSpec::new(0, 2, v).unwrap(),
        pose: Pose::new(x, y, 0.0),
    });
    scene.stack_order.push(0);
    scene.validate().unwrap();
    scene
}

fn record(success: bool, attempts: usize) -> TrialRecord {
    TrialRecord {
        protocol: "random15".into(),
        seed: 0,
        target: 0,
        motions: Vec::new(),
        success,
        attempts,
    }
}

#[test]
fn occluded_bins_hold_at_generation() {
    let opts = OcclusionOptions::default();
    for (lo, hi) in [(0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0)] {
        let p = Protocol::standard(ProtocolKind::Occluded { lo, hi });
        assert_eq!((p.n_trials, p.max_attempts), (100, 10));
        for seed in 0..40 {
            let (scene, target) = generate_case(&p, p.seed_base + seed, 64).unwrap();
            assert_eq!(scene.len(), 30);
            let o = occlusion_report(&scene, target, &opts)
                .unwrap()
                .occluded_rate;
            assert!(o >= lo && o < hi, "bin [{lo}, {hi}) seed {seed}: o = {o}");
        }
    }
}

#[test]
fn random_cases_have_the_right_size() {
    for (kind, n) in [
        (ProtocolKind::Random15, 15),
        (ProtocolKind::Random30, 30),
        (ProtocolKind::Random30Hard, 30),
    ] {
        let p = Protocol::standard(kind);
        assert_eq!((p.n_trials, p.max_attempts, p.fail_limit), (100, 5, 5));
        for seed in 0..10 {
            let (scene, target) = generate_case(&p, seed, 64).unwrap();
            assert_eq!(scene.len(), n);
            assert!(scene.contains(target));
            assert_eq!(generate_case(&p, seed, 64).unwrap(), (scene, target));
        }
    }
    // the hard variant takes the most occluded object
    let p = Protocol::standard(ProtocolKind::Random30Hard);
    let (scene, target) = generate_case(&p, 5, 64).unwrap();
    let opts = OcclusionOptions::default();
    let o = |id| occlusion_report(&scene, id, &opts).unwrap().occluded_rate;
    assert!(scene.ids().all(|id| o(id) <= o(target)));
}

#[test]
fn challenging_layouts_are_valid_fixed_and_occluded() {
    let opts = OcclusionOptions::default();
    for k in 1..=6 {
        let (a, ta) = challenging_layout(k).unwrap();
        let (b, tb) = challenging_layout(k).unwrap();
        assert_eq!((&a, ta), (&b, tb));
        a.validate().unwrap();
        let r = occlusion_report(&a, ta, &opts).unwrap();
        assert!(r.occluded_rate > 0.0, "layout {k} target is not covered");
        assert!(r.o_b > 0, "layout {k} target is not surrounded");
        let p = Protocol::standard(ProtocolKind::Challenging(k));
        assert_eq!((p.n_trials, p.max_attempts), (30, 10));
        assert_eq!(generate_case(&p, 99, 64).unwrap(), (a, ta));
    }
    assert!(challenging_layout(0).is_err());
    assert!(challenging_layout(7).is_err());
}

#[test]
fn immediate_grasp_succeeds_in_one() {
    // block over cell (0, 0), small enough that the fingers clear it
    let scene = one_block(1.5, 1.6, 1.6);
    let policy = flat_policy(0.0, 1.0);
    let p = Protocol::standard(ProtocolKind::Random15);
    let r = run_trial(&scene, 0, &policy, &p, &rewards(), 1).unwrap();
    assert!(r.success);
    assert_eq!(r.attempts, 1);
    assert_eq!(r.motions[0].outcome, MotionOutcome::GraspedTarget);
    assert_eq!(r.motions[0].reward, 1.0);
}

#[test]
fn pushing_air_stops_at_fail_limit() {
    let scene = one_block(2.0, 16.3, 16.3);
    let policy = flat_policy(1.0, 0.0);
    let p = Protocol {
        max_attempts: 10,
        ..Protocol::standard(ProtocolKind::Random15)
    };
    let r = run_trial(&scene, 0, &policy, &p, &rewards(), 1).unwrap();
    assert!(!r.success);
    assert_eq!(r.attempts, 5);
    assert!(r.motions.iter().all(|m| m.kind == ActionKind::Push
        && m.reward == 0.0
        && m.outcome == MotionOutcome::Pushed { moved: 0 }));
}

#[test]
fn protocol_runs_are_capped_deterministic_and_read_only() {
    let policy = fresh_policy(true);
    let p = Protocol {
        n_trials: 4,
        max_attempts: 3,
        ..Protocol::standard(ProtocolKind::Random15)
    };
    let sum = policy.checksum();
    let a = run_protocol(&policy, &p, 32, &rewards(), 1).unwrap();
    let b = run_protocol(&policy, &p, 32, &rewards(), 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(policy.checksum(), sum);
    assert_eq!(
        a.iter().map(|r| r.seed).collect::<Vec<_>>(),
        vec![10_000, 10_001, 10_002, 10_003]
    );
    for r in &a {
        assert!(r.attempts <= 3);
        assert_eq!(r.attempts, r.motions.len());
        if r.success {
            assert_eq!(
                r.motions.last().unwrap().outcome,
                MotionOutcome::GraspedTarget
            );
        }
        assert!(r
            .motions
            .iter()
            .all(|m| [0.0, 0.25, 0.5, 1.0].contains(&m.reward)));
    }
    let ablated = Policy {
        use_coordinator: false,
        ..policy.clone()
    };
    assert_eq!(ablated.checksum(), sum);
    run_protocol(&ablated, &p, 32, &rewards(), 2).unwrap();
}

#[test]
fn three_record_fixture() {
    let lines = aggregate(
        "opg",
        &[record(true, 2), record(true, 3), record(false, 5)],
        false,
    )
    .unwrap();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].trials, 3);
    assert!((lines[0].success_rate_pct - 200.0 / 3.0).abs() < 1e-9);
    assert!((lines[0].mean_attempts - 10.0 / 3.0).abs() < 1e-9);
    assert_eq!(lines[1].protocol, "average");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &lines).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "label,protocol,trials,success_rate_pct,mean_attempts\nopg,random15,3,66.67,3.33\nopg,average,3,66.67,3.33\n"
    );

    let succ = aggregate(
        "opg",
        &[record(true, 2), record(true, 3), record(false, 5)],
        true,
    )
    .unwrap();
    assert!((succ[0].mean_attempts - 2.5).abs() < 1e-12);

    let ones: Vec<_> = (0..4).map(|_| record(true, 1)).collect();
    let l = &aggregate("x", &ones, false).unwrap()[0];
    assert_eq!((l.success_rate_pct, l.mean_attempts), (100.0, 1.0));

    let mut two = aggregate("full", &ones, false).unwrap();
    two.extend(aggregate("no_coordinator", &[record(false, 5)], false).unwrap());
    let labels: Vec<_> = two
        .iter()
        .filter(|l| l.protocol != "average")
        .map(|l| l.label.as_str())
        .collect();
    assert_eq!(labels, ["full", "no_coordinator"]);
    assert!(aggregate("x", &[], false).is_err());
}
