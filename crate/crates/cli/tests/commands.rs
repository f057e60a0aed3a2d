use std::fs;
use std::path::Path;

use opg_cli::{
    cmd_evaluate, cmd_render, cmd_replay, cmd_train, read_log, resolve_config, EvalArgs, TrainArgs,
    RUN_CONFIG,
};
use opg_core::config::Config;

fn small_config(seed: u64) -> Config {
    let mut c = Config::default();
    c.seed = seed;
    c.workspace = 32;
    c.curriculum.boundaries = [20, 40, 60];
    c
}

fn train(dir: &Path, seed: u64, iters: u64) {
    cmd_train(&TrainArgs {
        config: small_config(seed),
        max_iter: iters,
        out_dir: dir.to_path_buf(),
        resume: None,
    })
    .unwrap();
}

fn first_scene(dir: &Path) -> std::path::PathBuf {
    let mut scenes: Vec<_> = fs::read_dir(dir.join("scenes"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    scenes.sort();
    scenes.remove(0)
}

#[test]
fn ten_iterations_give_ten_rows_and_a_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), 3, 10);
    assert_eq!(
        read_log(&dir.path().join("trials.jsonl")).unwrap().len(),
        10
    );
    assert!(dir.path().join("final.opgw").exists());
    assert_eq!(
        fs::read_dir(dir.path().join("checkpoints"))
            .unwrap()
            .count(),
        0
    );
    let saved = Config::load(&dir.path().join(RUN_CONFIG)).unwrap();
    assert_eq!(saved, small_config(3));
}

#[test]
fn invalid_config_key_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    let err = resolve_config(Some(&cfg), None).unwrap_err();
    assert!(format!("{err:#}").contains("learning_rate"));
    fs::write(&cfg, r#"{"rewards": {"beta": 1.5}}"#).unwrap();
    assert!(format!("{:#}", resolve_config(Some(&cfg), None).unwrap_err()).contains("beta"));
    fs::write(&cfg, r#"{"workspace": 32}"#).unwrap();
    let c = resolve_config(Some(&cfg), Some(9)).unwrap();
    assert_eq!((c.workspace, c.seed), (32, 9));
}

#[test]
fn replay_of_a_fresh_log_is_clean_and_edits_are_caught() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), 5, 15);
    let log = dir.path().join("trials.jsonl");
    let scene = first_scene(dir.path());
    let n = cmd_replay(&log, &scene, &dir.path().join("replay"), None).unwrap();
    assert!(n > 0);

    // change the reward on one row
    let text = fs::read_to_string(&log).unwrap();
    let mut rows: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let step = rows[2]["step"].as_u64().unwrap();
    let iter = rows[2]["iter"].as_u64().unwrap();
    let old = rows[2]["reward"].as_f64().unwrap();
    rows[2]["reward"] = serde_json::json!(if old == 1.0 { 0.25 } else { 1.0 });
    let edited = dir.path().join("edited.jsonl");
    let body: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(&edited, body).unwrap();
    let msg = cmd_replay(&edited, &scene, &dir.path().join("replay2"), None)
        .unwrap_err()
        .to_string();
    assert!(msg.contains(&format!("iter {iter} step {step}")), "{msg}");
    assert!(msg.contains("reward"), "{msg}");
}

#[test]
fn render_writes_three_rasters() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("one.json");
    fs::write(
        &scene,
        r#"{"workspace":[16,16],"seed":0,"objects":[{"id":0,"color_id":1,"vertices":[[-2,-2],[2,-2],[2,2],[-2,2]],"pose":[8,8,0]}],"stack_order":[0]}"#,
    )
    .unwrap();
    let out = dir.path().join("r");
    let files = match cmd_render(&scene, 0, &out) {
        Ok(f) => f,
        Err(e) => panic!("{e:#}"),
    };
    assert_eq!(files.len(), 3);
    for f in &files {
        assert!(f.exists());
    }
    let depth = fs::read(out.join("0_0_depth.pgm")).unwrap();
    assert!(depth.starts_with(b"P5\n16 16\n255\n"));
    assert!(cmd_render(&scene, 4, &out).is_err());
}

#[test]
fn evaluate_writes_csv_for_both_controllers_and_nothing_on_a_bad_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), 1, 5);
    let protocols = dir.path().join("p.json");
    fs::write(
        &protocols,
        r#"[{"name":"random15","n_trials":2,"max_attempts":3,"fail_limit":5,"seed_base":10000}]"#,
    )
    .unwrap();
    let out = dir.path().join("eval");
    let mut args = EvalArgs {
        checkpoint: dir.path().join("final.opgw"),
        protocols: protocols.clone(),
        out_dir: out.clone(),
        no_coordinator: false,
        threads: 2,
    };
    let full = cmd_evaluate(&args).unwrap();
    args.no_coordinator = true;
    let ablated = cmd_evaluate(&args).unwrap();
    for (res, label) in [(&full, "full"), (&ablated, "no_coordinator")] {
        let csv = fs::read_to_string(&res.metrics_csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("label,protocol,trials,success_rate_pct,mean_attempts")
        );
        assert!(lines
            .next()
            .unwrap()
            .starts_with(&format!("{label},random15,2,")));
        assert_eq!(
            fs::read_to_string(&res.records_jsonl)
                .unwrap()
                .lines()
                .count(),
            2
        );
        assert!(res.records.iter().all(|r| r.attempts <= 3));
    }

    let bad = dir.path().join("bad.opgw");
    let mut bytes = fs::read(dir.path().join("final.opgw")).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&bad, bytes).unwrap();
    let fresh = dir.path().join("eval_bad");
    let res = cmd_evaluate(&EvalArgs {
        checkpoint: bad,
        protocols: protocols.clone(),
        out_dir: fresh.clone(),
        no_coordinator: false,
        threads: 1,
    });
    assert!(res.is_err());
    assert!(!fresh.exists());
    let missing = cmd_evaluate(&EvalArgs {
        checkpoint: dir.path().join("nope.opgw"),
        protocols,
        out_dir: fresh.clone(),
        no_coordinator: false,
        threads: 1,
    });
    assert!(missing.is_err());
    assert!(!fresh.exists());
}

#[test]
fn resume_appends_to_the_same_log() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), 2, 6);
    cmd_train(&TrainArgs {
        config: Config::default(),
        max_iter: 9,
        out_dir: dir.path().to_path_buf(),
        resume: Some(dir.path().join("final.opgw")),
    })
    .unwrap();
    let rows = read_log(&dir.path().join("trials.jsonl")).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.iter).collect::<Vec<_>>(),
        (0..9).collect::<Vec<_>>()
    );
    // the stored config wins over the one passed in
    assert_eq!(
        Config::load(&dir.path().join(RUN_CONFIG)).unwrap(),
        small_config(2)
    );
}
