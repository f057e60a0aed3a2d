//! Subcommand implementations. `main.rs` only parses arguments and maps errors
//! to exit codes, so everything here is callable from tests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use opg_core::config::Config;
use opg_core::coordinator::{CoordinatorFeatures, LabeledDecision, Mlp};
use opg_core::evalbench::{
    aggregate, parse_protocols, run_protocol, write_metrics_csv, write_records_jsonl, EvalRewards,
    MetricsLine, TrialRecord,
};
use opg_core::nets::QNet;
use opg_core::perception::{dump_stack, render};
use opg_core::policy::{frozen_threshold, Policy};
use opg_core::sim::{ActionKind, ObjectId, Scene, ShapePool};
use opg_core::trainer::{replay_log, run, LogRow, RunSummary, Trainer};
use opg_tensor::gradcheck::{grad_check, GradCheckReport};
use opg_tensor::loss::{huber, huber_grad};
use opg_tensor::ops::{linear, linear_backward};
use opg_tensor::{checkpoint, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Name of the resolved config written next to a training run's logs.
pub const RUN_CONFIG: &str = "config.json";

/// Read a config file (or take the defaults) and apply a seed override.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: Config,
    pub max_iter: u64,
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of starting fresh. Its stored config wins.
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunSummary> {
    let mut trainer = match &args.resume {
        Some(path) => Trainer::load_checkpoint(path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?,
        None => Trainer::new(args.config.clone())?,
    };
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    fs::write(
        args.out_dir.join(RUN_CONFIG),
        serde_json::to_string_pretty(&trainer.config)?,
    )?;
    let summary = run(&mut trainer, args.max_iter, &args.out_dir)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub protocols: PathBuf,
    pub out_dir: PathBuf,
    pub no_coordinator: bool,
    pub threads: usize,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub lines: Vec<MetricsLine>,
    pub records: Vec<TrialRecord>,
    pub metrics_csv: PathBuf,
    pub records_jsonl: PathBuf,
}

pub fn eval_label(no_coordinator: bool) -> &'static str {
    if no_coordinator {
        "no_coordinator"
    } else {
        "full"
    }
}

/// Runs every protocol first and writes the CSV and JSONL only once all
/// trials are done, so a failure never leaves partial results behind.
pub fn cmd_evaluate(args: &EvalArgs) -> Result<EvalOutput> {
    let records = checkpoint::read_file(&args.checkpoint)
        .with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    let (policy, config) = Policy::from_records(&records, !args.no_coordinator)
        .with_context(|| format!("loading policy from {}", args.checkpoint.display()))?;
    let rewards = EvalRewards {
        params: config.rewards,
        threshold: frozen_threshold(&records, &config)?,
    };
    let text = fs::read_to_string(&args.protocols)
        .with_context(|| format!("reading protocols {}", args.protocols.display()))?;
    let protocols = parse_protocols(&text)?;

    let mut all = Vec::new();
    for p in &protocols {
        all.extend(run_protocol(
            &policy,
            p,
            config.workspace,
            &rewards,
            args.threads.max(1),
        )?);
    }
    let lines = aggregate(
        eval_label(args.no_coordinator),
        &all,
        config.eval.attempts_successes_only,
    )?;

    fs::create_dir_all(&args.out_dir)?;
    let label = eval_label(args.no_coordinator);
    let metrics_csv = args.out_dir.join(format!("metrics_{label}.csv"));
    let records_jsonl = args.out_dir.join(format!("trials_{label}.jsonl"));
    write_metrics_csv(&metrics_csv, &lines)?;
    write_records_jsonl(&records_jsonl, &all)?;
    Ok(EvalOutput {
        lines,
        records: all,
        metrics_csv,
        records_jsonl,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

/// Re-execute the rows of `trial_log` that ran in `scene_file` and fail on the
/// first mismatch. Without an explicit config, a `config.json` beside the log
/// is used, falling back to the defaults. Returns the number of rows replayed.
pub fn cmd_replay(
    trial_log: &Path,
    scene_file: &Path,
    out_dir: &Path,
    config: Option<Config>,
) -> Result<usize> {
    let config = match config {
        Some(c) => c,
        None => {
            let sibling = trial_log
                .parent()
                .unwrap_or(Path::new("."))
                .join(RUN_CONFIG);
            if sibling.exists() {
                Config::load(&sibling)?
            } else {
                Config::default()
            }
        }
    };
    let rows = read_log(trial_log)?;
    let scene = Scene::from_json(
        &fs::read_to_string(scene_file)
            .with_context(|| format!("reading {}", scene_file.display()))?,
    )?;
    match replay_log(&scene, &rows, &config)? {
        Ok((count, last)) => {
            if count == 0 {
                bail!(
                    "no rows of {} ran in scene {}",
                    trial_log.display(),
                    scene.seed
                );
            }
            fs::create_dir_all(out_dir)?;
            fs::write(
                out_dir.join(format!("replayed_{:05}.json", scene.seed)),
                last.to_json(),
            )?;
            Ok(count)
        }
        Err(drift) => Err(anyhow!("{drift}")),
    }
}

pub fn cmd_render(scene_file: &Path, target: ObjectId, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let scene = Scene::from_json(
        &fs::read_to_string(scene_file)
            .with_context(|| format!("reading {}", scene_file.display()))?,
    )?;
    let stack = render(&scene, target)?;
    Ok(dump_stack(&stack, out_dir, 0, 0)?)
}

/// A 1e-3 step straddles ReLU kinks on a few of the Q-net's parameters; f64 affords a smaller one.
pub const KINK_SAFE_STEP: f64 = 1e-5;

/// Huber loss at one pixel of a push map, checked against central differences
/// on every Q-net parameter. Rotation 11 is off the quarter-turn lattice so the
/// bilinear resampling path is exercised.
pub fn qnet_grad_check(seed: u64, width: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::new(width, width, seed).spawn_random(4, &ShapePool::default(), &mut rng)?;
    let state: Tensor<f64> = render(&scene, scene.stack_order[0])?.to_tensor().cast();
    let mut net = QNet::<f64>::new(&mut rng);
    // zero biases on zero-padded input sit exactly on ReLU kinks
    for p in net
        .params
        .params_mut()
        .iter_mut()
        .filter(|p| p.name.ends_with(".b"))
    {
        for v in p.value.data_mut() {
            *v = rng.gen_range(0.05..0.2);
        }
    }
    let (target, kind, rot, x, y) = (0.7, ActionKind::Push, 11, width * 5 / 8, width / 4);
    let loss = |s: &ParamStore<f64>| {
        let n = QNet::with_params(s.clone()).expect("same layout");
        huber(
            n.forward_action(&state, kind, rot, x, y)
                .expect("in range")
                .0
                - target,
        )
    };
    Ok(grad_check(
        &mut net.params,
        loss,
        |s| {
            s.zero_grad();
            let mut n = QNet::with_params(s.clone()).expect("same layout");
            let (q, cache, px) = n.forward_action(&state, kind, rot, x, y).expect("in range");
            n.backward_action(&cache, kind, px, huber_grad(q - target))
                .expect("in range");
            *s = n.params;
            huber(q - target)
        },
        KINK_SAFE_STEP,
    ))
}

/// Cross-entropy of the coordinator MLP on one labelled decision.
pub fn coordinator_grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::<f64>::new(&mut rng);
    let ex = LabeledDecision {
        features: CoordinatorFeatures {
            q_p: rng.gen_range(-0.5..1.5),
            q_g: rng.gen_range(-0.5..1.5),
            o: rng.gen_range(0.0..1.0),
            a_b: rng.gen_range(0.0..1.0),
            a_n: rng.gen_range(0.0..3.0),
            f_c: rng.gen_range(0..5) as f64,
        },
        label: rng.gen_range(0..2),
    };
    Ok(grad_check(
        &mut net.params,
        |s| {
            Mlp::with_params(s.clone())
                .expect("same layout")
                .mean_loss([&ex])
        },
        |s| {
            s.zero_grad();
            let mut m = Mlp::with_params(s.clone()).expect("same layout");
            let l = m.loss_backward(&ex, 1.0).expect("valid example");
            *s = m.params;
            l
        },
        1e-3,
    ))
}

/// A single fully connected layer under a linear loss; finite differences are exact up to rounding.
pub fn linear_grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |dims: &[usize]| {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let x: Tensor<f64> = random(&[6])?;
    let c: Tensor<f64> = random(&[3])?;
    let mut store = ParamStore::new();
    store.add("w", random(&[3, 6])?)?;
    store.add("b", random(&[3])?)?;
    let loss = |s: &ParamStore<f64>| {
        let y = linear(&x, &s.params()[0].value, &s.params()[1].value).expect("shapes agree");
        y.data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    Ok(grad_check(
        &mut store,
        loss,
        |s| {
            let w = s.params()[0].value.clone();
            let (mut gw, mut gb) = (Tensor::zeros(&[3, 6]), Tensor::zeros(&[3]));
            linear_backward(&x, &w, &c, &mut gw, &mut gb).expect("shapes agree");
            s.params_mut()[0].grad = gw;
            s.params_mut()[1].grad = gb;
            loss(s)
        },
        1e-3,
    ))
}

/// Name, report and tolerance of each gradient check.
pub type GradCheckLine = (&'static str, GradCheckReport, f64);

pub fn cmd_grad_check(seed: u64, width: usize) -> Result<Vec<GradCheckLine>> {
    Ok(vec![
        ("linear", linear_grad_check(seed)?, 1e-6),
        ("coordinator", coordinator_grad_check(seed)?, 1e-3),
        ("qnet", qnet_grad_check(seed, width)?, 1e-3),
    ])
}
