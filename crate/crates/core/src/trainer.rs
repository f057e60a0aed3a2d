//! Staged-curriculum Q-learning loop with replay, logging and checkpoints.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use opg_tensor::checkpoint::{self, Record};
use opg_tensor::loss::{huber, huber_grad};
use opg_tensor::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, CoordLabel, CurriculumConfig};
use crate::coordinator::{decide, Coordinator, LabeledDecision};
use crate::nets::QNet;
use crate::perception::{most_occluded_target, occlusion_report, render};
use crate::policy::{
    blob_text, epsilon, epsilon_greedy_kind, observe, td_target, Result, RunError, CONFIG_RECORD,
    COORD_TAG, QNET_TAG, STATE_RECORD,
};
use crate::reward::{grasp_reward, push_reward, ThresholdState};
use crate::sim::{ActionKind, MotionPrimitive, ObjectId, Scene, ShapePool};

const STATE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    Random,
    MostOccluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    EpsilonGreedy,
    Coordinator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CurriculumStage {
    pub index: usize,
    pub start: u64,
    /// Exclusive; `None` for the open-ended last stage.
    pub end: Option<u64>,
    pub n_targets: usize,
    pub m_obstacles: usize,
    pub target_rule: TargetRule,
    pub controller: Controller,
}

pub fn curriculum_stage(cfg: &CurriculumConfig, iteration: u64) -> CurriculumStage {
    let [b1, b2, b3] = cfg.boundaries;
    let stage = |index, start, end, m, target_rule, controller| CurriculumStage {
        index,
        start,
        end,
        n_targets: cfg.n_targets,
        m_obstacles: m,
        target_rule,
        controller,
    };
    if iteration < b1 {
        stage(
            0,
            0,
            Some(b1),
            cfg.m_start,
            TargetRule::Random,
            Controller::EpsilonGreedy,
        )
    } else if iteration < b2 {
        let frac = (iteration - b1) as f64 / (b2 - b1) as f64;
        let span = cfg.m_ramp_end as f64 - cfg.m_start as f64;
        let m = (cfg.m_start as f64 + span * frac).round() as usize;
        stage(
            1,
            b1,
            Some(b2),
            m,
            TargetRule::Random,
            Controller::Coordinator,
        )
    } else if iteration < b3 {
        stage(
            2,
            b2,
            Some(b3),
            cfg.m_third,
            TargetRule::MostOccluded,
            Controller::Coordinator,
        )
    } else {
        stage(
            3,
            b3,
            None,
            cfg.m_final,
            TargetRule::MostOccluded,
            Controller::Coordinator,
        )
    }
}

/// Independent stream seeds derived from the one config seed.
pub fn subsystem_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SCENE: u64 = 1;
const STREAM_POLICY: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_COORD: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub scene: Scene,
    pub target: ObjectId,
    pub action: MotionPrimitive,
    pub reward: f64,
    /// Absent exactly when the step was terminal.
    pub next_scene: Option<Scene>,
    pub terminal: bool,
}

/// One row of the trial log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub trial: u64,
    pub step: usize,
    pub kind: ActionKind,
    pub rot: usize,
    pub x: usize,
    pub y: usize,
    pub reward: f64,
    /// Push threshold in force when the motion was chosen.
    pub t_g: f64,
    pub o_before: f64,
    /// Absent when the target left the scene.
    pub o_after: Option<f64>,
    pub q_p: f64,
    pub q_g: f64,
    pub coord_p: f64,
    pub terminal: bool,
    pub target: ObjectId,
    /// Best grasp value in the next state; absent at terminal steps.
    pub q_g_next: Option<f64>,
    /// Seed of the scene this motion was executed in.
    pub scene: u64,
    pub stage: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub success: bool,
    pub attempts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub rolling_success_100: f64,
    pub rolling_attempts_100: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct IterationReport {
    pub row: LogRow,
    /// Huber loss on the executed transition before and right after the update.
    pub loss_before: f64,
    pub loss_after: f64,
    pub trial_end: Option<TrialResult>,
    /// Scene spawned at the start of this iteration, if any.
    pub new_scene: Option<Scene>,
    pub metrics: Option<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Episode {
    scene: Scene,
    stage: usize,
    candidates: Vec<ObjectId>,
    target: ObjectId,
    trial: u64,
    step: usize,
    fails: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Rngs {
    scene: ChaCha8Rng,
    policy: ChaCha8Rng,
    coord: ChaCha8Rng,
}

/// Everything besides network tensors needed to continue a run exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerState {
    version: u32,
    iteration: u64,
    threshold: ThresholdState,
    episode: Option<Episode>,
    rngs: Rngs,
    replay: VecDeque<Transition>,
    coord_buffer: VecDeque<LabeledDecision>,
    rolling: VecDeque<TrialResult>,
    losses: Vec<f64>,
    scenes_spawned: u64,
    trials_started: u64,
}

pub struct Trainer {
    pub config: Config,
    pub qnet: QNet<f32>,
    pub coordinator: Coordinator,
    pub threshold: ThresholdState,
    pub replay: VecDeque<Transition>,
    pub iteration: u64,
    optimizer: Adam,
    episode: Option<Episode>,
    rngs: Rngs,
    pool: ShapePool,
    rolling: VecDeque<TrialResult>,
    losses: Vec<f64>,
    scenes_spawned: u64,
    trials_started: u64,
}

fn diverged(iteration: u64, what: impl Into<String>) -> RunError {
    RunError::Diverged {
        iteration,
        what: what.into(),
    }
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut init = ChaCha8Rng::seed_from_u64(subsystem_seed(seed, STREAM_INIT));
        let qnet = QNet::new(&mut init);
        let t = &config.train;
        let coordinator = Coordinator::new(
            &mut init,
            t.coord_lr,
            t.coord_buffer_capacity,
            t.coord_batch_size,
        );
        Ok(Self {
            qnet,
            coordinator,
            threshold: ThresholdState::from_params(&config.rewards),
            replay: VecDeque::new(),
            iteration: 0,
            optimizer: Adam::new(t.lr),
            episode: None,
            rngs: Rngs {
                scene: ChaCha8Rng::seed_from_u64(subsystem_seed(seed, STREAM_SCENE)),
                policy: ChaCha8Rng::seed_from_u64(subsystem_seed(seed, STREAM_POLICY)),
                coord: ChaCha8Rng::seed_from_u64(subsystem_seed(seed, STREAM_COORD)),
            },
            pool: ShapePool::default(),
            rolling: VecDeque::new(),
            losses: Vec::new(),
            scenes_spawned: 0,
            trials_started: 0,
            config,
        })
    }

    pub fn stage(&self) -> CurriculumStage {
        curriculum_stage(&self.config.curriculum, self.iteration)
    }

    /// Current scene and target, if an episode is live.
    pub fn scene(&self) -> Option<(&Scene, ObjectId)> {
        self.episode.as_ref().map(|e| (&e.scene, e.target))
    }

    pub fn rolling(&self) -> (f64, f64) {
        if self.rolling.is_empty() {
            return (0.0, 0.0);
        }
        let n = self.rolling.len() as f64;
        let s = self.rolling.iter().filter(|r| r.success).count() as f64;
        let a: usize = self.rolling.iter().map(|r| r.attempts).sum();
        (s / n, a as f64 / n)
    }

    fn pick_target(
        &mut self,
        scene: &Scene,
        candidates: &[ObjectId],
        rule: TargetRule,
    ) -> Result<ObjectId> {
        match rule {
            TargetRule::Random => {
                if candidates.is_empty() {
                    return Err(crate::sim::SimError::NoCandidates.into());
                }
                Ok(candidates[self.rngs.scene.gen_range(0..candidates.len())])
            }
            TargetRule::MostOccluded => Ok(most_occluded_target(scene, candidates)?),
        }
    }

    /// Spawn a fresh scene when none is live or the stage changed.
    fn ensure_episode(&mut self, stage: &CurriculumStage) -> Result<Option<Scene>> {
        if matches!(&self.episode, Some(e) if e.stage == stage.index) {
            return Ok(None);
        }
        let w = self.config.workspace;
        let seed = self.scenes_spawned;
        self.scenes_spawned += 1;
        // targets go down first so the obstacles land on top of them
        let scene = Scene::new(w, w, seed).spawn_random(
            stage.n_targets + stage.m_obstacles,
            &self.pool,
            &mut self.rngs.scene,
        )?;
        let candidates = scene.stack_order[..stage.n_targets].to_vec();
        let target = self.pick_target(&scene, &candidates, stage.target_rule)?;
        self.episode = Some(Episode {
            scene: scene.clone(),
            stage: stage.index,
            candidates,
            target,
            trial: self.trials_started,
            step: 0,
            fails: 0,
        });
        self.trials_started += 1;
        Ok(Some(scene))
    }

    fn max_next_q(&self, t: &Transition) -> Result<Option<f64>> {
        match &t.next_scene {
            None => Ok(None),
            Some(next) => {
                let state = render(next, t.target)?.to_tensor();
                Ok(Some(self.qnet.forward_qmaps(&state)?.max() as f64))
            }
        }
    }

    /// Accumulate `scale · dHuber/dθ` for one transition against a fixed target.
    fn accumulate(
        &mut self,
        state: &opg_tensor::Tensor<f32>,
        action: &MotionPrimitive,
        y: f64,
        scale: f64,
    ) -> Result<f64> {
        let (q, cache, pixel) =
            self.qnet
                .forward_action(state, action.kind, action.rot_index, action.x, action.y)?;
        let d = q as f64 - y;
        self.qnet
            .backward_action(&cache, action.kind, pixel, (scale * huber_grad(d)) as f32)?;
        Ok(huber(d))
    }

    pub fn step(&mut self) -> Result<IterationReport> {
        let iter = self.iteration;
        let stage = self.stage();
        let new_scene = self.ensure_episode(&stage)?;
        let ep = self.episode.clone().expect("episode is live");
        let opts = self.config.occlusion();
        let params = self.config.rewards;
        let gamma = self.config.train.gamma;

        let obs = observe(&self.qnet, &ep.scene, ep.target, &opts).map_err(|e| match e {
            RunError::Net(n) => diverged(iter, n.to_string()),
            other => other,
        })?;
        let features = obs.features(ep.fails);
        let coord_p = self.coordinator.predict(&features);
        let kind = match stage.controller {
            Controller::EpsilonGreedy => {
                let eps = epsilon(&self.config.epsilon, iter);
                epsilon_greedy_kind(&obs.best_push, &obs.best_grasp, eps, &mut self.rngs.policy)
            }
            Controller::Coordinator => decide(coord_p, self.config.train.coord_threshold),
        };
        let action = obs.primitive(kind);

        let (next_scene, grasp) = match kind {
            ActionKind::Push => (ep.scene.apply_push(&action).0, None),
            ActionKind::Grasp => {
                let (s, o) = ep.scene.apply_grasp(&action, ep.target)?;
                (s, Some(o))
            }
        };
        let terminal = grasp.is_some_and(|g| g.target_was_grasped);
        let o_before = obs.report.occluded_rate;
        let (o_after, q_g_next, max_next) = if terminal {
            (None, None, None)
        } else {
            let next = observe(&self.qnet, &next_scene, ep.target, &opts).map_err(|e| match e {
                RunError::Net(n) => diverged(iter, n.to_string()),
                other => other,
            })?;
            (
                Some(next.report.occluded_rate),
                Some(next.best_grasp.q_value as f64),
                Some(next.qmaps.max() as f64),
            )
        };

        let t_g = self.threshold.t_g;
        let reward = match grasp {
            Some(outcome) => grasp_reward(
                &outcome,
                (action.x, action.y),
                &obs.report.full_mask,
                &params,
            ),
            None => {
                let (o_after, q_next) = (
                    o_after.expect("push keeps target"),
                    q_g_next.expect("non-terminal"),
                );
                let r = push_reward(o_before, o_after, q_next, &self.threshold, &params);
                self.threshold = self.threshold.updated(q_next);
                r
            }
        };
        let y = td_target(reward, max_next, gamma);

        self.replay.push_back(Transition {
            scene: ep.scene.clone(),
            target: ep.target,
            action,
            reward,
            next_scene: (!terminal).then(|| next_scene.clone()),
            terminal,
        });
        while self.replay.len() > self.config.train.replay_capacity {
            self.replay.pop_front();
        }

        let replays = self.config.train.replays_per_iter;
        let scale = 1.0 / (1 + replays) as f64;
        self.qnet.params.zero_grad();
        let loss_before = self.accumulate(&obs.state, &action, y, scale)?;
        // targets for replayed transitions use the current weights on both sides
        let picks: Vec<usize> = (0..replays)
            .map(|_| self.rngs.policy.gen_range(0..self.replay.len()))
            .collect();
        for i in picks {
            let t = self.replay[i].clone();
            let state = render(&t.scene, t.target)?.to_tensor();
            let y_t = td_target(t.reward, self.max_next_q(&t)?, gamma);
            self.accumulate(&state, &t.action, y_t, scale)?;
        }
        self.optimizer.step(&mut self.qnet.params);
        if !self.qnet.params.all_finite() {
            return Err(diverged(iter, "non-finite Q-net parameter after update"));
        }
        let (q_after, _, _) =
            self.qnet
                .forward_action(&obs.state, kind, action.rot_index, action.x, action.y)?;
        let loss_after = huber(q_after as f64 - y);
        if !loss_after.is_finite() {
            return Err(diverged(iter, "non-finite loss"));
        }
        self.losses.push(loss_before);

        if kind == ActionKind::Grasp {
            let example = LabeledDecision {
                features,
                label: match self.config.train.coord_label {
                    CoordLabel::GraspSuccess => grasp.is_some_and(|g| g.success),
                    CoordLabel::TargetGrasped => terminal,
                } as u8,
            };
            self.coordinator
                .record_and_train(example, &mut self.rngs.coord)?;
        }

        let row = LogRow {
            iter,
            trial: ep.trial,
            step: ep.step,
            kind,
            rot: action.rot_index,
            x: action.x,
            y: action.y,
            reward,
            t_g,
            o_before,
            o_after,
            q_p: obs.best_push.q_value as f64,
            q_g: obs.best_grasp.q_value as f64,
            coord_p,
            terminal,
            target: ep.target,
            q_g_next,
            scene: ep.scene.seed,
            stage: stage.index,
        };

        let trial_end = self.advance_episode(
            ep,
            next_scene,
            kind,
            grasp.and_then(|g| g.grasped_id),
            terminal,
            &stage,
        )?;
        if let Some(r) = trial_end {
            self.rolling.push_back(r);
            while self.rolling.len() > self.config.train.rolling_window {
                self.rolling.pop_front();
            }
        }

        self.iteration += 1;
        let metrics = (self.iteration % self.config.train.metrics_every == 0).then(|| {
            let (s, a) = self.rolling();
            let mean_loss = if self.losses.is_empty() {
                0.0
            } else {
                self.losses.iter().sum::<f64>() / self.losses.len() as f64
            };
            self.losses.clear();
            MetricsRow {
                iter: self.iteration,
                rolling_success_100: s,
                rolling_attempts_100: a,
                mean_loss,
            }
        });

        Ok(IterationReport {
            row,
            loss_before,
            loss_after,
            trial_end,
            new_scene,
            metrics,
        })
    }

    fn advance_episode(
        &mut self,
        mut ep: Episode,
        next_scene: Scene,
        kind: ActionKind,
        grasped: Option<ObjectId>,
        terminal: bool,
        stage: &CurriculumStage,
    ) -> Result<Option<TrialResult>> {
        ep.scene = next_scene;
        ep.step += 1;
        if let Some(id) = grasped {
            ep.candidates.retain(|&c| c != id);
        }
        match kind {
            ActionKind::Grasp if !terminal => ep.fails += 1,
            ActionKind::Push if self.config.train.fc_reset_on_push => ep.fails = 0,
            _ => {}
        }
        let result = if terminal {
            Some(TrialResult {
                success: true,
                attempts: ep.step,
            })
        } else if ep.step >= self.config.train.trial_motion_cap {
            // give up on this target; it stays in the scene as an obstacle
            let target = ep.target;
            ep.candidates.retain(|&c| c != target);
            Some(TrialResult {
                success: false,
                attempts: ep.step,
            })
        } else {
            None
        };
        if result.is_some() {
            if ep.candidates.is_empty() {
                self.episode = None;
                return Ok(result);
            }
            let candidates = ep.candidates.clone();
            ep.target = self.pick_target(&ep.scene, &candidates, stage.target_rule)?;
            ep.trial = self.trials_started;
            self.trials_started += 1;
            ep.step = 0;
            ep.fails = 0;
        }
        self.episode = Some(ep);
        Ok(result)
    }

    fn state(&self) -> TrainerState {
        TrainerState {
            version: STATE_VERSION,
            iteration: self.iteration,
            threshold: self.threshold,
            episode: self.episode.clone(),
            rngs: self.rngs.clone(),
            replay: self.replay.clone(),
            coord_buffer: self.coordinator.buffer.clone(),
            rolling: self.rolling.clone(),
            losses: self.losses.clone(),
            scenes_spawned: self.scenes_spawned,
            trials_started: self.trials_started,
        }
    }

    pub fn checkpoint_records(&self) -> Result<Vec<Record>> {
        let mut records = checkpoint::store_records(QNET_TAG, &self.qnet.params, true);
        records.extend(checkpoint::store_records(
            COORD_TAG,
            &self.coordinator.net.params,
            true,
        ));
        records.push(Record::blob(
            CONFIG_RECORD,
            serde_json::to_string(&self.config)?.as_bytes(),
        ));
        records.push(Record::blob(
            STATE_RECORD,
            serde_json::to_string(&self.state())?.as_bytes(),
        ));
        Ok(records)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.checkpoint_records()?)?;
        Ok(())
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        let config = Config::from_json(&blob_text(records, CONFIG_RECORD)?)?;
        let state: TrainerState = serde_json::from_str(&blob_text(records, STATE_RECORD)?)?;
        if state.version != STATE_VERSION {
            return Err(RunError::Checkpoint(format!(
                "trainer state version {}",
                state.version
            )));
        }
        let mut t = Trainer::new(config)?;
        checkpoint::load_store(QNET_TAG, &mut t.qnet.params, records)?;
        checkpoint::load_store(COORD_TAG, &mut t.coordinator.net.params, records)?;
        t.coordinator.buffer = state.coord_buffer;
        t.iteration = state.iteration;
        t.threshold = state.threshold;
        t.episode = state.episode;
        t.rngs = state.rngs;
        t.replay = state.replay;
        t.rolling = state.rolling;
        t.losses = state.losses;
        t.scenes_spawned = state.scenes_spawned;
        t.trials_started = state.trials_started;
        Ok(t)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_records(&checkpoint::read_file(path)?)
    }
}

/// Files produced by [`run`].
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub trials: PathBuf,
    pub metrics: PathBuf,
    pub scenes: PathBuf,
    pub checkpoints: PathBuf,
    pub final_checkpoint: PathBuf,
    pub meta: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            trials: out_dir.join("trials.jsonl"),
            metrics: out_dir.join("metrics.csv"),
            scenes: out_dir.join("scenes"),
            checkpoints: out_dir.join("checkpoints"),
            final_checkpoint: out_dir.join("final.opgw"),
            meta: out_dir.join("meta.json"),
        }
    }

    pub fn scene_file(&self, seed: u64) -> PathBuf {
        self.scenes.join(format!("scene_{seed:05}.json"))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub iterations: u64,
    pub metrics: Vec<MetricsRow>,
    pub trials: Vec<TrialResult>,
    pub checkpoints: Vec<PathBuf>,
    /// Fraction of iterations whose post-update loss did not exceed the pre-update loss.
    pub non_increasing_fraction: f64,
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = if append {
        OpenOptions::new().create(true).append(true).open(path)?
    } else {
        File::create(path)?
    };
    Ok(BufWriter::new(f))
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Train until `max_iter` iterations have completed, writing logs, scenes and
/// checkpoints under `out_dir`. Logs are appended when continuing a loaded run.
/// Wall-clock data goes only to `meta.json`.
pub fn run(trainer: &mut Trainer, max_iter: u64, out_dir: &Path) -> Result<RunSummary> {
    let paths = RunPaths::new(out_dir);
    fs::create_dir_all(&paths.scenes)?;
    fs::create_dir_all(&paths.checkpoints)?;
    let append = trainer.iteration > 0;
    let mut trials = open_log(&paths.trials, append)?;
    let metrics_exists = append && paths.metrics.exists();
    let mut metrics = open_log(&paths.metrics, append)?;
    if !metrics_exists {
        writeln!(
            metrics,
            "iter,rolling_success_100,rolling_attempts_100,mean_loss"
        )?;
    }
    if let Some((scene, _)) = trainer.scene() {
        // a resumed run may continue in a scene whose file lives elsewhere
        let path = paths.scene_file(scene.seed);
        if !path.exists() {
            fs::write(path, scene.to_json())?;
        }
    }

    let started = unix_seconds();
    let clock = Instant::now();
    let mut summary = RunSummary::default();
    let mut non_increasing = 0u64;
    let every = trainer.config.train.checkpoint_every;
    while trainer.iteration < max_iter {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e @ RunError::Diverged { .. }) => {
                trials.flush()?;
                metrics.flush()?;
                let dump = out_dir.join("diverged.opgw");
                trainer.save_checkpoint(&dump)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(scene) = &report.new_scene {
            fs::write(paths.scene_file(scene.seed), scene.to_json())?;
        }
        serde_json::to_writer(&mut trials, &report.row)?;
        trials.write_all(b"\n")?;
        if let Some(m) = &report.metrics {
            writeln!(
                metrics,
                "{},{},{},{}",
                m.iter, m.rolling_success_100, m.rolling_attempts_100, m.mean_loss
            )?;
            summary.metrics.push(m.clone());
        }
        if let Some(t) = report.trial_end {
            summary.trials.push(t);
        }
        if report.loss_after <= report.loss_before {
            non_increasing += 1;
        }
        summary.iterations += 1;
        if trainer.iteration % every == 0 {
            trials.flush()?;
            metrics.flush()?;
            let path = paths
                .checkpoints
                .join(format!("ckpt_{:06}.opgw", trainer.iteration));
            trainer.save_checkpoint(&path)?;
            summary.checkpoints.push(path);
        }
    }
    trials.flush()?;
    metrics.flush()?;
    trainer.save_checkpoint(&paths.final_checkpoint)?;
    summary.non_increasing_fraction = if summary.iterations == 0 {
        1.0
    } else {
        non_increasing as f64 / summary.iterations as f64
    };
    let meta = serde_json::json!({
        "started_unix": started,
        "finished_unix": unix_seconds(),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "iterations": summary.iterations,
        "final_iteration": trainer.iteration,
    });
    fs::write(&paths.meta, serde_json::to_string_pretty(&meta)?)?;
    Ok(summary)
}

/// Mismatch found while re-executing a trial log.
#[derive(Clone, Debug, PartialEq)]
pub struct Drift {
    pub iter: u64,
    pub step: usize,
    pub field: &'static str,
    pub logged: String,
    pub replayed: String,
}

impl std::fmt::Display for Drift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "drift at iter {} step {}: {} logged {} but replay gives {}",
            self.iter, self.step, self.field, self.logged, self.replayed
        )
    }
}

/// Re-execute the rows logged in `scene` (matched by scene seed) and check that
/// occlusion, rewards and termination come out identical. Returns the number of
/// rows replayed and the final scene.
pub fn replay_log(
    scene: &Scene,
    rows: &[LogRow],
    config: &Config,
) -> Result<std::result::Result<(usize, Scene), Drift>> {
    let opts = config.occlusion();
    let seed = scene.seed;
    let mut scene = scene.clone();
    let mut count = 0;
    for row in rows.iter().filter(|r| r.scene == seed) {
        let drift = |field: &'static str, logged: String, replayed: String| Drift {
            iter: row.iter,
            step: row.step,
            field,
            logged,
            replayed,
        };
        if !scene.contains(row.target) {
            return Ok(Err(drift(
                "target",
                row.target.to_string(),
                "absent".into(),
            )));
        }
        if row.rot >= crate::angles::ROTATIONS || row.x >= scene.width || row.y >= scene.height {
            return Ok(Err(drift(
                "action",
                format!("({}, {}, {})", row.rot, row.x, row.y),
                "out of range".into(),
            )));
        }
        let report = occlusion_report(&scene, row.target, &opts)?;
        if report.occluded_rate != row.o_before {
            return Ok(Err(drift(
                "o_before",
                row.o_before.to_string(),
                report.occluded_rate.to_string(),
            )));
        }
        let action = MotionPrimitive::new(row.kind, row.x, row.y, row.rot);
        let (next, reward, terminal) = match row.kind {
            ActionKind::Grasp => {
                let (next, outcome) = scene.apply_grasp(&action, row.target)?;
                let r = grasp_reward(&outcome, (row.x, row.y), &report.full_mask, &config.rewards);
                (next, r, outcome.target_was_grasped)
            }
            ActionKind::Push => {
                let (next, _) = scene.apply_push(&action);
                let o_after = occlusion_report(&next, row.target, &opts)?.occluded_rate;
                let Some(q_next) = row.q_g_next else {
                    return Ok(Err(drift(
                        "q_g_next",
                        "null".into(),
                        "required for a push".into(),
                    )));
                };
                let threshold = ThresholdState::new(row.t_g, config.rewards.beta);
                (
                    next,
                    push_reward(row.o_before, o_after, q_next, &threshold, &config.rewards),
                    false,
                )
            }
        };
        if terminal != row.terminal {
            return Ok(Err(drift(
                "terminal",
                row.terminal.to_string(),
                terminal.to_string(),
            )));
        }
        if !terminal {
            let o_after = occlusion_report(&next, row.target, &opts)?.occluded_rate;
            if row.o_after != Some(o_after) {
                return Ok(Err(drift(
                    "o_after",
                    format!("{:?}", row.o_after),
                    o_after.to_string(),
                )));
            }
        }
        if reward != row.reward {
            return Ok(Err(drift(
                "reward",
                row.reward.to_string(),
                reward.to_string(),
            )));
        }
        scene = next;
        count += 1;
    }
    Ok(Ok((count, scene)))
}
