//! Observation, action-kind selection and the frozen policy snapshot used for evaluation.

use std::path::Path;

use opg_tensor::checkpoint::{self, Record};
use opg_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{Config, ConfigError, EpsilonConfig};
use crate::coordinator::{decide, CoordinatorFeatures, Mlp};
use crate::nets::{best_actions, BestAction, NetError, QMaps, QNet};
use crate::perception::{occlusion_report_from, render_from, OcclusionOptions, OcclusionReport};
use crate::reward::ThresholdState;
use crate::sim::{ActionKind, MotionPrimitive, ObjectId, Scene, SimError};

pub const QNET_TAG: &str = "qnet";
pub const COORD_TAG: &str = "coord";
pub const CONFIG_RECORD: &str = "config";
pub const STATE_RECORD: &str = "trainer.state";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] opg_tensor::TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: u64, what: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("scenario generation: {0}")]
    Generation(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

/// Everything the policy looks at before choosing a motion.
#[derive(Clone, Debug)]
pub struct Observation {
    pub state: Tensor<f32>,
    pub report: OcclusionReport,
    pub qmaps: QMaps,
    pub best_push: BestAction,
    pub best_grasp: BestAction,
}

impl Observation {
    pub fn features(&self, f_c: usize) -> CoordinatorFeatures {
        CoordinatorFeatures {
            q_p: self.best_push.q_value as f64,
            q_g: self.best_grasp.q_value as f64,
            o: self.report.occluded_rate,
            a_b: self.report.a_b,
            a_n: self.report.a_n,
            f_c: f_c as f64,
        }
    }

    pub fn best(&self, kind: ActionKind) -> BestAction {
        match kind {
            ActionKind::Push => self.best_push,
            ActionKind::Grasp => self.best_grasp,
        }
    }

    pub fn primitive(&self, kind: ActionKind) -> MotionPrimitive {
        let b = self.best(kind);
        MotionPrimitive::new(kind, b.x, b.y, b.rot_index)
    }
}

pub fn observe(
    qnet: &QNet<f32>,
    scene: &Scene,
    target: ObjectId,
    opts: &OcclusionOptions,
) -> Result<Observation> {
    let prints = scene.footprints();
    let state = render_from(scene, &prints, target)?.to_tensor();
    let report = occlusion_report_from(scene, &prints, target, opts)?;
    let qmaps = qnet.forward_qmaps(&state)?;
    let (best_push, best_grasp) = best_actions(&qmaps);
    Ok(Observation {
        state,
        report,
        qmaps,
        best_push,
        best_grasp,
    })
}

/// The kind whose best Q value is larger; grasp wins ties.
pub fn greedy_kind(best_push: &BestAction, best_grasp: &BestAction) -> ActionKind {
    if best_grasp.q_value >= best_push.q_value {
        ActionKind::Grasp
    } else {
        ActionKind::Push
    }
}

/// Exploration rate after `iteration` multiplicative decays, floored at the minimum.
pub fn epsilon(cfg: &EpsilonConfig, iteration: u64) -> f64 {
    let decayed = cfg.start * cfg.decay.powf(iteration as f64);
    decayed.max(cfg.min)
}

/// With probability `eps` a uniformly random kind, otherwise the greedy kind.
pub fn epsilon_greedy_kind<R: Rng + ?Sized>(
    best_push: &BestAction,
    best_grasp: &BestAction,
    eps: f64,
    rng: &mut R,
) -> ActionKind {
    if rng.gen::<f64>() < eps {
        if rng.gen::<bool>() {
            ActionKind::Grasp
        } else {
            ActionKind::Push
        }
    } else {
        greedy_kind(best_push, best_grasp)
    }
}

/// TD target: reward plus discounted best next value, or the bare reward at a terminal step.
pub fn td_target(reward: f64, next_max_q: Option<f64>, gamma: f64) -> f64 {
    match next_max_q {
        Some(q) => reward + gamma * q,
        None => reward,
    }
}

pub fn blob_text(records: &[Record], name: &str) -> Result<String> {
    let r = checkpoint::find(records, name)?;
    String::from_utf8(r.payload.clone())
        .map_err(|e| RunError::Checkpoint(format!("`{name}` is not utf-8: {e}")))
}

/// Push threshold stored with a training checkpoint, or the configured initial
/// value when the checkpoint carries no trainer state.
pub fn frozen_threshold(records: &[Record], config: &Config) -> Result<ThresholdState> {
    let Ok(text) = blob_text(records, STATE_RECORD) else {
        return Ok(ThresholdState::from_params(&config.rewards));
    };
    let state: serde_json::Value = serde_json::from_str(&text)?;
    Ok(serde_json::from_value(state["threshold"].clone())?)
}

/// A frozen Q-net and coordinator. Never updated after construction.
#[derive(Clone, Debug)]
pub struct Policy {
    pub qnet: QNet<f32>,
    pub coordinator: Mlp<f32>,
    pub threshold: f64,
    pub use_coordinator: bool,
    pub occlusion: OcclusionOptions,
}

/// What the policy chose and why.
#[derive(Clone, Debug)]
pub struct Decision {
    pub primitive: MotionPrimitive,
    pub features: CoordinatorFeatures,
    pub coord_p: f64,
    pub observation: Observation,
}

impl Policy {
    pub fn from_records(records: &[Record], use_coordinator: bool) -> Result<(Self, Config)> {
        let config = Config::from_json(&blob_text(records, CONFIG_RECORD)?)?;
        let mut init = ChaCha8Rng::seed_from_u64(0);
        let mut qnet = QNet::<f32>::new(&mut init);
        checkpoint::load_store(QNET_TAG, &mut qnet.params, records)?;
        let mut coordinator = Mlp::<f32>::new(&mut init);
        checkpoint::load_store(COORD_TAG, &mut coordinator.params, records)?;
        let policy = Self {
            qnet,
            coordinator,
            threshold: config.train.coord_threshold,
            use_coordinator,
            occlusion: config.occlusion(),
        };
        Ok((policy, config))
    }

    pub fn load(path: &Path, use_coordinator: bool) -> Result<(Self, Config)> {
        Self::from_records(&checkpoint::read_file(path)?, use_coordinator)
    }

    pub fn checksum(&self) -> u64 {
        self.qnet.params.checksum() ^ self.coordinator.params.checksum().rotate_left(1)
    }

    pub fn act(&self, scene: &Scene, target: ObjectId, f_c: usize) -> Result<Decision> {
        let observation = observe(&self.qnet, scene, target, &self.occlusion)?;
        let features = observation.features(f_c);
        let coord_p = self.coordinator.predict(&features) as f64;
        let kind = if self.use_coordinator {
            decide(coord_p, self.threshold)
        } else {
            greedy_kind(&observation.best_push, &observation.best_grasp)
        };
        Ok(Decision {
            primitive: observation.primitive(kind),
            features,
            coord_p,
            observation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn best(kind: ActionKind, q: f32) -> BestAction {
        BestAction {
            kind,
            rot_index: 0,
            x: 0,
            y: 0,
            q_value: q,
        }
    }

    #[test]
    fn td_targets() {
        assert_eq!(td_target(1.0, None, 0.5), 1.0);
        assert!((td_target(0.5, Some(0.8), 0.5) - 0.9).abs() < 1e-12);
        assert_eq!(td_target(0.0, Some(0.0), 0.5), 0.0);
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = EpsilonConfig::default();
        assert_eq!(epsilon(&cfg, 0), 0.5);
        assert!((epsilon(&cfg, 1) - 0.499).abs() < 1e-12);
        assert_eq!(epsilon(&cfg, 5000), 0.1);
    }

    #[test]
    fn greedy_limit_and_seeded_exploration() {
        let (p, g) = (best(ActionKind::Push, 0.7), best(ActionKind::Grasp, 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(epsilon_greedy_kind(&p, &g, 0.0, &mut rng), ActionKind::Push);
        }
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64)
                .map(|_| epsilon_greedy_kind(&p, &g, 1.0, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
        assert!(seq(9).contains(&ActionKind::Grasp) && seq(9).contains(&ActionKind::Push));
    }
}
