//! Run configuration: every tunable constant in one validated JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::OcclusionOptions;
use crate::reward::RewardParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// First iteration of the 2nd, 3rd and 4th stage.
    pub boundaries: [u64; 3],
    pub n_targets: usize,
    pub m_start: usize,
    /// Obstacle count reached at the end of the ramp stage.
    pub m_ramp_end: usize,
    pub m_third: usize,
    pub m_final: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            boundaries: [1000, 3000, 5000],
            n_targets: 7,
            m_start: 3,
            m_ramp_end: 8,
            m_third: 13,
            m_final: 18,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonConfig {
    pub start: f64,
    pub min: f64,
    /// Multiplicative decay per iteration.
    pub decay: f64,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        Self {
            start: 0.5,
            min: 0.1,
            decay: 0.998,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub coord_lr: f64,
    pub replay_capacity: usize,
    pub replays_per_iter: usize,
    pub coord_buffer_capacity: usize,
    pub coord_batch_size: usize,
    pub coord_threshold: f64,
    /// Motions after which a training trial is abandoned and a new target drawn.
    pub trial_motion_cap: usize,
    pub checkpoint_every: u64,
    pub metrics_every: u64,
    pub rolling_window: usize,
    /// Reset the grasp-failure count after each push as well.
    pub fc_reset_on_push: bool,
    pub coord_label: CoordLabel,
}

/// Which grasp outcome counts as a positive example for the selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordLabel {
    /// Any object was lifted.
    GraspSuccess,
    /// The target itself was lifted.
    TargetGrasped,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lr: 1e-4,
            coord_lr: 1e-3,
            replay_capacity: 500,
            replays_per_iter: 4,
            coord_buffer_capacity: 1000,
            coord_batch_size: 16,
            coord_threshold: 0.5,
            trial_motion_cap: 10,
            checkpoint_every: 500,
            metrics_every: 100,
            rolling_window: 100,
            fc_reset_on_push: false,
            coord_label: CoordLabel::GraspSuccess,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Average attempts over successful trials only.
    pub attempts_successes_only: bool,
    pub seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attempts_successes_only: false,
            seed_base: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Side of the square workspace, in cells.
    pub workspace: usize,
    pub border_radius: usize,
    pub border_any_overlap: bool,
    pub rewards: RewardParams,
    pub curriculum: CurriculumConfig,
    pub epsilon: EpsilonConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            workspace: 64,
            border_radius: 10,
            border_any_overlap: false,
            rewards: RewardParams::default(),
            curriculum: CurriculumConfig::default(),
            epsilon: EpsilonConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn check(ok: bool, field: &'static str, reason: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            field,
            reason: reason(),
        })
    }
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl Config {
    /// The shortened schedule used for quick desk-scale runs.
    pub fn compressed() -> Self {
        Self {
            workspace: 48,
            curriculum: CurriculumConfig {
                boundaries: [300, 900, 1500],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn occlusion(&self) -> OcclusionOptions {
        OcclusionOptions {
            border_radius: self.border_radius,
            border_any_overlap: self.border_any_overlap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(
            self.workspace >= 16 && self.workspace % 4 == 0,
            "workspace",
            || format!("{} must be >= 16 and divisible by 4", self.workspace),
        )?;
        check(self.border_radius >= 1, "border_radius", || {
            "must be >= 1".into()
        })?;
        let r = &self.rewards;
        for (field, v) in [
            ("rewards.grasp_success", r.grasp_success),
            ("rewards.grasp_on_mask", r.grasp_on_mask),
            ("rewards.push_threshold", r.push_threshold),
            ("rewards.push_occlusion", r.push_occlusion),
            ("rewards.occlusion_drop", r.occlusion_drop),
            ("rewards.t_g_init", r.t_g_init),
        ] {
            check(v.is_finite() && v >= 0.0, field, || {
                format!("{v} must be finite and >= 0")
            })?;
        }
        check(r.beta > 0.0 && r.beta < 1.0, "rewards.beta", || {
            format!("{} not in (0, 1)", r.beta)
        })?;
        let c = &self.curriculum;
        check(
            c.boundaries[0] < c.boundaries[1] && c.boundaries[1] < c.boundaries[2],
            "curriculum.boundaries",
            || format!("{:?} must be strictly increasing", c.boundaries),
        )?;
        check(c.n_targets >= 1, "curriculum.n_targets", || {
            "must be >= 1".into()
        })?;
        check(c.n_targets + c.m_final <= 40, "curriculum.m_final", || {
            "too many objects".into()
        })?;
        let e = &self.epsilon;
        check(
            unit(e.start) && unit(e.min) && e.min <= e.start,
            "epsilon",
            || "need 0 <= min <= start <= 1".into(),
        )?;
        check(e.decay > 0.0 && e.decay <= 1.0, "epsilon.decay", || {
            format!("{} not in (0, 1]", e.decay)
        })?;
        let t = &self.train;
        check(t.gamma >= 0.0 && t.gamma < 1.0, "train.gamma", || {
            format!("{} not in [0, 1)", t.gamma)
        })?;
        check(t.lr > 0.0 && t.lr < 1.0, "train.lr", || {
            format!("{} not in (0, 1)", t.lr)
        })?;
        check(
            t.coord_lr > 0.0 && t.coord_lr < 1.0,
            "train.coord_lr",
            || format!("{} not in (0, 1)", t.coord_lr),
        )?;
        check(t.replay_capacity >= 1, "train.replay_capacity", || {
            "must be >= 1".into()
        })?;
        check(
            t.coord_buffer_capacity >= 1,
            "train.coord_buffer_capacity",
            || "must be >= 1".into(),
        )?;
        check(t.coord_batch_size >= 1, "train.coord_batch_size", || {
            "must be >= 1".into()
        })?;
        check(unit(t.coord_threshold), "train.coord_threshold", || {
            "not in [0, 1]".into()
        })?;
        check(t.trial_motion_cap >= 1, "train.trial_motion_cap", || {
            "must be >= 1".into()
        })?;
        check(t.checkpoint_every >= 1, "train.checkpoint_every", || {
            "must be >= 1".into()
        })?;
        check(t.metrics_every >= 1, "train.metrics_every", || {
            "must be >= 1".into()
        })?;
        check(t.rolling_window >= 1, "train.rolling_window", || {
            "must be >= 1".into()
        })?;
        Ok(())
    }
}
