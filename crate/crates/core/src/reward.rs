//! Grasp and push rewards and the adaptive push threshold.

use serde::{Deserialize, Serialize};

use crate::raster::Mask;
use crate::sim::GraspOutcome;

/// Slack on the occlusion-drop comparison so a drop of exactly the threshold
/// (a ratio of cell counts) is not lost to rounding.
const DROP_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub grasp_success: f64,
    /// Failed grasp whose centre lies on the target's full mask.
    pub grasp_on_mask: f64,
    /// Push after which the best grasp value beats the threshold.
    pub push_threshold: f64,
    /// Push that lowers the target's occluded rate enough.
    pub push_occlusion: f64,
    pub occlusion_drop: f64,
    /// Decay of the push threshold's moving average.
    pub beta: f64,
    pub t_g_init: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            grasp_success: 1.0,
            grasp_on_mask: 0.25,
            push_threshold: 1.0,
            push_occlusion: 0.5,
            occlusion_drop: 0.1,
            beta: 0.95,
            t_g_init: 0.25,
        }
    }
}

/// Moving threshold on the best grasp value seen right after a push.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub t_g: f64,
    pub beta: f64,
}

impl ThresholdState {
    pub fn new(t_g: f64, beta: f64) -> Self {
        Self { t_g, beta }
    }

    pub fn from_params(p: &RewardParams) -> Self {
        Self::new(p.t_g_init, p.beta)
    }

    pub fn updated(self, q_g_next: f64) -> Self {
        Self {
            t_g: self.beta * self.t_g + (1.0 - self.beta) * q_g_next,
            ..self
        }
    }
}

pub fn grasp_reward(
    outcome: &GraspOutcome,
    grasp_xy: (usize, usize),
    amodal: &Mask,
    p: &RewardParams,
) -> f64 {
    if outcome.target_was_grasped {
        p.grasp_success
    } else if *amodal.get(grasp_xy.0, grasp_xy.1) {
        p.grasp_on_mask
    } else {
        0.0
    }
}

/// `threshold` must be the state from before this push's update.
pub fn push_reward(
    o_before: f64,
    o_after: f64,
    q_g_next: f64,
    threshold: &ThresholdState,
    p: &RewardParams,
) -> f64 {
    if q_g_next > threshold.t_g {
        p.push_threshold
    } else if o_before - o_after >= p.occlusion_drop - DROP_TOLERANCE {
        p.push_occlusion
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(target: bool) -> GraspOutcome {
        GraspOutcome {
            grasped_id: target.then_some(0),
            success: target,
            target_was_grasped: target,
        }
    }

    #[test]
    fn grasp_rewards() {
        let p = RewardParams::default();
        let mask = Mask::from_indices(4, 4, &[5]);
        assert_eq!(grasp_reward(&outcome(true), (0, 0), &mask, &p), 1.0);
        assert_eq!(grasp_reward(&outcome(false), (1, 1), &mask, &p), 0.25);
        assert_eq!(grasp_reward(&outcome(false), (2, 2), &mask, &p), 0.0);
    }

    #[test]
    fn threshold_update() {
        let s = ThresholdState::new(0.5, 0.95).updated(0.9);
        assert!((s.t_g - 0.52).abs() < 1e-12);
        assert_eq!(ThresholdState::new(0.3, 0.95).updated(0.3).t_g, 0.3);
        let mut s = ThresholdState::new(0.0, 0.95);
        for _ in 0..500 {
            s = s.updated(0.8);
        }
        assert!((s.t_g - 0.8).abs() < 1e-9);
    }

    #[test]
    fn push_rewards() {
        let p = RewardParams::default();
        let t = ThresholdState::new(0.6, 0.95);
        assert_eq!(push_reward(0.5, 0.2, 0.8, &t, &p), 1.0);
        assert_eq!(push_reward(0.5, 0.35, 0.4, &t, &p), 0.5);
        assert_eq!(push_reward(0.5, 0.45, 0.4, &t, &p), 0.0);
        assert_eq!(
            push_reward(0.5, 0.4, 0.4, &t, &p),
            0.5,
            "drop of exactly 0.1 counts"
        );
    }
}
