//! Scalar losses used by the Q-networks and the action-type classifier.

use crate::scalar::Scalar;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Huber loss of a temporal-difference error with unit threshold.
pub fn huber<T: Scalar>(delta: T) -> T {
    let half = T::of_f64(0.5);
    if delta.abs() <= T::one() {
        half * delta * delta
    } else {
        delta.abs() - half
    }
}

/// `d huber / d delta`.
pub fn huber_grad<T: Scalar>(delta: T) -> T {
    if delta.abs() <= T::one() {
        delta
    } else {
        delta.signum()
    }
}

fn clamp_prob<T: Scalar>(y: T) -> (T, bool) {
    let lo = T::of_f64(BCE_EPS);
    let hi = T::one() - lo;
    if y < lo {
        (lo, true)
    } else if y > hi {
        (hi, true)
    } else {
        (y, false)
    }
}

/// Binary cross-entropy of a predicted probability against a 0/1 label.
pub fn bce<T: Scalar>(y: T, y_true: T) -> T {
    let (y, _) = clamp_prob(y);
    -(y_true * y.ln() + (T::one() - y_true) * (T::one() - y).ln())
}

/// `d bce / d y`; zero where the clamp is active.
pub fn bce_grad<T: Scalar>(y: T, y_true: T) -> T {
    let (y, clamped) = clamp_prob(y);
    if clamped {
        return T::zero();
    }
    -(y_true / y) + (T::one() - y_true) / (T::one() - y)
}
