//! Discrete action orientations and exact quarter-turn trigonometry.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI, TAU};

/// Number of discrete orientations for push and grasp primitives.
pub const ROTATIONS: usize = 16;

/// Angular step between consecutive orientations, in degrees.
pub const STEP_DEGREES: f64 = 22.5;

pub fn rotation_angle(k: usize) -> f64 {
    (k % ROTATIONS) as f64 * PI / 8.0
}

/// `(cos, sin)` of orientation `k`.
///
/// Quarter-turn related indices (`k` and `k + 4`) are exact rotations of one
/// another: values for `k >= 4` are derived from `k mod 4` by swapping and
/// negating, never by evaluating trig at a different argument.
pub fn rotation_cos_sin(k: usize) -> (f64, f64) {
    let k = k % ROTATIONS;
    let eighth = PI / 8.0;
    let (c, s) = match k % 4 {
        0 => (1.0, 0.0),
        1 => (eighth.cos(), eighth.sin()),
        // the diagonal gets equal components so mirrored offsets cancel exactly
        2 => (FRAC_1_SQRT_2, FRAC_1_SQRT_2),
        _ => (eighth.sin(), eighth.cos()),
    };
    quarter_turns(c, s, k / 4)
}

/// Rotate the direction `(c, s)` by `q` quarter turns counter-clockwise.
fn quarter_turns(c: f64, s: f64, q: usize) -> (f64, f64) {
    match q % 4 {
        0 => (c, s),
        1 => (-s, c),
        2 => (-c, -s),
        _ => (s, -c),
    }
}

/// `(cos, sin)` of an arbitrary angle, exact at multiples of a quarter turn.
pub fn cos_sin(theta: f64) -> (f64, f64) {
    let q = (theta / FRAC_PI_2).round();
    if (theta - q * FRAC_PI_2).abs() < 1e-12 {
        return quarter_turns(1.0, 0.0, (q as i64).rem_euclid(4) as usize);
    }
    (theta.cos(), theta.sin())
}

pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_matches_trig() {
        for k in 0..ROTATIONS {
            let (c, s) = rotation_cos_sin(k);
            let a = rotation_angle(k);
            assert!(
                (c - a.cos()).abs() < 1e-15 && (s - a.sin()).abs() < 1e-15,
                "k={k}"
            );
        }
    }

    #[test]
    fn quarter_related_indices_are_exact() {
        for k in 0..ROTATIONS {
            let (c, s) = rotation_cos_sin(k);
            let (c4, s4) = rotation_cos_sin(k + 4);
            assert_eq!((c4, s4), (-s, c));
        }
    }

    #[test]
    fn quarter_angles_snap() {
        assert_eq!(cos_sin(FRAC_PI_2), (0.0, 1.0));
        assert_eq!(cos_sin(PI), (-1.0, 0.0));
        assert_eq!(cos_sin(3.0 * FRAC_PI_2), (0.0, -1.0));
        assert_eq!(cos_sin(0.0), (1.0, 0.0));
        assert_eq!(normalize_angle(-FRAC_PI_2), 3.0 * FRAC_PI_2);
    }
}
