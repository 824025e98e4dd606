//! Adaptive split factor for the task-balanced layer.
//!
//! `compute_r` picks the factor that makes each reshaped split of the current
//! batch the same size as the expected per-task share of the exemplar rows;
//! `feasible_r` corrects it down to the nearest common divisor so the reshape
//! is always applicable.

use crate::error::{Error, Result};

/// Balancing factor `r = (B_c / B_p) * (t - 1)`, and 1 for the first task.
/// The quotient is evaluated exactly; a fractional result is an error.
pub fn compute_r(b_c: usize, b_p: usize, task: usize) -> Result<usize> {
    if task <= 1 {
        return Ok(1);
    }
    if b_p == 0 {
        return Err(Error::MissingExemplarRows { task });
    }
    let numerator = b_c * (task - 1);
    if numerator % b_p != 0 {
        return Err(Error::NonIntegralSplit { b_c, b_p, task });
    }
    Ok(numerator / b_p)
}

/// Largest member of `CD(b_c, b_p)` that does not exceed `r`; returns `r`
/// itself when it is already a common divisor. Total for `r >= 1` since 1 is
/// always a common divisor.
pub fn feasible_r(b_c: usize, b_p: usize, r: usize) -> usize {
    debug_assert!(r >= 1);
    let g = gcd(b_c, b_p);
    if g % r == 0 {
        return r;
    }
    let mut best = 1;
    let mut d = 1;
    while d * d <= g {
        if g % d == 0 {
            if d < r && d > best {
                best = d;
            }
            let e = g / d;
            if e < r && e > best {
                best = e;
            }
        }
        d += 1;
    }
    best
}

/// All common divisors of the two values, ascending. Used as the brute-force
/// oracle for `feasible_r` and exposed for reporting.
pub fn common_divisors(a: usize, b: usize) -> Vec<usize> {
    let g = gcd(a, b);
    (1..=g).filter(|d| g % d == 0).collect()
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}
