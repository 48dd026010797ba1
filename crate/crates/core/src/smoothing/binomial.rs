//! Exact one-sided Clopper-Pearson lower bound.
//!
//! The bound solves `P[X >= k | Binomial(n, p)] = alpha` for `p` by
//! bisection on the exact tail, which is evaluated term by term in log
//! space. No special functions are involved.

use crate::error::{Error, Result};

/// Absolute tolerance of the bisection.
pub const CP_TOLERANCE: f64 = 1e-12;

/// `ln(i!)` for `i = 0..=n`.
fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0f64;
    out.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

/// `ln P[X >= k]` for `X ~ Binomial(n, p)`, `0 < p < 1`.
fn ln_upper_tail(k: u64, n: u64, p: f64, ln_fact: &[f64]) -> f64 {
    let lp = p.ln();
    let lq = (-p).ln_1p();
    let ln_n = ln_fact[n as usize];
    let term = |i: u64| ln_n - ln_fact[i as usize] - ln_fact[(n - i) as usize] + i as f64 * lp + (n - i) as f64 * lq;
    let max = (k..=n).map(term).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (k..=n).map(|i| (term(i) - max).exp()).sum();
    max + sum.ln()
}

/// Exact `P[X >= k]` for `X ~ Binomial(n, p)`.
pub fn upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    ln_upper_tail(k, n, p, &ln_factorials(n)).exp()
}

/// One-sided `(1 - alpha)` Clopper-Pearson lower confidence bound for a
/// success probability after `k` successes in `n` trials.
pub fn cp_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 || k > n {
        return Err(Error::Invalid(format!("need 0 <= k <= n and n > 0, got k={k}, n={n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    let ln_fact = ln_factorials(n);
    let ln_alpha = alpha.ln();
    // The tail is increasing in p; find where it crosses alpha.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > CP_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if ln_upper_tail(k, n, mid, &ln_fact) < ln_alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Lower bounds for every `k` in `0..=n`, sharing the factorial table.
pub fn cp_lower_table(n: u64, alpha: f64) -> Result<Vec<f64>> {
    (0..=n).map(|k| cp_lower(k, n, alpha)).collect()
}
