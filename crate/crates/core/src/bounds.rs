//! Additive Chernoff bound on the true violation rate of the certified
//! decay condition, estimated from held-out samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationBound {
    pub c_hat: u64,
    pub m: u64,
    pub delta: f64,
    pub c_bar: f64,
}

fn confidence_term(m: u64, delta: f64) -> f64 {
    ((1.0 / delta).ln() / (2.0 * m as f64)).sqrt()
}

/// `c̄ = ĉ/m + sqrt(ln(1/δ) / 2m)`; with probability at least `1 − δ` the
/// true violation rate does not exceed `c̄`.
pub fn chernoff_bound(c_hat: u64, m: u64, delta: f64) -> Result<ViolationBound> {
    if m == 0 {
        return Err(Error::domain("m must be >= 1"));
    }
    if c_hat > m {
        return Err(Error::domain(format!("c_hat = {c_hat} exceeds m = {m}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1], got {delta}")));
    }
    let c_bar = c_hat as f64 / m as f64 + confidence_term(m, delta);
    Ok(ViolationBound { c_hat, m, delta, c_bar })
}

/// Smallest `m` whose confidence term alone is at most `target` (zero
/// observed violations).
pub fn required_samples(target: f64, delta: f64) -> Result<u64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::domain(format!("target bound must be > 0, got {target}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let estimate = ((1.0 / delta).ln() / (2.0 * target * target)).ceil().max(1.0);
    let mut m = estimate as u64;
    // The closed form can be off by one through rounding; settle on the exact boundary.
    while m > 1 && confidence_term(m - 1, delta) <= target {
        m -= 1;
    }
    while confidence_term(m, delta) > target {
        m += 1;
    }
    Ok(m)
}
