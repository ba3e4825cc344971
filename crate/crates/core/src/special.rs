//! Special functions used by the likelihood and priors.
//!
//! The `*_rising` helpers evaluate finite sums `sum_{j<m} f(x + j)` without
//! cancellation when `x` is large, which is the regime of a beta-binomial
//! likelihood close to its binomial limit.

use std::f64::consts::PI;

const SHIFT: f64 = 12.0;
const DIRECT_TERMS: u64 = 48;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Stirling correction `ln Gamma(z) - [(z - 1/2) ln z - z + ln(2 pi) / 2]`.
fn ln_gamma_series(z: f64) -> f64 {
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    iz * (1.0 / 12.0
        - iz2
            * (1.0 / 360.0
                - iz2
                    * (1.0 / 1260.0
                        - iz2 * (1.0 / 1680.0 - iz2 * (1.0 / 1188.0 - iz2 * 691.0 / 360360.0)))))
}

/// `psi(z) - [ln z - 1/(2z)]`.
fn digamma_series(z: f64) -> f64 {
    let z2 = 1.0 / (z * z);
    -z2 * (1.0 / 12.0
        - z2 * (1.0 / 120.0
            - z2 * (1.0 / 252.0 - z2 * (1.0 / 240.0 - z2 * (1.0 / 132.0 - z2 * 691.0 / 32760.0)))))
}

/// `psi'(z) - 1/z`.
fn trigamma_series(z: f64) -> f64 {
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    0.5 * iz2
        + iz * iz2
            * (1.0 / 6.0
                - iz2
                    * (1.0 / 30.0
                        - iz2
                            * (1.0 / 42.0
                                - iz2 * (1.0 / 30.0 - iz2 * (5.0 / 66.0 - iz2 * 691.0 / 2730.0)))))
}

fn ln_gamma_asymptotic(z: f64) -> f64 {
    (z - 0.5) * z.ln() - z + 0.5 * (2.0 * PI).ln() + ln_gamma_series(z)
}

fn digamma_asymptotic(z: f64) -> f64 {
    z.ln() - 0.5 / z + digamma_series(z)
}

fn trigamma_asymptotic(z: f64) -> f64 {
    1.0 / z + trigamma_series(z)
}

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT {
        acc += z.ln();
        z += 1.0;
    }
    ln_gamma_asymptotic(z) - acc
}

pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT {
        acc += 1.0 / z;
        z += 1.0;
    }
    digamma_asymptotic(z) - acc
}

pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    trigamma_asymptotic(z) + acc
}

/// `ln C(n, k)`.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    if k == 0 || k == n {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Steps `x` up to the asymptotic regime, returning the shifted start, the
/// remaining count and the partial sum of `f` over the skipped terms.
fn shift_start(x: f64, m: u64, f: impl Fn(f64) -> f64) -> (f64, u64, f64) {
    let mut z = x;
    let mut left = m;
    let mut acc = 0.0;
    while z < SHIFT && left > 0 {
        acc += f(z);
        z += 1.0;
        left -= 1;
    }
    (z, left, acc)
}

/// `sum_{j<m} ln(x + j) = ln Gamma(x + m) - ln Gamma(x)`.
pub fn log_rising(x: f64, m: u64) -> f64 {
    if m <= DIRECT_TERMS {
        return (0..m).map(|j| (x + j as f64).ln()).sum();
    }
    let (z0, left, acc) = shift_start(x, m, f64::ln);
    if left == 0 {
        return acc;
    }
    let mf = left as f64;
    let z1 = z0 + mf;
    let main = (z0 - 0.5) * (mf / z0).ln_1p() + mf * z1.ln() - mf;
    acc + main + (ln_gamma_series(z1) - ln_gamma_series(z0))
}

/// `sum_{j<m} 1 / (x + j) = psi(x + m) - psi(x)`.
pub fn digamma_rising(x: f64, m: u64) -> f64 {
    if m <= DIRECT_TERMS {
        return (0..m).map(|j| 1.0 / (x + j as f64)).sum();
    }
    let (z0, left, acc) = shift_start(x, m, |z| 1.0 / z);
    if left == 0 {
        return acc;
    }
    let mf = left as f64;
    let z1 = z0 + mf;
    // -1/(2 z1) + 1/(2 z0) = m / (2 z0 z1)
    acc + (mf / z0).ln_1p() + mf / (2.0 * z0 * z1) + (digamma_series(z1) - digamma_series(z0))
}

/// `sum_{j<m} 1 / (x + j)^2 = psi'(x) - psi'(x + m)`.
pub fn trigamma_rising(x: f64, m: u64) -> f64 {
    if m <= DIRECT_TERMS {
        return (0..m)
            .map(|j| {
                let z = x + j as f64;
                1.0 / (z * z)
            })
            .sum();
    }
    let (z0, left, acc) = shift_start(x, m, |z| 1.0 / (z * z));
    if left == 0 {
        return acc;
    }
    let mf = left as f64;
    let z1 = z0 + mf;
    acc + mf / (z0 * z1) + (trigamma_series(z0) - trigamma_series(z1))
}

/// Empirical quantile with linear interpolation between order statistics
/// (the `type 7` definition). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}
