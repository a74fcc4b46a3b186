//! Distributions and hypothesis tests used by the experiments.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::approx::LogNormalParams;
use crate::error::{invalid, Result};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;
/// Two-sided 99% standard normal quantile.
pub const Z99: f64 = 2.575_829_303_548_900_4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// `P(X = k)` for `X ~ Binomial(n, p)`, computed in log space.
pub fn binomial_pmf(n: u64, k: u64, p: f64) -> Result<f64> {
    if k > n {
        return Err(invalid(format!("binomial k={k} exceeds n={n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("binomial p={p} outside [0,1]")));
    }
    if p == 0.0 {
        return Ok(if k == 0 { 1.0 } else { 0.0 });
    }
    if p == 1.0 {
        return Ok(if k == n { 1.0 } else { 0.0 });
    }
    Ok(binomial_saddle(n as f64, k as f64, p))
}

/// Loader's saddle-point form; avoids the cancellation of large log-gammas.
fn binomial_saddle(n: f64, k: f64, p: f64) -> f64 {
    let q = 1.0 - p;
    if k == 0.0 {
        return (n * (-p).ln_1p()).exp();
    }
    if k == n {
        return (n * p.ln()).exp();
    }
    let lc = stirling_error(n) - stirling_error(k) - stirling_error(n - k)
        - deviance(k, n * p)
        - deviance(n - k, n * q);
    (lc).exp() * (n / (2.0 * std::f64::consts::PI * k * (n - k))).sqrt()
}

/// `ln Γ(x+1) − (x+½)ln x + x − ln√(2π)`.
fn stirling_error(x: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if x <= 15.0 {
        return ln_gamma(x + 1.0) - (x + 0.5) * x.ln() + x - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    let x2 = x * x;
    if x > 500.0 {
        (S0 - S1 / x2) / x
    } else if x > 80.0 {
        (S0 - (S1 - S2 / x2) / x2) / x
    } else if x > 35.0 {
        (S0 - (S1 - (S2 - S3 / x2) / x2) / x2) / x
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / x2) / x2) / x2) / x2) / x
    }
}

/// `x ln(x/np) + np − x`, with a series near `x = np`.
fn deviance(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        let v2 = v * v;
        for j in 1..1000 {
            ej *= v2;
            let s1 = s + ej / f64::from(2 * j + 1);
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        return s;
    }
    x * (x / np).ln() + np - x
}

/// Whole PMF of `Binomial(n, p)` indexed by `k`.
pub fn binomial_pmf_table(n: u64, p: f64) -> Result<Vec<f64>> {
    (0..=n).map(|k| binomial_pmf(n, k, p)).collect()
}

pub fn binomial_cdf(n: u64, k: u64, p: f64) -> Result<f64> {
    let k = k.min(n);
    let mut acc = 0.0;
    for j in 0..=k {
        acc += binomial_pmf(n, j, p)?;
    }
    Ok(acc.min(1.0))
}

/// Standard normal CDF, Abramowitz & Stegun 26.2.17 (absolute error < 7.5e-8).
pub fn normal_cdf(x: f64) -> f64 {
    const B: [f64; 5] = [
        0.319_381_530,
        -0.356_563_782,
        1.781_477_937,
        -1.821_255_978,
        1.330_274_429,
    ];
    if x.is_nan() {
        return f64::NAN;
    }
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.231_641_9 * z);
    let poly = t * (B[0] + t * (B[1] + t * (B[2] + t * (B[3] + t * B[4]))));
    let tail = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * poly;
    if x >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

pub fn lognormal_cdf(x: f64, params: &LogNormalParams) -> Result<f64> {
    if x.is_nan() {
        return Err(invalid("log-normal CDF of NaN"));
    }
    Ok(lognormal_cdf_unchecked(x, params))
}

pub(crate) fn lognormal_cdf_unchecked(x: f64, params: &LogNormalParams) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let gap = x.ln() - params.mu_log;
    if params.sigma_log == 0.0 {
        // Point mass at the median.
        return if gap < 0.0 {
            0.0
        } else if gap > 0.0 {
            1.0
        } else {
            0.5
        };
    }
    normal_cdf(gap / params.sigma_log)
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    const TERM_TOL: f64 = 1e-10;
    if lambda <= 0.0 {
        return 1.0;
    }
    let sf = if lambda < 1.18 {
        // Theta-function form converges fast for small lambda.
        let pi2 = std::f64::consts::PI.powi(2);
        let mut cdf = 0.0;
        for k in 1..=100u32 {
            let odd = f64::from(2 * k - 1);
            let term = (-odd * odd * pi2 / (8.0 * lambda * lambda)).exp();
            cdf += term;
            if term < TERM_TOL {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * cdf
    } else {
        let mut acc = 0.0;
        for k in 1..=100u32 {
            let kf = f64::from(k);
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            acc += if k % 2 == 1 { term } else { -term };
            if term < TERM_TOL {
                break;
            }
        }
        2.0 * acc
    };
    sf.clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against a log-normal model.
pub fn ks_test_lognormal(sample: &[f64], params: &LogNormalParams) -> Result<TestResult> {
    if sample.is_empty() {
        return Err(invalid("KS test on an empty sample"));
    }
    if sample.iter().any(|x| x.is_nan()) {
        return Err(invalid("KS sample contains NaN"));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = lognormal_cdf_unchecked(x, params);
        let above = (i as f64 + 1.0) / n - f;
        let below = f - i as f64 / n;
        d = d.max(above).max(below);
    }
    Ok(TestResult {
        statistic: d,
        p_value: kolmogorov_sf(n.sqrt() * d),
        method_note: "asymptotic Kolmogorov distribution, sqrt(n) scaling".into(),
    })
}

/// Friedman rank test. Rows are blocks, columns are treatments.
pub fn friedman_test(blocks: &[Vec<f64>]) -> Result<TestResult> {
    let n = blocks.len();
    if n < 2 {
        return Err(invalid("Friedman test needs at least 2 blocks"));
    }
    let k = blocks[0].len();
    if k < 2 {
        return Err(invalid("Friedman test needs at least 2 treatments"));
    }
    if blocks.iter().any(|b| b.len() != k) {
        return Err(invalid("Friedman blocks have unequal lengths"));
    }
    let mut rank_sums = vec![0.0; k];
    let mut sum_sq_ranks = 0.0;
    for block in blocks {
        for (j, r) in mid_ranks(block).into_iter().enumerate() {
            rank_sums[j] += r;
            sum_sq_ranks += r * r;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let centre = nf * kf * (kf + 1.0).powi(2) / 4.0;
    let numer = (kf - 1.0) * (rank_sums.iter().map(|r| r * r).sum::<f64>() - nf * centre);
    let denom = sum_sq_ranks - centre;
    let note = "mid-ranks with tie correction; chi-square approximation".to_string();
    // All values tied inside every block.
    if denom <= 1e-12 * centre {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            method_note: note,
        });
    }
    let statistic = (numer / denom).max(0.0);
    let chi = ChiSquared::new(kf - 1.0).map_err(|e| invalid(e.to_string()))?;
    Ok(TestResult {
        statistic,
        p_value: chi.sf(statistic).clamp(0.0, 1.0),
        method_note: note,
    })
}

/// 1-based ranks, ties replaced by their average rank.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

pub fn summarize(sample: &[f64]) -> Result<Summary> {
    if sample.is_empty() {
        return Err(invalid("summary of an empty sample"));
    }
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let std = if sample.len() > 1 {
        (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean,
        std,
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let phat = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (phat + z2 / (2.0 * n)) / denom;
    let half = z * (phat * (1.0 - phat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// `p ± z·sqrt(p(1−p)/n)`, clamped to [0,1].
pub fn binomial_band(p: f64, trials: u64, z: f64) -> (f64, f64) {
    let half = z * (p * (1.0 - p) / trials as f64).sqrt();
    ((p - half).max(0.0), (p + half).min(1.0))
}
