//! Delta-method moments and the log-normal approximation of success.

use serde::{Deserialize, Serialize};

use crate::analytic::{
    expected_visit_numbers, prefix_value, success_conditions, traverse_probability,
    EstimateMethod, FamilyCriterion, SuccessEstimate,
};
use crate::chain::{ChainSpec, Productivity};
use crate::error::{invalid, Result};
use crate::stats::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

impl Moments {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    fn scaled(self, k: f64) -> Self {
        Self {
            mean: self.mean * k,
            variance: self.variance * k * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu_log: f64,
    pub sigma_log: f64,
}

impl LogNormalParams {
    pub fn mean(&self) -> f64 {
        (self.mu_log + 0.5 * self.sigma_log * self.sigma_log).exp()
    }

    pub fn variance(&self) -> f64 {
        let s2 = self.sigma_log * self.sigma_log;
        s2.exp_m1() * (2.0 * self.mu_log + s2).exp()
    }
}

/// Moments of the estimated factor `Ŷ = γp̂/(1−γ(1−p̂))` with `p̂` from `n_bar` tries.
pub fn y_moments(p: f64, n_bar: f64, gamma: f64) -> Result<Moments> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!("p = {p} not in (0,1]")));
    }
    if !(n_bar > 0.0) {
        return Err(invalid(format!("visit number {n_bar} must be positive")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(format!("gamma = {gamma} not in (0,1)")));
    }
    let c = (1.0 - gamma) / gamma;
    let denom = p + c;
    Ok(Moments {
        mean: p / denom,
        variance: c * c / denom.powi(4) * p * (1.0 - p) / n_bar,
    })
}

/// Moments of a product of independent factors.
pub fn f_moments(factors: &[Moments]) -> Result<Moments> {
    if factors.is_empty() {
        return Err(invalid("product of no factors"));
    }
    let mean: f64 = factors.iter().map(|y| y.mean).product();
    // ∏(V + E²) − ∏E² = ∏E² · (∏(1 + V/E²) − 1), kept stable for tiny V.
    let log_growth: f64 = factors
        .iter()
        .map(|y| (y.variance / (y.mean * y.mean)).ln_1p())
        .sum();
    Ok(Moments {
        mean,
        variance: mean * mean * log_growth.exp_m1(),
    })
}

/// Moments of `F̂_j` built from the expected visit numbers at `m`.
fn forward_product_moments(spec: &ChainSpec, j: usize, m: u32) -> Result<Moments> {
    if j >= spec.n {
        return Ok(Moments {
            mean: 1.0,
            variance: 0.0,
        });
    }
    let visits = expected_visit_numbers(spec, m)?;
    let ys = (j..spec.n)
        .map(|i| y_moments(spec.p(i), visits.fwd[i - 1], spec.gamma))
        .collect::<Result<Vec<_>>>()?;
    f_moments(&ys)
}

/// Value the goal contributes per unit of `F̂` for members `k ≥ 1`.
fn linear_goal(spec: &ChainSpec) -> f64 {
    let g = spec.gamma;
    match spec.productivity {
        Productivity::SelfLoop => spec.r_g / (1.0 - g),
        Productivity::Reset => spec.r_g + g * spec.r_d / (1.0 - g),
    }
}

/// Moments of `V̂^{π_k}(s_{k+1})`, `0 ≤ k < n`.
pub fn v_moments(spec: &ChainSpec, k: usize, m: u32) -> Result<Moments> {
    spec.validate()?;
    if k >= spec.n {
        return Err(invalid(format!(
            "V̂^(π_{k}) at s_{} is outside a chain of length {}",
            k + 1,
            spec.n
        )));
    }
    let f = forward_product_moments(spec, k + 1, m)?;
    if k == 0 && spec.productivity == Productivity::Reset {
        // V = r_G·F/(1−γF) linearized at E F.
        let g = spec.gamma;
        let gap = 1.0 - g * f.mean;
        return Ok(Moments {
            mean: spec.r_g * f.mean / gap,
            variance: spec.r_g * spec.r_g * f.variance / gap.powi(4),
        });
    }
    Ok(f.scaled(linear_goal(spec)))
}

pub fn lognormal_from_moments(mom: Moments) -> Result<LogNormalParams> {
    if !(mom.mean > 0.0) {
        return Err(invalid(format!("log-normal needs a positive mean, got {}", mom.mean)));
    }
    if !(mom.variance >= 0.0) {
        return Err(invalid(format!("negative variance {}", mom.variance)));
    }
    let spread = (mom.variance / (mom.mean * mom.mean)).ln_1p();
    Ok(LogNormalParams {
        mu_log: mom.mean.ln() - 0.5 * spread,
        sigma_log: spread.sqrt(),
    })
}

/// `P(X > c)` for log-normal `X`; a point mass splits ties evenly.
fn prob_above(params: &LogNormalParams, c: f64) -> f64 {
    if c <= 0.0 {
        return 1.0;
    }
    let gap = c.ln() - params.mu_log;
    if params.sigma_log == 0.0 {
        return step(-gap);
    }
    1.0 - normal_cdf(gap / params.sigma_log)
}

fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        0.0
    } else {
        0.5
    }
}

/// Probability that the learner outputs `π_k`, conditional on traverse.
pub fn approx_member_probability(spec: &ChainSpec, k: usize, m: u32) -> Result<f64> {
    let conds = success_conditions(spec, k)?;
    let n = spec.n;
    if k == 0 {
        let v = lognormal_from_moments(v_moments(spec, 0, m)?)?;
        return Ok(prob_above(&v, conds[0].critical_value));
    }
    if k == n {
        // V̂^{π_{n−1}}(s_n) involves no estimated factor.
        let value = linear_goal(spec);
        let first = &conds[0];
        return Ok(step(first.critical_value - value));
    }

    // Interior: Ŷ_k·X·S < c_k and X·S > c_{k+1}, with X = F̂_{k+1}.
    let scale = linear_goal(spec);
    let c_low = prefix_value(spec, k);
    let c_high = prefix_value(spec, k + 1);
    let x = lognormal_from_moments(forward_product_moments(spec, k + 1, m)?)?;
    let visits = expected_visit_numbers(spec, m)?;
    let y = lognormal_from_moments(y_moments(spec.p(k), visits.fwd[k - 1], spec.gamma)?)?;

    // P(Ŷ_k < c_low/(x·S)) for a given x.
    let y_below = |ln_x: f64| -> f64 {
        if c_low <= 0.0 {
            return 0.0;
        }
        let gap = (c_low / scale).ln() - ln_x - y.mu_log;
        if y.sigma_log == 0.0 {
            step(gap)
        } else {
            normal_cdf(gap / y.sigma_log)
        }
    };
    let x_floor = if c_high > 0.0 {
        (c_high / scale).ln()
    } else {
        f64::NEG_INFINITY
    };

    if x.sigma_log == 0.0 {
        let above = step(x.mu_log - x_floor);
        return Ok(above * y_below(x.mu_log));
    }
    Ok(integrate_tail(x.mu_log, x.sigma_log, x_floor, y_below))
}

/// `∫_{ln x > floor} φ(z)·g(ln x) dz` with `ln x = μ + σz`, by Simpson's rule.
fn integrate_tail(mu: f64, sigma: f64, floor: f64, g: impl Fn(f64) -> f64) -> f64 {
    const Z_MAX: f64 = 9.0;
    const PANELS: usize = 4000;
    let z_lo = ((floor - mu) / sigma).max(-Z_MAX);
    if z_lo >= Z_MAX {
        return 0.0;
    }
    let h = (Z_MAX - z_lo) / PANELS as f64;
    let density = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let f = |z: f64| density(z) * g(mu + sigma * z);
    let mut acc = f(z_lo) + f(Z_MAX);
    for i in 1..PANELS {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(z_lo + i as f64 * h);
    }
    (acc * h / 3.0).clamp(0.0, 1.0)
}

/// Approximate output distribution over `π_0..π_n`, conditional on traverse.
pub fn approx_family_distribution(spec: &ChainSpec, m: u32) -> Result<Vec<f64>> {
    (0..=spec.n)
        .map(|k| approx_member_probability(spec, k, m))
        .collect()
}

pub fn approx_success_probability(
    spec: &ChainSpec,
    m: u32,
    criterion: &FamilyCriterion,
) -> Result<SuccessEstimate> {
    criterion.validate(spec.n)?;
    let mut conditional = 0.0;
    for k in criterion.members() {
        conditional += approx_member_probability(spec, k, m)?;
    }
    Ok(SuccessEstimate::new(
        traverse_probability(&spec.forward_p, m)?,
        conditional.clamp(0.0, 1.0),
        EstimateMethod::Lognormal,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{closed_form_value, exact_success_probability, DEFAULT_ENUM_CAP};
    use crate::chain::Hazard;

    #[test]
    fn y_moment_examples() {
        let y = y_moments(1.0, 10.0, 0.9).unwrap();
        assert!((y.mean - 0.9).abs() < 1e-15 && y.variance == 0.0);
        let y = y_moments(0.5, 100.0, 0.998).unwrap();
        assert!((y.mean - 0.996008).abs() < 1e-6);
        assert!((y.variance - 1.581e-7).abs() < 1e-10, "{}", y.variance);
        let far = y_moments(0.5, 1e12, 0.998).unwrap();
        assert_eq!(far.mean, y.mean);
        assert!(far.variance < 1e-15);
        assert!(y_moments(0.0, 10.0, 0.9).is_err());
    }

    #[test]
    fn product_moments() {
        let y = Moments {
            mean: 0.7,
            variance: 0.01,
        };
        let single = f_moments(&[y]).unwrap();
        assert!((single.mean - 0.7).abs() < 1e-15);
        assert!((single.variance - 0.01).abs() < 1e-15);
        let exact = Moments {
            mean: 0.5,
            variance: 0.0,
        };
        assert_eq!(f_moments(&[exact, exact]).unwrap().variance, 0.0);
        let pair = f_moments(&[y, y]).unwrap();
        let direct = (0.01f64 + 0.49).powi(2) - 0.49f64.powi(2);
        assert!((pair.variance - direct).abs() < 1e-14);
        assert!(f_moments(&[]).is_err());
    }

    #[test]
    fn deterministic_values_have_no_spread() {
        let spec = ChainSpec::prototype(Hazard::Steps(1), Productivity::Reset, 5, 1.0);
        for k in 0..5 {
            let v = v_moments(&spec, k, 7).unwrap();
            assert_eq!(v.variance, 0.0);
            let want = closed_form_value(&spec, k, k + 1).unwrap();
            assert!((v.mean - want).abs() < 1e-9 * want);
        }
    }

    #[test]
    fn case_a_mean() {
        let spec = ChainSpec::prototype(Hazard::Steps(1), Productivity::SelfLoop, 20, 0.5);
        let v = v_moments(&spec, 0, 15).unwrap();
        assert!((v.mean - 463.4).abs() < 0.1, "{}", v.mean);
    }

    #[test]
    fn lognormal_identities() {
        let p = lognormal_from_moments(Moments {
            mean: 3.0,
            variance: 0.0,
        })
        .unwrap();
        assert!((p.mu_log - 3f64.ln()).abs() < 1e-15 && p.sigma_log == 0.0);
        let e = std::f64::consts::E;
        let p = lognormal_from_moments(Moments {
            mean: e.sqrt(),
            variance: (e - 1.0) * e,
        })
        .unwrap();
        assert!(p.mu_log.abs() < 1e-12 && (p.sigma_log - 1.0).abs() < 1e-12);
        assert!(lognormal_from_moments(Moments {
            mean: 0.0,
            variance: 1.0
        })
        .is_err());
    }

    #[test]
    fn tail_helpers() {
        let p = LogNormalParams {
            mu_log: 1.0,
            sigma_log: 0.3,
        };
        assert!((prob_above(&p, 1f64.exp()) - 0.5).abs() < 1e-7);
        let point = LogNormalParams {
            mu_log: 1.0,
            sigma_log: 0.0,
        };
        assert_eq!(prob_above(&point, 2.0), 1.0);
        assert_eq!(prob_above(&point, 3.0), 0.0);
        assert_eq!(prob_above(&p, 0.0), 1.0);
    }

    #[test]
    fn family_roughly_sums_to_one() {
        let spec = ChainSpec::prototype(Hazard::Steps(1), Productivity::SelfLoop, 4, 0.6)
            .with_rewards(1.0, 0.2);
        let total: f64 = approx_family_distribution(&spec, 6).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 0.02, "{total}");
    }

    #[test]
    fn agrees_with_enumeration_on_a_small_chain() {
        for (h, g) in [
            (Hazard::Steps(1), Productivity::SelfLoop),
            (Hazard::Reset, Productivity::SelfLoop),
            (Hazard::Steps(1), Productivity::Reset),
            (Hazard::Reset, Productivity::Reset),
        ] {
            let spec = ChainSpec::prototype(h, g, 4, 0.6);
            let crit = FamilyCriterion::Pi(0);
            let a = approx_success_probability(&spec, 8, &crit).unwrap();
            let e = exact_success_probability(&spec, 8, &crit, DEFAULT_ENUM_CAP).unwrap();
            assert!((a.total - e.total).abs() < 0.02, "approx {} exact {}", a.total, e.total);
            assert!((a.total - a.traverse_prob * a.conditional_prob).abs() < 1e-12);
        }
    }
}
