//! Closed forms for chains: traverse probability, expected visit numbers,
//! family values, success conditions and exact enumeration.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::chain::{ChainSpec, Productivity};
use crate::error::{invalid, Error, Result};
use crate::stats::binomial_pmf_table;

/// Default cap on the number of enumerated binomial outcome vectors.
pub const DEFAULT_ENUM_CAP: u128 = 10_000_000_000;

/// `∏ (1 − (1 − p_i)^m)`: probability that OPS reaches the goal before τ_m.
pub fn traverse_probability(forward_p: &[f64], m: u32) -> Result<f64> {
    if let Some(bad) = forward_p.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(invalid(format!("forward probability {bad} not in (0,1]")));
    }
    Ok(forward_p
        .iter()
        .map(|&p| 1.0 - (1.0 - p).powi(m as i32))
        .product())
}

/// Expected tries per action at τ_m (given traverse) and the non-forward
/// inflow of each state. Vectors are indexed by chain position minus one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedVisits {
    /// Tries of `a⁺`; the last entry is the goal action.
    pub fwd: Vec<f64>,
    pub bwd: Vec<f64>,
    /// Tries of all trap actions at the state together.
    pub trap: Vec<f64>,
    /// Expected entries not coming from the forward move of the previous
    /// state. Includes the initial placement at `s₁` and excludes the final
    /// arrival where exploration ends (`s_n` for self-looping goals, `s₁`
    /// for resetting ones).
    pub lam: Vec<f64>,
}

impl ExpectedVisits {
    /// Largest violation of `tries_i = λ_i + p_{i−1} N̄⁺_{i−1}` over all states.
    pub fn balance_residual(&self, spec: &ChainSpec) -> f64 {
        (0..spec.n)
            .map(|s| {
                let tries = self.fwd[s] + self.bwd[s] + self.trap[s];
                let from_prev = if s == 0 {
                    0.0
                } else {
                    spec.forward_p[s - 1] * self.fwd[s - 1]
                };
                (tries - self.lam[s] - from_prev).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn total(&self) -> f64 {
        self.fwd.iter().chain(&self.bwd).chain(&self.trap).sum()
    }
}

pub fn expected_visit_numbers(spec: &ChainSpec, m: u32) -> Result<ExpectedVisits> {
    spec.validate()?;
    if m < 1 {
        return Err(invalid("m must be at least 1"));
    }
    let n = spec.n;
    let m = f64::from(m);
    let bwd = vec![m; n];
    let trap: Vec<f64> = (1..=n).map(|i| f64::from(spec.traps_at(i)) * m).collect();
    let goal_tries = m;
    let mut fwd = vec![0.0; n];
    fwd[n - 1] = goal_tries;

    // Non-forward inflow into position i from other positions.
    let inflow = |i: usize| -> f64 {
        let mut acc = 0.0;
        for j in 2..=n {
            if j != i && spec.backward_target(j) == i {
                acc += spec.backward_p_at(j) * bwd[j - 1];
            }
            if i == 1 {
                acc += spec.backward_p_at(j) * trap[j - 1];
            }
        }
        if i == 1 && spec.productivity == Productivity::Reset {
            acc += goal_tries;
        }
        acc
    };
    let ends_here = |i: usize| -> f64 {
        let last = match spec.productivity {
            Productivity::SelfLoop => n,
            Productivity::Reset => 1,
        };
        if i == last {
            1.0
        } else {
            0.0
        }
    };

    for i in (2..=n).rev() {
        let s = i - 1;
        let mut out = spec.backward_p_at(i) * (bwd[s] + trap[s]);
        if i < n {
            out += spec.p(i) * fwd[s];
        } else if spec.productivity == Productivity::Reset {
            out += fwd[s];
        }
        fwd[s - 1] = (out - inflow(i) + ends_here(i)) / spec.p(i - 1);
    }

    let lam = (1..=n)
        .map(|i| {
            let s = i - 1;
            let mut self_loops = if i < n {
                (1.0 - spec.p(i)) * fwd[s]
            } else if spec.productivity == Productivity::SelfLoop {
                fwd[s]
            } else {
                0.0
            };
            self_loops += if i == 1 {
                bwd[s] + trap[s]
            } else {
                (1.0 - spec.backward_p_at(i)) * (bwd[s] + trap[s])
            };
            let start = if i == 1 { 1.0 } else { 0.0 };
            self_loops + inflow(i) + start - ends_here(i)
        })
        .collect();

    Ok(ExpectedVisits {
        fwd,
        bwd,
        trap,
        lam,
    })
}

/// Expected length of exploration: the sum of all expected visit numbers.
pub fn expected_tau_m(spec: &ChainSpec, m: u32) -> Result<f64> {
    Ok(expected_visit_numbers(spec, m)?.total())
}

/// `V^{π_j}(s_j)` for the all-backward prefix; the constant side of every
/// success condition.
pub fn prefix_value(spec: &ChainSpec, j: usize) -> f64 {
    let g = spec.gamma;
    let mut c = vec![spec.r_d / (1.0 - g)];
    for i in 2..=j {
        let bp = spec.backward_p_at(i);
        c.push(g * bp * c[spec.backward_target(i) - 1] / (1.0 - g * (1.0 - bp)));
    }
    c[j - 1]
}

/// Value of the goal state under `π_k` when forward probabilities are `p`.
fn goal_value(spec: &ChainSpec, p: &[f64], k: usize) -> f64 {
    let g = spec.gamma;
    match spec.productivity {
        Productivity::SelfLoop => spec.r_g / (1.0 - g),
        Productivity::Reset if k == 0 => spec.r_g / (1.0 - g * spec.forward_product(p, 1)),
        Productivity::Reset => spec.r_g + g * spec.r_d / (1.0 - g),
    }
}

/// `V^{π_k}(s_j)` with `j > k` when forward probabilities are `p`.
pub fn suffix_value(spec: &ChainSpec, p: &[f64], k: usize, j: usize) -> f64 {
    spec.forward_product(p, j) * goal_value(spec, p, k)
}

/// `V^{π_k}(s_j)` in closed form (`0 ≤ k ≤ n`, `1 ≤ j ≤ n`).
pub fn closed_form_value(spec: &ChainSpec, k: usize, j: usize) -> Result<f64> {
    spec.validate()?;
    if k > spec.n || j < 1 || j > spec.n {
        return Err(invalid(format!("indices k={k}, j={j} out of range for n={}", spec.n)));
    }
    Ok(if j <= k {
        prefix_value(spec, j)
    } else {
        suffix_value(spec, &spec.forward_p, k, j)
    })
}

/// Whether `π_0` is the optimal policy of the true chain.
pub fn reward_constraint_holds(spec: &ChainSpec) -> Result<bool> {
    spec.validate()?;
    let f1 = spec.forward_product(&spec.forward_p, 1);
    let g = spec.gamma;
    Ok(match spec.productivity {
        Productivity::SelfLoop => f1 * spec.r_g > spec.r_d,
        Productivity::Reset => f1 * spec.r_g / (1.0 - g * f1) > spec.r_d / (1.0 - g),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Comparator {
    Greater,
    Less,
}

/// `V̂^{π_target}(s_state) ⋚ critical_value` must hold for the output to be the member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCondition {
    pub target_k: usize,
    pub state_index: usize,
    pub comparator: Comparator,
    pub critical_value: f64,
}

/// Conditions under which the learner outputs `π_k`.
pub fn success_conditions(spec: &ChainSpec, k: usize) -> Result<Vec<SuccessCondition>> {
    spec.validate()?;
    if k > spec.n {
        return Err(invalid(format!("family index {k} exceeds n={}", spec.n)));
    }
    let mut out = Vec::with_capacity(2);
    if k >= 1 {
        out.push(SuccessCondition {
            target_k: k - 1,
            state_index: k,
            comparator: Comparator::Less,
            critical_value: prefix_value(spec, k),
        });
    }
    if k < spec.n {
        out.push(SuccessCondition {
            target_k: k,
            state_index: k + 1,
            comparator: Comparator::Greater,
            critical_value: prefix_value(spec, k + 1),
        });
    }
    Ok(out)
}

/// Family members whose output probability is wanted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FamilyCriterion {
    Pi(usize),
    Set(Vec<usize>),
}

impl FamilyCriterion {
    pub fn members(&self) -> Vec<usize> {
        match self {
            FamilyCriterion::Pi(k) => vec![*k],
            FamilyCriterion::Set(ks) => {
                let mut ks = ks.clone();
                ks.sort_unstable();
                ks.dedup();
                ks
            }
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let ks = self.members();
        if ks.is_empty() {
            return Err(invalid("criterion selects no family member"));
        }
        if let Some(k) = ks.iter().find(|&&k| k > n) {
            return Err(invalid(format!("family index {k} exceeds n={n}")));
        }
        Ok(())
    }

    pub fn probability(&self, family: &[f64]) -> f64 {
        self.members().iter().map(|&k| family[k]).sum::<f64>().clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimateMethod {
    ExactEnum,
    Lognormal,
    MonteCarlo { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessEstimate {
    pub traverse_prob: f64,
    pub conditional_prob: f64,
    pub total: f64,
    pub method: EstimateMethod,
}

impl SuccessEstimate {
    pub fn new(traverse_prob: f64, conditional_prob: f64, method: EstimateMethod) -> Self {
        Self {
            traverse_prob,
            conditional_prob,
            total: traverse_prob * conditional_prob,
            method,
        }
    }
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

/// Integer visit counts used for enumeration, one per forward action.
pub fn rounded_forward_counts(spec: &ChainSpec, m: u32) -> Result<Vec<u64>> {
    let visits = expected_visit_numbers(spec, m)?;
    Ok(visits.fwd[..spec.n - 1]
        .iter()
        .map(|&x| round_half_up(x).max(1))
        .collect())
}

/// Number of outcome vectors `∏ (N_i + 1)`.
pub fn enumeration_size(counts: &[u64]) -> u128 {
    counts
        .iter()
        .try_fold(1u128, |acc, &c| acc.checked_mul(u128::from(c) + 1))
        .unwrap_or(u128::MAX)
}

/// Distribution of the output over `π_0..π_n`, conditional on traverse,
/// by exhaustive enumeration of the forward-transition counts.
pub fn exact_family_distribution(spec: &ChainSpec, m: u32, cap: u128) -> Result<Vec<f64>> {
    let counts = rounded_forward_counts(spec, m)?;
    let size = enumeration_size(&counts);
    if size > cap {
        return Err(Error::SizeExceeded {
            size,
            cap,
            hint: Some("use the log-normal approximation instead"),
        });
    }
    Enumerator::new(spec, &counts)?.run()
}

pub fn exact_success_probability(
    spec: &ChainSpec,
    m: u32,
    criterion: &FamilyCriterion,
    cap: u128,
) -> Result<SuccessEstimate> {
    criterion.validate(spec.n)?;
    let family = exact_family_distribution(spec, m, cap)?;
    let trav = traverse_probability(&spec.forward_p, m)?;
    Ok(SuccessEstimate::new(
        trav,
        criterion.probability(&family),
        EstimateMethod::ExactEnum,
    ))
}

/// Per-factor support: estimated `Y_i` values and their probabilities.
struct Factor {
    y: Vec<f64>,
    pmf: Vec<f64>,
    /// `cum[b]` = P(count < b).
    cum: Vec<f64>,
}

struct Enumerator<'a> {
    spec: &'a ChainSpec,
    factors: Vec<Factor>,
    /// Constant side `c_j` for j = 1..n.
    critical: Vec<f64>,
    /// Goal value of `π_j` for j ≥ 1 (linear in `F̂`).
    linear_goal: f64,
    family: Vec<f64>,
}

impl<'a> Enumerator<'a> {
    fn new(spec: &'a ChainSpec, counts: &[u64]) -> Result<Self> {
        let g = spec.gamma;
        let factors = counts
            .iter()
            .zip(&spec.forward_p)
            .map(|(&count, &p)| {
                let pmf = binomial_pmf_table(count, p)?;
                let y = (0..=count)
                    .map(|b| {
                        let phat = b as f64 / count as f64;
                        g * phat / (1.0 - g * (1.0 - phat))
                    })
                    .collect();
                let mut cum = Vec::with_capacity(pmf.len() + 1);
                cum.push(0.0);
                for &w in &pmf {
                    cum.push(cum[cum.len() - 1] + w);
                }
                Ok(Factor { y, pmf, cum })
            })
            .collect::<Result<Vec<_>>>()?;
        let linear_goal = match spec.productivity {
            Productivity::SelfLoop => spec.r_g / (1.0 - g),
            Productivity::Reset => spec.r_g + g * spec.r_d / (1.0 - g),
        };
        Ok(Self {
            spec,
            factors,
            critical: (1..=spec.n).map(|j| prefix_value(spec, j)).collect(),
            linear_goal,
            family: vec![0.0; spec.n + 1],
        })
    }

    /// `V̂^{π_j}(s_{j+1})` given `F̂_{j+1}`.
    fn suffix(&self, j: usize, f_hat: f64) -> f64 {
        if j == 0 && self.spec.productivity == Productivity::Reset {
            f_hat * self.spec.r_g / (1.0 - self.spec.gamma * f_hat)
        } else {
            f_hat * self.linear_goal
        }
    }

    /// Comparison `B_j`: suffix of `π_j` against `c_{j+1}`.
    fn compare(&self, j: usize, f_hat: f64) -> Ordering {
        self.suffix(j, f_hat)
            .partial_cmp(&self.critical[j])
            .unwrap_or(Ordering::Equal)
    }

    fn run(mut self) -> Result<Vec<f64>> {
        let n = self.spec.n;
        let mut ords = vec![Ordering::Equal; n];
        ords[n - 1] = self.compare(n - 1, 1.0);
        self.descend(n - 1, 1.0, 1.0, &mut ords);
        Ok(self.family)
    }

    /// Enumerates factor `i` (1-based) with `F̂_{i+1} = f_next`.
    fn descend(&mut self, i: usize, f_next: f64, weight: f64, ords: &mut [Ordering]) {
        if i == 1 {
            self.finish(f_next, weight, ords);
            return;
        }
        for b in 0..self.factors[i - 1].y.len() {
            let w = self.factors[i - 1].pmf[b];
            if w == 0.0 {
                continue;
            }
            let f_hat = self.factors[i - 1].y[b] * f_next;
            ords[i - 1] = self.compare(i - 1, f_hat);
            self.descend(i - 1, f_hat, weight * w, ords);
        }
    }

    /// Splits the first factor into the regions where `B_0` is below, at
    /// and above its critical value; `B_0` is monotone in the count.
    fn finish(&mut self, f2: f64, weight: f64, ords: &mut [Ordering]) {
        let factor = &self.factors[0];
        let len = factor.y.len();
        let lo = partition(0, len, |b| self.compare(0, factor.y[b] * f2) == Ordering::Less);
        let hi = partition(lo, len, |b| {
            self.compare(0, factor.y[b] * f2) != Ordering::Greater
        });
        let regions = [
            (Ordering::Less, factor.cum[lo]),
            (Ordering::Equal, factor.cum[hi] - factor.cum[lo]),
            (Ordering::Greater, factor.cum[len] - factor.cum[hi]),
        ];
        for (ord, mass) in regions {
            if mass <= 0.0 {
                continue;
            }
            ords[0] = ord;
            let winners = weak_winners(ords);
            let share = weight * mass / winners.len().max(1) as f64;
            for k in winners {
                self.family[k] += share;
            }
        }
    }
}

/// First index in `lo..hi` where `pred` turns false (`pred` must be monotone).
fn partition(mut lo: usize, mut hi: usize, pred: impl Fn(usize) -> bool) -> usize {
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Family members whose conditions hold with equality allowed.
fn weak_winners(ords: &[Ordering]) -> Vec<usize> {
    let n = ords.len();
    let below = |o: Ordering| o != Ordering::Greater;
    let above = |o: Ordering| o != Ordering::Less;
    (0..=n)
        .filter(|&k| (k == 0 || below(ords[k - 1])) && (k == n || above(ords[k])))
        .collect()
}
