//! Choosing `m`, diagnosing failures and ranking problem hardness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{
    exact_success_probability, expected_tau_m, FamilyCriterion, SuccessEstimate, DEFAULT_ENUM_CAP,
};
use crate::approx::approx_success_probability;
use crate::chain::ChainSpec;
use crate::error::{invalid, Error, Result};

/// Alternatives whose expected step count is within this factor count as the same scale.
pub const SAME_SCALE_FACTOR: f64 = 2.0;

/// Largest `m` examined when searching for a budget-feasible remedy.
pub const MAX_REMEDY_M: u32 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Exact,
    #[default]
    Approx,
}

/// Inclusive range of exploration parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MRange {
    pub lo: u32,
    pub hi: u32,
}

impl MRange {
    pub fn new(lo: u32, hi: u32) -> Self {
        Self { lo, hi }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo < 1 || self.lo > self.hi {
            return Err(invalid(format!("m range [{}, {}] is empty or starts below 1", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> {
        self.lo..=self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorQuery {
    pub spec: ChainSpec,
    pub criterion: FamilyCriterion,
    pub delta: f64,
    pub m_range: MRange,
    #[serde(default)]
    pub method: Method,
}

impl AdvisorQuery {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.criterion.validate(self.spec.n)?;
        self.m_range.validate()?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta = {} not in (0,1)", self.delta)));
        }
        Ok(())
    }
}

/// Success estimate at one `m`, with whether enumeration had to give way to the approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m: u32,
    pub expected_tau: f64,
    pub estimate: SuccessEstimate,
    pub fell_back: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BestM {
    Feasible {
        m: u32,
        expected_tau: f64,
        achieved_p: f64,
    },
    Infeasible,
}

impl BestM {
    pub fn is_feasible(&self) -> bool {
        matches!(self, BestM::Feasible { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advice {
    pub best: BestM,
    pub sweep: Vec<SweepPoint>,
}

/// Success probability by the requested method; enumeration too large falls back to the approximation.
pub fn success_estimate(
    spec: &ChainSpec,
    m: u32,
    criterion: &FamilyCriterion,
    method: Method,
) -> Result<(SuccessEstimate, bool)> {
    match method {
        Method::Approx => Ok((approx_success_probability(spec, m, criterion)?, false)),
        Method::Exact => match exact_success_probability(spec, m, criterion, DEFAULT_ENUM_CAP) {
            Ok(e) => Ok((e, false)),
            Err(Error::SizeExceeded { .. }) => {
                Ok((approx_success_probability(spec, m, criterion)?, true))
            }
            Err(e) => Err(e),
        },
    }
}

fn sweep_point(spec: &ChainSpec, m: u32, criterion: &FamilyCriterion, method: Method) -> Result<SweepPoint> {
    let (estimate, fell_back) = success_estimate(spec, m, criterion, method)?;
    Ok(SweepPoint {
        m,
        expected_tau: expected_tau_m(spec, m)?,
        estimate,
        fell_back,
    })
}

/// Cheapest `m` in range whose success probability reaches `1 − δ`.
pub fn best_m(query: &AdvisorQuery) -> Result<Advice> {
    query.validate()?;
    let sweep: Vec<SweepPoint> = query
        .m_range
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|m| sweep_point(&query.spec, m, &query.criterion, query.method))
        .collect::<Result<_>>()?;
    let target = 1.0 - query.delta;
    let best = sweep
        .iter()
        .filter(|pt| pt.estimate.total >= target)
        .min_by(|a, b| a.expected_tau.total_cmp(&b.expected_tau).then(a.m.cmp(&b.m)))
        .map_or(BestM::Infeasible, |pt| BestM::Feasible {
            m: pt.m,
            expected_tau: pt.expected_tau,
            achieved_p: pt.estimate.total,
        });
    Ok(Advice { best, sweep })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    AEasier,
    BEasier,
    Incomparable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessReport {
    pub tau_a: Option<f64>,
    pub tau_b: Option<f64>,
    pub m_a: Option<u32>,
    pub m_b: Option<u32>,
    pub verdict: Verdict,
}

fn same_kind(a: &FamilyCriterion, b: &FamilyCriterion) -> bool {
    std::mem::discriminant(a) == std::mem::discriminant(b)
}

/// Ranks two problems by the expected steps their best `m` needs.
pub fn compare_hardness(a: &AdvisorQuery, b: &AdvisorQuery) -> Result<HardnessReport> {
    if a.delta != b.delta {
        return Err(invalid(format!("delta differs: {} vs {}", a.delta, b.delta)));
    }
    if !same_kind(&a.criterion, &b.criterion) {
        return Err(invalid("criteria are of different kinds"));
    }
    let split = |best: BestM| match best {
        BestM::Feasible { m, expected_tau, .. } => (Some(expected_tau), Some(m)),
        BestM::Infeasible => (None, None),
    };
    let (tau_a, m_a) = split(best_m(a)?.best);
    let (tau_b, m_b) = split(best_m(b)?.best);
    let verdict = match (tau_a, tau_b) {
        (Some(x), Some(y)) if x < y => Verdict::AEasier,
        (Some(x), Some(y)) if y < x => Verdict::BEasier,
        _ => Verdict::Incomparable,
    };
    Ok(HardnessReport {
        tau_a,
        tau_b,
        m_a,
        m_b,
        verdict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub high: f64,
    pub acceptable: f64,
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(self.high) && unit(self.acceptable) && self.high >= self.acceptable) {
            return Err(invalid(format!(
                "thresholds need 1 ≥ high ≥ acceptable ≥ 0, got high={} acceptable={}",
                self.high, self.acceptable
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Situation {
    /// Success was likely; the failure was bad luck.
    A,
    /// A larger `m` within the remaining budget reaches the acceptable level.
    B,
    /// Another `m` at the same step scale reaches the acceptable level.
    C,
    /// Nothing examined reaches the acceptable level.
    D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationReport {
    pub situation: Situation,
    pub current_p: f64,
    pub current_tau: f64,
    /// The `m` that justifies B or C.
    pub suggested_m: Option<u32>,
    pub suggested_p: Option<f64>,
    pub narrative: String,
}

/// Failure context for [`analyze_situation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureContext {
    pub m: u32,
    /// Steps still affordable for a fresh run.
    pub tau_budget_remaining: f64,
    #[serde(default)]
    pub m_alternatives: Vec<u32>,
    pub thresholds: Thresholds,
}

/// Classifies why a run with parameter `m` failed and what to try next.
pub fn analyze_situation(
    spec: &ChainSpec,
    criterion: &FamilyCriterion,
    method: Method,
    ctx: &FailureContext,
) -> Result<SituationReport> {
    spec.validate()?;
    criterion.validate(spec.n)?;
    ctx.thresholds.validate()?;
    if ctx.m < 1 {
        return Err(invalid("m must be at least 1"));
    }
    if ctx.m_alternatives.contains(&0) {
        return Err(invalid("alternative m must be at least 1"));
    }
    let Thresholds { high, acceptable } = ctx.thresholds;
    let current = sweep_point(spec, ctx.m, criterion, method)?;
    let report = |situation, suggestion: Option<&SweepPoint>, narrative: String| SituationReport {
        situation,
        current_p: current.estimate.total,
        current_tau: current.expected_tau,
        suggested_m: suggestion.map(|s| s.m),
        suggested_p: suggestion.map(|s| s.estimate.total),
        narrative,
    };

    if current.estimate.total >= high {
        return Ok(report(
            Situation::A,
            None,
            format!(
                "success probability at m={} is {:.4} (≥ {high}); the failure was most likely bad luck, rerun with the same m",
                ctx.m, current.estimate.total
            ),
        ));
    }

    // Expected τ grows with m, so the scan stops at the first unaffordable m.
    let mut m = ctx.m;
    while m < MAX_REMEDY_M {
        m += 1;
        let pt = sweep_point(spec, m, criterion, method)?;
        if pt.expected_tau > ctx.tau_budget_remaining {
            break;
        }
        if pt.estimate.total >= acceptable {
            return Ok(report(
                Situation::B,
                Some(&pt),
                format!(
                    "m={} reaches {:.4} (≥ {acceptable}) at expected τ {:.1}, within the remaining budget {:.1}",
                    pt.m, pt.estimate.total, pt.expected_tau, ctx.tau_budget_remaining
                ),
            ));
        }
    }

    let mut alternatives = ctx.m_alternatives.clone();
    alternatives.sort_unstable();
    alternatives.dedup();
    for alt in alternatives {
        let pt = sweep_point(spec, alt, criterion, method)?;
        let ratio = pt.expected_tau / current.expected_tau;
        let same_scale = (1.0 / SAME_SCALE_FACTOR..=SAME_SCALE_FACTOR).contains(&ratio);
        if same_scale && pt.estimate.total >= acceptable {
            return Ok(report(
                Situation::C,
                Some(&pt),
                format!(
                    "the alternative m={} reaches {:.4} (≥ {acceptable}) at a comparable expected τ {:.1}",
                    pt.m, pt.estimate.total, pt.expected_tau
                ),
            ));
        }
    }

    Ok(report(
        Situation::D,
        None,
        format!(
            "no examined setting reaches {acceptable}; the problem is too hard for the available budget (current p = {:.4})",
            current.estimate.total
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{Hazard, Productivity};

    fn query(n: usize, p: f64, delta: f64, lo: u32, hi: u32) -> AdvisorQuery {
        AdvisorQuery {
            spec: ChainSpec::prototype(Hazard::Steps(1), Productivity::SelfLoop, n, p),
            criterion: FamilyCriterion::Pi(0),
            delta,
            m_range: MRange::new(lo, hi),
            method: Method::Exact,
        }
    }

    #[test]
    fn two_state_chain_needs_five_tries() {
        let mut q = query(2, 0.5, 0.05, 1, 12);
        q.spec = q.spec.with_rewards(1.0, 1e-9);
        q.criterion = FamilyCriterion::Set(vec![0]);
        let advice = best_m(&q).unwrap();
        for pt in &advice.sweep {
            // The only miss besides not traversing is p̂ = 0 on the N̄ forward tries.
            let trav = 1.0 - 0.5f64.powi(pt.m as i32);
            let tries = crate::analytic::rounded_forward_counts(&q.spec, pt.m).unwrap()[0];
            let miss = 0.5f64.powi(tries as i32);
            assert!(pt.estimate.total <= trav + 1e-12);
            assert!(pt.estimate.total >= trav * (1.0 - miss) - 1e-12);
        }
        match advice.best {
            BestM::Feasible { m, achieved_p, .. } => {
                assert_eq!(m, 5);
                assert!(achieved_p >= 0.95);
            }
            BestM::Infeasible => panic!("expected a feasible m"),
        }
    }

    #[test]
    fn loose_delta_picks_the_smallest_m() {
        let advice = best_m(&query(5, 0.5, 0.999_999, 3, 9)).unwrap();
        assert!(matches!(advice.best, BestM::Feasible { m: 3, .. }));
    }

    #[test]
    fn unreachable_target_is_infeasible() {
        let advice = best_m(&query(30, 0.2, 0.01, 1, 3)).unwrap();
        assert_eq!(advice.best, BestM::Infeasible);
        assert_eq!(advice.sweep.len(), 3);
    }

    #[test]
    fn query_validation() {
        assert!(best_m(&query(5, 0.5, 0.0, 1, 3)).is_err());
        assert!(best_m(&query(5, 0.5, 0.1, 4, 3)).is_err());
        assert!(best_m(&query(5, 0.5, 0.1, 0, 3)).is_err());
    }

    #[test]
    fn identical_problems_tie() {
        let q = query(6, 0.5, 0.1, 1, 20);
        let r = compare_hardness(&q, &q).unwrap();
        assert_eq!(r.verdict, Verdict::Incomparable);
        assert_eq!(r.tau_a, r.tau_b);
        assert!(r.tau_a.unwrap() > 0.0);
    }

    #[test]
    fn longer_chain_is_harder() {
        let mut a = query(10, 0.3, 0.05, 1, 60);
        let mut b = query(60, 0.3, 0.05, 1, 60);
        a.method = Method::Approx;
        b.method = Method::Approx;
        let r = compare_hardness(&a, &b).unwrap();
        assert_eq!(r.verdict, Verdict::AEasier);
        assert!(r.m_b.unwrap() > r.m_a.unwrap());
        assert!(r.tau_b.unwrap() > r.tau_a.unwrap());
    }

    #[test]
    fn mismatched_queries_are_rejected() {
        let a = query(4, 0.5, 0.1, 1, 5);
        let mut b = a.clone();
        b.delta = 0.2;
        assert!(compare_hardness(&a, &b).is_err());
        b.delta = 0.1;
        b.criterion = FamilyCriterion::Set(vec![0]);
        assert!(compare_hardness(&a, &b).is_err());
    }

    fn ctx(m: u32, budget: f64, alts: Vec<u32>, high: f64, acceptable: f64) -> FailureContext {
        FailureContext {
            m,
            tau_budget_remaining: budget,
            m_alternatives: alts,
            thresholds: Thresholds { high, acceptable },
        }
    }

    #[test]
    fn situations() {
        let spec = ChainSpec::prototype(Hazard::Steps(1), Productivity::SelfLoop, 4, 0.5);
        let crit = FamilyCriterion::Pi(0);
        let a = analyze_situation(&spec, &crit, Method::Exact, &ctx(20, 0.0, vec![], 0.95, 0.9)).unwrap();
        assert_eq!(a.situation, Situation::A);

        let b = analyze_situation(&spec, &crit, Method::Exact, &ctx(2, 1e6, vec![], 0.99, 0.9)).unwrap();
        assert_eq!(b.situation, Situation::B);
        let m = b.suggested_m.unwrap();
        let (below, _) = success_estimate(&spec, m - 1, &crit, Method::Exact).unwrap();
        assert!(b.suggested_p.unwrap() >= 0.9 && (m == 3 || below.total < 0.9));

        let d = analyze_situation(&spec, &crit, Method::Exact, &ctx(2, 0.0, vec![2, 100], 0.99, 0.9)).unwrap();
        assert_eq!(d.situation, Situation::D);
        assert!(d.suggested_m.is_none());
    }

    #[test]
    fn same_scale_alternative() {
        let spec = ChainSpec::prototype(Hazard::Steps(1), Productivity::SelfLoop, 10, 0.3);
        let crit = FamilyCriterion::Pi(0);
        let c = ctx(10, 0.0, vec![40, 15], 0.95, 0.9);
        let r = analyze_situation(&spec, &crit, Method::Approx, &c).unwrap();
        assert!(r.current_p < 0.95);
        assert_eq!(r.situation, Situation::C);
        assert_eq!(r.suggested_m, Some(15));
    }

    #[test]
    fn bad_thresholds() {
        let spec = ChainSpec::prototype(Hazard::Steps(1), Productivity::SelfLoop, 4, 0.5);
        let bad = ctx(3, 10.0, vec![], 0.5, 0.9);
        assert!(analyze_situation(&spec, &FamilyCriterion::Pi(0), Method::Approx, &bad).is_err());
    }

    #[test]
    fn report_round_trips() {
        let advice = best_m(&query(4, 0.5, 0.1, 1, 4)).unwrap();
        let text = serde_json::to_string(&advice).unwrap();
        assert_eq!(serde_json::from_str::<Advice>(&text).unwrap(), advice);
    }
}
