//! Tabular discounted MDPs: evaluation, value iteration and the output planner.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default stopping residual for value iteration.
pub const DEFAULT_RESIDUAL: f64 = 1e-6;
/// Relative width of the window inside which action values count as tied.
pub const TIE_WINDOW: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-12;
const ITERATION_MARGIN: usize = 1000;
/// Residual accepted from the direct solve before falling back to sweeps.
const EXACT_TOL: f64 = 1e-8;

/// One possible result of taking an action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

impl Outcome {
    pub fn new(next: usize, prob: f64, reward: f64) -> Self {
        Self { next, prob, reward }
    }
}

/// A validated finite MDP stored as sparse outcome lists per `(state, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    rows: Vec<Vec<Vec<Outcome>>>,
    gamma: f64,
    goal: Option<usize>,
}

impl FiniteMdp {
    /// `rows[s][a]` lists the outcomes of action `a` in state `s`.
    /// Outcomes with the same successor must not repeat.
    pub fn new(rows: Vec<Vec<Vec<Outcome>>>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Validation(format!("gamma {gamma} not in (0,1)")));
        }
        if rows.is_empty() {
            return Err(Error::Validation("MDP has no states".into()));
        }
        let n = rows.len();
        for (s, actions) in rows.iter().enumerate() {
            if actions.is_empty() {
                return Err(Error::Validation(format!("state {s} has no actions")));
            }
            for (a, outcomes) in actions.iter().enumerate() {
                let mut sum = 0.0;
                for (i, o) in outcomes.iter().enumerate() {
                    if o.next >= n {
                        return Err(Error::Validation(format!(
                            "({s},{a}) targets missing state {}",
                            o.next
                        )));
                    }
                    if !(0.0..=1.0).contains(&o.prob) {
                        return Err(Error::Validation(format!(
                            "({s},{a}) has probability {}",
                            o.prob
                        )));
                    }
                    if !(o.reward >= 0.0 && o.reward.is_finite()) {
                        return Err(Error::Validation(format!(
                            "({s},{a}) has reward {}",
                            o.reward
                        )));
                    }
                    if outcomes[..i].iter().any(|prev| prev.next == o.next) {
                        return Err(Error::Validation(format!(
                            "({s},{a}) lists successor {} twice",
                            o.next
                        )));
                    }
                    sum += o.prob;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Validation(format!(
                        "row ({s},{a}) sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            gamma,
            goal: None,
        })
    }

    /// Marks the state whose first visit defines the traverse event.
    pub fn with_goal(mut self, goal: usize) -> Result<Self> {
        if goal >= self.num_states() {
            return Err(Error::Validation(format!("goal {goal} out of range")));
        }
        self.goal = Some(goal);
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn num_actions(&self, s: usize) -> usize {
        self.rows[s].len()
    }

    pub fn actions_per_state(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.rows[s][a]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn goal(&self) -> Option<usize> {
        self.goal
    }

    pub fn r_max(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .flatten()
            .map(|o| o.reward)
            .fold(0.0, f64::max)
    }

    /// Probability of moving `s -> next` under action `a`.
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.rows[s][a]
            .iter()
            .find(|o| o.next == next)
            .map_or(0.0, |o| o.prob)
    }

    /// One-step lookahead value of `(s, a)` under `v`.
    pub fn q_value(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.rows[s][a]
            .iter()
            .map(|o| o.prob * (o.reward + self.gamma * v[o.next]))
            .sum()
    }
}

/// Deterministic stationary policy: one action index per state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy(Vec<usize>);

impl Policy {
    pub fn new(actions: Vec<usize>) -> Self {
        Self(actions)
    }

    pub fn action(&self, s: usize) -> usize {
        self.0[s]
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.0.len() != mdp.num_states() {
            return Err(invalid(format!(
                "policy covers {} states, MDP has {}",
                self.0.len(),
                mdp.num_states()
            )));
        }
        for (s, &a) in self.0.iter().enumerate() {
            if a >= mdp.num_actions(s) {
                return Err(invalid(format!("policy picks action {a} at state {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueVector(Vec<f64>);

impl ValueVector {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ValueVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    pub members: Vec<Policy>,
    /// Optimality slack the set was built with, if any.
    pub epsilon: Option<f64>,
}

impl PolicySet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, policy: &Policy) -> bool {
        self.members.contains(policy)
    }
}

/// Per-state mask of admissible actions.
pub type ActionMask = Vec<Vec<bool>>;

pub fn full_mask(mdp: &FiniteMdp) -> ActionMask {
    mdp.actions_per_state()
        .into_iter()
        .map(|k| vec![true; k])
        .collect()
}

/// Sweeps needed for a `tol` value error when starting from zero, plus slack.
pub fn iteration_cap(gamma: f64, tol: f64, r_max: f64) -> usize {
    if r_max <= 0.0 {
        return ITERATION_MARGIN;
    }
    let sweeps = ((tol * (1.0 - gamma) / r_max).ln() / gamma.ln()).ceil();
    sweeps.max(0.0) as usize + ITERATION_MARGIN
}

fn policy_backup(mdp: &FiniteMdp, policy: &Policy, v: &[f64]) -> Vec<f64> {
    (0..mdp.num_states())
        .map(|s| mdp.q_value(s, policy.action(s), v))
        .collect()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `V^π` by a direct linear solve, certified by its Bellman residual.
pub fn evaluate_policy(mdp: &FiniteMdp, policy: &Policy, tol: f64) -> Result<ValueVector> {
    if !(tol > 0.0) {
        return Err(invalid(format!("tolerance {tol} must be positive")));
    }
    policy.validate(mdp)?;
    let n = mdp.num_states();
    let mut system = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..n {
        for o in mdp.outcomes(s, policy.action(s)) {
            system[(s, o.next)] -= mdp.gamma() * o.prob;
            rhs[s] += o.prob * o.reward;
        }
    }
    let mut v: Vec<f64> = system
        .lu()
        .solve(&rhs)
        .map(|x| x.iter().copied().collect())
        .unwrap_or_else(|| vec![0.0; n]);

    // Fixed-point sweeps polish the solve if round-off left a large residual.
    let cap = iteration_cap(mdp.gamma(), tol, mdp.r_max());
    for _ in 0..cap {
        let next = policy_backup(mdp, policy, &v);
        let residual = max_gap(&next, &v);
        if residual < tol {
            return Ok(ValueVector(v));
        }
        v = next;
    }
    let residual = max_gap(&policy_backup(mdp, policy, &v), &v);
    Err(Error::NonConvergence {
        iterations: cap,
        residual,
    })
}

/// Actions whose lookahead value is within the tie window of the best.
pub fn greedy_action_sets(
    mdp: &FiniteMdp,
    v: &[f64],
    mask: &ActionMask,
    tie_window: f64,
) -> Result<Vec<Vec<usize>>> {
    (0..mdp.num_states())
        .map(|s| {
            let q: Vec<(usize, f64)> = (0..mdp.num_actions(s))
                .filter(|&a| mask[s][a])
                .map(|a| (a, mdp.q_value(s, a, v)))
                .collect();
            let best = q
                .iter()
                .map(|&(_, x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if q.is_empty() {
                return Err(Error::NoVisitedAction(s));
            }
            let window = tie_window * best.abs().max(1.0);
            Ok(q.into_iter()
                .filter(|&(_, x)| x >= best - window)
                .map(|(a, _)| a)
                .collect())
        })
        .collect()
}

fn pick_uniform<R: Rng + ?Sized>(sets: &[Vec<usize>], rng: &mut R) -> Policy {
    Policy(
        sets.iter()
            .map(|set| set[rng.random_range(0..set.len())])
            .collect(),
    )
}

/// Value iteration from zero until the sweep-to-sweep change drops below
/// `residual_tol`; ties in the greedy policy are broken uniformly.
pub fn value_iteration<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    residual_tol: f64,
    rng: &mut R,
) -> Result<(ValueVector, Policy)> {
    if !(residual_tol > 0.0) {
        return Err(invalid(format!("residual {residual_tol} must be positive")));
    }
    let n = mdp.num_states();
    let cap = iteration_cap(mdp.gamma(), residual_tol, mdp.r_max());
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..mdp.num_actions(s))
                    .map(|a| mdp.q_value(s, a, &v))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        residual = max_gap(&next, &v);
        v = next;
        if residual < residual_tol {
            let sets = greedy_action_sets(mdp, &v, &full_mask(mdp), TIE_WINDOW)?;
            return Ok((ValueVector(v), pick_uniform(&sets, rng)));
        }
    }
    Err(Error::NonConvergence {
        iterations: cap,
        residual,
    })
}

/// Exact optimum over the masked actions by policy iteration.
/// Returns `V*` and the per-state optimal action sets.
pub fn solve_exact(mdp: &FiniteMdp, mask: &ActionMask) -> Result<(ValueVector, Vec<Vec<usize>>)> {
    if mask.len() != mdp.num_states() {
        return Err(invalid(format!(
            "mask covers {} states, model has {}",
            mask.len(),
            mdp.num_states()
        )));
    }
    let first = mask
        .iter()
        .enumerate()
        .map(|(s, allowed)| {
            (0..mdp.num_actions(s))
                .find(|&a| allowed[a])
                .ok_or(Error::NoVisitedAction(s))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut policy = Policy(first);
    // Each improvement strictly raises the value, so the loop is finite.
    loop {
        let v = evaluate_policy(mdp, &policy, EXACT_TOL)?;
        let mut changed = false;
        for (s, allowed) in mask.iter().enumerate() {
            let current = mdp.q_value(s, policy.action(s), &v);
            let window = TIE_WINDOW * current.abs().max(1.0);
            let mut best = (policy.action(s), current);
            for a in (0..mdp.num_actions(s)).filter(|&a| allowed[a]) {
                let q = mdp.q_value(s, a, &v);
                if q > best.1 + window {
                    best = (a, q);
                }
            }
            if best.0 != policy.action(s) {
                policy.0[s] = best.0;
                changed = true;
            }
        }
        if !changed {
            let sets = greedy_action_sets(mdp, &v, mask, TIE_WINDOW)?;
            return Ok((v, sets));
        }
    }
}

/// The learner's output: an optimal policy of the estimated model using only
/// visited pairs, chosen uniformly among co-optimal ones.
pub fn plan_from_estimate(estimated: &FiniteMdp, visited: &ActionMask, seed: u64) -> Result<Policy> {
    let (_, sets) = solve_exact(estimated, visited)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pick_uniform(&sets, &mut rng))
}

fn policy_count(mdp: &FiniteMdp) -> u128 {
    mdp.actions_per_state()
        .iter()
        .try_fold(1u128, |acc, &k| acc.checked_mul(k as u128))
        .unwrap_or(u128::MAX)
}

/// Every deterministic policy, in mixed-radix order.
pub fn enumerate_policies(mdp: &FiniteMdp, cap: u128) -> Result<PolicySet> {
    let total = policy_count(mdp);
    if total > cap {
        return Err(Error::SizeExceeded {
            size: total,
            cap,
            hint: None,
        });
    }
    let radix = mdp.actions_per_state();
    let mut digits = vec![0usize; radix.len()];
    let mut members = Vec::with_capacity(total as usize);
    loop {
        members.push(Policy(digits.clone()));
        let mut pos = 0;
        loop {
            if pos == digits.len() {
                return Ok(PolicySet {
                    members,
                    epsilon: None,
                });
            }
            digits[pos] += 1;
            if digits[pos] < radix[pos] {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// Slack used when comparing two converged value vectors.
pub(crate) fn value_slack(v: f64) -> f64 {
    1e-9 * v.abs().max(1.0)
}

/// Policies with `V^π(s) ≥ V*(s) − ε` at every state.
pub fn epsilon_optimal_set(mdp: &FiniteMdp, epsilon: f64, cap: u128) -> Result<PolicySet> {
    if !(epsilon >= 0.0) {
        return Err(invalid(format!("epsilon {epsilon} must be nonnegative")));
    }
    let all = enumerate_policies(mdp, cap)?;
    let (v_star, _) = solve_exact(mdp, &full_mask(mdp))?;
    let mut members = Vec::new();
    for policy in all.members {
        let v = evaluate_policy(mdp, &policy, EXACT_TOL)?;
        if v
            .iter()
            .zip(v_star.iter())
            .all(|(&x, &best)| x >= best - epsilon - value_slack(best))
        {
            members.push(policy);
        }
    }
    Ok(PolicySet {
        members,
        epsilon: Some(epsilon),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn self_loop(reward: f64, gamma: f64) -> FiniteMdp {
        FiniteMdp::new(vec![vec![vec![Outcome::new(0, 1.0, reward)]]], gamma).unwrap()
    }

    fn two_state() -> FiniteMdp {
        FiniteMdp::new(
            vec![
                vec![vec![Outcome::new(1, 1.0, 0.0)]],
                vec![vec![Outcome::new(1, 1.0, 1.0)]],
            ],
            0.5,
        )
        .unwrap()
    }

    /// Two identical actions per state.
    fn twin_actions(states: usize) -> FiniteMdp {
        let rows = (0..states)
            .map(|s| {
                let row = vec![Outcome::new((s + 1) % states, 1.0, 1.0)];
                vec![row.clone(), row]
            })
            .collect();
        FiniteMdp::new(rows, 0.9).unwrap()
    }

    #[test]
    fn validation_rejects_bad_rows() {
        let bad_sum = vec![vec![vec![Outcome::new(0, 0.9, 0.0)]]];
        assert!(matches!(FiniteMdp::new(bad_sum, 0.5), Err(Error::Validation(_))));
        let neg = vec![vec![vec![Outcome::new(0, 1.0, -1.0)]]];
        assert!(FiniteMdp::new(neg, 0.5).is_err());
        let ok = vec![vec![vec![Outcome::new(0, 1.0, 0.0)]]];
        assert!(FiniteMdp::new(ok.clone(), 1.0).is_err());
        assert!(FiniteMdp::new(ok, 0.0).is_err());
    }

    #[test]
    fn geometric_series() {
        let mdp = self_loop(1.0, 0.5);
        let v = evaluate_policy(&mdp, &Policy::new(vec![0]), 1e-10).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
        let (v, _) = value_iteration(&mdp, 1e-10, &mut rng()).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn two_state_optimum() {
        let (v, _) = value_iteration(&two_state(), 1e-10, &mut rng()).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mdp = FiniteMdp::new(
            vec![
                vec![vec![Outcome::new(1, 0.5, 0.0), Outcome::new(0, 0.5, 0.0)]],
                vec![vec![Outcome::new(0, 1.0, 0.0)]],
            ],
            0.99,
        )
        .unwrap();
        let v = evaluate_policy(&mdp, &Policy::new(vec![0, 0]), 1e-9).unwrap();
        assert_eq!(v.as_ref() as &[f64], &[0.0, 0.0]);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_policies(&twin_actions(3), 100).unwrap().len(), 8);
        assert_eq!(enumerate_policies(&self_loop(1.0, 0.5), 1).unwrap().len(), 1);
        match enumerate_policies(&twin_actions(5), 16) {
            Err(Error::SizeExceeded { size, cap, .. }) => assert_eq!((size, cap), (32, 16)),
            other => panic!("expected size error, got {other:?}"),
        }
    }

    #[test]
    fn identical_actions_all_optimal() {
        let set = epsilon_optimal_set(&twin_actions(3), 0.0, 100).unwrap();
        assert_eq!(set.len(), 8);
        let huge = epsilon_optimal_set(&two_state(), 10.0, 100).unwrap();
        assert_eq!(huge.len(), 1);
    }

    #[test]
    fn planner_respects_mask() {
        let mdp = twin_actions(2);
        let mask = vec![vec![false, true], vec![true, false]];
        for seed in 0..50 {
            let p = plan_from_estimate(&mdp, &mask, seed).unwrap();
            assert_eq!(p.actions(), &[1, 0]);
        }
        let empty = vec![vec![false, false], vec![true, true]];
        assert!(matches!(
            plan_from_estimate(&mdp, &empty, 0),
            Err(Error::NoVisitedAction(0))
        ));
    }

    #[test]
    fn planner_ties_are_uniform() {
        let mdp = twin_actions(1);
        let mask = full_mask(&mdp);
        let trials = 10_000u64;
        let ones = (0..trials)
            .filter(|&seed| plan_from_estimate(&mdp, &mask, seed).unwrap().action(0) == 1)
            .count() as f64;
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((ones - 5000.0).abs() < 3.0 * sigma, "{ones}");
    }

    #[test]
    fn iteration_cap_grows_with_gamma() {
        assert!(iteration_cap(0.998, 1e-6, 1.0) > iteration_cap(0.9, 1e-6, 1.0));
        assert_eq!(iteration_cap(0.9, 1e-6, 0.0), ITERATION_MARGIN);
    }
}
