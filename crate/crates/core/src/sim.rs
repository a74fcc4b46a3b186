//! Simulation of the Optimistic Prototype Strategy and seeded Monte Carlo batches.

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{
    evaluate_policy, full_mask, plan_from_estimate, solve_exact, value_slack, ActionMask,
    FiniteMdp, Outcome, Policy, PolicySet,
};
use crate::stats::{wilson_interval, Z95};

/// Redraw limit per repetition when conditioning on traverse.
pub const MAX_REDRAWS: u64 = 100_000;
/// Number of equal groups the success frequency is also reported over.
pub const SUCCESS_GROUPS: usize = 10;

const SEED_RULE: &str = "seed(i, a) = sm(sm(sm(master_seed) ^ i) ^ a), sm = SplitMix64 \
finalizer, i = repetition index from 0, a = redraw attempt from 0";

/// Human-readable statement of how per-run seeds derive from the master seed.
pub fn seed_rule() -> &'static str {
    SEED_RULE
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of repetition `index`, redraw `attempt`.
pub fn run_seed(master_seed: u64, index: u64, attempt: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ index) ^ attempt)
}

/// Visit counters of one run. Transition counts are aligned with the
/// outcome lists of the simulated MDP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitCounts {
    n_sa: Vec<Vec<u64>>,
    n_sas: Vec<Vec<Vec<u64>>>,
    successors: Vec<Vec<Vec<usize>>>,
}

impl VisitCounts {
    pub fn new(mdp: &FiniteMdp) -> Self {
        let n = mdp.num_states();
        Self {
            n_sa: (0..n).map(|s| vec![0; mdp.num_actions(s)]).collect(),
            n_sas: (0..n)
                .map(|s| {
                    (0..mdp.num_actions(s))
                        .map(|a| vec![0; mdp.outcomes(s, a).len()])
                        .collect()
                })
                .collect(),
            successors: (0..n)
                .map(|s| {
                    (0..mdp.num_actions(s))
                        .map(|a| mdp.outcomes(s, a).iter().map(|o| o.next).collect())
                        .collect()
                })
                .collect(),
        }
    }

    fn record(&mut self, s: usize, a: usize, outcome: usize) {
        self.n_sa[s][a] += 1;
        self.n_sas[s][a][outcome] += 1;
    }

    pub fn n_sa(&self, s: usize, a: usize) -> u64 {
        self.n_sa[s][a]
    }

    pub fn n_sas(&self, s: usize, a: usize, next: usize) -> u64 {
        self.successors[s][a]
            .iter()
            .zip(&self.n_sas[s][a])
            .filter(|(&t, _)| t == next)
            .map(|(_, &c)| c)
            .sum()
    }

    pub fn state_visits(&self, s: usize) -> u64 {
        self.n_sa[s].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.n_sa.iter().flatten().sum()
    }

    /// Row-wise `Σ_{s'} n_sas = n_sa`.
    pub fn is_consistent(&self) -> bool {
        self.n_sa.iter().zip(&self.n_sas).all(|(row, trans)| {
            row.iter()
                .zip(trans)
                .all(|(&n, t)| t.iter().sum::<u64>() == n)
        })
    }

    /// `(s, a)` pairs tried at least once.
    pub fn visited_mask(&self) -> ActionMask {
        self.n_sa
            .iter()
            .map(|row| row.iter().map(|&n| n > 0).collect())
            .collect()
    }

    /// Maximum-likelihood model. Unvisited pairs get a reward-free self-loop
    /// placeholder and are excluded by [`visited_mask`](Self::visited_mask).
    /// Rewards of observed transitions are copied from `truth`.
    pub fn estimated_mdp(&self, truth: &FiniteMdp) -> Result<FiniteMdp> {
        let rows = (0..truth.num_states())
            .map(|s| {
                (0..truth.num_actions(s))
                    .map(|a| {
                        let n = self.n_sa[s][a];
                        if n == 0 {
                            return vec![Outcome::new(s, 1.0, 0.0)];
                        }
                        truth
                            .outcomes(s, a)
                            .iter()
                            .zip(&self.n_sas[s][a])
                            .filter(|(_, &c)| c > 0)
                            .map(|(o, &c)| Outcome::new(o.next, c as f64 / n as f64, o.reward))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        FiniteMdp::new(rows, truth.gamma())
    }

    /// Empirical success rate `n_sas(s,a,next)/n_sa(s,a)`, if tried.
    pub fn estimated_prob(&self, s: usize, a: usize, next: usize) -> Option<f64> {
        let n = self.n_sa[s][a];
        (n > 0).then(|| self.n_sas(s, a, next) as f64 / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub steps_taken: u64,
    pub tau_m: Option<u64>,
    pub traverse: bool,
    pub visits: VisitCounts,
    pub output_policy: Option<Policy>,
    pub budget_exhausted: bool,
}

impl RunRecord {
    /// `V̂^π(start)` on this run's estimated model, if every pair that `π`
    /// reaches from the start was visited.
    pub fn estimated_value(&self, truth: &FiniteMdp, policy: &Policy) -> Result<Option<f64>> {
        policy.validate(truth)?;
        let mut seen = vec![false; truth.num_states()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(s) = stack.pop() {
            let a = policy.action(s);
            if self.visits.n_sa(s, a) == 0 {
                return Ok(None);
            }
            for (o, &c) in truth.outcomes(s, a).iter().zip(&self.visits.n_sas[s][a]) {
                if c > 0 && !seen[o.next] {
                    seen[o.next] = true;
                    stack.push(o.next);
                }
            }
        }
        let estimated = self.visits.estimated_mdp(truth)?;
        Ok(Some(evaluate_policy(&estimated, policy, 1e-8)?[0]))
    }
}

/// Navigation plan: per state, the actions minimizing the true expected
/// number of steps to the nearest under-explored visited state.
struct Navigator {
    best: Vec<Vec<usize>>,
}

impl Navigator {
    fn plan(mdp: &FiniteMdp, visits: &VisitCounts, visited: &[bool], m: u64) -> Self {
        let n = mdp.num_states();
        let explored: Vec<bool> = (0..n)
            .map(|s| visited[s] && visits.n_sa[s].iter().all(|&c| c >= m))
            .collect();
        let mut steps: Vec<f64> = (0..n)
            .map(|s| if visited[s] && !explored[s] { 0.0 } else { f64::INFINITY })
            .collect();

        // Expected steps via action `a` under the true dynamics, self-loop folded in.
        let cost = |s: usize, a: usize, steps: &[f64]| -> f64 {
            let mut stay = 0.0;
            let mut ahead = 0.0;
            for o in mdp.outcomes(s, a) {
                if o.next == s {
                    stay += o.prob;
                } else {
                    ahead += o.prob * steps[o.next];
                }
            }
            if stay >= 1.0 {
                f64::INFINITY
            } else {
                (1.0 + ahead) / (1.0 - stay)
            }
        };

        let order: Vec<usize> = (0..n).filter(|&s| explored[s]).collect();
        const MAX_SWEEPS: usize = 10_000;
        for sweep in 0..MAX_SWEEPS {
            let mut changed = false;
            let mut relax = |s: usize, steps: &mut Vec<f64>| {
                let best = (0..mdp.num_actions(s))
                    .map(|a| cost(s, a, steps))
                    .fold(f64::INFINITY, f64::min);
                if best < steps[s] - 1e-12 * best.max(1.0) {
                    steps[s] = best;
                    changed = true;
                }
            };
            // Alternate sweep direction so chains converge in few passes.
            if sweep % 2 == 0 {
                order.iter().for_each(|&s| relax(s, &mut steps));
            } else {
                order.iter().rev().for_each(|&s| relax(s, &mut steps));
            }
            if !changed {
                break;
            }
        }

        let best = (0..n)
            .map(|s| {
                if !explored[s] {
                    return Vec::new();
                }
                let costs: Vec<f64> = (0..mdp.num_actions(s)).map(|a| cost(s, a, &steps)).collect();
                let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
                if !min.is_finite() {
                    return (0..costs.len()).collect();
                }
                let window = 1e-9 * min.max(1.0);
                (0..costs.len()).filter(|&a| costs[a] <= min + window).collect()
            })
            .collect();
        Self { best }
    }
}

fn sample_outcome<R: Rng + ?Sized>(outcomes: &[Outcome], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, o) in outcomes.iter().enumerate() {
        acc += o.prob;
        if u < acc {
            return i;
        }
    }
    outcomes.len() - 1
}

/// One run of OPS from state 0. Under-explored actions at the current state
/// are tried uniformly at random; from a fully explored state the agent
/// heads for the nearest under-explored visited state. The run stops at the
/// first step after which every visited state is fully explored.
pub fn run_ops(mdp: &FiniteMdp, m: u64, budget: u64, seed: u64) -> Result<RunRecord> {
    if m < 1 {
        return Err(invalid("m must be at least 1"));
    }
    if budget < 1 {
        return Err(invalid("budget must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mdp.num_states();
    let mut visits = VisitCounts::new(mdp);
    let mut visited = vec![false; n];
    visited[0] = true;
    let mut pending = mdp.num_actions(0);
    let mut plan: Option<Navigator> = None;
    let mut state = 0usize;
    let mut steps = 0u64;
    let mut tau_m = None;
    let mut open = Vec::with_capacity(8);

    while steps < budget {
        open.clear();
        open.extend((0..mdp.num_actions(state)).filter(|&a| visits.n_sa[state][a] < m));
        let action = if !open.is_empty() {
            open[rng.random_range(0..open.len())]
        } else {
            let nav = plan.get_or_insert_with(|| Navigator::plan(mdp, &visits, &visited, m));
            let choices = &nav.best[state];
            choices[rng.random_range(0..choices.len())]
        };

        let outcomes = mdp.outcomes(state, action);
        let k = sample_outcome(outcomes, &mut rng);
        visits.record(state, action, k);
        steps += 1;
        if visits.n_sa[state][action] == m {
            pending -= 1;
            plan = None;
        }
        let next = outcomes[k].next;
        if !visited[next] {
            visited[next] = true;
            pending += mdp.num_actions(next);
            plan = None;
        }
        state = next;
        if pending == 0 {
            tau_m = Some(steps);
            break;
        }
    }

    let traverse = mdp.goal().is_some_and(|g| visits.state_visits(g) > 0);
    let output_policy = match tau_m {
        Some(_) if visited.iter().all(|&v| v) => {
            let estimated = visits.estimated_mdp(mdp)?;
            Some(plan_from_estimate(&estimated, &visits.visited_mask(), rng.next_u64())?)
        }
        _ => None,
    };
    Ok(RunRecord {
        seed,
        steps_taken: steps,
        tau_m,
        traverse,
        visits,
        output_policy,
        budget_exhausted: tau_m.is_none(),
    })
}

/// Which outputs count as a success.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SuccessCriterion {
    Strict,
    Epsilon(f64),
    Pi(Policy),
    Set(PolicySet),
}

impl SuccessCriterion {
    pub fn validate(&self) -> Result<()> {
        match self {
            SuccessCriterion::Epsilon(e) if !(*e >= 0.0) => {
                Err(invalid(format!("epsilon {e} must be nonnegative")))
            }
            _ => Ok(()),
        }
    }
}

/// Judges outputs against one criterion, caching per distinct policy.
pub struct SuccessJudge<'a> {
    mdp: &'a FiniteMdp,
    criterion: &'a SuccessCriterion,
    v_star: Option<Vec<f64>>,
    cache: HashMap<Policy, bool>,
}

impl<'a> SuccessJudge<'a> {
    pub fn new(mdp: &'a FiniteMdp, criterion: &'a SuccessCriterion) -> Result<Self> {
        criterion.validate()?;
        let v_star = match criterion {
            SuccessCriterion::Strict | SuccessCriterion::Epsilon(_) => {
                Some(solve_exact(mdp, &full_mask(mdp))?.0.into_inner())
            }
            _ => None,
        };
        Ok(Self {
            mdp,
            criterion,
            v_star,
            cache: HashMap::new(),
        })
    }

    pub fn judge(&mut self, output: &Policy) -> Result<bool> {
        if let Some(&hit) = self.cache.get(output) {
            return Ok(hit);
        }
        let verdict = match self.criterion {
            SuccessCriterion::Pi(target) => output == target,
            SuccessCriterion::Set(set) => set.contains(output),
            SuccessCriterion::Strict | SuccessCriterion::Epsilon(_) => {
                let eps = match self.criterion {
                    SuccessCriterion::Epsilon(e) => *e,
                    _ => 0.0,
                };
                let v = evaluate_policy(self.mdp, output, 1e-8)?;
                let v_star = self.v_star.as_deref().unwrap_or_default();
                v.iter()
                    .zip(v_star)
                    .all(|(&x, &best)| x >= best - eps - value_slack(best))
            }
        };
        self.cache.insert(output.clone(), verdict);
        Ok(verdict)
    }
}

pub fn classify_success(run: &RunRecord, mdp: &FiniteMdp, criterion: &SuccessCriterion) -> Result<bool> {
    let output = run.output_policy.as_ref().ok_or(Error::MissingOutput)?;
    SuccessJudge::new(mdp, criterion)?.judge(output)
}

/// Parameters of a Monte Carlo batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub m: u64,
    pub budget: u64,
    pub repetitions: u64,
    pub condition_on_traverse: bool,
    pub master_seed: u64,
}

/// Draws repetition `index`, redrawing until traverse when conditioned.
/// Returns the accepted run and the number of draws it took.
pub fn draw_run(mdp: &FiniteMdp, plan: &BatchPlan, index: u64) -> Result<(RunRecord, u64)> {
    let limit = if plan.condition_on_traverse { MAX_REDRAWS } else { 1 };
    let mut last = None;
    for attempt in 0..limit {
        let run = run_ops(mdp, plan.m, plan.budget, run_seed(plan.master_seed, index, attempt))?;
        if !plan.condition_on_traverse || run.traverse {
            return Ok((run, attempt + 1));
        }
        last = Some(run);
    }
    match last {
        Some(_) => Err(invalid(format!(
            "repetition {index} did not traverse in {MAX_REDRAWS} draws"
        ))),
        None => Err(invalid("no draws were made")),
    }
}

/// All runs of a batch in repetition order (independent of thread count).
pub fn run_batch(mdp: &FiniteMdp, plan: &BatchPlan) -> Result<Vec<RunRecord>> {
    if plan.repetitions < 1 {
        return Err(invalid("repetitions must be at least 1"));
    }
    (0..plan.repetitions)
        .into_par_iter()
        .map(|i| draw_run(mdp, plan, i).map(|(run, _)| run))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub runs: u64,
    /// Draws including redraws made for conditioning.
    pub draws: u64,
    pub traverse_freq: f64,
    pub success_count: u64,
    pub success_freq: f64,
    /// 95% Wilson interval of the success frequency.
    pub success_interval: (f64, f64),
    pub completed: u64,
    pub budget_exhausted: u64,
    pub tau_mean: f64,
    /// Mean and std of `n_sa` over runs that reached τ_m.
    pub visit_mean: Vec<Vec<f64>>,
    pub visit_std: Vec<Vec<f64>>,
    /// `V̂^probe(s₁)` of every run where it is defined.
    pub probe_values: Vec<f64>,
    /// Success frequency per block of consecutive repetitions.
    pub group_success: Vec<f64>,
}

struct Digest {
    traverse: bool,
    success: bool,
    tau_m: Option<u64>,
    counts: Vec<u64>,
    probe: Option<f64>,
    draws: u64,
}

/// Seeded batch of OPS runs with success judged by `criterion`. `probe`
/// defaults to action 0 everywhere (`π^{-+}_0` on chains).
pub fn monte_carlo_with_probe(
    mdp: &FiniteMdp,
    plan: &BatchPlan,
    criterion: &SuccessCriterion,
    probe: Option<&Policy>,
) -> Result<BatchSummary> {
    if plan.repetitions < 1 {
        return Err(invalid("repetitions must be at least 1"));
    }
    let default_probe = Policy::new(vec![0; mdp.num_states()]);
    let probe = probe.unwrap_or(&default_probe);
    probe.validate(mdp)?;
    SuccessJudge::new(mdp, criterion)?;

    let digests: Vec<Digest> = (0..plan.repetitions)
        .into_par_iter()
        .map_init(
            || SuccessJudge::new(mdp, criterion),
            |judge, i| {
                let judge = judge.as_mut().map_err(|e| invalid(e.to_string()))?;
                let (run, draws) = draw_run(mdp, plan, i)?;
                let success = match &run.output_policy {
                    Some(out) => judge.judge(out)?,
                    None => false,
                };
                let probe_value = if run.tau_m.is_some() {
                    run.estimated_value(mdp, probe)?
                } else {
                    None
                };
                Ok(Digest {
                    traverse: run.traverse,
                    success,
                    tau_m: run.tau_m,
                    counts: run.visits.n_sa.iter().flatten().copied().collect(),
                    probe: probe_value,
                    draws,
                })
            },
        )
        .collect::<Result<_>>()?;

    let runs = plan.repetitions;
    let success_count = digests.iter().filter(|d| d.success).count() as u64;
    let done: Vec<&Digest> = digests.iter().filter(|d| d.tau_m.is_some()).collect();
    let shape = mdp.actions_per_state();
    let width: usize = shape.iter().sum();
    let mut mean = vec![0.0; width];
    let mut sq = vec![0.0; width];
    for d in &done {
        for (j, &c) in d.counts.iter().enumerate() {
            mean[j] += c as f64;
        }
    }
    let completed = done.len() as f64;
    if completed > 0.0 {
        mean.iter_mut().for_each(|x| *x /= completed);
        for d in &done {
            for (j, &c) in d.counts.iter().enumerate() {
                sq[j] += (c as f64 - mean[j]).powi(2);
            }
        }
    }
    let std: Vec<f64> = sq
        .iter()
        .map(|s| if completed > 1.0 { (s / (completed - 1.0)).sqrt() } else { 0.0 })
        .collect();
    let reshape = |flat: &[f64]| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(shape.len());
        let mut at = 0;
        for &k in &shape {
            out.push(flat[at..at + k].to_vec());
            at += k;
        }
        out
    };

    let group_size = (runs as usize).div_ceil(SUCCESS_GROUPS).max(1);
    let group_success = digests
        .chunks(group_size)
        .map(|g| g.iter().filter(|d| d.success).count() as f64 / g.len() as f64)
        .collect();

    Ok(BatchSummary {
        runs,
        draws: digests.iter().map(|d| d.draws).sum(),
        traverse_freq: digests.iter().filter(|d| d.traverse).count() as f64 / runs as f64,
        success_count,
        success_freq: success_count as f64 / runs as f64,
        success_interval: wilson_interval(success_count, runs, Z95),
        completed: done.len() as u64,
        budget_exhausted: runs - done.len() as u64,
        tau_mean: if done.is_empty() {
            f64::NAN
        } else {
            done.iter().filter_map(|d| d.tau_m).sum::<u64>() as f64 / completed
        },
        visit_mean: reshape(&mean),
        visit_std: reshape(&std),
        probe_values: digests.iter().filter_map(|d| d.probe).collect(),
        group_success,
    })
}

pub fn monte_carlo(
    mdp: &FiniteMdp,
    m: u64,
    budget: u64,
    repetitions: u64,
    criterion: &SuccessCriterion,
    condition_on_traverse: bool,
    master_seed: u64,
) -> Result<BatchSummary> {
    let plan = BatchPlan {
        m,
        budget,
        repetitions,
        condition_on_traverse,
        master_seed,
    };
    monte_carlo_with_probe(mdp, &plan, criterion, None)
}
