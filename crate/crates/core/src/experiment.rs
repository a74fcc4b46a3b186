//! JSON-configured experiment batches writing CSV tables and a metadata sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::advisor::{
    analyze_situation, best_m, compare_hardness, success_estimate, Advice, AdvisorQuery, BestM,
    FailureContext, HardnessReport, MRange, Method, SituationReport,
};
use crate::analytic::{
    closed_form_value, expected_visit_numbers, traverse_probability, EstimateMethod,
    FamilyCriterion,
};
use crate::approx::{lognormal_from_moments, v_moments};
use crate::chain::{
    build_general_chain, build_maze_pair, pbf_policy, ChainSpec, MazeSpec, BACKWARD, FORWARD,
};
use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, Policy, PolicySet};
use crate::sim::{
    monte_carlo_with_probe, run_batch, run_seed, seed_rule, BatchPlan, RunRecord, SuccessCriterion,
};
use crate::stats::{friedman_test, ks_test_lognormal, wilson_interval, TestResult, Z95};

pub const DEFAULT_REPETITIONS: u64 = 1000;
pub const DEFAULT_BUDGET: u64 = 300_000;
/// Significance level at which value-distribution KS tests are counted as rejections.
pub const KS_LEVEL: f64 = 0.01;

const BATCH_SEED_RULE: &str = "batch master seed = seed(chain_index, m) under the run rule \
applied to the config master seed; runs of the batch then use the run rule with that batch seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExperimentKind {
    TravSweepM,
    TravSweepN,
    VisitNumbers,
    Dispersion,
    ValueDist,
    SuccessCurve,
    Maze,
    Advise,
}

/// How `r_D` is set for every chain of the config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum RdRule {
    Fixed { value: f64 },
    /// `r_D = f·(1−γ)·V^{π₀}(s₁)`.
    CriticalFraction { f: f64 },
}

impl RdRule {
    pub fn apply(&self, spec: ChainSpec) -> Result<ChainSpec> {
        let r_g = spec.r_g;
        let spec = match *self {
            RdRule::Fixed { value } => spec.with_rewards(r_g, value),
            RdRule::CriticalFraction { f } => {
                if !(f > 0.0) {
                    return Err(Error::Config(format!("critical fraction {f} must be positive")));
                }
                let v0 = closed_form_value(&spec, 0, 1)?;
                let r_d = f * (1.0 - spec.gamma) * v0;
                spec.with_rewards(r_g, r_d)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Seed-pinned uniform forward probabilities for chains marked `"random_p": true`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomP {
    pub seed: u64,
    #[serde(default = "default_low")]
    pub low: f64,
    #[serde(default = "default_high")]
    pub high: f64,
}

fn default_low() -> f64 {
    0.3
}
fn default_high() -> f64 {
    0.7
}
fn default_repetitions() -> u64 {
    DEFAULT_REPETITIONS
}
fn default_budget() -> u64 {
    DEFAULT_BUDGET
}
fn default_criterion() -> FamilyCriterion {
    FamilyCriterion::Pi(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdviseSection {
    pub delta: Option<f64>,
    pub m_range: MRange,
    #[serde(default)]
    pub failure: Option<FailureContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Chain specs (maze specs for `MAZE`), each optionally carrying `id` and `random_p`.
    pub chains: Vec<Value>,
    #[serde(default)]
    pub m_values: Vec<u32>,
    /// Re-instantiates each uniform chain at every listed length.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n_values: Vec<usize>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u64,
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default)]
    pub master_seed: u64,
    pub output_path: String,
    #[serde(default)]
    pub rd_rule: Option<RdRule>,
    #[serde(default)]
    pub random_p: Option<RandomP>,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_criterion")]
    pub criterion: FamilyCriterion,
    #[serde(default)]
    pub advise: Option<AdviseSection>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains.is_empty() {
            return Err(config_err("chains must not be empty"));
        }
        if self.repetitions < 1 {
            return Err(config_err("repetitions must be at least 1"));
        }
        if self.budget < 1 {
            return Err(config_err("budget must be at least 1"));
        }
        if self.output_path.is_empty() {
            return Err(config_err("output_path must not be empty"));
        }
        match self.experiment {
            ExperimentKind::Advise => {
                let advise = self
                    .advise
                    .as_ref()
                    .ok_or_else(|| config_err("ADVISE needs an advise section"))?;
                let delta = advise.delta.ok_or_else(|| config_err("ADVISE needs advise.delta"))?;
                if !(delta > 0.0 && delta < 1.0) {
                    return Err(config_err(format!("delta = {delta} not in (0,1)")));
                }
                advise.m_range.validate().map_err(|e| config_err(e.to_string()))?;
            }
            ExperimentKind::VisitNumbers | ExperimentKind::Dispersion => {
                if self.m_values.len() != 1 {
                    return Err(config_err(format!(
                        "{:?} needs exactly one m in m_values",
                        self.experiment
                    )));
                }
            }
            _ => {
                if self.m_values.is_empty() {
                    return Err(config_err("m_values must not be empty"));
                }
            }
        }
        if self.m_values.contains(&0) {
            return Err(config_err("m values must be at least 1"));
        }
        if let Some(r) = self.random_p {
            if !(0.0 < r.low && r.low < r.high && r.high <= 1.0) {
                return Err(config_err(format!("random_p range [{}, {}) is invalid", r.low, r.high)));
            }
        }
        Ok(())
    }

    /// Chains after id assignment, length expansion, random forward probabilities and the `r_D` rule.
    pub fn resolve_chains(&self) -> Result<Vec<NamedChain>> {
        let mut out = Vec::new();
        for (idx, entry) in self.chains.iter().enumerate() {
            let (id, random, body) = split_entry(entry, idx)?;
            let mut body = body;
            if random {
                // Placeholder so the spec parses; replaced from the table below.
                body.entry("forward_p").or_insert(Value::from(0.5));
            }
            let spec: ChainSpec = serde_json::from_value(Value::Object(body))
                .map_err(|e| config_err(format!("chain {idx}: {e}")))?;
            let id = id.unwrap_or_else(|| format!("c{idx}_{}", spec.label()));
            if self.n_values.is_empty() {
                out.push(NamedChain { id, spec, random });
            } else {
                for &n in &self.n_values {
                    out.push(NamedChain {
                        id: format!("{id}_n{n}"),
                        spec: resized(&spec, n)?,
                        random,
                    });
                }
            }
        }
        if out.iter().any(|c| c.random) {
            let table = self
                .random_p
                .ok_or_else(|| config_err("chains marked random_p need a random_p section"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(table.seed);
            for chain in out.iter_mut().filter(|c| c.random) {
                let p: Vec<f64> = (1..chain.spec.n)
                    .map(|_| rng.random_range(table.low..table.high))
                    .collect();
                chain.spec = chain.spec.clone().with_forward_p(p);
            }
        }
        if let Some(rule) = &self.rd_rule {
            for chain in &mut out {
                chain.spec = rule.apply(chain.spec.clone())?;
            }
        }
        for chain in &out {
            chain.spec.validate().map_err(|e| config_err(format!("chain {}: {e}", chain.id)))?;
        }
        Ok(out)
    }

    pub fn resolve_mazes(&self) -> Result<Vec<(String, MazeSpec)>> {
        self.chains
            .iter()
            .enumerate()
            .map(|(idx, entry)| {
                let (id, random, body) = split_entry(entry, idx)?;
                if random {
                    return Err(config_err("random_p does not apply to mazes"));
                }
                let maze: MazeSpec = serde_json::from_value(Value::Object(body))
                    .map_err(|e| config_err(format!("maze {idx}: {e}")))?;
                Ok((id.unwrap_or_else(|| format!("maze{idx}")), maze))
            })
            .collect()
    }
}

fn split_entry(entry: &Value, idx: usize) -> Result<(Option<String>, bool, Map<String, Value>)> {
    let mut body = entry
        .as_object()
        .cloned()
        .ok_or_else(|| config_err(format!("chain {idx} is not an object")))?;
    let id = match body.remove("id") {
        None => None,
        Some(Value::String(s)) => Some(s),
        Some(other) => return Err(config_err(format!("chain {idx}: id {other} is not a string"))),
    };
    let random = match body.remove("random_p") {
        None => false,
        Some(Value::Bool(b)) => b,
        Some(other) => {
            return Err(config_err(format!("chain {idx}: random_p {other} is not a boolean")))
        }
    };
    Ok((id, random, body))
}

fn uniform<T: PartialEq + Copy>(v: &[T]) -> Option<T> {
    let first = *v.first()?;
    v.iter().all(|&x| x == first).then_some(first)
}

fn resized(spec: &ChainSpec, n: usize) -> Result<ChainSpec> {
    let p = uniform(&spec.forward_p);
    let h = uniform(&spec.hazard);
    let bp = uniform(&spec.backward_p);
    match (p, h, bp) {
        (Some(p), Some(h), Some(bp)) if spec.traps.is_empty() => {
            let mut out = ChainSpec::prototype(h, spec.productivity, n, p)
                .with_rewards(spec.r_g, spec.r_d)
                .with_gamma(spec.gamma);
            out.backward_p = vec![bp; n];
            out.validate()?;
            Ok(out)
        }
        _ => Err(config_err("n_values needs chains with uniform parameters and no traps")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedChain {
    pub id: String,
    pub spec: ChainSpec,
    #[serde(skip)]
    pub random: bool,
}

/// Theory split of one SUCCESS row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub m: u32,
    pub theory_traverse: f64,
    pub theory_conditional: f64,
    pub theory_total: f64,
    pub method: EstimateMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDecomposition {
    pub chain_id: String,
    pub rows: Vec<Decomposition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fallback {
    pub chain_id: String,
    pub m: u32,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriedmanReport {
    /// Chains compared, one treatment each; blocks are the `m` values.
    pub treatments: Vec<String>,
    pub blocks: Vec<u32>,
    pub result: Option<TestResult>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsTally {
    pub groups: usize,
    pub rejections: usize,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainAdvice {
    pub chain_id: String,
    pub advice: Advice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub chain_a: String,
    pub chain_b: String,
    pub report: HardnessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSituation {
    pub chain_id: String,
    pub report: SituationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdviseReport {
    pub delta: f64,
    pub criterion: FamilyCriterion,
    pub method: Method,
    pub chains: Vec<ChainAdvice>,
    pub comparisons: Vec<Comparison>,
    pub situations: Vec<ChainSituation>,
    pub note: String,
}

impl AdviseReport {
    pub fn any_infeasible(&self) -> bool {
        self.chains.iter().any(|c| !c.advice.best.is_feasible())
    }

    pub fn render(&self) -> String {
        let mut out = format!("delta = {}, criterion = {:?}, method = {:?}\n", self.delta, self.criterion, self.method);
        for c in &self.chains {
            match c.advice.best {
                BestM::Feasible { m, expected_tau, achieved_p } => out.push_str(&format!(
                    "{}: best m = {m}, expected tau = {expected_tau:.1}, success probability = {achieved_p:.4}\n",
                    c.chain_id
                )),
                BestM::Infeasible => out.push_str(&format!(
                    "{}: INFEASIBLE, no m in range reaches 1 - delta\n",
                    c.chain_id
                )),
            }
        }
        for c in &self.comparisons {
            out.push_str(&format!("{} vs {}: {:?}\n", c.chain_a, c.chain_b, c.report.verdict));
        }
        for s in &self.situations {
            out.push_str(&format!("{}: situation {:?}: {}\n", s.chain_id, s.report.situation, s.report.narrative));
        }
        out.push_str(&self.note);
        out.push('\n');
        out
    }
}

/// Everything recorded next to the CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool_version: String,
    pub experiment: ExperimentKind,
    pub master_seed: u64,
    pub seed_rule: String,
    pub batch_seed_rule: String,
    pub interval: String,
    pub config: ExperimentConfig,
    pub chains: Vec<NamedChain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mazes: Option<Vec<(String, MazeSpec)>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallbacks: Vec<Fallback>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub decomposition: Vec<ChainDecomposition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friedman: Option<FriedmanReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<KsTally>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub output: PathBuf,
    pub metadata: PathBuf,
    pub extra: Vec<PathBuf>,
    pub advise: Option<AdviseReport>,
}

impl ExperimentOutput {
    /// True when an advise request had no feasible `m` for some chain.
    pub fn infeasible(&self) -> bool {
        self.advise.as_ref().is_some_and(AdviseReport::any_infeasible)
    }
}

/// Master seed of the batch for chain `chain_index` at parameter `m`.
pub fn batch_seed(master_seed: u64, chain_index: usize, m: u32) -> u64 {
    run_seed(master_seed, chain_index as u64, u64::from(m))
}

fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_stem().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    output.with_file_name(name)
}

fn groups_path(output: &Path) -> PathBuf {
    let mut name = output.file_stem().unwrap_or_default().to_os_string();
    name.push(".groups.csv");
    output.with_file_name(name)
}

struct Table {
    header: &'static [&'static str],
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &'static [&'static str]) -> Self {
        Self { header, rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    meta: Metadata,
    extra: Vec<PathBuf>,
}

impl Runner<'_> {
    fn plan(&self, chain_index: usize, m: u32, conditioned: bool) -> BatchPlan {
        BatchPlan {
            m: u64::from(m),
            budget: self.config.budget,
            repetitions: self.config.repetitions,
            condition_on_traverse: conditioned,
            master_seed: batch_seed(self.config.master_seed, chain_index, m),
        }
    }

    fn traverse(&mut self) -> Result<Table> {
        let mut t = Table::new(&["chain_id", "n", "m", "theory_trav", "empirical_trav", "wilson_lo", "wilson_hi", "runs"]);
        for (ci, chain) in self.meta.chains.iter().enumerate() {
            let mdp = build_general_chain(&chain.spec)?;
            for &m in &self.config.m_values {
                let runs = run_batch(&mdp, &self.plan(ci, m, false))?;
                let hits = runs.iter().filter(|r| r.traverse).count() as u64;
                let total = runs.len() as u64;
                let (lo, hi) = wilson_interval(hits, total, Z95);
                t.push(vec![
                    chain.id.clone(),
                    chain.spec.n.to_string(),
                    m.to_string(),
                    num(traverse_probability(&chain.spec.forward_p, m)?),
                    num(hits as f64 / total as f64),
                    num(lo),
                    num(hi),
                    total.to_string(),
                ]);
            }
        }
        Ok(t)
    }

    fn conditioned_runs(&self, ci: usize, mdp: &FiniteMdp, m: u32) -> Result<Vec<RunRecord>> {
        let runs = run_batch(mdp, &self.plan(ci, m, true))?;
        Ok(runs.into_iter().filter(|r| r.tau_m.is_some()).collect())
    }

    fn visits(&mut self) -> Result<Table> {
        let mut t = Table::new(&["chain_id", "state", "action", "nbar_theory", "mean_emp", "std_emp"]);
        let m = self.config.m_values[0];
        for (ci, chain) in self.meta.chains.iter().enumerate() {
            let spec = &chain.spec;
            let mdp = build_general_chain(spec)?;
            let theory = expected_visit_numbers(spec, m)?;
            let runs = self.conditioned_runs(ci, &mdp, m)?;
            for s in 0..spec.n {
                for a in 0..mdp.num_actions(s) {
                    let nbar = match a {
                        FORWARD => theory.fwd[s],
                        BACKWARD => theory.bwd[s],
                        _ => theory.trap[s] / f64::from(spec.traps_at(s + 1)),
                    };
                    let counts: Vec<f64> = runs.iter().map(|r| r.visits.n_sa(s, a) as f64).collect();
                    let (mean, std) = mean_std(&counts);
                    t.push(vec![
                        chain.id.clone(),
                        (s + 1).to_string(),
                        a.to_string(),
                        num(nbar),
                        num(mean),
                        num(std),
                    ]);
                }
            }
        }
        Ok(t)
    }

    fn dispersion(&mut self) -> Result<Table> {
        let mut t = Table::new(&["chain_id", "state", "p", "phat_mean", "phat_std_emp", "phat_std_theory", "runs"]);
        let m = self.config.m_values[0];
        for (ci, chain) in self.meta.chains.iter().enumerate() {
            let spec = &chain.spec;
            let mdp = build_general_chain(spec)?;
            let theory = expected_visit_numbers(spec, m)?;
            let runs = self.conditioned_runs(ci, &mdp, m)?;
            for s in 0..spec.n - 1 {
                let p = spec.forward_p[s];
                let phats: Vec<f64> = runs
                    .iter()
                    .filter_map(|r| r.visits.estimated_prob(s, FORWARD, s + 1))
                    .collect();
                let (mean, std) = mean_std(&phats);
                t.push(vec![
                    chain.id.clone(),
                    (s + 1).to_string(),
                    num(p),
                    num(mean),
                    num(std),
                    num((p * (1.0 - p) / theory.fwd[s]).sqrt()),
                    phats.len().to_string(),
                ]);
            }
        }
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn value_rows(
        &self,
        t: &mut Table,
        tally: &mut KsTally,
        id: &str,
        ci: usize,
        mdp: &FiniteMdp,
        abstraction: &ChainSpec,
        probe: &Policy,
    ) -> Result<()> {
        for &m in &self.config.m_values {
            let mom = v_moments(abstraction, 0, m)?;
            let params = lognormal_from_moments(mom)?;
            let runs = self.conditioned_runs(ci, mdp, m)?;
            let mut values = Vec::with_capacity(runs.len());
            for r in &runs {
                if let Some(v) = r.estimated_value(mdp, probe)? {
                    values.push(v);
                }
            }
            let (mean, std) = mean_std(&values);
            let (d, p) = if values.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let ks = ks_test_lognormal(&values, &params)?;
                (ks.statistic, ks.p_value)
            };
            tally.groups += 1;
            if p < tally.level {
                tally.rejections += 1;
            }
            t.push(vec![
                id.to_string(),
                m.to_string(),
                num(mom.mean),
                num(mom.std()),
                num(mean),
                num(std),
                num(d),
                num(p),
            ]);
        }
        Ok(())
    }

    fn value_dist(&mut self) -> Result<Table> {
        let mut t = Table::new(&["chain_id", "m", "mean_theory", "std_theory", "mean_emp", "std_emp", "ks_D", "ks_p"]);
        let mut tally = KsTally { groups: 0, rejections: 0, level: KS_LEVEL };
        for (ci, chain) in self.meta.chains.iter().enumerate() {
            let mdp = build_general_chain(&chain.spec)?;
            let probe = pbf_policy(0, &chain.spec)?;
            self.value_rows(&mut t, &mut tally, &chain.id, ci, &mdp, &chain.spec, &probe)?;
        }
        self.meta.ks = Some(tally);
        Ok(t)
    }

    fn maze(&mut self) -> Result<Table> {
        let mut t = Table::new(&["chain_id", "m", "mean_theory", "std_theory", "mean_emp", "std_emp", "ks_D", "ks_p"]);
        let mut tally = KsTally { groups: 0, rejections: 0, level: KS_LEVEL };
        let mazes = self.config.resolve_mazes()?;
        for (ci, (id, maze)) in mazes.iter().enumerate() {
            let pair = build_maze_pair(maze)?;
            self.value_rows(&mut t, &mut tally, id, ci, &pair.mdp, &pair.chain, &pair.path_policy)?;
            self.meta.chains.push(NamedChain {
                id: format!("{id}_abstraction"),
                spec: pair.chain.clone(),
                random: false,
            });
        }
        self.meta.mazes = Some(mazes);
        self.meta.ks = Some(tally);
        Ok(t)
    }

    fn success(&mut self, out: &Path) -> Result<Table> {
        let mut t = Table::new(&["chain_id", "m", "theory_total", "empirical", "wilson_lo", "wilson_hi"]);
        let mut groups = Table::new(&["chain_id", "m", "group", "success_freq"]);
        let crit = &self.config.criterion;
        let chains = self.meta.chains.clone();
        let mut empirical = vec![vec![0.0; chains.len()]; self.config.m_values.len()];
        for (ci, chain) in chains.iter().enumerate() {
            let spec = &chain.spec;
            crit.validate(spec.n).map_err(|e| config_err(format!("chain {}: {e}", chain.id)))?;
            let mdp = build_general_chain(spec)?;
            let judged = sim_criterion(crit, spec)?;
            let mut rows = Vec::new();
            for (mi, &m) in self.config.m_values.iter().enumerate() {
                let (est, fell_back) = success_estimate(spec, m, crit, self.config.method)?;
                if fell_back {
                    self.meta.fallbacks.push(Fallback {
                        chain_id: chain.id.clone(),
                        m,
                        note: "enumeration exceeds the cap; log-normal approximation used".into(),
                    });
                }
                let batch = monte_carlo_with_probe(&mdp, &self.plan(ci, m, false), &judged, None)?;
                empirical[mi][ci] = batch.success_freq;
                rows.push(Decomposition {
                    m,
                    theory_traverse: est.traverse_prob,
                    theory_conditional: est.conditional_prob,
                    theory_total: est.total,
                    method: est.method,
                });
                t.push(vec![
                    chain.id.clone(),
                    m.to_string(),
                    num(est.total),
                    num(batch.success_freq),
                    num(batch.success_interval.0),
                    num(batch.success_interval.1),
                ]);
                for (g, freq) in batch.group_success.iter().enumerate() {
                    groups.push(vec![chain.id.clone(), m.to_string(), g.to_string(), num(*freq)]);
                }
            }
            self.meta.decomposition.push(ChainDecomposition { chain_id: chain.id.clone(), rows });
        }
        let treatments = chains.iter().map(|c| c.id.clone()).collect();
        let blocks = self.config.m_values.clone();
        self.meta.friedman = Some(match friedman_test(&empirical) {
            Ok(result) => FriedmanReport { treatments, blocks, result: Some(result), note: None },
            Err(e) => FriedmanReport { treatments, blocks, result: None, note: Some(e.to_string()) },
        });
        let gp = groups_path(out);
        groups.write(&gp)?;
        self.extra.push(gp);
        Ok(t)
    }

    fn advise(&mut self) -> Result<AdviseReport> {
        let section = self.config.advise.as_ref().ok_or_else(|| config_err("ADVISE needs an advise section"))?;
        let delta = section.delta.ok_or_else(|| config_err("ADVISE needs advise.delta"))?;
        let queries: Vec<AdvisorQuery> = self
            .meta
            .chains
            .iter()
            .map(|c| AdvisorQuery {
                spec: c.spec.clone(),
                criterion: self.config.criterion.clone(),
                delta,
                m_range: section.m_range,
                method: self.config.method,
            })
            .collect();
        let mut chains = Vec::new();
        for (c, q) in self.meta.chains.iter().zip(&queries) {
            let advice = best_m(q)?;
            for pt in advice.sweep.iter().filter(|pt| pt.fell_back) {
                self.meta.fallbacks.push(Fallback {
                    chain_id: c.id.clone(),
                    m: pt.m,
                    note: "enumeration exceeds the cap; log-normal approximation used".into(),
                });
            }
            chains.push(ChainAdvice { chain_id: c.id.clone(), advice });
        }
        let mut comparisons = Vec::new();
        for i in 0..queries.len() {
            for j in i + 1..queries.len() {
                comparisons.push(Comparison {
                    chain_a: self.meta.chains[i].id.clone(),
                    chain_b: self.meta.chains[j].id.clone(),
                    report: compare_hardness(&queries[i], &queries[j])?,
                });
            }
        }
        let mut situations = Vec::new();
        if let Some(ctx) = &section.failure {
            for (c, q) in self.meta.chains.iter().zip(&queries) {
                situations.push(ChainSituation {
                    chain_id: c.id.clone(),
                    report: analyze_situation(&q.spec, &q.criterion, q.method, ctx)?,
                });
            }
        }
        Ok(AdviseReport {
            delta,
            criterion: self.config.criterion.clone(),
            method: self.config.method,
            chains,
            comparisons,
            situations,
            note: "expected tau is the unconditional expected step count at tau_m from the expected visit numbers".into(),
        })
    }
}

fn sim_criterion(crit: &FamilyCriterion, spec: &ChainSpec) -> Result<SuccessCriterion> {
    Ok(match crit {
        FamilyCriterion::Pi(k) => SuccessCriterion::Pi(pbf_policy(*k, spec)?),
        FamilyCriterion::Set(_) => SuccessCriterion::Set(PolicySet {
            members: crit
                .members()
                .into_iter()
                .map(|k| pbf_policy(k, spec))
                .collect::<Result<_>>()?,
            epsilon: None,
        }),
    })
}

/// Runs the configured experiment, writing the table to `out_dir/output_path`
/// and the metadata next to it.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    config.validate()?;
    let chains = if config.experiment == ExperimentKind::Maze {
        Vec::new()
    } else {
        config.resolve_chains()?
    };
    let output = out_dir.join(&config.output_path);
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut runner = Runner {
        config,
        meta: Metadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: config.experiment,
            master_seed: config.master_seed,
            seed_rule: seed_rule().to_string(),
            batch_seed_rule: BATCH_SEED_RULE.to_string(),
            interval: "Wilson score interval, 95%".to_string(),
            config: config.clone(),
            chains,
            mazes: None,
            fallbacks: Vec::new(),
            decomposition: Vec::new(),
            friedman: None,
            ks: None,
            extra_outputs: Vec::new(),
        },
        extra: Vec::new(),
    };
    let mut advise = None;
    match config.experiment {
        ExperimentKind::TravSweepM | ExperimentKind::TravSweepN => runner.traverse()?.write(&output)?,
        ExperimentKind::VisitNumbers => runner.visits()?.write(&output)?,
        ExperimentKind::Dispersion => runner.dispersion()?.write(&output)?,
        ExperimentKind::ValueDist => runner.value_dist()?.write(&output)?,
        ExperimentKind::Maze => runner.maze()?.write(&output)?,
        ExperimentKind::SuccessCurve => runner.success(&output)?.write(&output)?,
        ExperimentKind::Advise => {
            let report = runner.advise()?;
            fs::write(&output, serde_json::to_string_pretty(&report)?)?;
            advise = Some(report);
        }
    }
    runner.meta.extra_outputs = runner
        .extra
        .iter()
        .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .collect();
    let metadata = sidecar_path(&output);
    fs::write(&metadata, serde_json::to_string_pretty(&runner.meta)?)?;
    Ok(ExperimentOutput {
        output,
        metadata,
        extra: runner.extra,
        advise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(json: Value) -> ExperimentConfig {
        ExperimentConfig::from_json(&json.to_string()).unwrap()
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            serde_json::json!({"experiment": "TRAV_SWEEP_M", "chains": [], "m_values": [1], "output_path": "x.csv"}),
            serde_json::json!({"experiment": "TRAV_SWEEP_M", "chains": [{}], "m_values": [], "output_path": "x.csv"}),
            serde_json::json!({"experiment": "VISIT_NUMBERS", "chains": [{}], "m_values": [1, 2], "output_path": "x.csv"}),
            serde_json::json!({"experiment": "ADVISE", "chains": [{}], "output_path": "x.json",
                               "advise": {"m_range": {"lo": 1, "hi": 3}}}),
            serde_json::json!({"experiment": "TRAV_SWEEP_M", "chains": [{}], "m_values": [1], "output_path": "x.csv", "bogus": 1}),
            serde_json::json!({"experiment": "TRAV_SWEEP_M", "chains": [{}], "m_values": [1], "output_path": "x.csv", "repetitions": 0}),
        ];
        for json in bad {
            assert!(
                matches!(ExperimentConfig::from_json(&json.to_string()), Err(Error::Config(_))),
                "{json}"
            );
        }
    }

    #[test]
    fn chains_resolve_with_ids_lengths_and_rules() {
        let c = config(serde_json::json!({
            "experiment": "TRAV_SWEEP_N",
            "chains": [{"id": "proto", "n": 3, "forward_p": 0.3, "hazard": 1, "productivity": "SELF_LOOP"}],
            "n_values": [10, 15],
            "m_values": [10],
            "output_path": "x.csv",
            "rd_rule": {"kind": "CRITICAL_FRACTION", "f": 0.5}
        }));
        let chains = c.resolve_chains().unwrap();
        assert_eq!(chains.len(), 2);
        assert_eq!(chains[1].id, "proto_n15");
        assert_eq!(chains[1].spec.n, 15);
        let v0 = closed_form_value(&chains[0].spec, 0, 1).unwrap();
        assert!((chains[0].spec.r_d - 0.5 * (1.0 - chains[0].spec.gamma) * v0).abs() < 1e-15);
    }

    #[test]
    fn random_table_is_pinned() {
        let json = serde_json::json!({
            "experiment": "TRAV_SWEEP_M",
            "chains": [{"n": 6, "hazard": "inf", "productivity": "RESET", "random_p": true},
                       {"n": 4, "forward_p": 0.5, "hazard": 1, "productivity": "RESET"}],
            "m_values": [3],
            "output_path": "x.csv",
            "random_p": {"seed": 11}
        });
        let a = config(json.clone()).resolve_chains().unwrap();
        let b = config(json).resolve_chains().unwrap();
        assert_eq!(a, b);
        assert!(a[0].spec.forward_p.iter().all(|&p| (0.3..0.7).contains(&p)));
        assert_eq!(a[1].spec.forward_p, vec![0.5; 3]);
    }

    #[test]
    fn random_chains_need_a_table() {
        let c = config(serde_json::json!({
            "experiment": "TRAV_SWEEP_M",
            "chains": [{"n": 6, "hazard": 1, "productivity": "RESET", "random_p": true}],
            "m_values": [3],
            "output_path": "x.csv"
        }));
        assert!(matches!(c.resolve_chains(), Err(Error::Config(_))));
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar_path(Path::new("out/trav.csv")), Path::new("out/trav.meta.json"));
        assert_eq!(groups_path(Path::new("s.csv")), Path::new("s.groups.csv"));
    }

    #[test]
    fn sample_moments() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
