//! End-to-end acceptance checks. Runs as a plain binary so the per-criterion
//! report is always printed; exits nonzero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use explore_prob::analytic::{
    closed_form_value, exact_family_distribution, exact_success_probability,
    expected_visit_numbers, reward_constraint_holds, traverse_probability, FamilyCriterion,
    DEFAULT_ENUM_CAP,
};
use explore_prob::approx::{approx_success_probability, lognormal_from_moments, v_moments};
use explore_prob::chain::{
    build_general_chain, build_maze_pair, pbf_policy, ChainSpec, Hazard, MazeSpec, Productivity,
    FORWARD,
};
use explore_prob::experiment::{run_experiment, ExperimentConfig};
use explore_prob::mdp::{evaluate_policy, value_iteration, FiniteMdp, DEFAULT_RESIDUAL};
use explore_prob::sim::{monte_carlo, run_batch, BatchPlan, RunRecord, SuccessCriterion};
use explore_prob::stats::{ks_test_lognormal, wilson_interval, Z99};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20261019;
const BUDGET: u64 = 300_000;

type Outcome = Result<String, String>;

const PROTOTYPES: [(Hazard, Productivity); 4] = [
    (Hazard::Steps(1), Productivity::SelfLoop),
    (Hazard::Reset, Productivity::SelfLoop),
    (Hazard::Steps(1), Productivity::Reset),
    (Hazard::Reset, Productivity::Reset),
];

fn batch(mdp: &FiniteMdp, m: u32, runs: u64, conditioned: bool, seed: u64) -> Vec<RunRecord> {
    let plan = BatchPlan {
        m: u64::from(m),
        budget: BUDGET,
        repetitions: runs,
        condition_on_traverse: conditioned,
        master_seed: seed,
    };
    run_batch(mdp, &plan).expect("batch runs")
}

fn check(failures: &mut Vec<String>, ok: bool, msg: impl FnOnce() -> String) {
    if !ok {
        failures.push(msg());
    }
}

fn verdict(failures: Vec<String>, summary: String) -> Outcome {
    if failures.is_empty() {
        Ok(summary)
    } else {
        let shown: Vec<_> = failures.iter().take(5).cloned().collect();
        Err(format!("{summary}; {} failure(s): {}", failures.len(), shown.join(" | ")))
    }
}

/// Empirical traverse frequency inside the 3-sigma binomial band of the product formula.
fn traverse_product() -> Outcome {
    let mut failures = Vec::new();
    let mut points = 0;
    for (ci, &(h, g)) in PROTOTYPES.iter().enumerate() {
        let spec = ChainSpec::prototype(h, g, 40, 0.3);
        let mdp = build_general_chain(&spec).unwrap();
        for m in 5..=15u32 {
            let oracle = (1.0 - 0.7f64.powi(m as i32)).powi(39);
            let theory = traverse_probability(&spec.forward_p, m).unwrap();
            check(&mut failures, (theory - oracle).abs() < 1e-12, || format!("formula m={m}"));
            let runs = batch(&mdp, m, 1000, false, SEED + 100 * ci as u64 + u64::from(m));
            let freq = runs.iter().filter(|r| r.traverse).count() as f64 / 1000.0;
            let half = 3.0 * (oracle * (1.0 - oracle) / 1000.0).sqrt();
            points += 1;
            check(&mut failures, (freq - oracle).abs() <= half, || {
                format!("{} m={m}: {freq} vs {oracle:.4} ± {half:.4}", spec.label())
            });
        }
    }
    let mut anchors = Vec::new();
    for (n, reference) in [(10usize, 0.77), (60, 0.18)] {
        let spec = ChainSpec::prototype(Hazard::Steps(1), Productivity::SelfLoop, n, 0.3);
        let theory = traverse_probability(&spec.forward_p, 10).unwrap();
        check(&mut failures, (theory - reference).abs() < 0.005, || format!("n={n} theory {theory}"));
        let runs = batch(&build_general_chain(&spec).unwrap(), 10, 1000, false, SEED + n as u64);
        let freq = runs.iter().filter(|r| r.traverse).count() as f64 / 1000.0;
        check(&mut failures, (freq - theory).abs() <= 0.05, || format!("n={n} empirical {freq}"));
        anchors.push(format!("n={n}: theory {theory:.4}, empirical {freq:.3}"));
    }
    verdict(failures, format!("{points} points in band; anchors {}", anchors.join(", ")))
}

/// Closed-form visit numbers for the prototypes, 1-based position `i < n`.
fn closed_visits(h: Hazard, g: Productivity, n: usize, p: f64, m: f64, i: usize) -> f64 {
    let (n, i) = (n as f64, i as f64);
    match (h, g) {
        (Hazard::Steps(1), Productivity::SelfLoop) => (m + 1.0) / p,
        (Hazard::Reset, Productivity::SelfLoop) => (n - 1.0 - i) * m / p + (m + 1.0) / p,
        (Hazard::Steps(1), Productivity::Reset) => 2.0 * m / p,
        (Hazard::Reset, Productivity::Reset) => (n + 1.0 - i) * m / p,
        _ => unreachable!(),
    }
}

/// Conditioned n=15, p=0.3, m=15 runs shared by the visit and dispersion checks.
fn visit_runs() -> Vec<(ChainSpec, Vec<RunRecord>)> {
    PROTOTYPES
        .iter()
        .enumerate()
        .map(|(ci, &(h, g))| {
            let spec = ChainSpec::prototype(h, g, 15, 0.3);
            let mdp = build_general_chain(&spec).unwrap();
            let runs = batch(&mdp, 15, 1000, true, SEED + 7 + ci as u64);
            (spec, runs)
        })
        .collect()
}

fn visit_numbers(data: &[(ChainSpec, Vec<RunRecord>)]) -> Outcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (spec, runs) in data {
        let (h, g) = (spec.hazard[0], spec.productivity);
        let theory = expected_visit_numbers(spec, 15).unwrap();
        for i in 1..spec.n {
            let closed = closed_visits(h, g, spec.n, 0.3, 15.0, i);
            check(&mut failures, (theory.fwd[i - 1] - closed).abs() < 1e-9, || {
                format!("{} i={i}: recurrence {} vs closed form {closed}", spec.label(), theory.fwd[i - 1])
            });
            let mean = runs.iter().map(|r| r.visits.n_sa(i - 1, FORWARD) as f64).sum::<f64>()
                / runs.len() as f64;
            let rel = (mean - closed).abs() / closed;
            worst = worst.max(rel);
            check(&mut failures, rel <= 0.05, || {
                format!("{} i={i}: mean {mean:.2} vs {closed:.2}", spec.label())
            });
        }
    }
    verdict(failures, format!("worst relative error {:.2}%", 100.0 * worst))
}

fn dispersion(data: &[(ChainSpec, Vec<RunRecord>)]) -> Outcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (spec, runs) in data {
        let theory = expected_visit_numbers(spec, 15).unwrap();
        for s in 0..spec.n - 1 {
            let phat: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.visits.estimated_prob(s, FORWARD, s + 1))
                .collect();
            let n = phat.len() as f64;
            let mean = phat.iter().sum::<f64>() / n;
            let std = (phat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let want = (0.3 * 0.7 / theory.fwd[s]).sqrt();
            let rel = (std - want).abs() / want;
            worst = worst.max(rel);
            check(&mut failures, rel <= 0.15, || {
                format!("{} state {}: {std:.4} vs {want:.4}", spec.label(), s + 1)
            });
        }
    }
    verdict(failures, format!("worst relative error {:.1}%", 100.0 * worst))
}

fn ks_rejections(spec: &ChainSpec, mdp: &FiniteMdp, probe: &explore_prob::mdp::Policy, seed: u64) -> usize {
    (8..=20u32)
        .filter(|&m| {
            let params = lognormal_from_moments(v_moments(spec, 0, m).unwrap()).unwrap();
            let values: Vec<f64> = batch(mdp, m, 1000, true, seed + u64::from(m))
                .iter()
                .filter_map(|r| r.estimated_value(mdp, probe).unwrap())
                .collect();
            ks_test_lognormal(&values, &params).unwrap().p_value < 0.01
        })
        .count()
}

fn value_distribution() -> Outcome {
    let mut table = ChaCha8Rng::seed_from_u64(SEED);
    let mut tallies = Vec::new();
    for (label, random) in [("p=0.5", false), ("random p", true)] {
        let mut rejected = 0;
        for (ci, &(h, g)) in PROTOTYPES.iter().enumerate() {
            let mut spec = ChainSpec::prototype(h, g, 20, 0.5);
            if random {
                let p = (1..20).map(|_| table.random_range(0.3..0.7)).collect();
                spec = spec.with_forward_p(p);
            }
            let mdp = build_general_chain(&spec).unwrap();
            let probe = pbf_policy(0, &spec).unwrap();
            rejected += ks_rejections(&spec, &mdp, &probe, SEED + 1000 * (ci as u64 + 1) + u64::from(random));
        }
        tallies.push((label, rejected));
    }
    let summary = tallies
        .iter()
        .map(|(l, r)| format!("{l}: {r}/52 rejected"))
        .collect::<Vec<_>>()
        .join(", ");
    if tallies.iter().all(|&(_, r)| r <= 4) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn success_curve() -> Outcome {
    let mut failures = Vec::new();
    let order = [1usize, 0, 3, 2]; // (H=inf,G=1), (H=1,G=1), (H=inf,G=1/inf), (H=1,G=1/inf)
    let specs: Vec<ChainSpec> = PROTOTYPES
        .iter()
        .map(|&(h, g)| {
            let base = ChainSpec::prototype(h, g, 20, 0.5);
            let v0 = closed_form_value(&base, 0, 1).unwrap();
            let r_d = 0.993 * (1.0 - base.gamma) * v0;
            base.with_rewards(1.0, r_d)
        })
        .collect();
    let mut worst = 0.0f64;
    let mut signed = 0.0;
    let mut count = 0.0;
    for m in 8..=20u32 {
        let mut theory = [0.0; 4];
        for (ci, spec) in specs.iter().enumerate() {
            let est = approx_success_probability(spec, m, &FamilyCriterion::Pi(0)).unwrap();
            theory[ci] = est.total;
            let mdp = build_general_chain(spec).unwrap();
            let crit = SuccessCriterion::Pi(pbf_policy(0, spec).unwrap());
            let mc = monte_carlo(&mdp, u64::from(m), BUDGET, 1000, &crit, false, SEED + 50 * ci as u64 + u64::from(m))
                .unwrap();
            let err = mc.success_freq - est.total;
            worst = worst.max(err.abs());
            signed += err;
            count += 1.0;
            check(&mut failures, err.abs() <= 0.10, || {
                format!("{} m={m}: empirical {} vs theory {:.4}", spec.label(), mc.success_freq, est.total)
            });
        }
        for w in order.windows(2) {
            check(&mut failures, theory[w[0]] >= theory[w[1]], || {
                format!("m={m}: ordering broken between {} and {}", specs[w[0]].label(), specs[w[1]].label())
            });
        }
    }
    verdict(
        failures,
        format!(
            "max |empirical - theory| {worst:.3}, mean (empirical - theory) {:+.4} (positive = theory underestimates)",
            signed / count
        ),
    )
}

fn exact_vs_approx() -> Outcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut critical_worst = 0.0f64;
    let mut points = 0;
    for (ci, &(h, g)) in PROTOTYPES.iter().enumerate() {
        for n in [3usize, 4, 5] {
            for p in [0.4, 0.6, 0.8] {
                for m in [5u32, 10, 15] {
                    let spec = ChainSpec::prototype(h, g, n, p);
                    let crit = FamilyCriterion::Pi(0);
                    let exact = exact_success_probability(&spec, m, &crit, DEFAULT_ENUM_CAP).unwrap();
                    let approx = approx_success_probability(&spec, m, &crit).unwrap();
                    let gap = (exact.total - approx.total).abs();
                    worst = worst.max(gap);
                    check(&mut failures, gap <= 0.03, || {
                        format!("{} n={n} p={p} m={m}: exact {:.4} approx {:.4}", spec.label(), exact.total, approx.total)
                    });

                    let mdp = build_general_chain(&spec).unwrap();
                    let sim_crit = SuccessCriterion::Pi(pbf_policy(0, &spec).unwrap());
                    let seed = SEED + 10_000 * ci as u64 + 100 * n as u64 + u64::from(m) + (p * 10.0) as u64;
                    let mc = monte_carlo(&mdp, u64::from(m), BUDGET, 100_000, &sim_crit, false, seed).unwrap();
                    let (lo, hi) = wilson_interval(mc.success_count, mc.runs, Z99);
                    points += 1;
                    check(&mut failures, lo <= exact.total && exact.total <= hi, || {
                        format!("{} n={n} p={p} m={m}: exact {:.5} outside [{lo:.5}, {hi:.5}]", spec.label(), exact.total)
                    });

                    let v0 = closed_form_value(&spec, 0, 1).unwrap();
                    let critical = spec.clone().with_rewards(1.0, 0.993 * (1.0 - spec.gamma) * v0);
                    let e = exact_success_probability(&critical, m, &crit, DEFAULT_ENUM_CAP).unwrap();
                    let a = approx_success_probability(&critical, m, &crit).unwrap();
                    critical_worst = critical_worst.max((e.total - a.total).abs());
                }
            }
        }
    }
    println!(
        "  note: at the critical reward r_D = 0.993(1-gamma)V(s1) the largest exact/approx gap on this grid is {critical_worst:.4} (not asserted)"
    );
    verdict(
        failures,
        format!("max |exact - approx| {worst:.4}; {points} Monte Carlo points of 1e5 runs checked"),
    )
}

fn random_spec(rng: &mut ChaCha8Rng) -> ChainSpec {
    let n = rng.random_range(2..=6usize);
    let hazard: Vec<Hazard> = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                Hazard::Reset
            } else {
                Hazard::Steps(rng.random_range(1..=3))
            }
        })
        .collect();
    let productivity = if rng.random_bool(0.5) { Productivity::SelfLoop } else { Productivity::Reset };
    let p: Vec<f64> = (1..n).map(|_| rng.random_range(0.2..0.95)).collect();
    let mut spec = ChainSpec::prototype(Hazard::Steps(1), productivity, n, 0.5).with_forward_p(p);
    spec.hazard = hazard;
    let v0 = closed_form_value(&spec, 0, 1).unwrap();
    let f = if rng.random_bool(0.5) { rng.random_range(0.5..0.95) } else { rng.random_range(1.05..1.5) };
    let r_d = f * (1.0 - spec.gamma) * v0;
    spec.with_rewards(1.0, r_d)
}

fn oracle_equivalences() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_value = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut worst_balance = 0.0f64;
    let mut holds = 0;
    for idx in 0..50 {
        let spec = random_spec(&mut rng);
        let mdp = build_general_chain(&spec).unwrap();
        for k in 0..=spec.n {
            let v = evaluate_policy(&mdp, &pbf_policy(k, &spec).unwrap(), 1e-10).unwrap();
            for j in 1..=spec.n {
                let closed = closed_form_value(&spec, k, j).unwrap();
                let gap = (closed - v[j - 1]).abs();
                worst_value = worst_value.max(gap);
                check(&mut failures, gap <= 1e-4, || format!("chain {idx} k={k} j={j}: {closed} vs {}", v[j - 1]));
            }
        }
        let m = rng.random_range(1..=12u32);
        let family = exact_family_distribution(&spec, m, DEFAULT_ENUM_CAP).unwrap();
        let sum_gap = (family.iter().sum::<f64>() - 1.0).abs();
        worst_sum = worst_sum.max(sum_gap);
        check(&mut failures, sum_gap <= 1e-9, || format!("chain {idx}: family sums off by {sum_gap:e}"));

        let constraint = reward_constraint_holds(&spec).unwrap();
        holds += usize::from(constraint);
        let (_, policy) = value_iteration(&mdp, DEFAULT_RESIDUAL, &mut rng).unwrap();
        let pi0 = pbf_policy(0, &spec).unwrap();
        check(&mut failures, constraint == (policy == pi0), || {
            format!("chain {idx}: constraint {constraint} but VI gave {:?}", policy.actions())
        });

        let balance = expected_visit_numbers(&spec, m).unwrap().balance_residual(&spec);
        worst_balance = worst_balance.max(balance);
        check(&mut failures, balance < 1e-9, || format!("chain {idx}: balance residual {balance:e}"));
    }
    verdict(
        failures,
        format!(
            "50 chains ({holds} satisfy the reward constraint); value gap {worst_value:.1e}, family sum gap {worst_sum:.1e}, balance residual {worst_balance:.1e}"
        ),
    )
}

fn maze() -> Outcome {
    let pair = build_maze_pair(&MazeSpec::standard(0.5)).unwrap();
    let rejected = ks_rejections(&pair.chain, &pair.mdp, &pair.path_policy, SEED + 77);
    let summary = format!("{rejected}/13 m values rejected at 1%");
    if rejected == 0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn determinism() -> Outcome {
    let configs = [
        r#"{"experiment":"TRAV_SWEEP_M","chains":[{"n":8,"forward_p":0.4,"hazard":1,"productivity":"RESET"}],
            "m_values":[3,4],"repetitions":200,"master_seed":5,"output_path":"trav.csv"}"#,
        r#"{"experiment":"SUCCESS_CURVE","chains":[{"n":5,"hazard":"inf","productivity":"SELF_LOOP","random_p":true},
            {"n":5,"forward_p":0.5,"hazard":1,"productivity":"RESET"}],"random_p":{"seed":3},
            "rd_rule":{"kind":"CRITICAL_FRACTION","f":0.993},"m_values":[4,6],"repetitions":200,
            "master_seed":9,"output_path":"success.csv"}"#,
        r#"{"experiment":"VALUE_DIST","chains":[{"n":6,"forward_p":0.5,"hazard":1,"productivity":"SELF_LOOP"}],
            "m_values":[5],"repetitions":100,"master_seed":2,"output_path":"value.csv"}"#,
    ];
    let read = |dir: &Path, name: &str| std::fs::read(dir.join(name)).unwrap();
    let mut compared = 0;
    for text in configs {
        let config = ExperimentConfig::from_json(text).unwrap();
        let dirs: Vec<_> = [1usize, 3]
            .iter()
            .map(|&threads| {
                let dir = tempfile::tempdir().unwrap();
                let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
                pool.install(|| run_experiment(&config, dir.path())).unwrap();
                dir
            })
            .collect();
        for entry in std::fs::read_dir(dirs[0].path()).unwrap() {
            let name = entry.unwrap().file_name().into_string().unwrap();
            if read(dirs[0].path(), &name) != read(dirs[1].path(), &name) {
                return Err(format!("{name} differs between re-runs"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} output files byte-identical across re-runs with 1 and 3 workers"))
}

fn main() -> ExitCode {
    let shared = visit_runs();
    type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("traverse product", Box::new(traverse_product)),
        ("visit numbers", Box::new(|| visit_numbers(&shared))),
        ("dispersion preservation", Box::new(|| dispersion(&shared))),
        ("value distribution", Box::new(value_distribution)),
        ("success curve", Box::new(success_curve)),
        ("exact vs approximate", Box::new(exact_vs_approx)),
        ("oracle equivalences", Box::new(oracle_equivalences)),
        ("maze", Box::new(maze)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
