//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use infosell::generate::{random_instance, random_tree, Shape};
use infosell::mechanisms::{
    best_deposit_return, expected_revenue, solve_cm_depr, solve_cm_probr, solve_single_round, MechanismSolution,
};
use infosell::protocol::{evaluate, to_revelation, ProtocolTree};
use infosell::sampling::{draw_samples, run_replications, solve_epsilon_lp, InstanceSampler, SampleOracle};
use infosell::verify::{verify_all, verify_all_with, VerifyOptions};
use infosell::{Instance, Mechanism};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 200;

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome { passed: true, detail: detail.into() }
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed: ok, detail: detail.into() }
}

fn within(elapsed: Duration, limit: Duration, out: Outcome) -> Outcome {
    if elapsed > limit {
        Outcome { passed: false, detail: format!("{} (too slow: limit {limit:?})", out.detail) }
    } else {
        out
    }
}

fn tb_type(inst: &Instance, theta: &str, b: f64) -> infosell::BuyerType {
    inst.buyer_type(theta, b).expect("treasure-box type")
}

fn surplus_reproduction() -> Outcome {
    let inst = Instance::treasure_box();
    let start = Instant::now();
    let d0 = inst.surplus(tb_type(&inst, "0", 50.0)).unwrap();
    let d1 = inst.surplus(tb_type(&inst, "1", 100.0)).unwrap();
    let elapsed = start.elapsed();
    within(
        elapsed,
        Duration::from_millis(1),
        check(d0 == 60.0 && d1 == 40.0, format!("δ = ({d0}, {d1}) in {elapsed:?}")),
    )
}

fn two_option_protocol() -> Outcome {
    let inst = Instance::treasure_box();
    let tree = ProtocolTree::treasure_box_two_option(&inst).unwrap();
    let start = Instant::now();
    let rev = evaluate(&tree, &inst).unwrap().revenue;
    let elapsed = start.elapsed();
    within(
        elapsed,
        Duration::from_millis(10),
        check((rev - 44.5).abs() <= 1e-9, format!("revenue {rev} in {elapsed:?}")),
    )
}

fn single_round_optimum() -> Outcome {
    let inst = Instance::treasure_box();
    let single = solve_single_round(&inst).unwrap().revenue;
    let depr = solve_cm_depr(&inst).unwrap().revenue;
    check((single - 40.0).abs() <= 1e-5 && single < depr, format!("single-round {single}, two-round {depr}"))
}

fn two_round_optimum() -> Outcome {
    let inst = Instance::treasure_box();
    // Analytic optimum: type 0 pays its budget 50, type 1 its surplus 40,
    // one half each.
    let oracle = 0.5 * 50.0 + 0.5 * 40.0;
    let depr = solve_cm_depr(&inst).unwrap().revenue;
    check((depr - oracle).abs() <= 1e-5, format!("revenue {depr}, analytic {oracle}"))
}

struct Corpus {
    independent: Vec<(Instance, MechanismSolution, MechanismSolution, MechanismSolution)>,
    correlated: Vec<(Instance, MechanismSolution, MechanismSolution)>,
    independent_time: Duration,
}

fn build_corpus() -> Corpus {
    let shape = Shape::default();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let independent = (0..INSTANCES)
        .map(|_| {
            let inst = random_instance(&mut rng, &shape, false);
            let depr = solve_cm_depr(&inst).unwrap();
            let probr = solve_cm_probr(&inst).unwrap();
            let single = solve_single_round(&inst).unwrap();
            (inst, depr, probr, single)
        })
        .collect();
    let independent_time = start.elapsed();
    let mut rng = ChaCha8Rng::seed_from_u64(4048);
    let correlated = (0..INSTANCES)
        .map(|_| {
            let inst = random_instance(&mut rng, &shape, true);
            let probr = solve_cm_probr(&inst).unwrap();
            let bench = best_deposit_return(&inst).unwrap();
            (inst, probr, bench)
        })
        .collect();
    Corpus { independent, correlated, independent_time }
}

fn cross_mechanism_equality(c: &Corpus) -> Outcome {
    let worst = c.independent.iter().map(|(_, d, p, _)| (d.revenue - p.revenue).abs()).fold(0.0, f64::max);
    within(
        c.independent_time,
        Duration::from_secs(60),
        check(
            worst <= 1e-5,
            format!("{} instances, max |probr - depr| = {worst:.3e}, {:?}", c.independent.len(), c.independent_time),
        ),
    )
}

fn class_inclusion(c: &Corpus) -> Outcome {
    let mut worst = f64::INFINITY;
    for (inst, probr, bench) in &c.correlated {
        let Mechanism::DepositReturn(dr) = &bench.mechanism else {
            return check(false, "benchmark is not a deposit-return mechanism");
        };
        let replicated = Mechanism::ProbReturn(dr.to_prob_return(inst).unwrap());
        let rev = expected_revenue(&replicated, inst).unwrap();
        if (rev - bench.revenue).abs() > 1e-6 {
            return check(false, format!("replication changed revenue {} -> {rev}", bench.revenue));
        }
        worst = worst.min(probr.revenue - rev);
    }
    check(worst >= -1e-6, format!("{} instances, min probr - benchmark = {worst:.3e}", c.correlated.len()))
}

fn all_outputs(c: &Corpus) -> Vec<(&Instance, &MechanismSolution)> {
    let mut out = Vec::new();
    for (inst, d, p, s) in &c.independent {
        out.extend([(inst, d), (inst, p), (inst, s)]);
    }
    for (inst, p, b) in &c.correlated {
        out.extend([(inst, p), (inst, b)]);
    }
    out
}

fn revenue_cap(c: &Corpus) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for (inst, sol) in all_outputs(c) {
        worst = worst.max(sol.revenue - inst.revenue_cap());
    }
    let tb = Instance::treasure_box();
    let gap = (solve_cm_depr(&tb).unwrap().revenue - tb.revenue_cap()).abs();
    check(worst <= 1e-6 && gap <= 1e-5, format!("max revenue - cap = {worst:.3e}, treasure-box gap {gap:.3e}"))
}

fn verification_soundness(c: &Corpus) -> Outcome {
    let outputs = all_outputs(c);
    for (inst, sol) in &outputs {
        let report = verify_all(&sol.mechanism, inst, 0.0).unwrap();
        if !report.passed {
            return check(false, format!("solver output failed: {}", report.summary()));
        }
    }
    let eps = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let relaxed = 50;
    for (inst, ..) in c.correlated.iter().take(relaxed) {
        let mut oracle = InstanceSampler::new(inst);
        let live = oracle.draw(&mut rng).unwrap();
        let emp = draw_samples(&mut oracle, inst, 200, live, &mut rng).unwrap();
        let sol = solve_epsilon_lp(&emp, inst, eps).unwrap();
        let report =
            verify_all_with(&sol.mechanism, inst, Some(emp.beliefs()), &VerifyOptions::with_epsilon(eps)).unwrap();
        if !report.passed {
            return check(false, format!("ε-program output failed: {}", report.summary()));
        }
    }
    pass(format!("{} solver outputs at ε = 0, {relaxed} ε-program outputs at ε = {eps} against μ̂", outputs.len()))
}

fn revelation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut earning = 0;
    for _ in 0..50 {
        let inst = random_instance(&mut rng, &Shape::default(), true);
        let tree = random_tree(&mut rng, &inst, 5);
        let before = evaluate(&tree, &inst).unwrap().revenue;
        let after = evaluate(&to_revelation(&tree, &inst).unwrap(), &inst).unwrap().revenue;
        worst = worst.max((before - after).abs());
        earning += usize::from(before.abs() > 1e-9);
    }
    check(worst <= 1e-9, format!("50 trees ({earning} with nonzero revenue), max revenue change {worst:.3e}"))
}

fn sampling_pipeline() -> Outcome {
    let inst = Instance::treasure_box();
    let start = Instant::now();
    let mut oracle = InstanceSampler::new(&inst);
    let summary = run_replications(&mut oracle, &inst, Some(&inst), 10_000, 0.05, 200, 1).unwrap();
    let elapsed = start.elapsed();
    let mean = summary.mean_revenue();
    let feasible = summary.runs.iter().filter(|r| r.eps_feasible).count();
    within(
        elapsed,
        Duration::from_secs(300),
        check(
            (mean - 45.0).abs() <= 1.0 && summary.all_eps_feasible(),
            format!("mean revenue {mean:.4}, ε-feasible {feasible}/200, {elapsed:?}"),
        ),
    )
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("infosell-acceptance-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let inst = dir.join("tb.json");
    let bin = env!("CARGO_BIN_EXE_infosell");
    let run = |args: &[&str]| Command::new(bin).args(args).env_remove("INFOSELL_TOL").output().unwrap();
    let inst_s = inst.to_str().unwrap();
    run(&["gen-example", "--name", "treasure-box", "--out", inst_s]);
    let proto = dir.join("tb.protocol.json");
    let invocations: Vec<Vec<&str>> = vec![
        vec!["solve", "--instance", inst_s, "--mechanism", "probr"],
        vec![
            "simulate",
            "--instance",
            inst_s,
            "--protocol",
            proto.to_str().unwrap(),
            "--trials",
            "20000",
            "--seed",
            "5",
        ],
        vec!["sample", "--oracle", inst_s, "--n", "1000", "--replications", "5", "--seed", "3"],
    ];
    let mut ok = true;
    for args in &invocations {
        let a = run(args);
        let b = run(args);
        ok &= a.status.success() && a.stdout == b.stdout && !a.stdout.is_empty();
    }
    let _ = fs::remove_dir_all(&dir);
    check(ok, format!("{} invocations run twice", invocations.len()))
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let out = f();
        let status = if out.passed { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {status} {name}: {} [{:.2?}]", out.detail, start.elapsed());
        if !out.passed {
            failures += 1;
        }
    };
    report(1, "surplus reproduction", &surplus_reproduction);
    report(2, "two-option protocol", &two_option_protocol);
    report(3, "single-round optimum", &single_round_optimum);
    report(4, "two-round optimum", &two_round_optimum);
    let corpus = build_corpus();
    report(5, "cross-mechanism equality", &|| cross_mechanism_equality(&corpus));
    report(6, "class inclusion", &|| class_inclusion(&corpus));
    report(7, "revenue cap", &|| revenue_cap(&corpus));
    report(8, "verification soundness", &|| verification_soundness(&corpus));
    report(9, "revelation invariance", &revelation_invariance);
    report(10, "sampling pipeline", &sampling_pipeline);
    report(11, "determinism", &determinism);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
