use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("infosell-cli-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        Self(dir)
    }

    fn path(&self, file: &str) -> PathBuf {
        self.0.join(file)
    }

    fn write(&self, file: &str, text: &str) -> PathBuf {
        let p = self.path(file);
        fs::write(&p, text).unwrap();
        p
    }

    /// Writes the treasure-box instance and protocol tree.
    fn example(&self) -> PathBuf {
        let out = self.path("tb.json");
        let o = run(&["gen-example", "--name", "treasure-box", "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_infosell"));
    cmd.args(args).env_remove("INFOSELL_TOL");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no `{key}` line in {out}"))
        .parse()
        .unwrap()
}

/// Treasure box with θ and ω correlated.
const CORRELATED: &str = r#"{
  "omega": ["0", "1"],
  "theta": ["0", "1"],
  "actions": ["0", "1"],
  "budgets": [50, 100],
  "seller_budget": 0,
  "prior": [
    {"omega": "0", "theta": "0", "b": 50, "p": 0.4},
    {"omega": "1", "theta": "0", "b": 50, "p": 0.1},
    {"omega": "0", "theta": "1", "b": 100, "p": 0.1},
    {"omega": "1", "theta": "1", "b": 100, "p": 0.4}
  ],
  "utility": [
    {"omega": "0", "theta": "0", "a": "0", "u": 120}, {"omega": "0", "theta": "0", "a": "1", "u": 0},
    {"omega": "1", "theta": "0", "a": "0", "u": 0}, {"omega": "1", "theta": "0", "a": "1", "u": 120},
    {"omega": "0", "theta": "1", "a": "0", "u": 80}, {"omega": "0", "theta": "1", "a": "1", "u": 0},
    {"omega": "1", "theta": "1", "a": "0", "u": 0}, {"omega": "1", "theta": "1", "a": "1", "u": 80}
  ]
}"#;

#[test]
fn solve_reports_optimal_revenues() {
    let dir = Scratch::new("solve");
    let inst = dir.example();
    for (kind, expected) in [("depr", "revenue 45.0"), ("single-round", "revenue 40.0"), ("probr", "revenue 45.0")] {
        let o = run(&["solve", "--instance", s(&inst), "--mechanism", kind]);
        assert_eq!(o.status.code(), Some(0), "{kind}: {}", stderr(&o));
        assert_eq!(stdout(&o).lines().next(), Some(expected), "{kind}");
    }
    let o = run(&["solve", "--instance", s(&inst), "--mechanism", "dirp", "--public-budget", "50"]);
    assert_eq!(stdout(&o).lines().next(), Some("revenue 40.0"));
}

#[test]
fn dirp_needs_a_public_budget_when_budgets_vary() {
    let dir = Scratch::new("dirp-default");
    let inst = dir.example();
    let o = run(&["solve", "--instance", s(&inst), "--mechanism", "dirp"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn dependent_signals_are_a_precondition_failure() {
    let dir = Scratch::new("dependent");
    let inst = dir.write("corr.json", CORRELATED);
    for kind in ["depr", "single-round"] {
        let o = run(&["solve", "--instance", s(&inst), "--mechanism", kind]);
        assert_eq!(o.status.code(), Some(3), "{kind}: {}", stderr(&o));
    }
    let o = run(&["solve", "--instance", s(&inst), "--mechanism", "probr"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn solver_outputs_verify() {
    let dir = Scratch::new("verify");
    let inst = dir.example();
    for (kind, extra) in [("depr", None), ("single-round", None), ("probr", None), ("dirp", Some("50"))] {
        let mech = dir.path(&format!("{kind}.json"));
        let mut args = vec!["solve", "--instance", s(&inst), "--mechanism", kind, "--out", s(&mech)];
        if let Some(b) = extra {
            args.extend(["--public-budget", b]);
        }
        assert_eq!(run(&args).status.code(), Some(0));
        let o = run(&["verify", "--instance", s(&inst), "--mechanism-file", s(&mech)]);
        assert_eq!(o.status.code(), Some(0), "{kind}: {}{}", stdout(&o), stderr(&o));
        let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(report["passed"], true);
    }
}

#[test]
fn corrupted_payment_fails_verification() {
    let dir = Scratch::new("corrupt");
    let inst = dir.example();
    let mech = dir.path("m.json");
    run(&["solve", "--instance", s(&inst), "--mechanism", "depr", "--out", s(&mech)]);
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mech).unwrap()).unwrap();
    doc["payments"]["0@50"] = serde_json::json!(60.0);
    fs::write(&mech, doc.to_string()).unwrap();
    let o = run(&["verify", "--instance", s(&inst), "--mechanism-file", s(&mech)]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let failed: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["check"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"budget") && failed.contains(&"ir"), "{failed:?}");
    assert!(stderr(&o).contains("budget"));
}

#[test]
fn tolerance_override() {
    let dir = Scratch::new("tol");
    let inst = dir.example();
    let mech = dir.path("m.json");
    run(&["solve", "--instance", s(&inst), "--mechanism", "depr", "--out", s(&mech)]);
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mech).unwrap()).unwrap();
    doc["payments"]["1@100"] = serde_json::json!(40.5);
    fs::write(&mech, doc.to_string()).unwrap();
    let args = ["verify", "--instance", s(&inst), "--mechanism-file", s(&mech)];
    assert_eq!(run(&args).status.code(), Some(1));
    assert_eq!(run_env(&args, &[("INFOSELL_TOL", "1")]).status.code(), Some(0));
    assert_eq!(run_env(&args, &[("INFOSELL_TOL", "abc")]).status.code(), Some(2));
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = Scratch::new("bad");
    let bad = dir.write("bad.json", "{ not json");
    let o = run(&["solve", "--instance", s(&bad), "--mechanism", "depr"]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path("missing.json");
    assert_eq!(run(&["solve", "--instance", s(&missing), "--mechanism", "depr"]).status.code(), Some(2));
    let o = run(&["gen-example", "--name", "nope", "--out", s(&dir.path("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_two_option_tree() {
    let dir = Scratch::new("simulate");
    let inst = dir.example();
    let tree = dir.path("tb.protocol.json");
    let o = run(&["simulate", "--instance", s(&inst), "--protocol", s(&tree)]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(out.lines().next(), Some("revenue 44.5"));
    assert!(out.contains("value 0@50 70\n") && out.contains("value 1@100 41\n"), "{out}");

    let o = run(&["simulate", "--instance", s(&inst), "--protocol", s(&tree), "--trials", "100000", "--seed", "7"]);
    let out = stdout(&o);
    let mean = field(&out, "mean_revenue");
    let se = field(&out, "std_error");
    assert!(se > 0.0 && (mean - 44.5).abs() <= 3.0 * se, "{out}");
}

#[test]
fn simulate_mechanism_files() {
    let dir = Scratch::new("simulate-mech");
    let inst = dir.example();
    let mech = dir.path("m.json");
    run(&["solve", "--instance", s(&inst), "--mechanism", "probr", "--out", s(&mech)]);
    let o = run(&["simulate", "--instance", s(&inst), "--mechanism-file", s(&mech)]);
    assert_eq!(stdout(&o).lines().next(), Some("revenue 45.0"));

    let zero = dir.write(
        "zero.json",
        r#"{"kind": "depr", "payments": {"0@50": 0, "0@100": 0, "1@50": 0, "1@100": 0}, "kernel": [
            {"theta": "0", "b": 50, "omega": "0", "action": "0", "p": 1},
            {"theta": "0", "b": 50, "omega": "1", "action": "0", "p": 1},
            {"theta": "0", "b": 100, "omega": "0", "action": "0", "p": 1},
            {"theta": "0", "b": 100, "omega": "1", "action": "0", "p": 1},
            {"theta": "1", "b": 50, "omega": "0", "action": "0", "p": 1},
            {"theta": "1", "b": 50, "omega": "1", "action": "0", "p": 1},
            {"theta": "1", "b": 100, "omega": "0", "action": "0", "p": 1},
            {"theta": "1", "b": 100, "omega": "1", "action": "0", "p": 1}]}"#,
    );
    let o = run(&["simulate", "--instance", s(&inst), "--mechanism-file", s(&zero)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().next(), Some("revenue 0.0"));
}

#[test]
fn sample_bound_only() {
    let dir = Scratch::new("bound");
    let inst = dir.example();
    let o = run(&["sample", "--oracle", s(&inst), "--eps", "0.1", "--delta", "0.1", "--replications", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1, "{out}");
    // μ_min = 1/2 halves the first term relative to μ_min = 1/4.
    let first = 64.0 * 4.0 * (8.0f64 * 64.0 / 0.1).ln() / (0.01 * 0.5);
    assert_eq!(field(&out, "bound"), first.ceil());
}

#[test]
fn sample_runs_and_stays_eps_feasible() {
    let dir = Scratch::new("sample");
    let inst = dir.example();
    let o = run(&["sample", "--oracle", s(&inst), "--n", "1", "--eps", "0.05", "--replications", "5", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("eps_feasible 5/5"));

    let o = run(&["sample", "--oracle", s(&inst), "--n", "2000", "--replications", "20", "--seed", "1"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0));
    assert!((field(&out, "mean_revenue") - 45.0).abs() < 3.0, "{out}");
}

#[test]
fn sample_from_a_stream() {
    let dir = Scratch::new("stream");
    let inst = dir.example();
    let lines: String = (0..40)
        .map(|i| {
            format!(
                "{{\"theta\":\"{}\",\"omega\":\"{}\",\"b\":{}}}\n",
                i % 2,
                (i / 2) % 2,
                if i % 2 == 0 { 50 } else { 100 }
            )
        })
        .collect();
    let stream = dir.write("s.jsonl", &lines);
    let o = run(&["sample", "--oracle", s(&stream), "--instance", s(&inst), "--n", "20", "--replications", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("eps_feasible 2/2"));
    // Asking for more samples than the stream holds.
    let o = run(&["sample", "--oracle", s(&stream), "--instance", s(&inst), "--n", "30", "--replications", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["sample", "--oracle", s(&stream), "--n", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_example_round_trips() {
    let dir = Scratch::new("gen");
    let inst = dir.example();
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&inst).unwrap()).unwrap();
    assert_eq!(doc["budgets"], serde_json::json!([50.0, 100.0]));
    assert!(dir.path("tb.protocol.json").exists());
    let custom = dir.path("p.json");
    let o = run(&["gen-example", "--name", "treasure-box", "--out", s(&inst), "--protocol-out", s(&custom)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(custom.exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = Scratch::new("repeat");
    let inst = dir.example();
    let a = dir.path("a.json");
    let b = dir.path("b.json");
    run(&["solve", "--instance", s(&inst), "--mechanism", "probr", "--out", s(&a)]);
    run(&["solve", "--instance", s(&inst), "--mechanism", "probr", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let args = ["sample", "--oracle", s(&inst), "--n", "500", "--replications", "3", "--seed", "9"];
    assert_eq!(run(&args).stdout, run(&args).stdout);
}
