use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use infosell::formats;
use infosell::mechanisms;
use infosell::protocol::{self, ProtocolTree};
use infosell::sampling::{self, InstanceSampler, SampleOracle, StreamSampler};
use infosell::verify::{self, VerifyOptions};
use infosell::{Error, Instance, SOLVER_TOL};

/// Environment variable that overrides the default verification tolerance.
const TOL_ENV: &str = "INFOSELL_TOL";

#[derive(Parser)]
#[command(name = "infosell", version, about = "Revenue-optimal selling of information to a budget-constrained buyer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Dirp,
    Depr,
    Probr,
    SingleRound,
}

#[derive(Subcommand)]
enum Command {
    /// Compute an optimal mechanism and print its revenue.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum)]
        mechanism: Kind,
        /// Publicly known budget for dirp. Defaults to the only budget level.
        #[arg(long)]
        public_budget: Option<f64>,
        /// Where to write the mechanism document.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check IC, IR, obedience, budget and the revenue cap of a mechanism.
    Verify {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        mechanism_file: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
    },
    /// Evaluate a protocol tree or mechanism exactly, or by Monte Carlo.
    Simulate {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, conflicts_with = "mechanism_file", required_unless_present = "mechanism_file")]
        protocol: Option<PathBuf>,
        #[arg(long)]
        mechanism_file: Option<PathBuf>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the sample-based mechanism against an oracle.
    Sample {
        /// Instance file to sample from, or a JSON-lines triple stream.
        #[arg(long)]
        oracle: PathBuf,
        /// Shape (labels, utilities, seller budget) for stream oracles.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        /// Failure probability used by the sample-size bound.
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 1)]
        replications: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a built-in example instance and its protocol tree.
    GenExample {
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out stem>.protocol.json` next to `--out`.
        #[arg(long)]
        protocol_out: Option<PathBuf>,
    },
}

/// Six significant digits, without trailing zeros.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let decimals = (5 - x.abs().log10().floor() as i32).clamp(0, 17) as usize;
    let s = format!("{x:.decimals$}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn revenue_line(x: f64) -> String {
    let s = format!("{x:.1}");
    if s == "-0.0" {
        "revenue 0.0".into()
    } else {
        format!("revenue {s}")
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(Error::from).with_context(|| format!("writing {}", path.display()))
}

fn load_instance(path: &Path) -> anyhow::Result<Instance> {
    formats::instance_from_json(&read(path)?).with_context(|| format!("loading instance {}", path.display()))
}

fn tolerance() -> anyhow::Result<f64> {
    match std::env::var(TOL_ENV) {
        Ok(v) => match v.trim().parse::<f64>() {
            Ok(t) if t >= 0.0 && t.is_finite() => Ok(t),
            _ => Err(Error::InvalidParameter(format!("{TOL_ENV}={v} is not a non-negative number")).into()),
        },
        Err(_) => Ok(SOLVER_TOL),
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Solve { instance, mechanism, public_budget, out } => {
            let inst = load_instance(&instance)?;
            let sol = match mechanism {
                Kind::Dirp => {
                    let b = match (public_budget, inst.budget_levels()) {
                        (Some(b), _) => b,
                        (None, [b]) => *b,
                        (None, _) => {
                            return Err(Error::InvalidParameter(
                                "dirp needs --public-budget when the instance has several budget levels".into(),
                            )
                            .into())
                        }
                    };
                    mechanisms::solve_cm_dirp(&inst, b)?
                }
                Kind::Depr => mechanisms::solve_cm_depr(&inst)?,
                Kind::Probr => mechanisms::solve_cm_probr(&inst)?,
                Kind::SingleRound => mechanisms::solve_single_round(&inst)?,
            };
            if let Some(out) = out {
                write(&out, &formats::mechanism_to_json(&sol.mechanism, &inst)?)?;
            }
            println!("{}", revenue_line(sol.revenue));
            Ok(0)
        }
        Command::Verify { instance, mechanism_file, eps } => {
            let inst = load_instance(&instance)?;
            let mech = formats::mechanism_from_json(&read(&mechanism_file)?, &inst)
                .with_context(|| format!("loading mechanism {}", mechanism_file.display()))?;
            if !(eps >= 0.0 && eps.is_finite()) {
                bail!(Error::InvalidParameter(format!("--eps {eps} must be >= 0")));
            }
            let opts = VerifyOptions { epsilon: eps, tolerance: tolerance()?, obedience: None };
            let report = verify::verify_all_with(&mech, &inst, None, &opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed {
                eprintln!("verification failed: {}", report.summary());
            }
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Simulate { instance, protocol: proto, mechanism_file, trials, seed } => {
            let inst = load_instance(&instance)?;
            let (tree, eval_inst) = match (proto, mechanism_file) {
                (Some(p), _) => {
                    let tree = formats::protocol_from_json(&read(&p)?, &inst)
                        .with_context(|| format!("loading protocol {}", p.display()))?;
                    (tree, inst)
                }
                (None, Some(m)) => {
                    let mech = formats::mechanism_from_json(&read(&m)?, &inst)
                        .with_context(|| format!("loading mechanism {}", m.display()))?;
                    let tree = protocol::mechanism_to_protocol(&mech, &inst)?;
                    // Direct payment trees are played under the public budget.
                    let eval_inst = match &mech {
                        infosell::Mechanism::DirectPayment(d) => inst.with_public_budget(d.public_budget)?,
                        _ => inst,
                    };
                    (tree, eval_inst)
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            simulate(&tree, &eval_inst, trials, seed)
        }
        Command::Sample { oracle, instance, n, eps, delta, replications, seed } => {
            let text = read(&oracle)?;
            let (shape, mut source, truth): (Instance, Box<dyn SampleOracle>, Option<Instance>) =
                match formats::instance_from_json(&text) {
                    Ok(inst) => {
                        let shape = match &instance {
                            Some(p) => load_instance(p)?,
                            None => inst.clone(),
                        };
                        (shape, Box::new(InstanceSampler::new(&inst)), Some(inst))
                    }
                    Err(Error::Json(_)) => {
                        let Some(p) = instance else {
                            bail!(Error::InvalidParameter("a stream oracle needs --instance for the shape".into()));
                        };
                        let shape = load_instance(&p)?;
                        let stream = StreamSampler::from_json_lines(text.as_bytes(), &shape)
                            .with_context(|| format!("reading stream {}", oracle.display()))?;
                        (shape, Box::new(stream), None)
                    }
                    Err(e) => {
                        return Err(anyhow::Error::from(e).context(format!("loading oracle {}", oracle.display())))
                    }
                };
            if !(eps >= 0.0 && eps.is_finite()) {
                bail!(Error::InvalidParameter(format!("--eps {eps} must be >= 0")));
            }
            let mu_min = sampling::min_type_mass(truth.as_ref().unwrap_or(&shape));
            let bound = if eps > 0.0 && eps < 1.0 {
                Some(sampling::sample_complexity_bound(
                    shape.n_actions(),
                    shape.n_theta(),
                    shape.n_budgets(),
                    eps,
                    delta,
                    mu_min,
                )?)
            } else {
                None
            };
            match bound {
                Some(b) => println!("bound {b}"),
                None => println!("bound undefined (eps outside (0,1))"),
            }
            if replications == 0 {
                return Ok(0);
            }
            let summary =
                sampling::run_replications(source.as_mut(), &shape, truth.as_ref(), n, eps, replications, seed)?;
            let feasible = summary.runs.iter().filter(|r| r.eps_feasible).count();
            println!("{}", revenue_line(summary.mean_revenue()));
            println!("mean_revenue {}", sig6(summary.mean_revenue()));
            println!("mean_empirical_revenue {}", sig6(summary.mean_empirical_revenue()));
            println!("mean_transfer {}", sig6(summary.mean_transfer()));
            println!("eps_feasible {feasible}/{}", summary.runs.len());
            Ok(if summary.all_eps_feasible() { 0 } else { 1 })
        }
        Command::GenExample { name, out, protocol_out } => {
            if name != "treasure-box" {
                bail!(Error::UnknownLabel { kind: "example", label: name });
            }
            let inst = Instance::treasure_box();
            let tree = ProtocolTree::treasure_box_two_option(&inst)?;
            let protocol_out = protocol_out.unwrap_or_else(|| {
                let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("example");
                out.with_file_name(format!("{stem}.protocol.json"))
            });
            write(&out, &formats::instance_to_json(&inst))?;
            write(&protocol_out, &formats::protocol_to_json(&tree, &inst)?)?;
            println!("wrote {} and {}", out.display(), protocol_out.display());
            Ok(0)
        }
    }
}

fn simulate(tree: &ProtocolTree, inst: &Instance, trials: Option<u64>, seed: u64) -> anyhow::Result<u8> {
    let eval = protocol::evaluate(tree, inst)?;
    println!("{}", revenue_line(eval.revenue));
    for te in &eval.types {
        println!("value {} {}", inst.type_key(te.buyer_type), sig6(te.value));
    }
    if let Some(trials) = trials {
        let sim = protocol::simulate(tree, inst, trials, seed)?;
        println!("trials {}", sim.trials);
        println!("mean_revenue {}", sig6(sim.mean_revenue));
        println!("std_error {}", sig6(sim.std_error));
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::DependentSignals(_)
            | Error::DegenerateConditional(_)
            | Error::UnreachableSignal(_)
            | Error::UnaffordableReport { .. },
        ) => 3,
        Some(Error::Lp(_) | Error::Internal(_)) => 4,
        Some(_) => 2,
        None => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig6(44.49861234), "44.4986");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(874590.0), "874590");
        assert_eq!(sig6(1234567.0), "1234567");
        assert_eq!(sig6(-0.0000001), "-0.0000001");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(revenue_line(44.5), "revenue 44.5");
        assert_eq!(revenue_line(-1e-12), "revenue 0.0");
    }
}
