//! `pogo-sim`: command-line front end for the simulator.
//!
//! Exit codes are the same for every subcommand: 0 on success, 1 when an
//! assertion fails (a property, a detection tolerance, a replay), 2 on usage
//! or configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pogo_core::costmodel::{self, CostParams};
use pogo_simnet::{detection_rate, property_suite, replay, run_scenario, PropertyStatus, ReplayOutcome, ScenarioConfig, SimError, Strategy};

#[derive(Parser)]
#[command(name = "pogo-sim", version, about = "Deterministic proof-of-gradient-optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML file.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set policy.w=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig, SimError> {
        ScenarioConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write report.json, report.csv and transcript.jsonl.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, short, default_value = "out")]
        out: PathBuf,
    },
    /// Run the four safety properties over derived seeds.
    Properties {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        /// Also write properties.json here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Measure how often tampered leaves are caught against 1 - (1 - k/L)^m.
    Detect {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Tampered leaves; defaults to the scenario's TamperLeaves node.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 3.0)]
        tolerance_sigma: f64,
    },
    /// Print the model size table and a training/verification cost sweep.
    Costs {
        /// TOML file with cost parameters; flags override it.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        speedup: Option<f64>,
        #[arg(long)]
        forward: Option<f64>,
        #[arg(long)]
        backward_multiplier: Option<f64>,
        #[arg(long)]
        update: Option<f64>,
        #[arg(long)]
        merk: Option<f64>,
        /// Alphas for the sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.01, 0.1])]
        sweep: Vec<f64>,
        /// Also write sizes.csv and sweep.csv here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Re-run a scenario and compare it with a recorded transcript.
    Replay {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, short)]
        transcript: PathBuf,
    },
}

/// Failure that maps onto an exit code.
enum Failure {
    Assertion(String),
    Usage(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn cmd_run(scenario: &ScenarioArgs, out: &Path) -> Result<(), Failure> {
    let cfg = scenario.load()?;
    let run = run_scenario(&cfg)?;
    let csv = run.report.to_csv()?;
    write(out, "report.json", &run.report.to_json())?;
    write(out, "report.csv", &csv)?;
    write(out, "transcript.jsonl", &run.transcript.to_jsonl())?;
    for (strategy, s) in &run.report.aggregates {
        println!(
            "{strategy:<20} led {:>4}  finalized {:>4}  rejected {:>4}  skipped {:>4}",
            s.led, s.finalized, s.rejected, s.skipped
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_properties(scenario: &ScenarioArgs, seeds: usize, out: Option<&Path>) -> Result<(), Failure> {
    let report = property_suite(&scenario.load()?, seeds)?;
    if let Some(dir) = out {
        write(dir, "properties.json", &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    for r in &report.results {
        let status = match &r.status {
            PropertyStatus::Pass => "PASS".to_string(),
            PropertyStatus::Fail => "FAIL".to_string(),
            PropertyStatus::Skipped { marker } => format!("SKIPPED ({marker})"),
        };
        println!("{:<28} {status:<8} runs {:>5}  checked {:>6}", r.name, r.runs, r.checked);
        for f in r.failures.iter().take(10) {
            println!("    {f}");
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Assertion("safety properties failed".into()))
    }
}

fn cmd_detect(scenario: &ScenarioArgs, k: Option<usize>, trials: usize, sigma: f64) -> Result<(), Failure> {
    let cfg = scenario.load()?;
    let k = k
        .or_else(|| {
            cfg.nodes.iter().find_map(|n| match n.strategy {
                Strategy::TamperLeaves(k) => Some(k),
                _ => None,
            })
        })
        .ok_or_else(|| Failure::Usage("pass --k or give the scenario a tamper_leaves node".into()))?;
    let r = detection_rate(&cfg, k, trials, sigma)?;
    println!(
        "k {} of {} leaves, {} challenges: detected {}/{} = {:.4}, analytic {:.4}, {:.2} SE (tolerance {})",
        r.k, r.num_leaves, r.challenges, r.detected, r.proposed, r.rate, r.analytic, r.deviation_sigma, r.tolerance_sigma
    );
    if r.within_tolerance {
        Ok(())
    } else {
        Err(Failure::Assertion("detection rate outside tolerance".into()))
    }
}

struct CostFlags {
    alpha: Option<f64>,
    speedup: Option<f64>,
    forward: Option<f64>,
    backward_multiplier: Option<f64>,
    update: Option<f64>,
    merk: Option<f64>,
}

fn cmd_costs(params: Option<&Path>, flags: CostFlags, alphas: &[f64], out: Option<&Path>) -> Result<(), Failure> {
    let mut p = match params {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            toml_params(&text)?
        }
        None => CostParams::default(),
    };
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut p.alpha, flags.alpha);
    set(&mut p.quant_speedup, flags.speedup);
    set(&mut p.full_forward_cost, flags.forward);
    set(&mut p.backward_multiplier, flags.backward_multiplier);
    set(&mut p.update_cost, flags.update);
    set(&mut p.merk_cost, flags.merk);
    p.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let sizes = costmodel::to_csv(&costmodel::size_table()).map_err(|e| Failure::Usage(e.to_string()))?;
    let rows = costmodel::sweep(&p, alphas).map_err(|e| Failure::Usage(e.to_string()))?;
    let sweep = costmodel::to_csv(&rows).map_err(|e| Failure::Usage(e.to_string()))?;
    let ratio = costmodel::cost_ratio(&p).map_err(|e| Failure::Usage(e.to_string()))?;
    print!("{sizes}\n{sweep}\n");
    println!("train cost {} GPU-hours", costmodel::train_cost(&p));
    println!("verify cost {} GPU-hours", costmodel::verify_cost(&p));
    println!("ratio {ratio}");
    if let Some(dir) = out {
        write(dir, "sizes.csv", &sizes)?;
        write(dir, "sweep.csv", &sweep)?;
    }
    Ok(())
}

fn toml_params(text: &str) -> Result<CostParams, Failure> {
    toml::from_str(text).map_err(|e| Failure::Usage(format!("cost params: {e}")))
}

fn cmd_replay(scenario: &ScenarioArgs, transcript: &Path) -> Result<(), Failure> {
    match replay(&scenario.load()?, transcript)? {
        ReplayOutcome::Verified { heights } => {
            println!("verified {heights} heights");
            Ok(())
        }
        ReplayOutcome::Divergence { height, detail } => {
            println!("divergence at height {height}: {detail}");
            Err(Failure::Assertion(format!("transcript diverges at height {height}")))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, out } => cmd_run(scenario, out),
        Command::Properties { scenario, seeds, out } => cmd_properties(scenario, *seeds, out.as_deref()),
        Command::Detect { scenario, k, trials, tolerance_sigma } => cmd_detect(scenario, *k, *trials, *tolerance_sigma),
        Command::Costs { params, alpha, speedup, forward, backward_multiplier, update, merk, sweep, out } => cmd_costs(
            params.as_deref(),
            CostFlags {
                alpha: *alpha,
                speedup: *speedup,
                forward: *forward,
                backward_multiplier: *backward_multiplier,
                update: *update,
                merk: *merk,
            },
            sweep,
            out.as_deref(),
        ),
        Command::Replay { scenario, transcript } => cmd_replay(scenario, transcript),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
