use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use peampc::controller::Algorithm;
use peampc::excitation::verify_expected_pe;
use peampc::harness::{
    check_assumptions, draw_disturbance, draw_noise, monte_carlo, write_artifacts, AssumptionReport, ExperimentConfig,
    MonteCarlo, Profile,
};
use peampc::plant::{matrix_to_rows, UncertainModel};

#[derive(Parser)]
#[command(name = "peampc", version, about = "Adaptive tube MPC with persistent-excitation constraints")]
struct Cli {
    /// Experiment configuration (JSON). Defaults to the built-in example.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scale of the built-in example when no config file is given.
    #[arg(long, global = true, default_value = "desk", value_parser = parse_profile)]
    profile: Profile,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certifies the standing assumptions for the configured system.
    CheckAssumptions {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Computes the terminal set and terminal cost.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop Monte-Carlo runs of one controller.
    Run {
        #[arg(long, value_parser = parse_algorithm)]
        controller: Algorithm,
        #[command(flatten)]
        batch: BatchArgs,
    },
    /// Closed-loop Monte-Carlo runs of several controllers on common disturbances.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "alg1,alg2,noisyK", value_parser = parse_algorithm)]
        controllers: Vec<Algorithm>,
        #[command(flatten)]
        batch: BatchArgs,
    },
    /// Estimates the expected excitation matrix of the noisy open loop by rollouts.
    VerifyPe {
        #[arg(long, default_value_t = 10_000)]
        rollouts: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct BatchArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of disturbance sequences.
    #[arg(long)]
    seeds: Option<usize>,
    /// Overrides the run length.
    #[arg(long)]
    steps: Option<usize>,
    /// Runs even when an assumption check fails.
    #[arg(long)]
    force: bool,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    Profile::parse(s).ok_or_else(|| format!("unknown profile `{s}` (expected desk or paper)"))
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    Algorithm::parse(s).ok_or_else(|| format!("unknown controller `{s}` (expected alg1, alg2 or noisyK)"))
}

#[derive(Serialize)]
struct FailureManifest<'a> {
    command: &'a str,
    error: String,
    causes: Vec<String>,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::CheckAssumptions { .. } => "check-assumptions",
        Command::Synth { .. } => "synth",
        Command::Run { .. } => "run",
        Command::Compare { .. } => "compare",
        Command::VerifyPe { .. } => "verify-pe",
    }
}

fn out_dir(c: &Command) -> Option<&Path> {
    match c {
        Command::CheckAssumptions { out } | Command::VerifyPe { out, .. } => out.as_deref(),
        Command::Synth { out } => Some(out),
        Command::Run { batch, .. } | Command::Compare { batch, .. } => Some(&batch.out),
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))?
        }
        None => ExperimentConfig::example(cli.profile),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_report(report: &AssumptionReport) {
    for c in &report.checks {
        println!("{:<26} {}", c.name, if c.passed { "ok" } else { "FAILED" });
    }
}

/// Total invariant violations in a batch; non-zero means the exit code is non-zero.
fn invariant_violations(mc: &MonteCarlo) -> usize {
    mc.summary
        .controllers
        .iter()
        .map(|c| {
            c.failures.len()
                + c.state_violations
                + c.input_violations
                + c.truth_violations
                + c.monotonicity_violations
                + c.witness_failures
        })
        .sum()
}

fn batch(mut cfg: ExperimentConfig, controllers: Vec<Algorithm>, args: &BatchArgs) -> anyhow::Result<bool> {
    cfg.controllers = controllers;
    if let Some(n) = args.seeds {
        cfg.runs = n;
    }
    if let Some(t) = args.steps {
        cfg.run_length = t;
        cfg.report_times.retain(|&r| r <= t);
        if !cfg.report_times.contains(&t) {
            cfg.report_times.push(t);
        }
    }
    cfg.validate().context("invalid config")?;
    let report = check_assumptions(&cfg)?;
    if !report.all_passed {
        print_report(&report);
        if !args.force {
            bail!("assumption checks failed; pass --force to run anyway");
        }
    }
    let mc = monte_carlo(&cfg)?;
    write_artifacts(&mc, &args.out)?;
    println!("{:<8} {:>5} {:>12} {:>12} {:>10} {:>9}", "ctrl", "runs", "eps_hat", "cost", "vol_end%", "fallback");
    for c in &mc.summary.controllers {
        let vol = c.volume_percent.values().last().copied().unwrap_or(f64::NAN);
        println!(
            "{:<8} {:>5} {:>12.4e} {:>12.4} {:>10.2} {:>9.3}",
            c.controller, c.completed_runs, c.epsilon_hat, c.mean_cost, vol, c.fallback_rate
        );
        for f in &c.failures {
            eprintln!("{}: {f}", c.controller);
        }
    }
    if let Some(imp) = mc.summary.cost_improvement {
        println!("cost improvement alg1 over alg2: {:.2}%", 100.0 * imp);
    }
    let bad = invariant_violations(&mc);
    if bad > 0 {
        eprintln!("{bad} failed runs or invariant violations; see {}", args.out.join("summary.json").display());
    }
    Ok(bad == 0)
}

fn execute(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::CheckAssumptions { out } => {
            let report = check_assumptions(&cfg)?;
            print_report(&report);
            if let Some(dir) = out {
                write_json(&dir.join("assumptions.json"), &report)?;
            }
            Ok(report.all_passed)
        }
        Command::Synth { out } => {
            let problem = cfg.problem()?;
            let theta_bar = problem.initial_nominal()?;
            let p = problem.terminal_cost(&theta_bar)?;
            let t = &problem.terminal;
            let vertices: Vec<Vec<f64>> = t.vertices.vertices().iter().map(|v| v.iter().copied().collect()).collect();
            write_json(
                &out.join("terminal.json"),
                &serde_json::json!({
                    "normals": matrix_to_rows(t.set.normals()),
                    "offsets": t.set.offsets().iter().copied().collect::<Vec<_>>(),
                    "vertices": vertices,
                    "terminal_cost": matrix_to_rows(&p),
                    "nominal_parameter": theta_bar.iter().copied().collect::<Vec<_>>(),
                    "iterations": t.iterations,
                }),
            )?;
            println!("terminal set: {} facets, {} vertices", t.set.n_rows(), vertices.len());
            Ok(true)
        }
        Command::Run { controller, batch: args } => batch(cfg, vec![*controller], args),
        Command::Compare { controllers, batch: args } => batch(cfg, controllers.clone(), args),
        Command::VerifyPe { rollouts, out } => {
            let model = UncertainModel::from_spec(&cfg.model)?;
            let theta = DVector::from_vec(cfg.theta_star.clone());
            let x0 = DVector::from_vec(cfg.x0.clone());
            let (w_set, s_set, std) = (cfg.model.w.clone(), cfg.model.s.clone(), cfg.disturbance.std);
            let pe = verify_expected_pe(
                &model,
                &theta,
                &x0,
                cfg.window,
                *rollouts,
                cfg.master_seed,
                |rng| draw_disturbance(&w_set, std, rng).expect("box disturbance set"),
                Some(|rng: &mut _| draw_noise(&s_set, rng).expect("box noise set")),
            )?;
            let report = serde_json::json!({
                "rollouts": pe.rollouts,
                "window": cfg.window,
                "lambda_min": pe.lambda_min,
                "ci_low": pe.ci_low,
                "ci_high": pe.ci_high,
                "mean": matrix_to_rows(&pe.mean),
                "excited": pe.ci_low > 0.0,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(dir) = out {
                write_json(&dir.join("verify_pe.json"), &report)?;
            }
            Ok(pe.ci_low > 0.0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            if let Some(dir) = out_dir(&cli.command) {
                let manifest = FailureManifest {
                    command: command_name(&cli.command),
                    error: err.to_string(),
                    causes: err.chain().skip(1).map(ToString::to_string).collect(),
                };
                if let Err(e) = write_json(&dir.join("failure.json"), &manifest) {
                    eprintln!("could not write failure manifest: {e:#}");
                }
            }
            ExitCode::from(2)
        }
    }
}
