use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sms_core::scenario::{self, load_config, Overrides, ScenarioConfig, Stage, Summary};

/// Plan, track and verify free-floating manipulator scenarios.
#[derive(Parser)]
#[command(name = "smsctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan the end-effector trajectory only.
    Plan(RunArgs),
    /// Plan and track it in closed loop.
    Track(RunArgs),
    /// Plan, track and check the Lyapunov conditions.
    Run(RunArgs),
    /// Recompute a run directory's manifest from its CSVs.
    Verify {
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file.
    config: PathBuf,
    /// Output directory; defaults to the file's `output_dir`, then `runs/<case>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Plan step, s.
    #[arg(long)]
    dt_plan: Option<f64>,
    /// Control step, s.
    #[arg(long)]
    dt_ctrl: Option<f64>,
}

fn print_summary(summary: &Summary, out: &Path) {
    println!("case {} ({:?}): {:?}", summary.case, summary.stage, summary.status);
    if let Some(msg) = &summary.message {
        println!("  {msg}");
    }
    if let Some(p) = &summary.plan {
        println!(
            "  plan: final error {:.4} m, max base displacement {:.4} m, violated {:?}",
            p.final_error, p.max_base_displacement, p.violated_families
        );
    }
    if let Some(t) = &summary.tracking {
        println!(
            "  tracking: final error {:.4} m, max |q_e| {:.3e} rad, max torques {:?}",
            t.final_error, t.max_joint_error, t.max_torques
        );
    }
    for c in &summary.checks {
        let value = c.value.map_or("n/a".to_string(), |v| format!("{v:.4e}"));
        println!("  [{}] {} = {value} (limit {:e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.limit);
    }
    println!("  artifacts in {} ({:.2} s)", out.display(), summary.wall_time_s);
}

fn run(args: &RunArgs, stage: Stage) -> Result<bool, sms_core::SmsError> {
    let config: ScenarioConfig = load_config(&args.config)?.with_overrides(Overrides {
        seed: args.seed,
        dt_plan: args.dt_plan,
        dt_ctrl: args.dt_ctrl,
    })?;
    let out = args
        .out
        .clone()
        .or_else(|| config.file.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(config.case()));
    let outcome = scenario::run_scenario(&config, stage, &out)?;
    print_summary(&outcome.summary, &out);
    Ok(outcome.summary.passed())
}

fn verify(dir: &Path) -> Result<bool, sms_core::SmsError> {
    let report = scenario::verify(dir)?;
    println!("verify {}: manifest status {:?}", dir.display(), report.summary.status);
    for m in &report.mismatches {
        println!("  mismatch: {m}");
    }
    for c in &report.checks {
        println!("  [{}] {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan(a) => run(a, Stage::Plan),
        Command::Track(a) => run(a, Stage::Track),
        Command::Run(a) => run(a, Stage::Run),
        Command::Verify { run_dir } => verify(run_dir),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
