use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use infinity_core::controller::PrimitiveKind;
use infinity_core::scenarios::{
    check_equivalence, export_metrics, load_report, run_scenario_outcome, Mode, Scenario,
};

#[derive(Parser)]
#[command(name = "infinity", version, about = "Simulate in-network applications scaling across a switch fabric")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write summary.csv, audit.jsonl and report.json.
    Run(RunArgs),
    /// Compare a run's verdicts against an oracle run of the same workload.
    Check {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    app: PathBuf,
    #[arg(long)]
    workload: PathBuf,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    horizon_us: u64,
    /// normal, oracle or no_scaling.
    #[arg(long, default_value = "normal")]
    mode: String,
    /// `all`, `none`, or a comma-separated list of
    /// horizontal, sequential, disaggregate, migrate.
    #[arg(long, default_value = "all")]
    primitives: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write an event trace to trace.log.
    #[arg(long)]
    trace: bool,
}

fn parse_primitives(s: &str) -> Result<BTreeSet<PrimitiveKind>> {
    match s {
        "all" => Ok(PrimitiveKind::ALL.into_iter().collect()),
        "none" => Ok(BTreeSet::new()),
        list => list
            .split(',')
            .map(|p| p.trim().parse::<PrimitiveKind>().map_err(anyhow::Error::msg))
            .collect(),
    }
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let mode: Mode = args.mode.parse().map_err(anyhow::Error::msg)?;
    let mut scenario = Scenario::from_files(
        &args.app,
        &args.topology,
        &args.workload,
        args.policy.as_deref(),
        args.seed,
        args.horizon_us,
    )?
    .with_mode(mode);
    if args.primitives != "all" {
        scenario = scenario.with_primitives(parse_primitives(&args.primitives)?);
    }
    scenario.trace = args.trace;
    let outcome = run_scenario_outcome(&scenario)?;
    let files = export_metrics(&outcome.report, &args.out)
        .with_context(|| format!("writing metrics to {}", args.out.display()))?;
    if args.trace {
        let mut text = outcome.trace.join("\n");
        text.push('\n');
        let path = args.out.join("trace.log");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let s = &outcome.report.summary;
    let drops: Vec<String> = s.drops_by_reason.iter().map(|(r, n)| format!("{r}={n}")).collect();
    let actions: Vec<String> = s.actions_by_kind.iter().map(|(k, n)| format!("{k}={n}")).collect();
    println!(
        "packets={} delivered={} deferred={} drops[{}] actions[{}] unresolved={}",
        s.packets_total,
        s.delivered,
        s.deferred_packets,
        drops.join(" "),
        actions.join(" "),
        s.unresolved
    );
    println!("wrote {}", files.report_json.display());
    Ok(ExitCode::SUCCESS)
}

fn check(report: PathBuf, oracle: PathBuf) -> Result<ExitCode> {
    let r = load_report(&report).with_context(|| format!("loading {}", report.display()))?;
    let o = load_report(&oracle).with_context(|| format!("loading {}", oracle.display()))?;
    let eq = check_equivalence(&r, &o)?;
    print!("{eq}");
    Ok(if eq.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Check { report, oracle } => check(report, oracle),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
