use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use shadow_core::harness::{
    build_world, compare_to_reference, default_matrix, finish, oracle_checks, render_phase_bars, render_phase_breakdown, render_summary,
    run_matrix, summarize, write_csv, Calibration, Configuration, ExperimentConfig, RunReport,
    DEFAULT_REPS, DEFAULT_SEED, RATES,
};

/// Discrete-event simulator of live stateful-consumer migration.
#[derive(Parser)]
#[command(name = "shadow-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one migration and print its report.
    Run(RunArgs),
    /// Run the configuration x rate matrix.
    Matrix(MatrixArgs),
    /// Summarize stored matrix reports.
    Report(ReportArgs),
    /// Check the oracle and reference comparisons on a fresh matrix.
    Validate(ValidateArgs),
    /// Print the default calibration file.
    Calibration,
}

#[derive(Args)]
struct Common {
    /// Calibration file (`key = value` lines); defaults apply otherwise.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// SS-Seq, SS-Shadow, SS-Swap or D-Reg.
    #[arg(long, default_value = "SS-Shadow")]
    config: Configuration,
    /// Publish rate, msg/s.
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// Longest replay phase, seconds (overrides the calibration).
    #[arg(long)]
    cutoff: Option<f64>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the probe trace as CSV here.
    #[arg(long)]
    probe_csv: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    reps: u32,
    /// Run repetitions on all cores.
    #[arg(long)]
    parallel: bool,
    /// Restrict to these configurations (comma separated).
    #[arg(long, value_delimiter = ',')]
    configs: Vec<Configuration>,
    /// Restrict to these rates (comma separated).
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    /// Write all reports as a JSON array here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one CSV row per run here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON array of reports written by `matrix --out`.
    input: PathBuf,
    /// Rate of the phase-breakdown table.
    #[arg(long, default_value_t = 60.0)]
    rate: f64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    reps: u32,
    #[arg(long)]
    parallel: bool,
    /// Write the comparison as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_COMPARISON: u8 = 1;
const EXIT_RUN_FAILURE: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Matrix(a) => matrix(a),
        Command::Report(a) => report(a),
        Command::Validate(a) => validate(a),
        Command::Calibration => {
            print!("{}", Calibration::default().to_text());
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUN_FAILURE)
        }
    }
}

fn load_calibration(path: Option<&Path>) -> Result<Calibration> {
    let Some(path) = path else { return Ok(Calibration::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Calibration::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_csv_file(path: &Path, reports: &[RunReport]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(reports, file).with_context(|| format!("writing {}", path.display()))
}

/// 2 if any run failed, 1 if any run lost or duplicated messages or broke an invariant.
fn status(reports: &[RunReport]) -> u8 {
    if reports.iter().any(RunReport::failed) {
        EXIT_RUN_FAILURE
    } else if reports.iter().all(RunReport::clean) {
        0
    } else {
        EXIT_COMPARISON
    }
}

fn run(a: RunArgs) -> Result<u8> {
    let calibration = load_calibration(a.common.calibration.as_deref())?;
    let cfg = ExperimentConfig {
        configuration: a.config,
        rate: a.rate,
        repetitions: 1,
        seed: a.common.seed,
        cutoff: a.cutoff.unwrap_or(calibration.cutoff),
        calibration,
    };
    let mut world = build_world(&cfg, cfg.seed, Default::default());
    world.run();
    let report = finish(&mut world, &cfg, cfg.seed);
    println!("{} at {} msg/s, seed {}: {:?}", report.config, report.rate, report.seed, report.phase);
    if let Some(f) = &report.failure {
        println!("  failure: {f}");
    }
    for (phase, secs) in &report.phase_timings {
        println!("  {:<14} {secs:>8.2} s", phase.name());
    }
    println!("  {:<14} {:>8.2} s", "total", report.total);
    println!("  {:<14} {:>8.2} s", "downtime", report.downtime.longest_streak_s);
    if let Some(c) = report.replay {
        println!("  replay predicted {:.2} s, simulated {:.2} s{}", c.predicted, c.simulated, if c.cutoff_fired { " (cutoff)" } else { "" });
    }
    let loss = &report.loss_audit;
    println!(
        "  published {}, applied {}, missing {}, duplicates {}, violations {}",
        loss.published,
        loss.applied_by_survivor,
        loss.missing_seqs.len(),
        loss.duplicate_applications,
        report.violations.len()
    );
    let t = &report.terminal_state;
    println!("  survivor {:?} owned by {:?} on {:?}", t.survivor, t.owner_kind, t.node);
    if let Some(path) = &a.out {
        write(path, &report.to_json())?;
    }
    if let Some(path) = &a.probe_csv {
        write(path, &world.probe.to_csv())?;
    }
    Ok(status(std::slice::from_ref(&report)))
}

fn matrix(a: MatrixArgs) -> Result<u8> {
    let calibration = load_calibration(a.common.calibration.as_deref())?;
    let matrix: Vec<ExperimentConfig> = default_matrix(&calibration, a.reps, a.common.seed)
        .into_iter()
        .filter(|c| a.configs.is_empty() || a.configs.contains(&c.configuration))
        .filter(|c| a.rates.is_empty() || a.rates.contains(&c.rate))
        .collect();
    let reports = run_matrix(&matrix, a.parallel);
    let summary = summarize(&reports);
    print!("{}", render_summary(&summary));
    if let Some(path) = &a.out {
        write(path, &serde_json::to_string_pretty(&reports)?)?;
    }
    if let Some(path) = &a.csv {
        write_csv_file(path, &reports)?;
    }
    Ok(status(&reports))
}

fn report(a: ReportArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let reports: Vec<RunReport> = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let summary = summarize(&reports);
    print!("{}", render_summary(&summary));
    println!();
    print!("{}", render_phase_breakdown(&summary, a.rate));
    println!();
    print!("{}", render_phase_bars(&summary, a.rate, 2.0));
    if let Some(path) = &a.csv {
        write_csv_file(path, &reports)?;
    }
    Ok(0)
}

fn validate(a: ValidateArgs) -> Result<u8> {
    let calibration = load_calibration(a.common.calibration.as_deref())?;
    let mu = calibration.mu;
    let reports = run_matrix(&default_matrix(&calibration, a.reps, a.common.seed), a.parallel);
    let summary = summarize(&reports);

    println!("Replay oracle (runs that drained before the cutoff)");
    let oracle = oracle_checks(&reports, mu);
    print!("{}", oracle.render());
    println!();
    println!("Reference comparison");
    let reference = compare_to_reference(&summary);
    print!("{}", reference.render());
    println!();
    for rate in [RATES[0], 60.0] {
        print!("{}", render_phase_breakdown(&summary, rate));
    }
    let failed_checks = oracle.checks.iter().chain(&reference.checks).filter(|c| !c.pass).count();
    println!("\n{} runs, {} checks failed", reports.len(), failed_checks);
    if let Some(path) = &a.out {
        let doc = serde_json::json!({ "oracle": oracle, "reference": reference, "summary": summary });
        write(path, &serde_json::to_string_pretty(&doc)?)?;
    }
    if reports.iter().any(RunReport::failed) {
        return Ok(EXIT_RUN_FAILURE);
    }
    Ok(if failed_checks == 0 { 0 } else { EXIT_COMPARISON })
}
