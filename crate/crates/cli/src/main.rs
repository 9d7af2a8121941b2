//! `delobs`: run observer experiments from TOML configurations and compare
//! their summaries.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use delobs_core::report::MetricRow;
use delobs_core::{
    compare_runs, parse_config, run_simulation, Error, ErrorKind, ExperimentConfig, RunSummary,
};

#[derive(Debug, Parser)]
#[command(name = "delobs", version, about = "Staged adaptive observer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment (or a sweep) and write the trace CSV and summary JSON.
    Run {
        /// Configuration file (TOML); an empty file selects the benchmark.
        config: PathBuf,
        /// Output directory.
        #[arg(long, short, env = "DELOBS_OUTPUT_DIR", default_value = ".")]
        output: PathBuf,
        /// Run once per value of a dotted key, e.g. `gains.gamma2=1,100`.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        sweep: Option<String>,
        /// Keep every N-th trace row.
        #[arg(long, value_name = "N")]
        decimate: Option<usize>,
    },
    /// Tabulate metric differences between run summaries.
    Compare {
        #[arg(required = true, num_args = 1..)]
        summaries: Vec<PathBuf>,
        /// Print the table as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Assumption => 3,
        ErrorKind::Degeneracy => 4,
        ErrorKind::Integration => 5,
        ErrorKind::Io => 6,
    }
}

fn run_one(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary, Error> {
    std::fs::create_dir_all(dir)?;
    let started = Instant::now();
    let trace = run_simulation(cfg)?;
    let summary = RunSummary::from_trace(cfg, &trace, started.elapsed().as_secs_f64());
    trace.write_csv_file(dir.join(&cfg.output.trace), cfg.output.decimate)?;
    summary.write_json(dir.join(&cfg.output.summary))?;
    Ok(summary)
}

fn describe(summary: &RunSummary) -> String {
    let mut parts = Vec::new();
    for (j, c) in summary.channels.iter().enumerate() {
        parts.push(format!(
            "|omega_err_{}| = {:.3e}, max|theta_err_{}| = {:.3e}",
            j + 1,
            c.omega_err_final,
            j + 1,
            c.theta_err_final_window_max
        ));
    }
    parts.push(format!("max|x_err| = {:.3e}", summary.state_err_final_window_max));
    match summary.t_c {
        Some(t) => parts.push(format!("t_c = {t}")),
        None => parts.push("t_c not reached".into()),
    }
    parts.join("; ")
}

fn run(config: &Path, output: &Path, sweep: Option<&str>, decimate: Option<usize>) -> Result<(), Error> {
    let mut cfg = parse_config(config)?;
    if let Some(n) = decimate {
        cfg = cfg.with_override("output.decimate", &n.to_string())?;
    }
    let Some(sweep) = sweep else {
        let summary = run_one(&cfg, output)?;
        println!("{}", describe(&summary));
        return Ok(());
    };
    let (key, values) = sweep
        .split_once('=')
        .ok_or_else(|| Error::config("--sweep", "expected KEY=V1,V2,..."))?;
    let mut summaries = Vec::new();
    for value in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let run_cfg = cfg.with_override(key, value)?;
        let dir = output.join(format!("{key}={value}"));
        let summary = run_one(&run_cfg, &dir)?;
        println!("{key} = {value}: {}", describe(&summary));
        summaries.push(summary);
    }
    if summaries.len() >= 2 {
        print_table(&compare_runs(&summaries)?, &mut std::io::stdout())?;
    }
    Ok(())
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6e}"))
}

fn print_table(rows: &[MetricRow], out: &mut impl std::io::Write) -> Result<(), Error> {
    let runs = rows.first().map_or(0, |r| r.values.len());
    let width = rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
    let mut header = format!("{:width$}", "metric");
    for i in 0..runs {
        header += &format!("  {:>13}", format!("run{}", i + 1));
    }
    for i in 1..runs {
        header += &format!("  {:>13}", format!("delta{}", i + 1));
    }
    writeln!(out, "{header}")?;
    for r in rows {
        let mut line = format!("{:width$}", r.metric);
        for v in &r.values {
            line += &format!("  {:>13}", fmt_cell(*v));
        }
        for d in r.deltas.iter().skip(1) {
            line += &format!("  {:>13}", fmt_cell(*d));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn compare(paths: &[PathBuf], json: bool) -> Result<(), Error> {
    let summaries = paths
        .iter()
        .map(RunSummary::read_json)
        .collect::<Result<Vec<_>, _>>()?;
    let rows = compare_runs(&summaries)?;
    if json {
        let text = serde_json::to_string_pretty(&rows).map_err(|e| Error::Io(e.to_string()))?;
        println!("{text}");
        Ok(())
    } else {
        print_table(&rows, &mut std::io::stdout())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            output,
            sweep,
            decimate,
        } => run(config, output, sweep.as_deref(), *decimate),
        Command::Compare { summaries, json } => compare(summaries, *json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
