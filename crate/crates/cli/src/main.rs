//! `ocl`: run, sweep and report online continual learning experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ngd_ocl::harness::{
    emit_report, emit_sweep_report, expand_axes, run_experiment, summarize_dir, sweep,
    ExperimentConfig, RunResult,
};
use ngd_ocl::rng::Rng;
use ngd_ocl::stream::make_synthetic;
use ngd_ocl::{OclError, Result};

#[derive(Parser)]
#[command(
    name = "ocl",
    version,
    about = "Online continual learning experiments with a KFAC optimizer"
)]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment over a seed list and write its report.
    Run(RunArgs),
    /// Run the cartesian product of one or more config axes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Axis as `key=v1,v2,...`; repeat for more axes.
        #[arg(long = "axis", value_name = "KEY=VALUES", required = true)]
        axes: Vec<String>,
    },
    /// Write a synthetic Gaussian dataset in the OCLD format.
    GenSynthetic {
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; a `<file>.sha256` checksum is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-check report directories and print their aggregates.
    Report {
        /// Directories written by `run` (or the cells of a `sweep`).
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines; defaults apply otherwise.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_name = "SEEDS")]
    seed_list: Option<String>,
    /// Directory for the CSV and summary files.
    #[arg(long)]
    out_dir: PathBuf,
}

fn split_pair(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| OclError::InvalidConfig(format!("expected KEY=VALUE, got `{s}`")))
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = split_pair(o)?;
        cfg.set(k, v)?;
    }
    if let Some(seeds) = &args.seed_list {
        cfg.set("seeds", seeds)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn describe(r: &RunResult) -> String {
    let forgetting = match (r.forgetting_mean, r.forgetting_std) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        _ => "n/a".into(),
    };
    format!(
        "{}+{} trick={} seeds={}: A_T {:.2} ± {:.2}  F_T {forgetting}",
        r.config.method,
        r.config.optimizer,
        r.config.trick,
        r.seeds.len(),
        100.0 * r.accuracy_mean,
        100.0 * r.accuracy_std
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| OclError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let result = run_experiment(&cfg)?;
            emit_report(&result, &args.out_dir)?;
            println!("{}", describe(&result));
            info!("report written to {}", args.out_dir.display());
        }
        Command::Sweep { run, axes } => {
            let base = load_config(&run)?;
            let axes = axes
                .iter()
                .map(|a| {
                    let (k, v) = split_pair(a)?;
                    Ok((
                        k.to_string(),
                        v.split(',').map(|s| s.trim().to_string()).collect(),
                    ))
                })
                .collect::<Result<Vec<(String, Vec<String>)>>>()?;
            let cells = expand_axes(&base, &axes)?;
            let results = sweep(&cells)?;
            emit_sweep_report(&results, &run.out_dir)?;
            for (cell, r) in &results {
                println!("{:<32} {}", cell.name(), describe(r));
            }
        }
        Command::GenSynthetic {
            classes,
            per_class,
            dim,
            separation,
            seed,
            out,
        } => {
            let ds = make_synthetic(classes, per_class, dim, separation, &mut Rng::new(seed))?;
            ds.save(&out)?;
            let checksum = ds.checksum();
            let mut side = out.clone().into_os_string();
            side.push(".sha256");
            let name = out
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            write_text(Path::new(&side), &format!("{checksum}  {name}\n"))?;
            println!("{checksum}  {}", out.display());
        }
        Command::Report { dirs } => {
            println!(
                "{:<40} {:>8} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8}",
                "dir", "method", "optim", "trick", "A_T", "±", "F_T", "±"
            );
            for dir in dirs {
                let s = summarize_dir(&dir)?;
                let f = |v: Option<f64>| {
                    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
                };
                println!(
                    "{:<40} {:>8} {:>6} {:>6} {:>8.2} {:>8.2} {:>8} {:>8}",
                    dir.display(),
                    s.method,
                    s.optimizer,
                    s.trick,
                    100.0 * s.accuracy_mean,
                    100.0 * s.accuracy_std,
                    f(s.forgetting_mean),
                    f(s.forgetting_std)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
