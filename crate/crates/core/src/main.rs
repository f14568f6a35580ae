use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};
use serde::Serialize;

use mpq::alloc::{
    brute_force, fractional_solve, greedy_integer, round_to_integer, ResourceConstraint,
};
use mpq::io::output::{write_atomic, write_json};
use mpq::io::{write_outputs, AllocationFile, RunConfig, SensitivityFile};
use mpq::qat::{fixed_precision_baseline, probe_sensitivities, train, RunReport, TrainConfig};
use mpq::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mpq",
    version,
    about = "Mixed-precision quantization-aware training and bitwidth allocation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Solver {
    Greedy,
    Fractional,
    Brute,
}

#[derive(Subcommand)]
enum Command {
    /// Train with periodic bitwidth reallocation and write the run artifacts.
    Train {
        config: PathBuf,
        /// Output directory (overrides the config and MPQ_OUTPUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Allocate bitwidths from a sensitivity file without training.
    Allocate {
        sensitivities: PathBuf,
        /// Target average bitwidth (weight target with --per-element).
        #[arg(long)]
        beta: f64,
        /// Activation target with --per-element; defaults to --beta.
        #[arg(long, requires = "per_element")]
        beta_act: Option<f64>,
        /// Weight each quantizer by its element count, separately for weights and activations.
        #[arg(long)]
        per_element: bool,
        #[arg(long, value_enum, default_value_t = Solver::Greedy)]
        solver: Solver,
        /// Project the fractional solution onto integers.
        #[arg(long)]
        round: bool,
        #[arg(long, default_value_t = 2)]
        b_min: u32,
        #[arg(long, default_value_t = 8)]
        b_max: u32,
        /// Write the allocation here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warm up, initialize ranges, probe sensitivities once and write the snapshot.
    Sensitivity {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mixed precision vs. fixed precision vs. allocate-once, with one shared seed.
    Compare {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Allocate {
            sensitivities,
            beta,
            beta_act,
            per_element,
            solver,
            round,
            b_min,
            b_max,
            out,
        } => {
            let constraint = if per_element {
                ResourceConstraint::per_element(beta, beta_act.unwrap_or(beta), b_min, b_max)?
            } else {
                ResourceConstraint::avg(beta, b_min, b_max)?
            };
            let file = allocate(&sensitivities, constraint, solver, round)?;
            let mut text = serde_json::to_string_pretty(&file)?;
            text.push('\n');
            match out {
                Some(path) => write_atomic(&path, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Sensitivity { config, out } => {
            let (cfg, dir) = load(&config, out)?;
            let data = cfg.load_data()?;
            let spec = cfg.model_spec(data.train.dim, data.train.classes);
            let snap = probe_sensitivities(&spec, &cfg.train_config()?, &data)?;
            let path = dir.join("sensitivity.json");
            write_json(&path, &SensitivityFile::from_snapshot(&snap))?;
            info!("wrote {}", path.display());
            Ok(())
        }
        Command::Compare { config, out } => cmd_compare(&config, out),
    }
}

fn allocate(
    path: &Path,
    constraint: ResourceConstraint,
    solver: Solver,
    round: bool,
) -> Result<AllocationFile> {
    let problem = SensitivityFile::read(path)?.problem()?;
    let alloc = match solver {
        Solver::Greedy => greedy_integer(&problem, &constraint)?,
        Solver::Brute => brute_force(&problem, &constraint)?,
        Solver::Fractional => {
            let frac = fractional_solve(&problem, &constraint)?;
            if round {
                round_to_integer(&frac, &problem, &constraint)?
            } else {
                frac
            }
        }
    };
    AllocationFile::new(&alloc, Some(&problem), Some(constraint))
}

/// Parses the config, resolves the output directory and echoes the effective config there.
fn load(path: &Path, out: Option<PathBuf>) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(dir) = out {
        cfg.output.dir = Some(dir);
    }
    let dir = cfg.output.dir.clone().unwrap_or_else(|| cfg.output_dir());
    write_atomic(
        &dir.join("effective_config.toml"),
        cfg.to_toml()?.as_bytes(),
    )?;
    Ok((cfg, dir))
}

fn cmd_train(path: &Path, out: Option<PathBuf>) -> Result<()> {
    let (cfg, dir) = load(path, out)?;
    let data = cfg.load_data()?;
    let spec = cfg.model_spec(data.train.dim, data.train.classes);
    match train(&spec, &cfg.train_config()?, &data) {
        Ok(report) => {
            write_outputs(&report, &dir)?;
            println!(
                "test accuracy {:.4}, average bits {}, bitwidths {:?}",
                report.final_test_accuracy,
                report.final_allocation.average_bits(),
                report.final_allocation.bits
            );
            Ok(())
        }
        Err(Error::Diverged {
            iteration,
            msg,
            report,
        }) => {
            write_outputs(&report, &dir)?;
            Err(Error::Diverged {
                iteration,
                msg,
                report,
            })
        }
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct Comparison<'a> {
    method: &'a str,
    test_accuracy: f64,
    average_bits: f64,
    bitwidths: &'a [f64],
}

fn cmd_compare(path: &Path, out: Option<PathBuf>) -> Result<()> {
    let (cfg, dir) = load(path, out)?;
    let data = cfg.load_data()?;
    let spec = cfg.model_spec(data.train.dim, data.train.classes);
    let config = cfg.train_config()?;
    let fixed_bits = match config.constraint {
        ResourceConstraint::AvgBitwidth { beta, .. } => beta.floor(),
        ResourceConstraint::PerElementAvg {
            beta_weight,
            beta_act,
            ..
        } => beta_weight.min(beta_act).floor(),
    } as u32;
    let once = TrainConfig {
        phase1_fraction: 0.0,
        ..config.clone()
    };
    let runs: Vec<(String, RunReport)> = vec![
        ("mixed".into(), train(&spec, &config, &data)?),
        (
            format!("fixed-{fixed_bits}"),
            fixed_precision_baseline(&spec, &config, Some(fixed_bits), &data)?,
        ),
        ("allocate-once".into(), train(&spec, &once, &data)?),
    ];
    let rows: Vec<Comparison> = runs
        .iter()
        .map(|(name, r)| Comparison {
            method: name,
            test_accuracy: r.final_test_accuracy,
            average_bits: r.final_allocation.average_bits(),
            bitwidths: &r.final_allocation.bits,
        })
        .collect();
    println!(
        "{:<16} {:>9} {:>9}  bitwidths",
        "method", "accuracy", "avg bits"
    );
    for row in &rows {
        println!(
            "{:<16} {:>9.4} {:>9.3}  {:?}",
            row.method, row.test_accuracy, row.average_bits, row.bitwidths
        );
    }
    write_json(&dir.join("compare.json"), &rows)
}
