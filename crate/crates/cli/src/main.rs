use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use replan_core::pipeline::{self, ExperimentConfig, Mode, Replanner};
use replan_core::{Error, Result};
use serde_json::json;

/// Nominal solve, parameter screening, sensitivity-grid precompute and
/// replanning sweeps for the shuttle reentry problem.
#[derive(Debug, Parser)]
#[command(name = "replan", version)]
struct Cli {
    /// TOML experiment config; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// RNG seed for sweep draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Screening sample count for `screen`, draw count for `sweep`.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// `reduced` perturbs the screened parameters only, `full` all of them.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Reduced grid file to load instead of `<out>/grid.rjgd`.
    #[arg(long, global = true)]
    grid: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the nominal problem and freeze the normalization scales.
    Nominal,
    /// DGSM screening over QMC samples of the parameter box.
    Screen,
    /// Build and save the sensitivity grid over the important parameters.
    Precompute,
    /// Replan one parameter change with every method.
    Simulate {
        /// Comma-separated parameter change; drawn from the seed if absent.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        theta: Option<Vec<f64>>,
        /// Draw index used when `--theta` is absent.
        #[arg(long, default_value_t = 0)]
        draw: usize,
    },
    /// Replan a seeded batch of parameter changes and write the statistics.
    Sweep,
    /// Recompute statistics from `records.csv` and print the tables.
    Report,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    if let Some(n) = cli.samples {
        match cli.command {
            Command::Screen => cfg.screening.samples = n,
            Command::Sweep => cfg.sweep.draws = n,
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Nominal => {
            let n = pipeline::run_nominal(&cfg)?;
            println!(
                "nominal cost {:.6} (initial {:.6}), {} iterations, terminal residuals h {:+.3e} v {:+.3e} gamma {:+.3e}",
                n.cost,
                n.initial_cost,
                n.iterations,
                n.terminal_residuals[0],
                n.terminal_residuals[1],
                n.terminal_residuals[2]
            );
        }
        Command::Screen => {
            let nominal = pipeline::load_nominal(&cfg)?;
            let s = pipeline::run_screening(&cfg, &nominal)?;
            print!("{}", pipeline::screening_table(&s));
        }
        Command::Precompute => {
            let nominal = pipeline::load_nominal(&cfg)?;
            let screening = pipeline::load_screening(&cfg)?;
            let pre = pipeline::run_precompute(&cfg, &nominal, &screening)?;
            let names: Vec<&str> = pre.grid.dims.iter().map(|&j| screening.names[j].as_str()).collect();
            println!("grid over {names:?}: {} nodes", pre.grid.n_nodes());
            if let Some(full) = &pre.full_grid {
                println!("all-parameter grid: {} nodes", full.n_nodes());
            }
        }
        Command::Simulate { theta, draw } => {
            let nominal = pipeline::load_nominal(&cfg)?;
            let pre = pipeline::load_precomputed(&cfg, cli.grid.as_deref())?;
            let active = pre.grid.dims.clone();
            let rp = Replanner::new(&cfg, &nominal, pre)?;
            let theta = match theta {
                Some(t) => t.clone(),
                None => {
                    let perturbed: Vec<usize> = match cfg.mode {
                        Mode::Full => (0..rp.n_params()).collect(),
                        Mode::Reduced => active.clone(),
                    };
                    pipeline::draw_theta(cfg.seed, *draw, rp.n_params(), &perturbed)
                }
            };
            let (record, timing) = pipeline::simulate_change(&rp, *draw, &theta, &active, cfg.mode)?;
            let out = json!({ "record": record, "timing": timing });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Sweep => {
            let out = pipeline::run_sweep(&cfg, cli.grid.as_deref())?;
            print!("{}", pipeline::summary_table(&out.summary));
            println!(
                "mean replan time: reopt {:.3e} s, linear {:.3e} s, interpolated {:.3e} s (speedup {:.0}x)",
                out.timing.mean_reopt, out.timing.mean_linear, out.timing.mean_interpolated, out.timing.speedup
            );
        }
        Command::Report => print!("{}", pipeline::report(&cfg)?),
    }
    Ok(())
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("UsageError", e.to_string().trim(), 2),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
