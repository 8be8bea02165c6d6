use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mixmask_cli::config::ExperimentConfig;
use mixmask_cli::plot::{self, FigureKind};
use mixmask_cli::runner;

#[derive(Parser)]
#[command(name = "mixmask", version, about = "Mix and mask actor-critic experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (variant, seed) pair and write CSVs and plots.
    Run {
        config: PathBuf,
        /// Output root; overrides MIXMASK_OUTPUT_DIR and the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Like `run`, plus a per-variant table marking the best grid point per architecture.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Policy/value hidden-representation similarity before and after training.
    Similarity {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render a summary or similarity CSV to SVG.
    Plot {
        summary: PathBuf,
        /// eval, train or similarity.
        #[arg(long, value_parser = parse_figure)]
        figure: FigureKind,
        /// Defaults to the input path with an `.svg` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_figure(s: &str) -> Result<FigureKind, String> {
    FigureKind::parse(s).ok_or_else(|| format!("unknown figure `{s}` (expected eval, train or similarity)"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, output } => train_matrix(&config, output, false),
        Command::Sweep { config, output } => train_matrix(&config, output, true),
        Command::Similarity { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = cfg.output_root(output.as_deref());
            for (label, d) in runner::similarity(&cfg, &dir)? {
                println!("{label} ({} models x {} rollouts)", d.n_models, d.n_rollouts);
                for l in &d.layers {
                    println!("  layer {} {:<12} {:+.6}", l.layer, l.label, l.mean_delta);
                }
            }
            println!("wrote {}", dir.join("similarity.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { summary, figure, out } => {
            let text = std::fs::read_to_string(&summary).with_context(|| format!("reading {}", summary.display()))?;
            let svg = plot::render(&text, figure)?;
            let out = out.unwrap_or_else(|| summary.with_extension("svg"));
            std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn train_matrix(config: &std::path::Path, output: Option<PathBuf>, sweep: bool) -> anyhow::Result<ExitCode> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = cfg.output_root(output.as_deref());
    let report = runner::run(&cfg, &dir)?;
    if sweep {
        let rows = runner::sweep_table(&cfg, &report);
        runner::write_sweep_table(&rows, &dir.join("sweep.csv"))?;
        for r in &rows {
            println!(
                "{}{:<48} median {:>7.1}  iqr {:>7.1}  solved {}/{}",
                if r.best { "* " } else { "  " },
                r.variant,
                r.median,
                r.iqr,
                r.solved,
                r.seeds
            );
        }
    }
    let aborted = report.aborted();
    println!("{} runs written to {}; {aborted} aborted", report.outcomes.len(), dir.display());
    Ok(if aborted > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}
