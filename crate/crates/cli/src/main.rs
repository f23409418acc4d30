use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperfed_cli::runner::{compare_strategies, eval_checkpoints, inspect_config, run_experiment, simulate_to_disk};
use hyperfed_cli::{parse_config, CliError, CliResult, Overrides};
use hyperfed_core::checkpoint::{decode_hyper, decode_params};
use hyperfed_core::dataset::load_dataset;
use hyperfed_core::federation::StrategyKind;

#[derive(Parser)]
#[command(name = "hyperfed", version, about = "Federated CT imaging experiments on simulated institutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the training strategy.
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every institution's datasets and write them as HFDS files.
    Simulate(Common),
    /// Train one strategy and write metrics, history, profiles and checkpoints.
    Run(Common),
    /// Run several strategies on the same data and write a comparison table.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategies (default: all four).
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<StrategyKind>,
    },
    /// Recompute test metrics from the checkpoints of a finished run.
    Eval(Common),
    /// Summarize a config, an HFDS dataset or an HFCK checkpoint.
    Inspect {
        #[arg(long, conflicts_with = "file")]
        config: Option<PathBuf>,
        /// HFDS or HFCK file.
        file: Option<PathBuf>,
    },
}

fn load(c: &Common) -> CliResult<hyperfed_cli::ExperimentConfig> {
    let o = Overrides {
        seed: c.seed,
        output_dir: c.out.clone(),
        strategy: c.strategy,
        threads: c.threads,
    };
    parse_config(&c.config, &o)
}

fn inspect_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"HFCK") {
        if let Ok(w) = decode_params::<f32>(&bytes) {
            let n: usize = w.blocks.iter().map(|b| b.len()).sum();
            return Ok(format!(
                "shared imaging weights: {} blocks, {n} values, FiLM sites {:?}\n",
                w.blocks.len(),
                w.layout.0
            ));
        }
        let (xi, layout) = decode_hyper::<f32>(&bytes)?;
        return Ok(format!(
            "hypernetwork: hidden {}, output {}, {} values, FiLM sites {:?}\n",
            xi.hidden(),
            xi.output_width(),
            xi.param_count(),
            layout.0
        ));
    }
    let ds = load_dataset(path)?;
    let g = &ds.geometry;
    Ok(format!(
        "dataset: institution {}, task {:?}, {} records, input {:?}; {} views x {} bins, grid {}, I0 {:.4e}\n",
        ds.institution_id,
        ds.task,
        ds.len(),
        ds.input_shape(),
        g.n_views,
        g.n_bins,
        g.image_size,
        g.incident_intensity
    ))
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Simulate(c) => {
            for p in simulate_to_disk(&load(&c)?)? {
                println!("{}", p.display());
            }
        }
        Command::Run(c) => {
            let m = run_experiment(&load(&c)?)?;
            println!("overall PSNR {:.4} dB, SSIM {:.5}", m.report.overall.psnr, m.report.overall.ssim);
        }
        Command::Compare { common, strategies } => {
            let strategies = if strategies.is_empty() {
                StrategyKind::ALL.to_vec()
            } else {
                strategies
            };
            let t = compare_strategies(&load(&common)?, &strategies)?;
            println!("{}", t.header().join(","));
            for (who, cols) in &t.rows {
                let cells: Vec<String> = cols.iter().map(|(p, s)| format!("{p:.3},{s:.4}")).collect();
                println!("{who},{}", cells.join(","));
            }
        }
        Command::Eval(c) => {
            let m = eval_checkpoints(&load(&c)?)?;
            println!("overall PSNR {:.4} dB, SSIM {:.5}", m.report.overall.psnr, m.report.overall.ssim);
        }
        Command::Inspect { config, file } => match (config, file) {
            (Some(c), _) => print!("{}", inspect_config(&parse_config(&c, &Overrides::default())?)?),
            (None, Some(f)) => print!("{}", inspect_file(&f)?),
            (None, None) => return Err(CliError::Config("inspect needs --config or a file".into())),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
