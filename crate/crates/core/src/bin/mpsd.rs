use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpsd::cli::{
    cmd_evaluate, cmd_experiment, cmd_fit, cmd_sample, CliError, Preset, RunConfig,
};
use mpsd::dp::Mechanism;

/// Train a tensor-network generative model on tabular data, sample
/// synthetic records and score their fidelity and utility.
#[derive(Parser)]
#[command(name = "mpsd", version)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// no_privacy, clipped or dp.
    #[arg(long, global = true)]
    preset: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.mpsd, schema.json and run_log.jsonl.
    Fit {
        /// Training CSV.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw synthetic records from a saved model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Output CSV path; defaults to <out-dir>/synthetic.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score synthetic CSVs against the real data.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        /// One or more synthetic CSVs.
        #[arg(long, required = true, num_args = 1..)]
        synth: Vec<PathBuf>,
        #[arg(long)]
        schema: PathBuf,
    },
    /// Sweep mechanisms and epsilons: fit, sample, evaluate per cell.
    Experiment {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated epsilon values.
        #[arg(long, value_delimiter = ',')]
        epsilons: Vec<f64>,
        /// Comma-separated mechanisms (gaussian, laplacian, none).
        #[arg(long, value_delimiter = ',')]
        mechanisms: Vec<String>,
    },
}

fn parse_mechanism(s: &str) -> Result<Mechanism, CliError> {
    match s {
        "none" => Ok(Mechanism::None),
        "gaussian" => Ok(Mechanism::Gaussian),
        "laplacian" => Ok(Mechanism::Laplacian),
        other => Err(CliError::Usage(format!(
            "unknown mechanism {other:?}; expected none, gaussian or laplacian"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out_dir) = &cli.out_dir {
        cfg.out_dir = out_dir.clone();
    }
    if let Some(preset) = &cli.preset {
        cfg.apply_preset(preset.parse::<Preset>()?);
    }

    match cli.command {
        Command::Fit { data } => {
            if let Some(data) = data {
                cfg.data = Some(data);
            }
            let fit = cmd_fit(&cfg)?;
            eprintln!(
                "wrote {} ({} updates, spent epsilon {:.4})",
                fit.model_path.display(),
                fit.updates,
                fit.spent_epsilon
            );
        }
        Command::Sample { model, count, out } => {
            let count = count.unwrap_or(cfg.sample_count);
            let out = out.unwrap_or_else(|| cfg.out_dir.join("synthetic.csv"));
            cmd_sample(&model, count, cfg.seed, &out)?;
            eprintln!("wrote {} ({count} rows)", out.display());
        }
        Command::Evaluate { real, synth, schema } => {
            let report = cmd_evaluate(&real, &synth, &schema, &cfg)?;
            eprintln!(
                "wrote {} (overall fidelity {:.4})",
                cfg.out_dir.join("report.json").display(),
                report.overall_fidelity()
            );
        }
        Command::Experiment {
            data,
            epsilons,
            mechanisms,
        } => {
            if let Some(data) = data {
                cfg.data = Some(data);
            }
            if !epsilons.is_empty() {
                cfg.epsilons = epsilons;
            }
            if !mechanisms.is_empty() {
                cfg.mechanisms = mechanisms
                    .iter()
                    .map(|m| parse_mechanism(m))
                    .collect::<Result<_, _>>()?;
            }
            let rows = cmd_experiment(&cfg)?;
            eprintln!(
                "wrote {} ({} rows)",
                cfg.out_dir.join("experiment.csv").display(),
                rows.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // MPSD_THREADS caps worker parallelism; default is all cores.
    if let Ok(threads) = std::env::var("MPSD_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
