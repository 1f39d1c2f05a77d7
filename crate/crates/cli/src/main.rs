mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bumpdecide", version, about = "Calibrated Bayesian bump hunting on binned spectra")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Per-temperature sampler diagnostics as JSON lines, kept when the run fails.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the reference scenario: spectrum, template and truth record.
    Simulate {
        /// Output directory.
        #[arg(long)]
        output: PathBuf,
        /// Background only.
        #[arg(long)]
        no_signal: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the tempered SMC sampler and summarize the posterior.
    Fit {
        #[arg(long, required_unless_present = "events", conflicts_with = "events")]
        spectrum: Option<PathBuf>,
        /// Event list (one mass per line), binned with the scenario edges.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate discovery and exclusion thresholds against a posterior.
    Calibrate {
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Apply the calibrated Bayes rule to a posterior.
    Decide {
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Likelihood-ratio scan with a Gross-Vitells global p-value.
    GvBaseline {
        #[arg(long)]
        spectrum: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use bumpdecide::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Domain(_) | Error::Usage(_) => 2,
                Error::Numerical(_) | Error::DegenerateEnsemble { .. } => 3,
                Error::InsufficientSamples { .. } => 4,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Simulate { common, .. }
        | Command::Fit { common, .. }
        | Command::Calibrate { common, .. }
        | Command::Decide { common, .. }
        | Command::GvBaseline { common, .. } => common.clone(),
    };
    if common.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = config::Config::load(common.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Simulate { output, no_signal, .. } => commands::simulate(&cfg, &common, &output, no_signal),
        Command::Fit { spectrum, events, template, output, .. } => {
            commands::fit(&cfg, &common, spectrum.as_deref(), events.as_deref(), &template, &output)
        }
        Command::Calibrate { posterior, output, .. } => commands::calibrate(&cfg, &common, &posterior, &output),
        Command::Decide { posterior, calibration, output, .. } => {
            commands::decide(&cfg, &common, &posterior, &calibration, &output)
        }
        Command::GvBaseline { spectrum, template, output, .. } => {
            commands::gv_baseline(&cfg, &common, &spectrum, &template, &output)
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
