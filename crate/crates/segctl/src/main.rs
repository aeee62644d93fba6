use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use brainseg::modality::Modality;
use segctl::commands::{InferenceArgs, PhantomArgs, TrainArgs};
use segctl::config::{InferenceOverrides, TrainOverrides};
use segctl::{cmd_evaluate, cmd_phantoms, cmd_segment, cmd_train, cmd_uncertainty, CliError, Outcome, EXIT_ERROR};

/// Brain MRI/CT segmentation with MC-dropout quality control.
///
/// Exit status: 0 pass, 2 quality-control warning, 1 error.
#[derive(Parser)]
#[command(name = "segctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Inference {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    modality: Option<Modality>,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Reference volume that defines the network grid.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// MC-dropout inference with uncertainty report [default: on].
    #[arg(long, value_enum)]
    mc: Option<Switch>,
    /// Number of MC samples [default: 15].
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Dropout rate for MC sampling [default: 0.2].
    #[arg(long)]
    dropout_rate: Option<f64>,
    /// CV warn threshold [default: 0.01 for mprage, 0.025 otherwise].
    #[arg(long)]
    cv_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Inference {
    fn into_args(self) -> InferenceArgs {
        InferenceArgs {
            config: self.config,
            checkpoint: self.checkpoint,
            reference: self.reference,
            out: self.out,
            overrides: InferenceOverrides {
                modality: self.modality,
                mc: self.mc.map(|s| matches!(s, Switch::On)),
                mc_samples: self.mc_samples,
                dropout_rate: self.dropout_rate,
                cv_threshold: self.cv_threshold,
                seed: self.seed,
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Register, segment and map a volume back onto its own grid.
    Segment {
        input: PathBuf,
        #[command(flatten)]
        inference: Inference,
    },
    /// MC-dropout uncertainty report for one volume.
    Uncertainty {
        input: PathBuf,
        #[command(flatten)]
        inference: Inference,
    },
    /// Segment and score the test split of a manifest.
    Evaluate {
        manifest: PathBuf,
        #[command(flatten)]
        inference: Inference,
    },
    /// Train a model on the training split of a manifest.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        modality: Option<Modality>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Dropout rate built into the network [default: 0.2].
        #[arg(long)]
        dropout_rate: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic phantom dataset.
    Phantoms {
        /// Phantom description (TOML); the built-in phantom when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        subjects: usize,
        /// Cubic grid size of the built-in phantom.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        validation_fraction: f64,
        /// Extra corrupted test subject, e.g. noise:0.5, occlusion:0.3, swap:ct.
        #[arg(long)]
        corrupt: Vec<String>,
        /// Restrict output to these modalities.
        #[arg(long)]
        modality: Vec<Modality>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Segment { input, inference } => cmd_segment(&input, &inference.into_args()).map(|(o, _)| o),
        Command::Uncertainty { input, inference } => cmd_uncertainty(&input, &inference.into_args()),
        Command::Evaluate { manifest, inference } => {
            let e = cmd_evaluate(&manifest, &inference.into_args())?;
            print!("{}", e.summary());
            Ok(Outcome::Pass)
        }
        Command::Train { manifest, config, modality, seed, max_epochs, patience, learning_rate, dropout_rate, out } => {
            let args = TrainArgs {
                config,
                out,
                overrides: TrainOverrides { modality, seed, max_epochs, patience, learning_rate, dropout_rate },
            };
            let log = cmd_train(&manifest, &args)?;
            println!("best epoch {} ({})", log.best_epoch, log.stop_reason);
            Ok(Outcome::Pass)
        }
        Command::Phantoms { config, subjects, size, test_fraction, validation_fraction, corrupt, modality, seed, out } => {
            let args = PhantomArgs {
                spec: config,
                dims: [size; 3],
                subjects,
                test_fraction,
                validation_fraction,
                corrupt,
                modalities: modality,
                seed,
            };
            let m = cmd_phantoms(&args, &out)?;
            println!("wrote {} records to {}", m.entries.len(), out.join("manifest.csv").display());
            Ok(Outcome::Pass)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(o) => ExitCode::from(o.exit_code() as u8),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
