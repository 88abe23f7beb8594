//! Command-line workflow: simulate, pretrain, fine-tune, evaluate, tabulate and plot.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind as ClapKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{CliError, ErrorKind};

pub const THREADS_ENV: &str = "VORTEXLAB_THREADS";

#[derive(Parser, Debug)]
#[command(name = "vortexlab", version, about = "Wake-vortex simulation, contrastive pretraining and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON file of flat dotted keys applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set pretrain.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads; falls back to VORTEXLAB_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory (or file, for `plot` and `render`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileName {
    /// Full desk benchmark sizes.
    Desk,
    /// Smaller widths and point counts for a single core.
    Reduced,
    /// Tiny sizes for plumbing checks.
    Smoke,
}

impl ProfileName {
    pub fn profile(self) -> vortexlab::experiments::Profile {
        use vortexlab::experiments::Profile;
        match self {
            ProfileName::Desk => Profile::default(),
            ProfileName::Reduced => Profile::reduced(),
            ProfileName::Smoke => Profile::smoke(),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ProfileArg {
    /// Base defaults before the config file and overrides.
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: ProfileName,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scan dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_sequences: Option<usize>,
        #[arg(long)]
        n_frames: Option<usize>,
        /// Keep labels out of the sequence manifests.
        #[arg(long)]
        unlabeled: bool,
        /// Std-dev in metres of noise on published labels.
        #[arg(long)]
        label_noise: Option<f64>,
    },
    /// Contrastive pretraining on a dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        profile: ProfileArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// full, no-temporal-subsampling, no-spatial-masking, no-centering or mean-pooling.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train the soft-center head on a pretrained encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        profile: ProfileArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fraction of the labeled training split to use.
        #[arg(long)]
        fraction: Option<f64>,
        /// frozen-encoder, heads-only or all.
        #[arg(long)]
        trainable: Option<String>,
    },
    /// Train the forecast head on a pretrained encoder.
    ForecastTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        profile: ProfileArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        trainable: Option<String>,
    },
    /// Score a method on the test split of a labeled dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        profile: ProfileArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// dbscan, intensity, cv, kalman, traj-lstm, supervised or xvortex.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probe of frozen sequence embeddings on aircraft class.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        profile: ProfileArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Encoder checkpoint; a random-init encoder when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the ablation table on a simulated benchmark.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        profile: ProfileArg,
    },
    /// Run experiment tables on a simulated benchmark.
    Table {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        profile: ProfileArg,
        /// Which tables to run, e.g. `1,3`.
        #[arg(long)]
        tables: Option<String>,
    },
    /// SVG chart from a metrics CSV.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// align-uniform or loss.
        #[arg(long)]
        kind: Option<String>,
    },
    /// SVG of one scan frame with ground-truth and predicted centers.
    Render {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        profile: ProfileArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sequence: Option<String>,
        #[arg(long)]
        frame: Option<usize>,
        /// dbscan, intensity or xvortex.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Errors go to stderr as one JSON line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let kind = match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion | ClapKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    return 0;
                }
                ClapKind::InvalidSubcommand | ClapKind::MissingSubcommand => ErrorKind::UnknownCommand,
                _ => ErrorKind::Config,
            };
            let err = CliError { kind, message: e.render().to_string().lines().next().unwrap_or("").to_string() };
            eprintln!("{}", err.to_json_line());
            return kind.exit_code();
        }
    };
    match commands::execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.kind.exit_code()
        }
    }
}
