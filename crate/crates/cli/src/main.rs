use std::path::PathBuf;
use std::process::ExitCode;

use alchemy_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "alchemy", version, about = "Stain normalization and test-time template calibration on synthetic or real patch sites")]
struct Cli {
    /// Repeat for more logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Configuration layers, lowest precedence first: preset, `--config` file,
/// `--set` entries, then dedicated flags such as `--seed`.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,

    /// key=value file; `#` starts a comment.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one key, e.g. `--set recon_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Reduced sizes that run in minutes on one core.
    Desk,
    /// Reference recipe: 64 px, 600 patches per class, lr 1e-4.
    Reference,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Untrained vs trained normalizer quality.
    Table2,
    /// Cross-site classification with and without templates.
    Table3,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic site as PNG patches plus split.json.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// siteA or siteB.
        #[arg(long)]
        style_preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the normalizer on one or more site directories.
    TrainRecon {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the tumor classifier on one or more site directories.
    TrainClf {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Restain one patch with the colours of a template.
    Normalize {
        #[arg(long)]
        normnet: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Learn a template for a new site from its labeled validation patches.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        normnet: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        template: PathBuf,
        /// Site directory whose validation split drives calibration.
        #[arg(long)]
        data: PathBuf,
        /// Output directory: learned template PNG and per-epoch CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run an evaluation suite end to end on synthetic sites.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value = "A")]
        train_site: String,
        #[arg(long, default_value = "B")]
        test_site: String,
        /// table2 only: reuse a trained normalizer instead of training one.
        #[arg(long)]
        normnet: Option<PathBuf>,
        /// table2 only: number of (content, template) pairs.
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Eigenvalue blends between content and template, plus eigensphere CSVs.
    Eigviz {
        #[arg(long)]
        normnet: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        template: PathBuf,
        /// Blend weights in percent.
        #[arg(long, value_delimiter = ',', default_value = "0,25,50,75,100")]
        blend_sweep: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// 1 usage/config, 2 data or format, 3 numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Validation(_)
        | Error::Label(_)
        | Error::Parse(_)
        | Error::Dimension { .. }
        | Error::Index(_) => 2,
        Error::Numeric(_) | Error::Solver { .. } | Error::Contract(_) => 3,
    }
}

fn run(cli: Cli) -> alchemy_core::Result<()> {
    match cli.command {
        Command::GenData { cfg, style_preset, out, force } => commands::gen_data(&cfg, &style_preset, &out, force),
        Command::TrainRecon { cfg, data, out, force } => commands::train_recon(&cfg, &data, &out, force),
        Command::TrainClf { cfg, data, out, force } => commands::train_clf(&cfg, &data, &out, force),
        Command::Normalize { normnet, content, template, alpha, out, force } => {
            commands::normalize(&normnet, &content, &template, alpha, &out, force)
        }
        Command::Calibrate { cfg, normnet, classifier, template, data, out, force } => {
            commands::calibrate(&cfg, &normnet, &classifier, &template, &data, &out, force)
        }
        Command::Evaluate { cfg, suite, train_site, test_site, normnet, pairs, out, force } => match suite {
            Suite::Table3 => commands::evaluate_table3(&cfg, &train_site, &test_site, &out, force),
            Suite::Table2 => commands::evaluate_table2(&cfg, &train_site, &test_site, normnet.as_deref(), pairs, &out, force),
        },
        Command::Eigviz { normnet, content, template, blend_sweep, out, force } => {
            commands::eigviz(&normnet, &content, &template, &blend_sweep, &out, force)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
