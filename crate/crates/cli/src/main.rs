mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "stylemask", version, about = "Reference-driven attribute transfer in style space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank style channels per semantic region and pick each attribute's top-k.
    Preselect {
        #[arg(long)]
        config: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the mask matrix and write a checkpoint.
    Train(TrainArgs),
    /// Edit a source toward a reference with a checkpoint.
    Edit(EditArgs),
    /// Report attribute distances and background change for an edited image.
    Measure(MeasureArgs),
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the config file and the environment.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path, rewritten at every checkpoint interval and at the end.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long, conflicts_with_all = ["preselection", "no_preselect"])]
    pub resume: Option<PathBuf>,
    /// Use a saved pre-selection instead of running one.
    #[arg(long)]
    pub preselection: Option<PathBuf>,
    #[arg(long)]
    pub no_preselect: bool,
    /// JSON-lines loss log; appended to when resuming.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lambda_bg: Option<f64>,
}

#[derive(Args)]
pub struct EditArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "source_style")]
    pub source_seed: Option<u64>,
    #[arg(long, conflicts_with = "source_seed")]
    pub source_style: Option<PathBuf>,
    #[arg(long, required_unless_present = "reference_style")]
    pub reference_seed: Option<u64>,
    #[arg(long, conflicts_with = "reference_seed")]
    pub reference_style: Option<PathBuf>,
    /// Comma-separated target attributes, edited together.
    #[arg(long, value_delimiter = ',', required_unless_present = "sequential")]
    pub targets: Vec<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Edit once per intensity; without values, the configured grid.
    #[arg(long, value_delimiter = ',', num_args = 0.., conflicts_with = "sequential")]
    pub sweep: Option<Vec<f64>>,
    /// Ordered steps `attr[+attr]:delta`, comma-separated, each starting
    /// from the previous result.
    #[arg(long, value_delimiter = ',', conflicts_with = "targets")]
    pub sequential: Option<Vec<String>>,
    /// Directory for PNGs and style codes.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct MeasureArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<String>,
    #[arg(long)]
    pub source_seed: Option<u64>,
    #[arg(long)]
    pub source_style: Option<PathBuf>,
    #[arg(long)]
    pub source_image: Option<PathBuf>,
    #[arg(long)]
    pub reference_seed: Option<u64>,
    #[arg(long)]
    pub reference_style: Option<PathBuf>,
    #[arg(long)]
    pub reference_image: Option<PathBuf>,
    #[arg(long)]
    pub edited_style: Option<PathBuf>,
    #[arg(long)]
    pub edited_image: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Preselect {
            config,
            out,
            iterations,
            seed,
        } => commands::preselect(&config, out.as_deref(), iterations, seed),
        Command::Train(args) => commands::train(&args),
        Command::Edit(args) => commands::edit(&args),
        Command::Measure(args) => commands::measure(&args),
        Command::Serve {
            config,
            checkpoint,
            port,
            cache_dir,
        } => commands::serve(&config, &checkpoint, port, cache_dir),
    }
}
