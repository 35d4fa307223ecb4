//! `dexlat`: the batch pipeline from demonstrations to rollout tables.

mod commands;
mod log;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dexlat::ErrorCategory;

#[derive(Parser, Debug)]
#[command(name = "dexlat", version, about = "Latent-action behavior cloning pipeline for a 16-DoF hand")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Run without the thread pool.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Output directory; defaults to `<runs_dir>/<config digest>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Task,
    Prior,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Latent,
    Direct,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug, Clone, Default)]
pub struct WindowFlags {
    /// Policy input window L.
    #[arg(long)]
    pub l: Option<usize>,
    /// Shift n between input and target windows.
    #[arg(long)]
    pub n_shift: Option<usize>,
    /// Chunk length N.
    #[arg(long)]
    pub chunk: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus (task demonstrations or prior motion).
    GenData {
        #[arg(long, value_enum, default_value = "task")]
        role: Role,
        #[arg(long)]
        count: Option<usize>,
        /// Also write the fingertip/wrist human frames each demo implies.
        #[arg(long)]
        human: bool,
        /// Output directory; `<run dir>/data/<role>` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retarget human frame files to robot demonstrations.
    Retarget {
        /// Human frame files, or directories holding `*.human.jsonl`.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip Kalman filtering of wrist positions.
        #[arg(long)]
        no_kalman: bool,
    },
    /// Smooth (and optionally time-align) a corpus.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        dtw: bool,
    },
    /// Train the subtrajectory VAE on a corpus.
    TrainVae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop once held-out MSE falls below this.
        #[arg(long)]
        stop_mse: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one VAE per (N, D) pair and tabulate held-out error.
    GridVae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![5, 15, 30])]
        ns: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 10, 20])]
        ds: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a latent or direct chunking policy.
    TrainPolicy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// VAE checkpoint (latent mode).
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        window: WindowFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one closed-loop rollout and write its trace.
    Rollout {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Task demos defining the start state and goal.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Actuation horizon H.
        #[arg(long)]
        horizon: Option<usize>,
        #[command(flatten)]
        window: WindowFlags,
        #[arg(long, value_enum)]
        noise: Option<OnOff>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Latent-vs-direct study over noise settings, seeds and a grid.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',')]
        methods: Vec<Mode>,
        #[arg(long, value_enum, value_delimiter = ',')]
        noise: Vec<OnOff>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Sweep training epochs (snapshots of one run per method).
        #[arg(long, value_delimiter = ',', conflicts_with = "demos_grid")]
        epochs_grid: Vec<usize>,
        /// Sweep the number of training demos.
        #[arg(long, value_delimiter = ',')]
        demos_grid: Vec<usize>,
    },
    /// Check the configuration and, if given, a corpus.
    Validate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print checkpoint metadata and tensor shapes.
    Inspect { checkpoint: PathBuf },
}

fn exit_code(c: ErrorCategory) -> u8 {
    match c {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Constraint => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            log::error(&e.to_string(), &format!("{cat:?}").to_lowercase());
            ExitCode::from(exit_code(cat))
        }
    }
}
