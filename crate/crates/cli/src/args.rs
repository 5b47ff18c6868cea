use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pods", version, about = "Pivot-oriented deep selection for multi-turn dialogue comprehension")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. They override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `response_selection` or `mrc`.
    #[arg(long, global = true)]
    pub task: Option<String>,
    /// Pivot selection strategy.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// Number of pivot utterances.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Knowledge items kept per context and per question-option pair.
    #[arg(long = "top-p", global = true)]
    pub top_p: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Any other config key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and a matching config into `--out DIR`.
    GenData {
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        dev: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Filter a triple file into the facts the model would keep.
    BuildKg {
        #[arg(long)]
        triples: Option<PathBuf>,
    },
    /// Train, keeping the best checkpoint on dev.
    Train,
    /// Score a dataset with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write per-example scores here.
        #[arg(long)]
        dump_scores: Option<PathBuf>,
    },
    /// Metrics for a range of pivot counts plus the all-utterance baseline.
    SweepM {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        m_list: Vec<usize>,
        /// Train a fresh model for every point instead of reusing one.
        #[arg(long)]
        train_per_point: bool,
    },
    /// Accuracy for a range of knowledge counts (MRC only).
    SweepK {
        #[arg(long, value_delimiter = ',', default_values_t = vec![30, 60, 90])]
        p_list: Vec<usize>,
    },
    /// Histogram of which last-t utterance best matches each gold response.
    AnalyzePivots {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate one model per selection strategy.
    CompareStrategies {
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
}
