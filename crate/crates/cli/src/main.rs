//! `cmam`: train and apply the convolutional multi-attention aspect model.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cmam", version, about = "Unsupervised aspect and aspect-term extraction")]
#[command(after_help = config::keys_help())]
pub struct Cli {
    /// Flat key=value file; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default 1). Results do not depend on this value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary and train skip-gram word vectors on a corpus.
    Embed(EmbedArgs),
    /// Train the aspect model; writes one checkpoint per epoch and a loss log.
    Train(TrainArgs),
    /// Predict (aspect, term) pairs for every line of a text file.
    Predict(PredictArgs),
    /// Score predictions against gold pairs.
    Eval(EvalArgs),
    /// Generate the synthetic restaurant-toy corpus with gold labels.
    Synth(SynthArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// List representative words per aspect and write a mapping file.
    Aspects(AspectsArgs),
}

#[derive(Debug, Args)]
pub struct TokenArgs {
    /// Stop-word list, one word per line (default: built-in English list).
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Corpus, one sentence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output word2vec text file.
    #[arg(long)]
    pub out_embeddings: PathBuf,
    /// Output vocabulary file.
    #[arg(long)]
    pub out_vocab: PathBuf,
    #[command(flatten)]
    pub tokens: TokenArgs,
    /// Vocabulary size including the unknown token (default 9000).
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Minimum token count to enter the vocabulary (default 2).
    #[arg(long)]
    pub min_count: Option<u64>,
    /// Embedding size (default 200).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Context window on each side (default 10).
    #[arg(long)]
    pub window: Option<usize>,
    /// Negative samples per context pair (default 20).
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Passes over the corpus (default 5).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate, decayed linearly (default 0.025).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Subtract the mean word vector after training (default off).
    #[arg(long)]
    pub center: bool,
    /// Random seed (default 1).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelInputs {
    /// Vocabulary file written by `embed`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// word2vec text file aligned to the vocabulary.
    #[arg(long)]
    pub embeddings: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus, one sentence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Directory for epoch-N.ckpt checkpoints and loss.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub tokens: TokenArgs,
    /// Sentences with fewer tokens are skipped (default 2).
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Number of aspects K, initialized by k-means (default 30).
    #[arg(long)]
    pub aspects: Option<usize>,
    /// Comma-separated odd kernel lengths (default 1,3,5).
    #[arg(long)]
    pub kernels: Option<String>,
    /// Epochs (default 5).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size (default 64).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate (default 0.0005).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam beta1 (default 0.9).
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam beta2 (default 0.999).
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam epsilon (default 1e-8).
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// Orthogonality weight; 0 disables the penalty (default 0.5).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Orthogonality offset s (default 0.3).
    #[arg(long)]
    pub ortho_offset: Option<f64>,
    /// Negative sentences per sample (default 20).
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Train without the aspect-spreading loss.
    #[arg(long)]
    pub no_tlas: bool,
    /// Random seed for initialization, shuffling and negatives (default 1).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferenceArgs {
    /// Quantile of the sentence's aspect weights used as threshold (default 0.9).
    #[arg(long)]
    pub q_as: Option<f64>,
    /// Maximum aspects per sentence (default 2).
    #[arg(long)]
    pub n_as: Option<usize>,
    /// Quantile of an aspect's word weights used as threshold (default 0.9).
    #[arg(long)]
    pub q_at: Option<f64>,
    /// Maximum term words per aspect (default 3).
    #[arg(long)]
    pub n_at: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Sentences to label, one per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
    /// Mapping file used to fill in aspect labels.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[command(flatten)]
    pub tokens: TokenArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions JSON-lines from `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Gold JSON-lines, aligned line by line with the predictions.
    #[arg(long)]
    pub gold: PathBuf,
    /// Aspect-to-label mapping file.
    #[arg(long)]
    pub mapping: PathBuf,
    /// Text report path (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for corpus.txt, gold.jsonl and topics.tsv.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of sentences (default 10000).
    #[arg(long)]
    pub sentences: Option<usize>,
    /// Random seed (default 1).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances to check (default 100).
    #[arg(long)]
    pub instances: Option<usize>,
    /// Finite-difference step (default 1e-4).
    #[arg(long)]
    pub step: Option<f64>,
    /// Maximum relative error (default 1e-4).
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Random seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AspectsArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Representative words per aspect (default 10).
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Topic file (`name<TAB>core tokens`); labels aspects by word overlap
    /// instead of leaving them "omitted".
    #[arg(long)]
    pub topics: Option<PathBuf>,
    /// Mapping file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
