mod commands;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "debie", version, about = "Debias word embedding spaces and measure their bias")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Augment a bias specification with nearest neighbours from a similarity space.
    Augment(AugmentArgs),
    /// Fit a chain of debiasing transforms and apply it to a space.
    Debias(DebiasArgs),
    /// Evaluate explicit bias, implicit bias and semantic quality.
    Eval(EvalArgs),
    /// Project a target-language space into a source space and debias it there.
    Transfer(TransferArgs),
    /// Export 2D PCA coordinates of the spec terms.
    Project(ProjectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OovPolicy {
    Skip,
    Error,
}

#[derive(Args, Debug, Clone)]
pub struct SpaceArgs {
    /// Vector format: auto, word2vec or glove.
    #[arg(long, default_value = "auto")]
    pub format: String,
    /// Read only the first N words.
    #[arg(long)]
    pub max_words: Option<usize>,
    /// Try the lowercased form of spec terms missing from the vocabulary.
    #[arg(long)]
    pub lowercase_fallback: bool,
    #[arg(long, value_enum, default_value = "skip")]
    pub oov: OovPolicy,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Initial bias specification (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Similarity-specialized space used to retrieve neighbours.
    #[arg(long)]
    pub sim_space: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub space: SpaceArgs,
}

#[derive(Args, Debug)]
pub struct DebiasArgs {
    #[arg(long)]
    pub space: PathBuf,
    /// Augmented spec (trains on its train split) or a plain spec.
    #[arg(long)]
    pub spec: PathBuf,
    /// Stages in composition order, e.g. "gbdd∘bam" or "gbdd,bam"; the last one runs first.
    #[arg(long)]
    pub chain: String,
    /// Debiased space.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for transform files and the pipeline manifest.
    #[arg(long)]
    pub transforms: PathBuf,
    /// Scale output rows to unit length.
    #[arg(long)]
    pub renormalize: bool,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub input: SpaceArgs,
}

#[derive(Args, Debug, Clone)]
pub struct NetArgs {
    #[arg(long, default_value_t = 5)]
    pub hidden_layers: usize,
    #[arg(long, default_value_t = 300)]
    pub hidden_width: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub space: PathBuf,
    /// Augmented spec (tests on initial terms, trains the SVM on augmentations) or a plain spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated subset of weat,ect,bat,km,svm,sl,ws.
    #[arg(long, default_value = "weat,ect,bat,km,svm,sl,ws")]
    pub metrics: String,
    #[arg(long)]
    pub simlex: Option<PathBuf>,
    #[arg(long)]
    pub wordsim: Option<PathBuf>,
    /// Output prefix; writes PREFIX.tsv and PREFIX.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Label for the space column; defaults to the file stem.
    #[arg(long)]
    pub label: Option<String>,
    /// Seed for the KMeans++ runs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    /// Seed for Monte Carlo permutation sampling.
    #[arg(long)]
    pub permutation_seed: Option<u64>,
    /// Enumerate every bipartition regardless of count.
    #[arg(long)]
    pub exact: bool,
    #[command(flatten)]
    pub input: SpaceArgs,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub src_space: PathBuf,
    #[arg(long)]
    pub tgt_space: PathBuf,
    /// Two-column TSV of (source, target) translations.
    #[arg(long)]
    pub dict: PathBuf,
    /// Pipeline manifest written by `debias`; omit for projection only.
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also save the projection matrix as a transform-style JSON file.
    #[arg(long)]
    pub save_projection: Option<PathBuf>,
    #[arg(long)]
    pub renormalize: bool,
    #[command(flatten)]
    pub input: SpaceArgs,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    /// CSV with columns word,set,pc1,pc2.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub input: SpaceArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut outputs = outputs::Outputs::default();
    let result = match cli.command {
        Command::Augment(a) => commands::augment(&a, &mut outputs),
        Command::Debias(a) => commands::debias(&a, &mut outputs),
        Command::Eval(a) => commands::eval(&a, &mut outputs),
        Command::Transfer(a) => commands::transfer(&a, &mut outputs),
        Command::Project(a) => commands::project(&a, &mut outputs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            outputs.remove_all();
            eprintln!("{}", outputs::error_json(&e));
            ExitCode::from(1)
        }
    }
}
