//! `hmd`: the mistake-detection pipeline from raw corpus to report.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "hmd",
    version,
    about = "Human answer-mistake detection for goal-oriented visual dialogue"
)]
pub struct Cli {
    /// Key-value configuration file; flags given on the command line take precedence
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overwrite outputs left by an interrupted or unrecorded run
    #[arg(long, global = true)]
    pub force: bool,
    /// Log more detail to standard error (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a raw corpus and write it in canonical form
    Ingest(IngestArgs),
    /// Keep games by status and target-object size
    Filter(FilterArgs),
    /// Assign a question type to every question
    LabelTypes(LabelTypesArgs),
    /// Turn-position and question-type statistics of labeled mistakes
    Analyze(AnalyzeArgs),
    /// Build the flipped-answer synthetic corpus
    Synth(SynthArgs),
    /// Pretrain every architecture on the synthetic corpus
    Pretrain(PretrainArgs),
    /// Cross-validate the pretrained models on the human corpus
    Finetune(FinetuneArgs),
    /// Assemble the result tables from fine-tuning runs
    Eval(EvalArgs),
    /// Build few-shot requests for a vision-language model and score its replies
    #[command(subcommand)]
    Prompts(PromptsCommand),
    /// Compare analytic and finite-difference gradients of every architecture
    Gradcheck(GradcheckArgs),
    /// Write the bundled fixture corpora
    #[command(subcommand)]
    Fixture(FixtureCommand),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw corpus, one JSON game per line (.gz accepted)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Abort on the first invalid record instead of skipping it
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatusFilter {
    Any,
    Success,
    Failure,
    Incomplete,
}

impl std::fmt::Display for StatusFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

impl std::str::FromStr for StatusFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <StatusFilter as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Minimum target box area as a fraction of the image area [default: 0.01]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Game status to keep [default: any]
    #[arg(long)]
    pub status: Option<StatusFilter>,
}

#[derive(Debug, Args)]
pub struct LabelTypesArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// One JSON line per question: game_id, turn, question, qtype
    #[arg(long)]
    pub output: PathBuf,
    /// Keyword table replacing the built-in one
    #[arg(long)]
    pub keywords: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Corpus with mistake labels
    #[arg(long)]
    pub input: PathBuf,
    /// JSON analysis report
    #[arg(long)]
    pub output: PathBuf,
    /// Histogram bins over the normalized turn [default: 10]
    #[arg(long)]
    pub bins: Option<usize>,
    /// Monte Carlo replicates for the Fisher test [default: 2000]
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Seed of the Monte Carlo Fisher test [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub keywords: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Successful dialogues to flip
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Probability of flipping each Yes/No answer [default: 0.15]
    #[arg(long)]
    pub p_flip: Option<f64>,
    /// Minimum flips per game [default: 0]
    #[arg(long)]
    pub min_flips: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// [default: 64]
    #[arg(long)]
    pub word_emb_dim: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    pub lstm_hidden_dim: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub answer_emb_dim: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub qtype_emb_dim: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub turn_emb_dim: Option<usize>,
    /// Hidden widths of the fusion network, comma-separated [default: 256]
    #[arg(long)]
    pub mlp_m_hidden: Option<config::Widths>,
    /// [default: 128]
    #[arg(long)]
    pub q_mean_dim: Option<usize>,
    /// Hidden widths of the classifier, comma-separated [default: 64]
    #[arg(long)]
    pub mlp_c_hidden: Option<config::Widths>,
    /// Decision threshold on the mistake probability [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// [default: 0.0001]
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    /// [default: 0.00001]
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    /// Cross-validation folds [default: 4]
    #[arg(long)]
    pub k: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// [default: 20]
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Epochs without improvement before stopping [default: 3]
    #[arg(long)]
    pub patience: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// none, class-balance or qtype-balance [default: qtype-balance]
    #[arg(long)]
    pub oversample: Option<String>,
    /// Train and validation fractions of the synthetic corpus [default: 0.7,0.15]
    #[arg(long)]
    pub pretrain_split: Option<config::Pair>,
    /// Share of same-image games held out for testing [default: 0.25]
    #[arg(long)]
    pub same_image_test_fraction: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub keywords: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Labeled synthetic corpus
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Feature store with image and crop vectors
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Bundle of pretrained checkpoints
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Bundle written by `hmd pretrain`
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Human corpus with mistake labels
    #[arg(long)]
    pub human: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Run records, one per model
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run records written by `hmd finetune`
    #[arg(long)]
    pub runs: Vec<PathBuf>,
    /// JSON report
    #[arg(long)]
    pub output: PathBuf,
    /// Also render the tables as text
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Exit with status 3 when a table cell is empty
    #[arg(long)]
    pub require_complete: bool,
}

#[derive(Debug, Subcommand)]
pub enum PromptsCommand {
    /// Build one few-shot request per query and prompt type
    Build(PromptsBuildArgs),
    /// Score model replies against the request labels
    Score(PromptsScoreArgs),
}

#[derive(Debug, Args)]
pub struct PromptsBuildArgs {
    /// Labeled games to ask about
    #[arg(long)]
    pub queries: PathBuf,
    /// Labeled games to draw in-context examples from [default: the queries]
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// JSON lines of requests
    #[arg(long)]
    pub output: PathBuf,
    /// Prompt types, comma-separated, or `all` [default: all]
    #[arg(long)]
    pub types: Option<String>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub keywords: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PromptsScoreArgs {
    #[arg(long)]
    pub requests: PathBuf,
    /// JSON lines of `{"id", "text"}`
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds per architecture [default: 20]
    #[arg(long)]
    pub seeds: Option<u64>,
    /// First seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional JSON report
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum FixtureCommand {
    /// 365 labeled dialogues with 431 mistakes, 231 on the final turn
    Turns(FixtureTurnsArgs),
    /// Small corpora whose crop features reveal the mistake label
    Planted(FixturePlantedArgs),
    /// Deterministic stand-in features for every key a corpus references
    PseudoFeatures(PseudoFeaturesArgs),
}

#[derive(Debug, Args)]
pub struct FixtureTurnsArgs {
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct FixturePlantedArgs {
    #[arg(long)]
    pub synthetic: PathBuf,
    #[arg(long)]
    pub human: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// [default: 17]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PseudoFeaturesArgs {
    /// Corpora whose feature keys are filled; repeatable
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Vector length [default: 64]
    #[arg(long)]
    pub dim: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
