//! `adarag`: build a BM25 index, synthesize training trajectories, run
//! inference and score the results.

mod commands;
mod config;
mod output;

use std::path::PathBuf;

use adarag::inference::InferenceMode;
use adarag::search::SelectionPolicy;
use adarag::synthesis::PairSource;
use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{Ctx, Stage, SynthesizeArgs};
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "adarag", version, about = "Adaptive retrieval-augmented reasoning pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Passage corpus (TSV: id, text, title).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Index snapshot path.
    #[arg(long, global = true)]
    index: Option<PathBuf>,
    /// Question file (JSONL: id, question, answers).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Passages per retrieval.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Maximum number of subqueries per trajectory.
    #[arg(long, global = true)]
    max_depth: Option<usize>,
    /// Search node budget per question.
    #[arg(long, global = true)]
    max_expansions: Option<usize>,
    /// Model call budget per question.
    #[arg(long, global = true)]
    max_model_calls: Option<usize>,
    /// Seed for question sampling and the random selection policy.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Build the BM25 index snapshot from the corpus.
    Index {
        /// Skip malformed corpus lines instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Search for minimal-retrieval trajectories and emit training data.
    Synthesize {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long, value_enum, default_value_t = PolicyArg::Minimal)]
        policy: PolicyArg,
        /// Preference pair source (preference stage only).
        #[arg(long, value_enum, default_value_t = PairsArg::OptimalPath)]
        pairs_from: PairsArg,
        /// Number of questions sampled from the dataset.
        #[arg(long)]
        sample_size: Option<usize>,
        /// Continue from the checkpoint left by an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Output file (default: <out>/<stage>.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Answer the dataset questions.
    Infer {
        #[arg(long, value_enum, default_value_t = ModeArg::Adaptive)]
        mode: ModeArg,
        #[arg(long)]
        sample_size: Option<usize>,
        /// Output file (default: <out>/results.<mode>.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score an inference results file.
    Report {
        /// Results file (default: <out>/results.adaptive.jsonl).
        #[arg(long)]
        results: Option<PathBuf>,
        /// Parametric-only results on the same questions, for boundary metrics.
        #[arg(long)]
        parametric_results: Option<PathBuf>,
        /// JSON report path (default: <results>.report.json).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare best-first search against exhaustive enumeration.
    OracleCheck {
        /// Check this many random synthetic worlds instead of the dataset.
        #[arg(long)]
        worlds: Option<usize>,
    },
    /// Write the bundled demo fixture (corpus, dataset, script, config).
    DemoFixture {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Imitation,
    Preference,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Minimal,
    Most,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairsArg {
    OptimalPath,
    AllNodes,
    SentenceWise,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Adaptive,
    RetrieveAll,
    Parametric,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Command::DemoFixture { out } = &cli.command {
        return commands::demo_fixture(out);
    }

    let g = &cli.global;
    let overrides = Overrides {
        corpus: g.corpus.clone(),
        index: g.index.clone(),
        dataset: g.dataset.clone(),
        output_dir: g.out.clone(),
        k: g.k,
        max_depth: g.max_depth,
        max_expansions: g.max_expansions,
        max_model_calls: g.max_model_calls,
        seed: g.seed,
    };
    let config = RunConfig::load(g.config.as_deref(), &overrides)?;
    let jobs = g
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()).min(8))
        .max(1);
    let ctx = Ctx { config, jobs };

    match cli.command {
        Command::Index { lenient } => commands::index(&ctx, lenient),
        Command::Synthesize {
            stage,
            policy,
            pairs_from,
            sample_size,
            resume,
            output,
        } => {
            let args = SynthesizeArgs {
                stage: match stage {
                    StageArg::Imitation => Stage::Imitation,
                    StageArg::Preference => Stage::Preference,
                },
                policy: match policy {
                    PolicyArg::Minimal => SelectionPolicy::Minimal,
                    PolicyArg::Most => SelectionPolicy::Most,
                    PolicyArg::Random => SelectionPolicy::Random {
                        seed: ctx.config.seeds.policy,
                    },
                },
                pairs_from: match pairs_from {
                    PairsArg::OptimalPath => PairSource::OptimalPath,
                    PairsArg::AllNodes => PairSource::AllNodes,
                    PairsArg::SentenceWise => PairSource::SentenceWise,
                },
                sample_size,
                resume,
                output,
            };
            commands::synthesize_cmd(&ctx, &args)
        }
        Command::Infer {
            mode,
            sample_size,
            output,
        } => {
            let mode = match mode {
                ModeArg::Adaptive => InferenceMode::Adaptive,
                ModeArg::RetrieveAll => InferenceMode::RetrieveEveryStep,
                ModeArg::Parametric => InferenceMode::ParametricOnly,
            };
            commands::infer(&ctx, mode, sample_size, output)
        }
        Command::Report {
            results,
            parametric_results,
            json,
        } => commands::report(&ctx, results, parametric_results, json),
        Command::OracleCheck { worlds } => commands::oracle_check(&ctx, worlds),
        Command::DemoFixture { .. } => unreachable!("handled above"),
    }
}
