mod commands;
mod data;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vkb_core::VkbError;

/// Build and query a virtual knowledge base over entity-linked text.
#[derive(Parser, Debug)]
#[command(name = "vkb", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Pipeline config (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; every stage seed derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel encoding and evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Per-step training metrics as JSON Lines.
    #[arg(long, global = true)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Parameter names or groups to hold fixed (repeatable).
    #[arg(long)]
    pub freeze: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AskMode {
    Lm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Follow,
    Lm,
    LmNoMemory,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic world: vocabularies, passages, KB and questions.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 0: masked-entity pretraining of the entity table.
    PretrainEntity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from these parameters instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Stage 1: contrastive relation-encoder pretraining.
    PretrainRelation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Encode every entity-pair mention into a key-value memory snapshot.
    BuildMemory {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Passages to index (default: the dataset's passages).
        #[arg(long)]
        passages: Option<PathBuf>,
    },
    /// Stage 2: memory-mixed masked-entity training.
    PretrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train without memory mixing.
        #[arg(long)]
        no_mixing: bool,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Finetune relation following on questions, then rekey the memory.
    FinetuneFollow {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        /// Training questions (repeatable; default: the dataset's training splits).
        #[arg(long)]
        questions: Vec<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Rekeyed memory output.
        #[arg(long)]
        memory_out: PathBuf,
        /// Skip questions using these relation names.
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Answer masked questions by relation following.
    Query {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        /// Question file (default: standard input).
        #[arg(long)]
        questions: Option<PathBuf>,
        /// Overrides each question's hop count.
        #[arg(long)]
        hops: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Predict masked entities with memory mixing.
    Ask {
        #[arg(long, value_enum, default_value = "lm")]
        mode: AskMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        hops: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
        /// Treat every topic mention as a separate conjunct.
        #[arg(long)]
        conjunction: bool,
        /// Force the mixing factor to zero.
        #[arg(long)]
        no_memory: bool,
    },
    /// Score questions against the symbolic KB.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Report seen and novel splits for these held-out relation names.
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
        #[arg(long, value_enum, default_value = "follow")]
        mode: EvalMode,
        #[arg(long)]
        topk: Option<usize>,
        /// Per-question records (default: eval-records.jsonl).
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Inspect or extend a memory snapshot.
    Memory {
        #[command(subcommand)]
        action: MemoryCommand,
    },
}

#[derive(Subcommand, Debug)]
pub enum MemoryCommand {
    /// Add entries for pairs in new passages without retraining.
    Inject {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Stats {
        #[arg(long)]
        memory: PathBuf,
    },
    /// Entries as JSON Lines.
    Dump {
        #[arg(long)]
        memory: PathBuf,
        /// Dataset for entity names.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Include key vectors.
        #[arg(long)]
        keys: bool,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<VkbError>() {
            return match e {
                VkbError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_DATA,
                e if e.is_data_error() => EXIT_DATA,
                _ => EXIT_INTERNAL,
            };
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound {
                EXIT_DATA
            } else {
                EXIT_INTERNAL
            };
        }
    }
    EXIT_INTERNAL
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VKB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
