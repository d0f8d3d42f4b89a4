//! `convctl` subcommands. Logs go to stderr; datasets, checkpoints and
//! transcripts go to files; small JSON reports go to stdout.

pub mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use convctl_core::dataset::Dataset;
use convctl_core::encode::encode_corpus;
use convctl_core::evalgen::{generate_multi_turn, perplexity, LoadedModel, SamplerConfig};
use convctl_core::extract::{
    corpus_stats, extract_all, harvest_references, read_conversations, write_conversations, ConversationPath,
    ExtractionRules, UserReferenceStore,
};
use convctl_core::ingest::{ingest_month, IngestOptions, IngestStats};
use convctl_core::model::{ModelConfig, Variant};
use convctl_core::tokenizer::{train_bpe, Vocabulary};
use convctl_core::train::{train_loop, TrainConfig, TrainPaths};
use convctl_core::Execution;

use crate::config::{pick, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "convctl", version, about = "Reference-conditioned conversation modeling pipeline")]
pub struct Cli {
    /// Pipeline config JSON; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training and sampling seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run data-parallel stages on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse comment dumps into reply forests and report counts.
    Ingest(IngestArgs),
    /// Mine conversations and reference histories from dumps.
    Extract(ExtractArgs),
    /// Train the byte-level BPE vocabulary.
    Tokenize(TokenizeArgs),
    /// Pack conversations into a binary training dataset.
    Encode(EncodeArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score conversations and report perplexity.
    Eval(EvalArgs),
    /// Extend a conversation with sampled turns.
    Sample(SampleArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Corpus summary: conversations, turns, users, reference tuples.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Monthly dump files (.jsonl, .gz or .zst).
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub max_buffered_records: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct RuleFlags {
    #[arg(long)]
    pub min_turns: Option<usize>,
    #[arg(long)]
    pub max_turns: Option<usize>,
    #[arg(long)]
    pub min_karma: Option<i64>,
    #[arg(long)]
    pub min_words: Option<usize>,
    #[arg(long, visible_alias = "max-shared-turns")]
    pub max_shared: Option<usize>,
    #[arg(long, conflicts_with = "include_nsfw")]
    pub exclude_nsfw: bool,
    #[arg(long)]
    pub include_nsfw: bool,
}

impl RuleFlags {
    pub fn apply(&self, base: ExtractionRules) -> ExtractionRules {
        ExtractionRules {
            min_turns: self.min_turns.unwrap_or(base.min_turns),
            max_turns: self.max_turns.unwrap_or(base.max_turns),
            min_karma: self.min_karma.unwrap_or(base.min_karma),
            min_words: self.min_words.unwrap_or(base.min_words),
            max_shared_turns: self.max_shared.unwrap_or(base.max_shared_turns),
            exclude_nsfw: match (self.exclude_nsfw, self.include_nsfw) {
                (true, _) => true,
                (_, true) => false,
                _ => base.exclude_nsfw,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Monthly dump files.
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub rules: RuleFlags,
    #[arg(long)]
    pub references_per_user: Option<usize>,
    /// Output conversations JSONL.
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    /// Output reference store JSONL.
    #[arg(long)]
    pub references: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Output vocabulary file.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Output dataset file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub total_iters: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl TrainFlags {
    pub fn apply(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            total_iters: self.total_iters.unwrap_or(base.total_iters),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            peak_lr: self.peak_lr.unwrap_or(base.peak_lr),
            warmup_fraction: self.warmup_fraction.unwrap_or(base.warmup_fraction),
            grad_clip_norm: self.grad_clip_norm.unwrap_or(base.grad_clip_norm),
            kl_weight: self.kl_weight.unwrap_or(base.kl_weight),
            checkpoint_every: self.checkpoint_every.unwrap_or(base.checkpoint_every),
            ..base
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct SamplerFlags {
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Argmax decoding.
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Seed conversation id; defaults to the first one in the file.
    #[arg(long)]
    pub conversation_id: Option<String>,
    /// Comma-separated target speakers, one per generated turn.
    #[arg(long, value_delimiter = ',', required = true)]
    pub schedule: Vec<String>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    /// Extended conversation, conversations JSONL schema.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-turn log-probabilities; defaults to `<out>.logprobs.jsonl`.
    #[arg(long)]
    pub logprobs_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    /// Session journal; defaults to `<model-dir>/sessions.journal`.
    #[arg(long)]
    pub journal: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    #[arg(long)]
    pub references: Option<PathBuf>,
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn load_conversations(path: &Path) -> anyhow::Result<Vec<ConversationPath>> {
    read_conversations(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// Reference store from `path`, or an empty store when no path is given.
pub fn load_references(path: Option<&Path>) -> anyhow::Result<UserReferenceStore> {
    match path {
        Some(p) => UserReferenceStore::read_jsonl(open(p)?).with_context(|| format!("reading {}", p.display())),
        None => Ok(UserReferenceStore::default()),
    }
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading tokenizer {}", path.display()))
}

fn load_model(dir: &Path) -> anyhow::Result<LoadedModel> {
    LoadedModel::load_dir(dir).with_context(|| format!("loading model from {}", dir.display()))
}

fn print_json<T: serde::Serialize>(value: &T, also: Option<&Path>) -> anyhow::Result<()> {
    let line = serde_json::to_string(value)?;
    if let Some(p) = also {
        let mut f = create(p)?;
        writeln!(f, "{line}")?;
        f.flush()?;
    }
    println!("{line}");
    Ok(())
}

/// Final model config: config file section, then flags, with the vocabulary
/// size taken from the tokenizer when unset.
pub fn resolve_model(base: Option<ModelConfig>, flags: &ModelFlags, vocab_size: usize) -> ModelConfig {
    let mut m = base.unwrap_or_else(|| ModelConfig::new(Variant::Dec, 64, 2, 2, vocab_size));
    if let Some(v) = flags.variant {
        m.variant = v;
    }
    m.hidden_size = flags.hidden_size.unwrap_or(m.hidden_size);
    m.num_layers = flags.num_layers.unwrap_or(m.num_layers);
    m.num_heads = flags.num_heads.unwrap_or(m.num_heads);
    m.max_positions = flags.max_positions.unwrap_or(m.max_positions);
    m.dropout = flags.dropout.unwrap_or(m.dropout);
    m.latent_dim = flags.latent_dim.unwrap_or(m.latent_dim);
    if m.variant == Variant::Vae && m.latent_dim == 0 {
        m.latent_dim = m.hidden_size;
    }
    m.vocab_size = m.vocab_size.max(vocab_size);
    m
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.sampler.seed = seed;
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let paths = cfg.paths.clone();

    match cli.command {
        Command::Ingest(a) => {
            let inputs = if a.inputs.is_empty() { paths.dumps.clone() } else { a.inputs };
            if inputs.is_empty() {
                bail!("no dump files given");
            }
            let mut opts = IngestOptions {
                execution: exec,
                ..IngestOptions::default()
            };
            if let Some(m) = a.max_buffered_records {
                opts.max_buffered_records = m;
            }
            let mut stats = IngestStats::default();
            for p in &inputs {
                let month = ingest_month(p, &opts).with_context(|| format!("ingesting {}", p.display()))?;
                stats.merge(&month.stats);
            }
            print_json(&stats, None)
        }
        Command::Extract(a) => {
            let inputs = if a.inputs.is_empty() { paths.dumps.clone() } else { a.inputs };
            if inputs.is_empty() {
                bail!("no dump files given");
            }
            let rules = a.rules.apply(cfg.extraction);
            rules.validate()?;
            let k = a.references_per_user.unwrap_or(cfg.references_per_user);
            let conv_out = pick(&a.conversations, &paths.conversations, "conversations")?;
            let ref_out = pick(&a.references, &paths.references, "references")?;
            let opts = IngestOptions {
                execution: exec,
                ..IngestOptions::default()
            };
            let mut conversations = Vec::new();
            let mut store = UserReferenceStore::default();
            for p in &inputs {
                let month = ingest_month(p, &opts).with_context(|| format!("ingesting {}", p.display()))?;
                conversations.extend(extract_all(&month.forests, &rules, exec));
                store.merge_top_k(harvest_references(&month.forests, k, exec), k);
            }
            let authors: std::collections::BTreeSet<&str> = conversations
                .iter()
                .flat_map(|c| c.turns.iter().map(|t| t.author.as_str()))
                .collect();
            let store = store.restrict_to(authors);
            let mut w = create(&conv_out)?;
            write_conversations(&conversations, &mut w)?;
            w.flush()?;
            let mut w = create(&ref_out)?;
            store.write_jsonl(&mut w)?;
            w.flush()?;
            tracing::info!(conversations = conversations.len(), users = store.by_author.len(), "extracted");
            print_json(&corpus_stats(&conversations, &store), None)
        }
        Command::Tokenize(a) => {
            let conv_path = pick(&a.conversations, &paths.conversations, "conversations")?;
            let out = pick(&a.tokenizer, &paths.tokenizer, "tokenizer")?;
            let conversations = load_conversations(&conv_path)?;
            let store = load_references(a.references.as_deref().or(paths.references.as_deref()))?;
            let mut corpus: Vec<&str> = conversations
                .iter()
                .flat_map(|c| c.turns.iter().map(|t| t.text.as_str()))
                .collect();
            for tuples in store.by_author.values() {
                for t in tuples {
                    corpus.extend(t.parent.as_deref());
                    corpus.push(&t.reply);
                }
            }
            let vocab = train_bpe(corpus, a.vocab_size.unwrap_or(cfg.vocab_size))?;
            vocab.save(&out)?;
            tracing::info!(size = vocab.size(), path = %out.display(), "tokenizer written");
            Ok(())
        }
        Command::Encode(a) => {
            let conversations = load_conversations(&pick(&a.conversations, &paths.conversations, "conversations")?)?;
            let store = load_references(a.references.as_deref().or(paths.references.as_deref()))?;
            let vocab = load_vocab(&pick(&a.tokenizer, &paths.tokenizer, "tokenizer")?)?;
            let out = pick(&a.dataset, &paths.dataset, "dataset")?;
            let dataset = Dataset {
                vocab_hash: vocab.hash(),
                samples: encode_corpus(&conversations, &store, &vocab, exec),
            };
            dataset.save(&out)?;
            tracing::info!(samples = dataset.samples.len(), path = %out.display(), "dataset written");
            Ok(())
        }
        Command::Train(a) => {
            let tokenizer = pick(&a.tokenizer, &paths.tokenizer, "tokenizer")?;
            let vocab = load_vocab(&tokenizer)?;
            let model = resolve_model(cfg.model.clone(), &a.model, vocab.size());
            let train = a.train.apply(cfg.train.clone());
            let tp = TrainPaths {
                dataset: pick(&a.dataset, &paths.dataset, "dataset")?,
                out_dir: pick(&a.model_dir, &paths.model_dir, "model-dir")?,
                tokenizer: Some(tokenizer),
                resume: a.resume,
            };
            let summary = train_loop(&tp, &model, &train, exec)?;
            let last = summary.metrics.last();
            tracing::info!(
                checkpoint = %summary.final_checkpoint.display(),
                final_loss = last.map_or(f64::NAN, |m| m.loss),
                "training finished"
            );
            Ok(())
        }
        Command::Eval(a) => {
            let model = load_model(&pick(&a.model_dir, &paths.model_dir, "model-dir")?)?;
            let conversations = load_conversations(&pick(&a.conversations, &paths.conversations, "conversations")?)?;
            let store = load_references(a.references.as_deref().or(paths.references.as_deref()))?;
            let report = perplexity(&model, &conversations, &store, exec)?;
            print_json(&report, a.out.as_deref())
        }
        Command::Sample(a) => {
            let model = load_model(&pick(&a.model_dir, &paths.model_dir, "model-dir")?)?;
            let conversations = load_conversations(&pick(&a.conversations, &paths.conversations, "conversations")?)?;
            let store = load_references(a.references.as_deref().or(paths.references.as_deref()))?;
            let seed_conv = match &a.conversation_id {
                Some(id) => conversations
                    .iter()
                    .find(|c| &c.conversation_id == id)
                    .with_context(|| format!("conversation {id:?} not found"))?,
                None => conversations.first().context("conversations file is empty")?,
            };
            let base = cfg.sampler.clone();
            let sampler = SamplerConfig {
                top_p: a.sampler.top_p.unwrap_or(base.top_p),
                temperature: a.sampler.temperature.unwrap_or(base.temperature),
                max_new_tokens: a.sampler.max_new_tokens.unwrap_or(base.max_new_tokens),
                greedy: a.sampler.greedy || base.greedy,
                seed: base.seed,
            };
            let out = generate_multi_turn(&model, seed_conv, &store, &a.schedule, &sampler)?;
            let mut w = create(&a.out)?;
            write_conversations(std::slice::from_ref(&out.conversation), &mut w)?;
            w.flush()?;
            let side = a
                .logprobs_out
                .unwrap_or_else(|| PathBuf::from(format!("{}.logprobs.jsonl", a.out.display())));
            let mut w = create(&side)?;
            for turn in &out.generated {
                let line = serde_json::json!({
                    "author": turn.author,
                    "token_ids": turn.token_ids,
                    "logprobs": turn.logprobs,
                    "cumulative_logprob": turn.cumulative_logprob,
                    "stop": turn.stop,
                });
                writeln!(w, "{line}")?;
            }
            w.flush()?;
            Ok(())
        }
        Command::Serve(a) => {
            let model_dir = pick(&a.model_dir, &paths.model_dir, "model-dir")?;
            let addr = convctl_service::bind_addr()?;
            let state = Arc::new(convctl_service::AppState::open(&model_dir, a.journal)?);
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .context("starting runtime")?;
            rt.block_on(convctl_service::serve(addr, state))?;
            Ok(())
        }
        Command::Stats(a) => {
            let conversations = load_conversations(&pick(&a.conversations, &paths.conversations, "conversations")?)?;
            let store = load_references(a.references.as_deref().or(paths.references.as_deref()))?;
            print_json(&corpus_stats(&conversations, &store), None)
        }
    }
}
