//! Perplexity scoring and nucleus-sampled generation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::encode::{
    assemble_sample, encode_generation_context, encode_reference_history, expand_per_speaker, select_references,
    EncodeError, EncodedSample, Segment,
};
use crate::extract::{ConversationPath, Turn, UserReferenceStore};
use crate::model::{forward, next_token_logits, ForwardOptions, ModelConfig, ModelError, TransformerParams, Variant};
use crate::tensor::Graph;
use crate::tokenizer::{TokenizerError, Vocabulary};
use crate::train::{MODEL_FILE, TOKENIZER_FILE};
use crate::Execution;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to score: no target-speaker tokens")]
    EmptyScoredSet,
    #[error("context of {len} positions exceeds the model limit of {max}; truncate the conversation or start a new one")]
    ContextOverflow { len: usize, max: usize },
    #[error("invalid sampler config: {0}")]
    Sampler(String),
    #[error("tokenizer has {tokenizer} ids but the model vocabulary is {model}")]
    VocabMismatch { tokenizer: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Parameters, config and tokenizer of one trained model.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub config: ModelConfig,
    pub params: TransformerParams<f32>,
    pub vocab: Vocabulary,
}

impl LoadedModel {
    pub fn new(config: ModelConfig, params: TransformerParams<f32>, vocab: Vocabulary) -> Result<Self, EvalError> {
        config.validate()?;
        params.check_against(&config)?;
        if vocab.size() > config.vocab_size {
            return Err(EvalError::VocabMismatch {
                tokenizer: vocab.size(),
                model: config.vocab_size,
            });
        }
        Ok(Self { config, params, vocab })
    }

    pub fn from_checkpoint(ck: &Checkpoint<f32>, vocab: Vocabulary) -> Result<Self, EvalError> {
        ck.require_tokenizer(&vocab.hash())?;
        Self::new(ck.header.model.clone(), ck.params()?, vocab)
    }

    /// Loads `model.ckpt` and `tokenizer.bpe` from a training output directory.
    pub fn load_dir(dir: &Path) -> Result<Self, EvalError> {
        let vocab = Vocabulary::load(&dir.join(TOKENIZER_FILE))?;
        let ck = Checkpoint::<f32>::load(&dir.join(MODEL_FILE))?;
        Self::from_checkpoint(&ck, vocab)
    }

    /// Positions the variant needs for `sample`.
    pub fn positions_needed(&self, sample: &EncodedSample) -> usize {
        match self.config.variant {
            Variant::Dec => sample.len(),
            Variant::Nrc => sample.conv_len,
            Variant::S2s => sample.ref_len.max(sample.conv_len),
            Variant::Vae => sample.ref_len.max(sample.conv_len) + 1,
        }
    }

    fn check_fits(&self, sample: &EncodedSample) -> Result<(), EvalError> {
        let len = self.positions_needed(sample);
        if len > self.config.max_positions {
            return Err(EvalError::ContextOverflow {
                len,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let lz = max + z.ln();
    logits.iter().map(|&v| v as f64 - lz).collect()
}

/// One predicted token of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: u32,
    pub logprob: f64,
    pub scored: bool,
}

/// Log-probability of every predicted token under teacher forcing. The
/// latent of a VAE is its posterior mean.
pub fn token_logprobs(model: &LoadedModel, sample: &EncodedSample) -> Result<Vec<TokenScore>, EvalError> {
    model.check_fits(sample)?;
    let mut g = Graph::<f32>::new();
    let bound = model.params.bind(&mut g, false);
    let fwd = forward(&mut g, &bound, &model.config, sample, &ForwardOptions::default())?;
    let pred = g.value(fwd.predictions);
    Ok(fwd
        .targets
        .iter()
        .zip(&fwd.mask)
        .enumerate()
        .map(|(row, (&token, &m))| TokenScore {
            token,
            logprob: log_softmax(pred.row(row))[token as usize],
            scored: m == 1,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScore {
    pub speaker: String,
    pub logprob: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationScore {
    pub conversation_id: String,
    pub logprob: f64,
    pub tokens: usize,
    /// In order of first appearance.
    pub per_speaker: Vec<SpeakerScore>,
}

/// `log p(c | r)` regrouped by author: each speaker's turns are scored
/// under that speaker's own sample and references, and the terms summed.
pub fn conversation_logprob(
    model: &LoadedModel,
    conv: &ConversationPath,
    store: &UserReferenceStore,
) -> Result<ConversationScore, EvalError> {
    let mut per_speaker = Vec::new();
    for sample in expand_per_speaker(conv, store, &model.vocab) {
        let scores = token_logprobs(model, &sample)?;
        let (logprob, tokens) = scores
            .iter()
            .filter(|s| s.scored)
            .fold((0.0, 0), |(lp, n), s| (lp + s.logprob, n + 1));
        per_speaker.push(SpeakerScore {
            speaker: sample.target_speaker,
            logprob,
            tokens,
        });
    }
    Ok(ConversationScore {
        conversation_id: conv.conversation_id.clone(),
        logprob: per_speaker.iter().map(|s| s.logprob).sum(),
        tokens: per_speaker.iter().map(|s| s.tokens).sum(),
        per_speaker,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerReport {
    pub speaker: String,
    pub token_ppl: f64,
    pub scored_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `exp(-sum log p / scored tokens)`.
    pub token_ppl: f64,
    /// `exp(-(1/|D|) sum_c log p(c | r))`, normalized per conversation.
    pub conversation_ppl: f64,
    pub scored_tokens: usize,
    pub conversations: usize,
    /// Sorted by speaker name.
    pub per_speaker: Vec<SpeakerReport>,
}

/// Builds the report from per-conversation scores, reducing in input order.
pub fn report_from_scores(scores: &[ConversationScore]) -> Result<EvalReport, EvalError> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut by_speaker: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for s in scores {
        total += s.logprob;
        tokens += s.tokens;
        for sp in &s.per_speaker {
            let e = by_speaker.entry(sp.speaker.as_str()).or_default();
            e.0 += sp.logprob;
            e.1 += sp.tokens;
        }
    }
    if tokens == 0 {
        return Err(EvalError::EmptyScoredSet);
    }
    Ok(EvalReport {
        token_ppl: (-total / tokens as f64).exp(),
        conversation_ppl: (-total / scores.len() as f64).exp(),
        scored_tokens: tokens,
        conversations: scores.len(),
        per_speaker: by_speaker
            .into_iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(speaker, (lp, n))| SpeakerReport {
                speaker: speaker.to_string(),
                token_ppl: (-lp / n as f64).exp(),
                scored_tokens: n,
            })
            .collect(),
    })
}

/// Scores every conversation (in parallel when enabled).
pub fn perplexity(
    model: &LoadedModel,
    conversations: &[ConversationPath],
    store: &UserReferenceStore,
    execution: Execution,
) -> Result<EvalReport, EvalError> {
    let scores = execution.try_map(conversations, |c| conversation_logprob(model, c, store))?;
    report_from_scores(&scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Argmax decoding instead of sampling.
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            temperature: 1.0,
            max_new_tokens: 64,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(EvalError::Sampler(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(EvalError::Sampler(format!("temperature {} must be positive", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(EvalError::Sampler("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Ids of the smallest highest-probability prefix whose mass reaches
/// `top_p`, in descending probability order (ties by ascending id).
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    order.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut keep = 0;
    for &id in &order {
        if probs[id as usize] <= 0.0 && keep > 0 {
            break;
        }
        cum += probs[id as usize];
        keep += 1;
        if cum >= top_p {
            break;
        }
    }
    order.truncate(keep);
    order
}

/// Why a turn stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eot,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTurn {
    pub author: String,
    /// Decoded text without the closing EOT.
    pub text: String,
    /// Sampled ids, including the EOT when one was produced.
    pub token_ids: Vec<u32>,
    /// Log-probability of each sampled id under the unmodified model
    /// distribution.
    pub logprobs: Vec<f64>,
    pub cumulative_logprob: f64,
    pub stop: StopReason,
    /// Context layout of the final decoding step.
    pub layout: EncodedSample,
}

fn reference_segment(model: &LoadedModel, conv: &ConversationPath, store: &UserReferenceStore, target: &str) -> Segment {
    if model.config.variant.uses_references() {
        encode_reference_history(&select_references(conv, store, target), &model.vocab)
    } else {
        Segment::default()
    }
}

/// Generation context for `target` with `partial` already emitted.
pub fn generation_sample(
    model: &LoadedModel,
    conv: &ConversationPath,
    store: &UserReferenceStore,
    target: &str,
    partial: &[u32],
) -> Result<EncodedSample, EvalError> {
    let reference = reference_segment(model, conv, store, target);
    let context = encode_generation_context(conv, target, partial, &model.vocab);
    Ok(assemble_sample(reference, context, target, &conv.conversation_id)?)
}

fn choose(model: &LoadedModel, logits: &[f32], sampler: &SamplerConfig, rng: &mut ChaCha8Rng) -> u32 {
    let vocab = &model.vocab;
    let eot = vocab.eot();
    let allowed = |id: usize| id < vocab.size() && (!vocab.is_special(id as u32) || id as u32 == eot);
    if sampler.greedy {
        let mut best = eot;
        let mut best_v = f32::NEG_INFINITY;
        for (id, &v) in logits.iter().enumerate() {
            if allowed(id) && v > best_v {
                best = id as u32;
                best_v = v;
            }
        }
        return best;
    }
    let inv_t = 1.0 / sampler.temperature;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut probs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(id, &v)| if allowed(id) { ((v as f64 - max) * inv_t).exp() } else { 0.0 })
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let support = nucleus_filter(&probs, sampler.top_p);
    let mass: f64 = support.iter().map(|&id| probs[id as usize]).sum();
    let u: f64 = rng.random::<f64>() * mass;
    let mut cum = 0.0;
    for &id in &support {
        cum += probs[id as usize];
        if u < cum {
            return id;
        }
    }
    *support.last().expect("nucleus is never empty")
}

/// Samples the next turn of `target`, re-encoding the full context at every
/// step.
pub fn sample_turn(
    model: &LoadedModel,
    conv: &ConversationPath,
    store: &UserReferenceStore,
    target: &str,
    sampler: &SamplerConfig,
) -> Result<GeneratedTurn, EvalError> {
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let eot = model.vocab.eot();
    let mut ids: Vec<u32> = Vec::new();
    let mut logprobs = Vec::new();
    let mut stop = StopReason::MaxTokens;
    let mut layout = generation_sample(model, conv, store, target, &ids)?;
    model.check_fits(&layout)?;
    for _ in 0..sampler.max_new_tokens {
        let mut g = Graph::<f32>::new();
        let bound = model.params.bind(&mut g, false);
        let fwd = forward(&mut g, &bound, &model.config, &layout, &ForwardOptions::default())?;
        let logits = next_token_logits(&mut g, &fwd)?;
        let id = choose(model, logits.data(), sampler, &mut rng);
        logprobs.push(log_softmax(logits.data())[id as usize]);
        ids.push(id);
        if id == eot {
            stop = StopReason::Eot;
            break;
        }
        let next = generation_sample(model, conv, store, target, &ids)?;
        if model.positions_needed(&next) > model.config.max_positions {
            break;
        }
        layout = next;
    }
    let body: Vec<u32> = ids.iter().copied().filter(|&i| i != eot).collect();
    Ok(GeneratedTurn {
        author: target.to_string(),
        text: model.vocab.decode(&body)?,
        cumulative_logprob: logprobs.iter().sum(),
        token_ids: ids,
        logprobs,
        stop,
        layout,
    })
}

/// Seed of the `step`-th turn of a multi-turn generation.
pub fn turn_seed(seed: u64, step: usize) -> u64 {
    crate::train::mix(seed, step as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTurn {
    pub conversation: ConversationPath,
    pub generated: Vec<GeneratedTurn>,
}

/// Appends one sampled turn per scheduled speaker, each conditioned on that
/// speaker's references and everything generated so far.
pub fn generate_multi_turn(
    model: &LoadedModel,
    conv: &ConversationPath,
    store: &UserReferenceStore,
    schedule: &[String],
    sampler: &SamplerConfig,
) -> Result<MultiTurn, EvalError> {
    let mut conversation = conv.clone();
    let mut generated = Vec::with_capacity(schedule.len());
    for (step, speaker) in schedule.iter().enumerate() {
        let cfg = SamplerConfig {
            seed: turn_seed(sampler.seed, step),
            ..sampler.clone()
        };
        let turn = sample_turn(model, &conversation, store, speaker, &cfg)?;
        conversation.turns.push(Turn {
            comment_id: format!("gen{}", conversation.turns.len()),
            author: speaker.clone(),
            text: turn.text.clone(),
            score: 0,
        });
        generated.push(turn);
    }
    Ok(MultiTurn {
        conversation,
        generated,
    })
}
