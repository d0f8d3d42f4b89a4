//! Maximum-likelihood training: warmup + cosine schedule, clipped Adam,
//! seeded epoch shuffling and resumable checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, TrainState};
use crate::dataset::{Dataset, DatasetError};
use crate::encode::EncodedSample;
use crate::model::{forward, Forward, ForwardOptions, LatentNoise, ModelConfig, ModelError, TransformerParams, Variant};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};
use crate::Execution;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite gradient in {name}")]
    NonFiniteGrad { name: String },
    #[error("gradient for unknown or misshapen parameter {0}")]
    GradShape(String),
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: u64 },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("token id {id} outside model vocabulary of {vocab}")]
    VocabMismatch { id: u32, vocab: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub kl_weight: f64,
    /// Write `ckpt-<iter>.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 1000,
            batch_size: 8,
            peak_lr: 1.5e-4,
            warmup_fraction: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 0,
            kl_weight: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return err("warmup_fraction must be in (0, 1)");
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 {
            return err("peak_lr must be positive");
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must be in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.grad_clip_norm < 0.0 || self.kl_weight < 0.0 {
            return err("adam_eps must be positive; grad_clip_norm and kl_weight non-negative");
        }
        Ok(())
    }

    pub fn warmup_iters(&self) -> u64 {
        (self.warmup_fraction * self.total_iters as f64).ceil() as u64
    }
}

/// Linear warmup from 0 to `peak_lr` over `W = ceil(warmup_fraction * total)`
/// iterations, then cosine decay to 0 at `total_iters`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_iters;
    let w = cfg.warmup_iters();
    let peak = cfg.peak_lr;
    if total == 0 {
        return 0.0;
    }
    if iter < w {
        return peak * iter as f64 / w as f64;
    }
    if total <= w {
        return peak;
    }
    let progress = (iter.min(total) - w) as f64 / (total - w) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &TransformerParams<T>) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One bias-corrected Adam update after global-norm clipping. Parameters
/// without a gradient entry are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut TransformerParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats, TrainError> {
    let mut sq = 0.0;
    for (name, g) in grads {
        let p = params
            .tensors
            .get(name)
            .filter(|p| p.shape() == g.shape())
            .ok_or_else(|| TrainError::GradShape(name.clone()))?;
        debug_assert_eq!(p.shape(), g.shape());
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGrad { name: name.clone() });
        }
        sq += g.sum_of_squares();
    }
    let grad_norm = sq.sqrt();
    let clip = cfg.grad_clip_norm;
    let clipped = clip > 0.0 && grad_norm > clip;
    let factor = if clipped { clip / grad_norm } else { 1.0 };

    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.tensors.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi.as_f64() * factor;
            let mn = b1 * mi.as_f64() + (1.0 - b1) * gi;
            let vn = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
            *mi = T::from_f64(mn);
            *vi = T::from_f64(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.adam_eps);
            *pi = T::from_f64(pi.as_f64() - update);
        }
    }
    Ok(StepStats { grad_norm, clipped })
}

/// Sample order for `epoch`, shuffled by a generator seeded from
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch));
    order.shuffle(&mut rng);
    order
}

/// Sample indices of every batch in `epoch`; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    epoch_order(n, seed, epoch)
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Batch indices used at optimizer step `iter` (0-based).
pub fn batch_for_iter(n: usize, batch_size: usize, seed: u64, iter: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size.max(1)).max(1) as u64;
    let mut batches = make_batches(n, batch_size, seed, iter / per_epoch);
    batches.swap_remove((iter % per_epoch) as usize)
}

/// Row-major padded view of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub width: usize,
    pub lengths: Vec<usize>,
    pub token_ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    /// 1 for real tokens, 0 for padding; padded keys are never attended.
    pub attention_mask: Vec<u8>,
}

impl PaddedBatch {
    pub fn pad_count(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 0).count()
    }
}

/// Pads every sample to the batch maximum with `pad_id`, zero loss weight
/// and zero attention weight.
pub fn pad_batch(samples: &[&EncodedSample], pad_id: u32) -> PaddedBatch {
    let width = samples.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = PaddedBatch {
        width,
        lengths: Vec::with_capacity(samples.len()),
        token_ids: Vec::with_capacity(width * samples.len()),
        loss_mask: Vec::with_capacity(width * samples.len()),
        attention_mask: Vec::with_capacity(width * samples.len()),
    };
    for s in samples {
        let pad = width - s.len();
        out.lengths.push(s.len());
        out.token_ids.extend(&s.token_ids);
        out.token_ids.extend(std::iter::repeat_n(pad_id, pad));
        out.loss_mask.extend(&s.loss_mask);
        out.loss_mask.extend(std::iter::repeat_n(0, pad));
        out.attention_mask.extend(std::iter::repeat_n(1, s.len()));
        out.attention_mask.extend(std::iter::repeat_n(0, pad));
    }
    out
}

/// Loss terms of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub nll: Var,
    pub kl: Option<Var>,
}

/// Masked mean cross-entropy over the target speaker's tokens, plus
/// `kl_weight * KL(N(mu, sigma^2) || N(0, I))` when the model has a latent.
pub fn loss_for<T: Scalar>(g: &mut Graph<T>, fwd: &Forward, kl_weight: f64) -> Result<LossVars, TensorError> {
    let weights: Vec<T> = fwd.mask.iter().map(|&m| T::from_f64(m as f64)).collect();
    let nll = g.cross_entropy(fwd.predictions, &fwd.targets, &weights)?;
    let Some((mu, logvar)) = fwd.latent else {
        return Ok(LossVars { total: nll, nll, kl: None });
    };
    let kl = gaussian_kl(g, mu, logvar)?;
    let weighted = g.scale(kl, T::from_f64(kl_weight))?;
    let total = g.add(nll, weighted)?;
    Ok(LossVars {
        total,
        nll,
        kl: Some(kl),
    })
}

/// `-0.5 * sum(1 + logvar - mu^2 - exp(logvar))`.
pub fn gaussian_kl<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var, TensorError> {
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar)?;
    let a = g.add_scalar(logvar, T::one())?;
    let a = g.sub(a, mu2)?;
    let a = g.sub(a, var)?;
    let s = g.sum(a)?;
    g.scale(s, T::from_f64(-0.5))
}

/// splitmix64 finalizer over a pair, for deriving independent seeds.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and parameter gradients of one sample.
#[derive(Debug, Clone)]
pub struct SampleGrad<T> {
    pub loss: f64,
    pub kl: f64,
    pub tokens: usize,
    pub grads: Vec<Tensor<T>>,
}

/// Forward + backward for one sample. `None` when the sample has no scored
/// tokens.
pub fn sample_gradients<T: Scalar>(
    params: &TransformerParams<T>,
    model: &ModelConfig,
    sample: &EncodedSample,
    opts: &ForwardOptions,
    kl_weight: f64,
) -> Result<Option<SampleGrad<T>>, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let fwd = forward(&mut g, &bound, model, sample, opts)?;
    let loss = match loss_for(&mut g, &fwd, kl_weight) {
        Ok(l) => l,
        Err(TensorError::EmptyMask) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let nll = g.value(loss.nll).item().as_f64();
    let kl = loss.kl.map_or(0.0, |k| g.value(k).item().as_f64());
    let mut grads = g.backward(loss.total)?;
    let grads = bound
        .iter()
        .map(|(_, v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    Ok(Some(SampleGrad {
        loss: nll,
        kl,
        tokens: fwd.mask.iter().filter(|&&m| m == 1).count(),
        grads,
    }))
}

/// Mean loss and averaged gradients over a batch.
#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    /// Mean masked cross-entropy over scored samples.
    pub loss: f64,
    pub kl: f64,
    pub tokens: usize,
    pub scored: usize,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Per-sample gradients (in parallel when enabled) reduced in input order.
/// `noise_seed(i)` picks the latent noise for the `i`-th sample.
pub fn batch_gradients<T: Scalar>(
    params: &TransformerParams<T>,
    model: &ModelConfig,
    samples: &[&EncodedSample],
    kl_weight: f64,
    noise: impl Fn(usize) -> ForwardOptions + Sync,
    execution: Execution,
) -> Result<Option<BatchGrad<T>>, ModelError> {
    let indexed: Vec<(usize, &EncodedSample)> = samples.iter().copied().enumerate().collect();
    let results = execution.try_map(&indexed, |(i, s)| sample_gradients(params, model, s, &noise(*i), kl_weight))?;
    let mut acc: Option<Vec<Tensor<T>>> = None;
    let (mut loss, mut kl, mut tokens, mut scored) = (0.0, 0.0, 0, 0usize);
    for (r, (_, s)) in results.into_iter().zip(&indexed) {
        let Some(r) = r else {
            tracing::warn!(conversation = %s.conversation_id, target = %s.target_speaker, "sample has no scored tokens; skipped");
            continue;
        };
        loss += r.loss;
        kl += r.kl;
        tokens += r.tokens;
        scored += 1;
        match acc.as_mut() {
            None => acc = Some(r.grads),
            Some(a) => {
                for (a, g) in a.iter_mut().zip(&r.grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x = *x + y);
                }
            }
        }
    }
    let Some(acc) = acc else { return Ok(None) };
    let inv = T::from_f64(1.0 / scored as f64);
    let grads = params
        .tensors
        .keys()
        .cloned()
        .zip(acc)
        .map(|(k, mut t)| {
            t.data_mut().iter_mut().for_each(|x| *x = *x * inv);
            (k, t)
        })
        .collect();
    Ok(Some(BatchGrad {
        loss: loss / scored as f64,
        kl: kl / scored as f64,
        tokens,
        scored,
        grads,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub kl: f64,
    pub tokens_per_sec: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iter,lr,loss,kl,tokens_per_sec";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.1}",
            self.iter, self.lr, self.loss, self.kl, self.tokens_per_sec
        )
    }
}

/// Owns the single mutable parameter copy and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: TransformerParams<f32>,
    pub adam: AdamState<f32>,
    pub execution: Execution,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig, execution: Execution) -> Result<Self, TrainError> {
        config.validate()?;
        let params = TransformerParams::init(&model, config.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            model,
            config,
            params,
            adam,
            execution,
        })
    }

    /// Restores parameters, moments and the step counter. `config` may
    /// extend `total_iters`; the seed must match the original run.
    pub fn resume(ck: &Checkpoint<f32>, config: TrainConfig, execution: Execution) -> Result<Self, TrainError> {
        config.validate()?;
        let params = ck.params()?;
        let state = ck
            .header
            .train_state
            .clone()
            .ok_or_else(|| TrainError::Config("checkpoint carries no training state".into()))?;
        if state.seed != config.seed {
            return Err(TrainError::Config(format!(
                "checkpoint seed {} differs from configured seed {}",
                state.seed, config.seed
            )));
        }
        let moments = |prefix: &str| -> Result<BTreeMap<String, Tensor<f32>>, TrainError> {
            params
                .tensors
                .keys()
                .map(|k| {
                    ck.tensors
                        .get(&format!("{prefix}{k}"))
                        .cloned()
                        .map(|t| (k.clone(), t))
                        .ok_or_else(|| TrainError::Config(format!("checkpoint lacks {prefix}{k}")))
                })
                .collect()
        };
        let adam = AdamState {
            m: moments(ADAM_M)?,
            v: moments(ADAM_V)?,
            t: state.iteration,
        };
        Ok(Self {
            model: ck.header.model.clone(),
            config,
            params,
            adam,
            execution,
        })
    }

    /// Completed optimizer steps.
    pub fn iteration(&self) -> u64 {
        self.adam.t
    }

    pub fn checkpoint(&self, tokenizer_hash: &str) -> Checkpoint<f32> {
        let mut ck = Checkpoint::new(self.model.clone(), tokenizer_hash.to_string(), &self.params);
        for (k, t) in &self.adam.m {
            ck.tensors.insert(format!("{ADAM_M}{k}"), t.clone());
        }
        for (k, t) in &self.adam.v {
            ck.tensors.insert(format!("{ADAM_V}{k}"), t.clone());
        }
        ck.header.train_state = Some(TrainState {
            iteration: self.adam.t,
            seed: self.config.seed,
        });
        ck
    }

    fn forward_options(&self, iter: u64, slot: usize) -> ForwardOptions {
        let base = mix(mix(self.config.seed, iter), slot as u64);
        ForwardOptions {
            noise: if self.model.variant == Variant::Vae {
                LatentNoise::Seeded(base)
            } else {
                LatentNoise::Mean
            },
            dropout_seed: (self.model.dropout > 0.0).then(|| mix(base, 0xD50)),
        }
    }

    /// One optimizer step on the batch scheduled for the current iteration.
    pub fn step(&mut self, samples: &[EncodedSample]) -> Result<MetricsRow, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let start = Instant::now();
        let iter = self.adam.t;
        let idx = batch_for_iter(samples.len(), self.config.batch_size, self.config.seed, iter);
        let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &samples[i]).collect();
        let lr = lr_at(iter + 1, &self.config);
        let grads = batch_gradients(
            &self.params,
            &self.model,
            &batch,
            self.config.kl_weight,
            |slot| self.forward_options(iter, slot),
            self.execution,
        )?;
        let Some(grads) = grads else {
            // Nothing scoreable: advance the schedule without moving weights.
            self.adam.t += 1;
            return Ok(MetricsRow {
                iter: iter + 1,
                lr,
                loss: f64::NAN,
                kl: 0.0,
                tokens_per_sec: 0.0,
            });
        };
        if !grads.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iter });
        }
        adam_step(&mut self.params, &grads.grads, &mut self.adam, lr, &self.config)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        Ok(MetricsRow {
            iter: iter + 1,
            lr,
            loss: grads.loss,
            kl: grads.kl,
            tokens_per_sec: grads.tokens as f64 / secs,
        })
    }

    /// Steps until `total_iters`, calling `on_step` after each one.
    pub fn run<F>(&mut self, samples: &[EncodedSample], mut on_step: F) -> Result<Vec<MetricsRow>, TrainError>
    where
        F: FnMut(&Trainer, &MetricsRow) -> Result<(), TrainError>,
    {
        check_vocab(samples, self.model.vocab_size)?;
        let mut rows = Vec::new();
        while self.adam.t < self.config.total_iters {
            let row = self.step(samples)?;
            on_step(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

fn check_vocab(samples: &[EncodedSample], vocab: usize) -> Result<(), TrainError> {
    for s in samples {
        if let Some(&id) = s.token_ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(TrainError::VocabMismatch { id, vocab });
        }
    }
    Ok(())
}

/// Inputs and outputs of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Copied beside the checkpoints so the directory is self-contained.
    pub tokenizer: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_CONFIG_FILE: &str = "train_config.json";
pub const TOKENIZER_FILE: &str = "tokenizer.bpe";

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub metrics: Vec<MetricsRow>,
}

/// Trains on an encoded dataset file, writing `model.ckpt`, periodic
/// `ckpt-<iter>.ckpt`, `metrics.csv` and `train_config.json` to `out_dir`.
pub fn train_loop(
    paths: &TrainPaths,
    model: &ModelConfig,
    config: &TrainConfig,
    execution: Execution,
) -> Result<TrainSummary, TrainError> {
    let dataset = Dataset::load(&paths.dataset)?;
    if dataset.samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let out = &paths.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    let mut trainer = match &paths.resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            ck.require_tokenizer(&dataset.vocab_hash)?;
            if &ck.header.model != model {
                return Err(TrainError::Config("model config differs from the resumed checkpoint".into()));
            }
            Trainer::resume(&ck, config.clone(), execution)?
        }
        None => {
            model.validate()?;
            Trainer::new(model.clone(), config.clone(), execution)?
        }
    };

    let run_cfg = RunConfig {
        model: model.clone(),
        train: config.clone(),
    };
    let cfg_path = out.join(RUN_CONFIG_FILE);
    let json = serde_json::to_string_pretty(&run_cfg).expect("config serializes");
    std::fs::write(&cfg_path, json + "\n").map_err(io_err(&cfg_path))?;
    if let Some(tok) = &paths.tokenizer {
        let dst = out.join(TOKENIZER_FILE);
        if tok != &dst {
            std::fs::copy(tok, &dst).map_err(io_err(&dst))?;
        }
    }

    let metrics_path = out.join(METRICS_FILE);
    let fresh = paths.resume.is_none() || !metrics_path.exists();
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    if fresh {
        writeln!(metrics, "{}", MetricsRow::CSV_HEADER).map_err(io_err(&metrics_path))?;
    }

    let hash = dataset.vocab_hash.clone();
    let every = config.checkpoint_every;
    let rows = trainer.run(&dataset.samples, |t, row| {
        writeln!(metrics, "{}", row.to_csv()).map_err(io_err(&metrics_path))?;
        if row.iter % 100 == 0 || row.iter == t.config.total_iters {
            tracing::info!(iter = row.iter, loss = row.loss, lr = row.lr, "train");
        }
        if every > 0 && row.iter % every == 0 {
            t.checkpoint(&hash).save(&out.join(format!("ckpt-{}.ckpt", row.iter)))?;
        }
        Ok(())
    })?;
    metrics.flush().map_err(io_err(&metrics_path))?;
    let final_checkpoint = out.join(MODEL_FILE);
    trainer.checkpoint(&hash).save(&final_checkpoint)?;
    Ok(TrainSummary {
        final_checkpoint,
        metrics: rows,
    })
}
