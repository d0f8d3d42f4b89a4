//! Desk-scale training runs: overfitting a tiny corpus and the reference
//! conditioning gain on a synthetic persona corpus.
#![allow(dead_code)]

use std::time::{Duration, Instant};

use convctl_core::encode::encode_corpus;
use convctl_core::evalgen::{perplexity, LoadedModel};
use convctl_core::extract::{ConversationPath, ReferenceTuple, Turn, UserReferenceStore};
use convctl_core::model::{ModelConfig, Variant};
use convctl_core::tokenizer::Vocabulary;
use convctl_core::train::{TrainConfig, Trainer};
use convctl_core::Execution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "apple", "river", "stone", "quiet", "lamp", "orbit", "maple", "tiger", "cloud", "brick", "sugar", "pixel", "ember",
    "frost", "gravel", "honey", "island", "jelly", "kettle", "lemon",
];

fn turn(id: String, author: &str, text: String) -> Turn {
    Turn {
        comment_id: id,
        author: author.to_string(),
        text,
        score: 1,
    }
}

/// Sixteen two-speaker conversations of three short turns each.
pub fn overfit_corpus() -> Vec<ConversationPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    (0..16)
        .map(|c| {
            let turns = (0..3)
                .map(|t| {
                    let n = rng.random_range(2..4);
                    let text: Vec<&str> = (0..n).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
                    turn(format!("c{c}t{t}"), ["A", "B"][t % 2], text.join(" "))
                })
                .collect();
            ConversationPath {
                conversation_id: format!("c{c}"),
                post_id: format!("p{c}"),
                turns,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OverfitOutcome {
    pub token_ppl: f64,
    pub iters: u64,
    pub elapsed: Duration,
}

/// Trains h=64, l=2, A=2 on [`overfit_corpus`], checking training-set token
/// perplexity every 50 steps and stopping once it drops below `target`.
pub fn overfit(target: f64, max_iters: u64, exec: Execution) -> OverfitOutcome {
    let start = Instant::now();
    let vocab = Vocabulary::bytes_only();
    let convs = overfit_corpus();
    let store = UserReferenceStore::default();
    let samples = encode_corpus(&convs, &store, &vocab, exec);
    let model = ModelConfig {
        max_positions: 128,
        ..ModelConfig::new(Variant::Dec, 64, 2, 2, vocab.size())
    };
    let config = TrainConfig {
        total_iters: max_iters,
        batch_size: 8,
        peak_lr: 2e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model.clone(), config, exec).unwrap();
    let mut token_ppl = f64::INFINITY;
    while trainer.iteration() < max_iters {
        trainer.step(&samples).unwrap();
        if trainer.iteration().is_multiple_of(50) || trainer.iteration() == max_iters {
            let loaded = LoadedModel::new(model.clone(), trainer.params.clone(), vocab.clone()).unwrap();
            token_ppl = perplexity(&loaded, &convs, &store, exec).unwrap().token_ppl;
            if token_ppl < target {
                break;
            }
        }
    }
    OverfitOutcome {
        token_ppl,
        iters: trainer.iteration(),
        elapsed: start.elapsed(),
    }
}

/// Signature characters, none of which occur in [`WORDS`] or the parents.
const SIGNATURES: &[u8] = b"0123456789ABCDEFGHIJKLMNOPQRSTUV";

pub struct PersonaCorpus {
    pub train: Vec<ConversationPath>,
    pub held_out: Vec<ConversationPath>,
    pub store: UserReferenceStore,
}

/// 32 authors, each opening every turn and every reference reply with its
/// own signature character. Conversations pair two distinct authors for one
/// turn each, so without references the signature is unpredictable.
pub fn persona_corpus(seed: u64, train: usize, held_out: usize) -> PersonaCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let authors: Vec<String> = (0..SIGNATURES.len()).map(|i| format!("u{i}")).collect();
    let sig = |a: usize| SIGNATURES[a] as char;
    let mut store = UserReferenceStore::default();
    for (a, name) in authors.iter().enumerate() {
        let tuples = (0..3)
            .map(|k| ReferenceTuple {
                parent: (k % 2 == 0).then(|| format!("say {}", WORDS[(a + k) % WORDS.len()])),
                reply: format!("{} {}", sig(a), WORDS[(a * 3 + k) % WORDS.len()]),
                reply_id: format!("r{a}_{k}"),
                score: 10 - k as i64,
            })
            .collect();
        store.insert(name.clone(), tuples);
    }
    let mut conv = |id: String| {
        let a = rng.random_range(0..authors.len());
        let b = (a + rng.random_range(1..authors.len())) % authors.len();
        let turns = [a, b]
            .iter()
            .enumerate()
            .map(|(t, &who)| {
                let word = WORDS[rng.random_range(0..4)];
                turn(format!("{id}t{t}"), &authors[who], format!("{} {word}", sig(who)))
            })
            .collect();
        ConversationPath {
            conversation_id: id.clone(),
            post_id: id,
            turns,
        }
    };
    let train = (0..train).map(|i| conv(format!("tr{i}"))).collect();
    let held_out = (0..held_out).map(|i| conv(format!("ho{i}"))).collect();
    PersonaCorpus { train, held_out, store }
}

/// Held-out token perplexity after an identical training budget.
pub fn persona_ppl(variant: Variant, seed: u64, iters: u64, exec: Execution) -> f64 {
    let vocab = Vocabulary::bytes_only();
    let corpus = persona_corpus(100 + seed, 256, 64);
    let samples = encode_corpus(&corpus.train, &corpus.store, &vocab, exec);
    let model = ModelConfig {
        max_positions: 128,
        ..ModelConfig::new(variant, 32, 2, 2, vocab.size())
    };
    let config = TrainConfig {
        total_iters: iters,
        batch_size: 8,
        peak_lr: 3e-3,
        warmup_fraction: 0.05,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model.clone(), config, exec).unwrap();
    trainer.run(&samples, |_, _| Ok(())).unwrap();
    let loaded = LoadedModel::new(model, trainer.params, vocab).unwrap();
    perplexity(&loaded, &corpus.held_out, &corpus.store, exec).unwrap().token_ppl
}

#[derive(Debug, Clone)]
pub struct GainOutcome {
    pub dec: Vec<f64>,
    pub nrc: Vec<f64>,
    pub elapsed: Duration,
}

impl GainOutcome {
    pub fn medians(&self) -> (f64, f64) {
        (median(&self.dec), median(&self.nrc))
    }

    /// Relative held-out perplexity reduction of DEC over NRC.
    pub fn relative_gain(&self) -> f64 {
        let (d, n) = self.medians();
        (n - d) / n
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

pub fn conditional_gain(seeds: &[u64], iters: u64, exec: Execution) -> GainOutcome {
    let start = Instant::now();
    let dec = seeds.iter().map(|&s| persona_ppl(Variant::Dec, s, iters, exec)).collect();
    let nrc = seeds.iter().map(|&s| persona_ppl(Variant::Nrc, s, iters, exec)).collect();
    GainOutcome {
        dec,
        nrc,
        elapsed: start.elapsed(),
    }
}
