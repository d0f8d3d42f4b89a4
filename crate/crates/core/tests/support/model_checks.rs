//! Causality, masking, scoring and nucleus checks on small fixtures.
#![allow(dead_code)]

use convctl_core::encode::{encode_for_speaker, EncodedSample, TokenType};
use convctl_core::evalgen::{conversation_logprob, nucleus_filter, token_logprobs, LoadedModel};
use convctl_core::extract::{ConversationPath, ReferenceTuple, Turn, UserReferenceStore};
use convctl_core::model::{forward, ForwardOptions, ModelConfig, TransformerParams, Variant};
use convctl_core::tensor::Graph;
use convctl_core::tokenizer::Vocabulary;
use convctl_core::train::loss_for;
use proptest::prelude::*;

pub fn turn(id: &str, author: &str, text: &str) -> Turn {
    Turn {
        comment_id: id.into(),
        author: author.into(),
        text: text.into(),
        score: 1,
    }
}

pub fn fixture() -> (ConversationPath, UserReferenceStore) {
    let conv = ConversationPath {
        conversation_id: "c1".into(),
        post_id: "p".into(),
        turns: vec![
            turn("1", "A", "good morning all"),
            turn("2", "B", "hey there"),
            turn("3", "A", "how is it going"),
            turn("4", "B", "fine thanks, you?"),
            turn("5", "A", "great"),
        ],
    };
    let mut store = UserReferenceStore::default();
    store.insert(
        "A",
        vec![ReferenceTuple {
            parent: Some("what do you say at dawn".into()),
            reply: "good morning".into(),
            reply_id: "rA".into(),
            score: 3,
        }],
    );
    store.insert(
        "B",
        vec![ReferenceTuple {
            parent: None,
            reply: "hey".into(),
            reply_id: "rB".into(),
            score: 2,
        }],
    );
    (conv, store)
}

pub fn cfg(variant: Variant) -> ModelConfig {
    ModelConfig {
        max_positions: 128,
        ..ModelConfig::new(variant, 16, 2, 2, Vocabulary::bytes_only().size())
    }
}

fn loaded(variant: Variant, seed: u64) -> LoadedModel {
    let c = cfg(variant);
    let params = TransformerParams::<f32>::init(&c, seed).unwrap();
    LoadedModel::new(c, params, Vocabulary::bytes_only()).unwrap()
}

fn logits(params: &TransformerParams<f32>, c: &ModelConfig, s: &EncodedSample) -> Vec<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, false);
    let fwd = forward(&mut g, &bound, c, s, &ForwardOptions::default()).unwrap();
    let t = g.value(fwd.logits);
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Row of the decoder output that first sees sample position `p`.
fn first_row_seeing(variant: Variant, p: usize, ref_len: usize) -> usize {
    match variant {
        Variant::Dec => p,
        Variant::Nrc | Variant::S2s => p - ref_len,
        Variant::Vae => p - ref_len + 1,
    }
}

pub fn future_tokens_never_change_past_logits() {
    let (conv, store) = fixture();
    let vocab = Vocabulary::bytes_only();
    let sample = encode_for_speaker(&conv, &store, "A", &vocab).unwrap();
    for variant in [Variant::Dec, Variant::Nrc, Variant::S2s, Variant::Vae] {
        let c = cfg(variant);
        let params = TransformerParams::<f32>::init(&c, 3).unwrap();
        let base = logits(&params, &c, &sample);
        for p in [sample.ref_len + 2, sample.ref_len + sample.conv_len / 2, sample.len() - 1] {
            let mut changed = sample.clone();
            changed.token_ids[p] = (changed.token_ids[p] + 7) % 256;
            let after = logits(&params, &c, &changed);
            let first = first_row_seeing(variant, p, sample.ref_len);
            assert_eq!(&base[..first], &after[..first], "{variant:?} position {p}");
            assert_ne!(base[first], after[first], "{variant:?} position {p} had no effect");
        }
    }
}

pub fn nrc_ignores_references_entirely() {
    let (conv, store) = fixture();
    let vocab = Vocabulary::bytes_only();
    let sample = encode_for_speaker(&conv, &store, "A", &vocab).unwrap();
    let c = cfg(Variant::Nrc);
    let params = TransformerParams::<f32>::init(&c, 3).unwrap();
    let mut changed = sample.clone();
    for id in &mut changed.token_ids[1..sample.ref_len] {
        *id = (*id + 11) % 256;
    }
    assert_eq!(logits(&params, &c, &sample), logits(&params, &c, &changed));
    assert_eq!(logits(&params, &c, &sample), logits(&params, &c, &sample.without_references()));
}

pub fn loss_ignores_labels_at_unscored_positions() {
    let (conv, store) = fixture();
    let vocab = Vocabulary::bytes_only();
    let sample = encode_for_speaker(&conv, &store, "B", &vocab).unwrap();
    for variant in [Variant::Dec, Variant::Nrc, Variant::S2s, Variant::Vae] {
        let c = cfg(variant);
        let params = TransformerParams::<f32>::init(&c, 9).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g, false);
        let mut fwd = forward(&mut g, &bound, &c, &sample, &ForwardOptions::default()).unwrap();
        let l = loss_for(&mut g, &fwd, 1.0).unwrap().total;
        let base = g.value(l).item();
        let unscored = fwd.mask.iter().filter(|&&m| m == 0).count();
        assert!(unscored > 0);
        for (t, &m) in fwd.targets.iter_mut().zip(&fwd.mask) {
            if m == 0 {
                *t = (*t + 101) % 256;
            }
        }
        let l = loss_for(&mut g, &fwd, 1.0).unwrap().total;
        let relabeled = g.value(l).item();
        assert_eq!(base.to_bits(), relabeled.to_bits(), "{variant:?}");
    }
    // A trailing unscored token is never an input to a scored prediction.
    let c = cfg(Variant::Dec);
    let params = TransformerParams::<f32>::init(&c, 9).unwrap();
    let a = encode_for_speaker(&conv, &store, "A", &vocab).unwrap();
    let mut extended = a.clone();
    extended.token_ids.push(65);
    extended.type_ids.push(TokenType::Other);
    extended.loss_mask.push(0);
    extended.position_ids.push(a.len() as u32);
    extended.conv_len += 1;
    let loss = |s: &EncodedSample| {
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g, false);
        let fwd = forward(&mut g, &bound, &c, s, &ForwardOptions::default()).unwrap();
        {
            let l = loss_for(&mut g, &fwd, 1.0).unwrap().total;
            g.value(l).item()
        }
    };
    let mut other = extended.clone();
    *other.token_ids.last_mut().unwrap() = 66;
    assert_eq!(loss(&extended).to_bits(), loss(&other).to_bits());
}

pub fn regrouping_by_author_equals_turn_order_sum() {
    let (conv, store) = fixture();
    for variant in [Variant::Dec, Variant::Nrc, Variant::S2s, Variant::Vae] {
        let model = loaded(variant, 21);
        let score = conversation_logprob(&model, &conv, &store).unwrap();

        // Direct oracle: walk the conversation turn by turn, scoring each turn
        // under its author's sample.
        let mut per_turn: Vec<Vec<f64>> = Vec::new();
        let mut cursor: std::collections::BTreeMap<&str, usize> = Default::default();
        for t in &conv.turns {
            let sample = encode_for_speaker(&conv, &store, &t.author, &model.vocab).unwrap();
            let scores = token_logprobs(&model, &sample).unwrap();
            // Scored rows, split into the author's turns at each EOT.
            let mut turns: Vec<Vec<f64>> = vec![Vec::new()];
            for s in scores.iter().filter(|s| s.scored) {
                turns.last_mut().unwrap().push(s.logprob);
                if s.token == model.vocab.eot() {
                    turns.push(Vec::new());
                }
            }
            let k = cursor.entry(t.author.as_str()).or_default();
            per_turn.push(turns[*k].clone());
            assert_eq!(turns[*k].len(), model.vocab.encode(&t.text).len() + 1);
            *k += 1;
        }
        let direct: f64 = per_turn.iter().flatten().sum();
        let mut terms: Vec<u64> = per_turn.iter().flatten().map(|v| v.to_bits()).collect();
        let mut regrouped: Vec<u64> = Vec::new();
        for speaker in conv.speakers() {
            let sample = encode_for_speaker(&conv, &store, speaker, &model.vocab).unwrap();
            regrouped.extend(
                token_logprobs(&model, &sample)
                    .unwrap()
                    .iter()
                    .filter(|s| s.scored)
                    .map(|s| s.logprob.to_bits()),
            );
        }
        terms.sort_unstable();
        regrouped.sort_unstable();
        // Same terms exactly; the sums differ only by addition order.
        assert_eq!(terms, regrouped, "{variant:?}");
        assert_eq!(score.tokens, terms.len());
        assert!((score.logprob - direct).abs() <= 1e-12 * direct.abs(), "{variant:?}");
        let speakers: f64 = score.per_speaker.iter().map(|s| s.logprob).sum();
        assert_eq!(speakers.to_bits(), score.logprob.to_bits());
    }
}

pub fn token_logprobs_match_log_softmax_of_logits() {
    let (conv, store) = fixture();
    let model = loaded(Variant::Dec, 4);
    let sample = encode_for_speaker(&conv, &store, "B", &model.vocab).unwrap();
    let rows = logits(&model.params, &model.config, &sample);
    let scores = token_logprobs(&model, &sample).unwrap();
    for (i, s) in scores.iter().enumerate() {
        // DEC predicts position i + 1 from row i.
        let row: Vec<f64> = rows[i].iter().map(|&v| v as f64).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        assert_eq!(s.token, sample.token_ids[i + 1]);
        assert!((s.logprob - (row[s.token as usize] - lse)).abs() < 1e-5);
        assert_eq!(s.scored, sample.loss_mask[i + 1] == 1);
    }
}

pub fn check_nucleus(probs: &[f64], top_p: f64) -> Result<(), TestCaseError> {
    let kept = nucleus_filter(probs, top_p);
    let mut vals: Vec<f64> = kept.iter().map(|&i| probs[i as usize]).collect();
    prop_assert!(!vals.is_empty());
    prop_assert!(vals.windows(2).all(|w| w[0] >= w[1]), "kept in descending order");
    let cum: f64 = vals.iter().sum();
    prop_assert!(cum >= top_p, "support {cum} below {top_p}");
    let least = vals.pop().unwrap();
    let without: f64 = vals.iter().sum();
    prop_assert!(without < top_p, "dropping {least} still reaches {top_p}");
    // Top set: nothing excluded outranks anything kept.
    let excluded_max = (0..probs.len() as u32)
        .filter(|i| !kept.contains(i))
        .map(|i| probs[i as usize])
        .fold(0.0, f64::max);
    prop_assert!(excluded_max <= least);
    Ok(())
}

pub fn nucleus_fixtures() {
    check_nucleus(&[0.5, 0.3, 0.2], 0.7).unwrap();
    assert_eq!(nucleus_filter(&[0.5, 0.3, 0.2], 0.7), vec![0, 1]);
    assert_eq!(nucleus_filter(&[0.5, 0.3, 0.2], 0.8), vec![0, 1]);
    assert_eq!(nucleus_filter(&[0.5, 0.3, 0.2], 0.81), vec![0, 1, 2]);
    assert_eq!(nucleus_filter(&[0.25; 4], 0.5), vec![0, 1]);
    assert_eq!(nucleus_filter(&[0.1, 0.9], 0.05), vec![1]);
}

/// Minimality on seeded random distributions.
pub fn nucleus_random(cases: u64) {
    use rand::{Rng, SeedableRng};
    for seed in 0..cases {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..40);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        if total < 1e-6 {
            continue;
        }
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        check_nucleus(&probs, rng.random_range(0.01..0.999)).unwrap();
    }
}
