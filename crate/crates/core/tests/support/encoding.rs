//! Fuzzed corpora and packed-sample layout checks.
#![allow(dead_code)]

use std::collections::HashSet;

use convctl_core::encode::{encode_corpus, EncodedSample, TokenType, MAX_CONVERSATION_TOKENS, MAX_REFERENCE_TOKENS};
use convctl_core::extract::{ConversationPath, ReferenceTuple, Turn, UserReferenceStore};
use convctl_core::tokenizer::{train_bpe, Vocabulary};
use convctl_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ne", "su", "ta", " ", " ", "é", "🙂", "\n"];

fn text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(1..max);
    (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

pub fn corpus(rng: &mut ChaCha8Rng, n: usize) -> (Vec<ConversationPath>, UserReferenceStore) {
    let mut convs = Vec::new();
    let mut store = UserReferenceStore::default();
    let mut all_ids: Vec<String> = Vec::new();
    for c in 0..n {
        let len = rng.random_range(1..16);
        // Occasional very long turns exercise truncation.
        let max = if rng.random_bool(0.05) { 900 } else { 40 };
        let turns: Vec<Turn> = (0..len)
            .map(|j| Turn {
                comment_id: format!("c{c}_{j}"),
                author: format!("u{}", rng.random_range(0..40)),
                text: text(rng, max),
                score: 1,
            })
            .collect();
        all_ids.extend(turns.iter().map(|t| t.comment_id.clone()));
        convs.push(ConversationPath {
            conversation_id: format!("c{c}"),
            post_id: format!("p{c}"),
            turns,
        });
    }
    for a in 0..40 {
        let k = rng.random_range(0..9);
        let tuples = (0..k)
            .map(|i| {
                // Some tuples reuse a conversation turn id; those must never be encoded.
                let reply_id = if rng.random_bool(0.3) {
                    all_ids[rng.random_range(0..all_ids.len())].clone()
                } else {
                    format!("r{a}_{i}")
                };
                let long = rng.random_bool(0.1);
                ReferenceTuple {
                    parent: rng.random_bool(0.7).then(|| text(rng, if long { 400 } else { 30 })),
                    reply: format!("{} #{reply_id}#", text(rng, 30)),
                    reply_id,
                    score: 10 - i as i64,
                }
            })
            .collect();
        store.insert(format!("u{a}"), tuples);
    }
    (convs, store)
}

/// Encodes `n` fuzzed conversations and checks every layout invariant.
/// Returns the number of samples checked.
pub fn fuzz_check(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (convs, store) = corpus(&mut rng, n);
    let training: Vec<&str> = convs.iter().take(300).flat_map(|c| c.turns.iter().map(|t| t.text.as_str())).collect();
    let vocab = train_bpe(training, 400).unwrap();
    let samples = encode_corpus(&convs, &store, &vocab, Execution::default());

    let mut expected = 0;
    for c in &convs {
        expected += c.turns.iter().map(|t| &t.author).collect::<HashSet<_>>().len();
    }
    assert_eq!(samples.len(), expected);

    let mut conv_index = 0;
    for s in &samples {
        while convs[conv_index].conversation_id != s.conversation_id {
            conv_index += 1;
        }
        let conv = &convs[conv_index];
        s.validate().unwrap();
        assert!(s.ref_len <= MAX_REFERENCE_TOKENS && s.conv_len <= MAX_CONVERSATION_TOKENS);
        assert_eq!(s.ref_len + s.conv_len, s.len());
        for (i, (&ty, &m)) in s.type_ids.iter().zip(&s.loss_mask).enumerate() {
            if i < s.ref_len {
                assert!(matches!(ty, TokenType::RefParent | TokenType::RefReply));
                assert_eq!(m, 0);
            } else {
                assert!(matches!(ty, TokenType::Target | TokenType::Other));
                assert_eq!(m == 1, ty == TokenType::Target);
            }
            assert_eq!(s.position_ids[i] as usize, i);
        }
        assert!(s.masked_count() > 0, "target turn truncated away in {}", s.conversation_id);
        check_disjoint(s, conv, &vocab);
        // The conversation segment closes the target's last turn.
        assert_eq!(*s.token_ids.last().unwrap(), vocab.eot());
        assert_eq!(*s.type_ids.last().unwrap(), TokenType::Target);
    }
    samples.len()
}

fn check_disjoint(s: &EncodedSample, conv: &ConversationPath, vocab: &Vocabulary) {
    let refs = vocab.decode(&s.token_ids[..s.ref_len]).unwrap();
    for t in &conv.turns {
        assert!(!refs.contains(&format!("#{}#", t.comment_id)), "turn {} leaked into references", t.comment_id);
    }
}
