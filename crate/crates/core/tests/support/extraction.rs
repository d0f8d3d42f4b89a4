//! Random forests and a brute-force extraction reference.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use convctl_core::extract::{extract_conversations, ConversationPath, ExtractionRules, Turn};
use convctl_core::ingest::{build_forest, CommentForest, CommentRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &["alpha", "beta", "gamma", "delta", "eps"];

pub fn random_forest(rng: &mut ChaCha8Rng, post: &str) -> Vec<CommentRecord> {
    let n = rng.random_range(0..=30);
    let mut ids: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for i in 0..n {
        // Shuffled id space so id order differs from creation order.
        let id = format!("{post}.{:05}", rng.random_range(0..1000) * 31 + i);
        let parent = if ids.is_empty() || rng.random_bool(0.15) {
            None
        } else {
            // Bias toward recent nodes to grow long chains.
            let lo = ids.len().saturating_sub(3);
            let j = if rng.random_bool(0.7) {
                rng.random_range(lo..ids.len())
            } else {
                rng.random_range(0..ids.len())
            };
            Some(ids[j].clone())
        };
        let words = if rng.random_bool(0.1) { 2 } else { rng.random_range(3..6) };
        let body = (0..words)
            .map(|w| WORDS[(w + i) % WORDS.len()])
            .collect::<Vec<_>>()
            .join(if rng.random_bool(0.2) { "\t " } else { " " });
        out.push(CommentRecord {
            id: id.clone(),
            parent_id: parent,
            link_id: post.into(),
            author: format!("u{}", rng.random_range(0..6)),
            body,
            score: rng.random_range(-2..7),
            subreddit: "s".into(),
            over_18: rng.random_bool(0.03),
            created_utc: rng.random_range(0..50),
        });
        ids.push(id);
    }
    out
}

pub fn random_rules(rng: &mut ChaCha8Rng) -> ExtractionRules {
    if rng.random_bool(0.5) {
        return ExtractionRules::default();
    }
    let min_turns = rng.random_range(1..6);
    ExtractionRules {
        min_turns,
        max_turns: rng.random_range(min_turns..min_turns + 6),
        min_karma: rng.random_range(0..6),
        min_words: rng.random_range(0..5),
        max_shared_turns: rng.random_range(0..4),
        exclude_nsfw: rng.random_bool(0.8),
    }
}

/// Reference: materialize every chain by walking parent links upward, sort,
/// then sweep with an explicit id set.
pub fn brute_force(records: &[CommentRecord], post: &str, rules: &ExtractionRules) -> Vec<ConversationPath> {
    let by_id: BTreeMap<&str, &CommentRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut chains: Vec<Vec<&CommentRecord>> = Vec::new();
    for r in records {
        let mut chain = vec![r];
        let mut cur = r;
        while let Some(p) = cur.parent_id.as_deref().and_then(|p| by_id.get(p)) {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        if chain.len() >= rules.min_turns && chain.len() <= rules.max_turns {
            chains.push(chain);
        }
    }
    chains.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.last().unwrap().id.cmp(&b.last().unwrap().id)));
    let mut used: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    for chain in chains {
        let karma = chain.iter().any(|r| r.score >= rules.min_karma);
        let words = chain.iter().all(|r| r.body.split_whitespace().count() >= rules.min_words);
        let shared = chain.iter().filter(|r| used.contains(&r.id)).count();
        let sfw = !rules.exclude_nsfw || chain.iter().all(|r| !r.over_18);
        if karma && words && shared <= rules.max_shared_turns && sfw {
            used.extend(chain.iter().map(|r| r.id.clone()));
            out.push(ConversationPath {
                conversation_id: format!("{post}_{}", chain.last().unwrap().id),
                post_id: post.into(),
                turns: chain
                    .iter()
                    .map(|r| Turn {
                        comment_id: r.id.clone(),
                        author: r.author.clone(),
                        text: r.body.clone(),
                        score: r.score,
                    })
                    .collect(),
            });
        }
    }
    out
}

pub fn check_post_hoc(convs: &[ConversationPath], forest: &CommentForest, rules: &ExtractionRules) {
    for (i, c) in convs.iter().enumerate() {
        let n = c.turns.len();
        assert!(n >= rules.min_turns && n <= rules.max_turns);
        assert!(c.turns.iter().any(|t| t.score >= rules.min_karma));
        assert!(c.turns.iter().all(|t| t.text.split_whitespace().count() >= rules.min_words));
        if rules.exclude_nsfw {
            assert!(c.turns.iter().all(|t| !forest.nodes[&t.comment_id].record.over_18));
        }
        // Parent to child chain starting at a root.
        let first = &forest.nodes[&c.turns[0].comment_id].record;
        assert!(first.parent_id.as_deref().and_then(|p| forest.node(p)).is_none());
        for w in c.turns.windows(2) {
            assert_eq!(forest.nodes[&w[1].comment_id].record.parent_id.as_deref(), Some(w[0].comment_id.as_str()));
        }
        for earlier in &convs[..i] {
            let ids: HashSet<&str> = earlier.turns.iter().map(|t| t.comment_id.as_str()).collect();
            let shared = c.turns.iter().filter(|t| ids.contains(t.comment_id.as_str())).count();
            assert!(shared <= rules.max_shared_turns);
        }
    }
}

/// Compares greedy extraction with the reference on every seed and re-checks
/// the rules post hoc. Returns how many forests yielded conversations.
pub fn run_oracle(seeds: std::ops::Range<u64>) -> usize {
    let mut nonempty = 0;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let post = format!("t3_p{seed}");
        let records = random_forest(&mut rng, &post);
        let rules = random_rules(&mut rng);
        let forest = build_forest(records.clone(), &post).unwrap();
        let got = extract_conversations(&forest, &rules);
        let want = brute_force(&records, &post, &rules);
        assert_eq!(got, want, "seed {seed}, rules {rules:?}");
        check_post_hoc(&got, &forest, &rules);
        assert_eq!(got, extract_conversations(&forest, &rules));
        nonempty += usize::from(!got.is_empty());
    }
    nonempty
}
