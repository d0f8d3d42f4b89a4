//! Conversation-path extraction and per-user reference harvesting.
//!
//! Candidates are root-anchored downward chains of a reply forest. They are
//! swept greedily from longest to shortest and accepted when they pass the
//! validity rules against the comments already claimed by earlier paths of
//! the same post.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CommentForest, CommentRecord};
use crate::par::Execution;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("invalid extraction rules: {0}")]
    InvalidRules(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionRules {
    pub min_turns: usize,
    pub max_turns: usize,
    pub min_karma: i64,
    pub min_words: usize,
    pub max_shared_turns: usize,
    pub exclude_nsfw: bool,
}

impl Default for ExtractionRules {
    fn default() -> Self {
        Self {
            min_turns: 5,
            max_turns: 15,
            min_karma: 4,
            min_words: 3,
            max_shared_turns: 2,
            exclude_nsfw: true,
        }
    }
}

impl ExtractionRules {
    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return Err(ExtractError::InvalidRules(format!(
                "need 1 <= min_turns <= max_turns, got {}..{}",
                self.min_turns, self.max_turns
            )));
        }
        if self.min_karma < 0 {
            return Err(ExtractError::InvalidRules("min_karma must be >= 0".into()));
        }
        Ok(())
    }
}

/// The validity rules, numbered as in the extraction procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    MinTurns,
    MaxTurns,
    Karma,
    Words,
    SharedTurns,
    Nsfw,
}

impl Rule {
    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub comment_id: String,
    pub author: String,
    pub text: String,
    pub score: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationPath {
    pub conversation_id: String,
    pub post_id: String,
    pub turns: Vec<Turn>,
}

impl ConversationPath {
    /// Distinct authors in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.turns
            .iter()
            .filter(|t| seen.insert(t.author.as_str()))
            .map(|t| t.author.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceTuple {
    /// Absent when the reply was a top-level comment.
    pub parent: Option<String>,
    pub reply: String,
    pub reply_id: String,
    pub score: i64,
}

/// Highest score first, then reply id ascending.
fn reference_order(a: &ReferenceTuple, b: &ReferenceTuple) -> Ordering {
    b.score.cmp(&a.score).then_with(|| a.reply_id.cmp(&b.reply_id))
}

pub const DEFAULT_REFERENCES_PER_USER: usize = 8;

/// Per-author top-K reference tuples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserReferenceStore {
    pub by_author: BTreeMap<String, Vec<ReferenceTuple>>,
}

impl UserReferenceStore {
    pub fn get(&self, author: &str) -> &[ReferenceTuple] {
        self.by_author.get(author).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn insert(&mut self, author: impl Into<String>, mut tuples: Vec<ReferenceTuple>) {
        tuples.sort_by(reference_order);
        self.by_author.insert(author.into(), tuples);
    }

    pub fn tuple_count(&self) -> usize {
        self.by_author.values().map(Vec::len).sum()
    }

    /// Keeps only the listed authors.
    pub fn restrict_to<'a>(&self, authors: impl IntoIterator<Item = &'a str>) -> Self {
        let by_author = authors
            .into_iter()
            .filter_map(|a| self.by_author.get(a).map(|t| (a.to_string(), t.clone())))
            .collect();
        Self { by_author }
    }

    /// Merges another partial store, keeping the best `k` per author.
    pub fn merge_top_k(&mut self, other: UserReferenceStore, k: usize) {
        for (author, tuples) in other.by_author {
            let entry = self.by_author.entry(author).or_default();
            entry.extend(tuples);
            entry.sort_by(reference_order);
            entry.truncate(k);
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (author, tuples) in &self.by_author {
            let line = ReferenceLine {
                author: author.clone(),
                tuples: tuples.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, ExtractError> {
        let mut store = Self::default();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ReferenceLine =
                serde_json::from_str(&line).map_err(|e| ExtractError::Format {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            store.insert(parsed.author, parsed.tuples);
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct ReferenceLine {
    author: String,
    tuples: Vec<ReferenceTuple>,
}

/// A root-anchored chain of comments, root first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate<'a> {
    pub post_id: &'a str,
    pub nodes: Vec<&'a CommentRecord>,
}

impl Candidate<'_> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn last_id(&self) -> &str {
        self.nodes.last().map(|r| r.id.as_str()).unwrap_or("")
    }

    pub fn to_conversation(&self) -> ConversationPath {
        ConversationPath {
            conversation_id: format!("{}_{}", self.post_id, self.last_id()),
            post_id: self.post_id.to_string(),
            turns: self
                .nodes
                .iter()
                .map(|r| Turn {
                    comment_id: r.id.clone(),
                    author: r.author.clone(),
                    text: r.body.clone(),
                    score: r.score,
                })
                .collect(),
        }
    }
}

/// Longest first, then `(post_id, final comment id)` ascending.
pub fn candidate_order(a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering {
    b.len()
        .cmp(&a.len())
        .then_with(|| a.post_id.cmp(b.post_id))
        .then_with(|| a.last_id().cmp(b.last_id()))
}

/// All root-to-node chains whose length lies in `[min_turns, max_turns]`.
pub fn enumerate_candidates<'a>(
    forest: &'a CommentForest,
    rules: &ExtractionRules,
) -> Vec<Candidate<'a>> {
    let mut out = Vec::new();
    // (node id, depth) pending visits; `path` holds the current chain.
    let mut path: Vec<&'a CommentRecord> = Vec::new();
    let mut stack: Vec<(&'a str, usize)> = forest
        .roots
        .iter()
        .rev()
        .map(|r| (r.as_str(), 1usize))
        .collect();
    while let Some((id, depth)) = stack.pop() {
        let node = &forest.nodes[id];
        path.truncate(depth - 1);
        path.push(&node.record);
        if depth >= rules.min_turns && depth <= rules.max_turns {
            out.push(Candidate {
                post_id: &forest.post_id,
                nodes: path.clone(),
            });
        }
        if depth < rules.max_turns {
            stack.extend(node.children.iter().rev().map(|c| (c.as_str(), depth + 1)));
        }
    }
    out.sort_by(candidate_order);
    out
}

/// Multiset of comment ids claimed by accepted paths.
#[derive(Debug, Clone, Default)]
pub struct UsedTurns(HashMap<String, u32>);

impl UsedTurns {
    pub fn contains(&self, id: &str) -> bool {
        self.0.contains_key(id)
    }

    pub fn add<'a>(&mut self, ids: impl IntoIterator<Item = &'a str>) {
        for id in ids {
            *self.0.entry(id.to_string()).or_default() += 1;
        }
    }

    pub fn count(&self, id: &str) -> u32 {
        self.0.get(id).copied().unwrap_or(0)
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Checks a candidate against every rule and lists all that fail.
pub fn is_valid_path(
    path: &Candidate<'_>,
    used: &UsedTurns,
    rules: &ExtractionRules,
) -> (bool, Vec<Rule>) {
    let mut violated = Vec::new();
    if path.len() < rules.min_turns {
        violated.push(Rule::MinTurns);
    }
    if path.len() > rules.max_turns {
        violated.push(Rule::MaxTurns);
    }
    if !path.nodes.iter().any(|r| r.score >= rules.min_karma) {
        violated.push(Rule::Karma);
    }
    if path.nodes.iter().any(|r| word_count(&r.body) < rules.min_words) {
        violated.push(Rule::Words);
    }
    let shared = path.nodes.iter().filter(|r| used.contains(&r.id)).count();
    if shared > rules.max_shared_turns {
        violated.push(Rule::SharedTurns);
    }
    if rules.exclude_nsfw && path.nodes.iter().any(|r| r.over_18) {
        violated.push(Rule::Nsfw);
    }
    (violated.is_empty(), violated)
}

/// Greedy longest-first extraction over one forest.
pub fn extract_conversations(
    forest: &CommentForest,
    rules: &ExtractionRules,
) -> Vec<ConversationPath> {
    let mut used = UsedTurns::default();
    let mut out = Vec::new();
    for candidate in enumerate_candidates(forest, rules) {
        let (valid, _) = is_valid_path(&candidate, &used, rules);
        if valid {
            used.add(candidate.nodes.iter().map(|r| r.id.as_str()));
            out.push(candidate.to_conversation());
        }
    }
    out
}

/// Extracts every forest independently; output keeps forest order.
pub fn extract_all(
    forests: &[CommentForest],
    rules: &ExtractionRules,
    execution: Execution,
) -> Vec<ConversationPath> {
    execution
        .map(forests, |f| extract_conversations(f, rules))
        .into_iter()
        .flatten()
        .collect()
}

fn top_k_for_forest(forest: &CommentForest, k: usize) -> UserReferenceStore {
    let mut by_author: BTreeMap<String, Vec<ReferenceTuple>> = BTreeMap::new();
    for record in forest.records() {
        let parent = record
            .parent_id
            .as_deref()
            .and_then(|p| forest.node(p))
            .map(|n| n.record.body.clone());
        by_author
            .entry(record.author.clone())
            .or_default()
            .push(ReferenceTuple {
                parent,
                reply: record.body.clone(),
                reply_id: record.id.clone(),
                score: record.score,
            });
    }
    for tuples in by_author.values_mut() {
        tuples.sort_by(reference_order);
        tuples.truncate(k);
    }
    UserReferenceStore { by_author }
}

/// Keeps each author's `k` highest-scoring comments as reference tuples.
/// Parent text is resolved within the comment's own post.
pub fn harvest_references(
    forests: &[CommentForest],
    k: usize,
    execution: Execution,
) -> UserReferenceStore {
    let partials = execution.map(forests, |f| top_k_for_forest(f, k));
    let mut store = UserReferenceStore::default();
    for partial in partials {
        store.merge_top_k(partial, k);
    }
    store
}

/// Dataset summary with the columns conversations, turns, users, refs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub conversations: u64,
    pub turns: u64,
    pub users: u64,
    pub reference_tuples: u64,
}

pub fn corpus_stats(conversations: &[ConversationPath], store: &UserReferenceStore) -> CorpusStats {
    let users: BTreeSet<&str> = conversations
        .iter()
        .flat_map(|c| c.turns.iter().map(|t| t.author.as_str()))
        .collect();
    CorpusStats {
        conversations: conversations.len() as u64,
        turns: conversations.iter().map(|c| c.turns.len() as u64).sum(),
        users: users.len() as u64,
        reference_tuples: users.iter().map(|u| store.get(u).len() as u64).sum(),
    }
}

pub fn write_conversations<W: Write>(
    conversations: &[ConversationPath],
    mut out: W,
) -> std::io::Result<()> {
    for c in conversations {
        serde_json::to_writer(&mut out, c)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_conversations<R: BufRead>(input: R) -> Result<Vec<ConversationPath>, ExtractError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| ExtractError::Format {
                line: idx + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
