//! Comment-dump parsing and per-post reply forests.
//!
//! Input is one JSON object per line in the public monthly dump schema.
//! Records are validated, grouped by post and assembled into forests whose
//! children are ordered by `(created_utc, id)`, so the result never depends on
//! the order of lines in the file.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Execution;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: invalid record: {message}")]
    Invalid { line: usize, message: String },
    #[error("post {post_id}: duplicate comment id {id}")]
    DuplicateId { post_id: String, id: String },
    #[error("post {post_id}: record {id} belongs to post {found}")]
    ForeignRecord {
        post_id: String,
        id: String,
        found: String,
    },
    #[error("post {post_id}: reply cycle through comments {}", ids.join(", "))]
    Cycle { post_id: String, ids: Vec<String> },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "{}: more than {limit} buffered records; shard the dump per post before ingesting",
        path.display()
    )]
    MemoryBudget { path: PathBuf, limit: usize },
    #[error("{}: compressed input needs the `compression` feature", path.display())]
    CompressionUnavailable { path: PathBuf },
}

/// One validated comment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentRecord {
    pub id: String,
    pub parent_id: Option<String>,
    pub link_id: String,
    pub author: String,
    pub body: String,
    pub score: i64,
    pub subreddit: String,
    pub over_18: bool,
    pub created_utc: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    DeletedBody,
    RemovedBody,
    EmptyBody,
    DeletedAuthor,
    EmptyAuthor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedLine {
    Record(CommentRecord),
    Skip(SkipReason),
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default)]
    parent_id: Option<String>,
    link_id: String,
    author: String,
    body: String,
    score: i64,
    subreddit: String,
    over_18: bool,
    created_utc: i64,
}

fn strip_kind_prefix(id: &str) -> &str {
    for prefix in ["t1_", "t3_"] {
        if let Some(rest) = id.strip_prefix(prefix) {
            return rest;
        }
    }
    id
}

fn is_placeholder(text: &str) -> bool {
    matches!(text, "[deleted]" | "[removed]")
}

/// Parses one dump line. `line_no` is 1-based and only used for errors.
pub fn parse_comment_line(line: &str, line_no: usize) -> Result<ParsedLine, IngestError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => IngestError::Schema {
            line: line_no,
            message: e.to_string(),
        },
        _ => IngestError::Parse {
            line: line_no,
            message: e.to_string(),
        },
    })?;

    let author = raw.author.trim();
    if is_placeholder(author) {
        return Ok(ParsedLine::Skip(SkipReason::DeletedAuthor));
    }
    if author.is_empty() {
        return Ok(ParsedLine::Skip(SkipReason::EmptyAuthor));
    }
    match raw.body.trim() {
        "[deleted]" => return Ok(ParsedLine::Skip(SkipReason::DeletedBody)),
        "[removed]" => return Ok(ParsedLine::Skip(SkipReason::RemovedBody)),
        "" => return Ok(ParsedLine::Skip(SkipReason::EmptyBody)),
        _ => {}
    }

    let id = strip_kind_prefix(&raw.id).to_string();
    let link_id = strip_kind_prefix(&raw.link_id).to_string();
    // A parent of kind t3 is the post itself: the comment is top-level.
    let parent_id = raw.parent_id.and_then(|p| {
        if p.starts_with("t3_") {
            return None;
        }
        let p = strip_kind_prefix(&p).to_string();
        (!p.is_empty() && p != link_id).then_some(p)
    });
    if id.is_empty() {
        return Err(IngestError::Invalid {
            line: line_no,
            message: "empty comment id".into(),
        });
    }
    if parent_id.as_deref() == Some(id.as_str()) {
        return Err(IngestError::Invalid {
            line: line_no,
            message: format!("comment {id} is its own parent"),
        });
    }

    Ok(ParsedLine::Record(CommentRecord {
        id,
        parent_id,
        link_id,
        author: author.to_string(),
        body: raw.body,
        score: raw.score,
        subreddit: raw.subreddit,
        over_18: raw.over_18,
        created_utc: raw.created_utc,
    }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestNode {
    pub record: CommentRecord,
    /// Ordered by `(created_utc, id)` ascending.
    pub children: Vec<String>,
}

/// All comments of one post arranged as reply trees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentForest {
    pub post_id: String,
    pub nodes: BTreeMap<String, ForestNode>,
    pub roots: Vec<String>,
    /// Comments whose parent was missing from the input and were promoted to roots.
    pub orphans: Vec<String>,
}

impl CommentForest {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&ForestNode> {
        self.nodes.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &CommentRecord> {
        self.nodes.values().map(|n| &n.record)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub records_read: u64,
    pub records_skipped: u64,
    pub forests_built: u64,
    pub orphans_promoted: u64,
}

impl IngestStats {
    pub fn records_accepted(&self) -> u64 {
        self.records_read - self.records_skipped
    }

    pub fn merge(&mut self, other: &IngestStats) {
        self.records_read += other.records_read;
        self.records_skipped += other.records_skipped;
        self.forests_built += other.forests_built;
        self.orphans_promoted += other.orphans_promoted;
    }
}

fn chronological(nodes: &BTreeMap<String, ForestNode>, ids: &mut [String]) {
    ids.sort_by(|a, b| {
        let ra = &nodes[a].record;
        let rb = &nodes[b].record;
        (ra.created_utc, &ra.id).cmp(&(rb.created_utc, &rb.id))
    });
}

/// Assembles the reply forest of one post. Records with an absent or
/// unresolvable parent become roots.
pub fn build_forest<I>(records: I, post_id: &str) -> Result<CommentForest, IngestError>
where
    I: IntoIterator<Item = CommentRecord>,
{
    let mut nodes: BTreeMap<String, ForestNode> = BTreeMap::new();
    for record in records {
        if record.link_id != post_id {
            return Err(IngestError::ForeignRecord {
                post_id: post_id.to_string(),
                id: record.id,
                found: record.link_id,
            });
        }
        if nodes.contains_key(&record.id) {
            return Err(IngestError::DuplicateId {
                post_id: post_id.to_string(),
                id: record.id,
            });
        }
        nodes.insert(
            record.id.clone(),
            ForestNode {
                record,
                children: Vec::new(),
            },
        );
    }

    let mut roots = Vec::new();
    let mut orphans = Vec::new();
    let mut edges: Vec<(String, String)> = Vec::new();
    for (id, node) in &nodes {
        match &node.record.parent_id {
            Some(parent) if nodes.contains_key(parent) => edges.push((parent.clone(), id.clone())),
            Some(_) => {
                orphans.push(id.clone());
                roots.push(id.clone());
            }
            None => roots.push(id.clone()),
        }
    }
    for (parent, child) in edges {
        nodes.get_mut(&parent).expect("resolved parent").children.push(child);
    }
    let keys: Vec<String> = nodes.keys().cloned().collect();
    for key in keys {
        let mut children = std::mem::take(&mut nodes.get_mut(&key).unwrap().children);
        chronological(&nodes, &mut children);
        nodes.get_mut(&key).unwrap().children = children;
    }
    chronological(&nodes, &mut roots);

    // Every node must be reachable from a root; anything else sits on a cycle.
    let mut seen: HashSet<&str> = HashSet::with_capacity(nodes.len());
    let mut stack: Vec<&str> = roots.iter().map(String::as_str).collect();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        stack.extend(nodes[id].children.iter().map(String::as_str));
    }
    if seen.len() != nodes.len() {
        let ids = nodes
            .keys()
            .filter(|k| !seen.contains(k.as_str()))
            .cloned()
            .collect();
        return Err(IngestError::Cycle {
            post_id: post_id.to_string(),
            ids,
        });
    }

    Ok(CommentForest {
        post_id: post_id.to_string(),
        nodes,
        roots,
        orphans,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    /// Upper bound on accepted records buffered while grouping by post.
    pub max_buffered_records: usize,
    pub execution: Execution,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            max_buffered_records: 50_000_000,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MonthIngest {
    /// One forest per post id, in ascending post-id order.
    pub forests: Vec<CommentForest>,
    pub stats: IngestStats,
    pub skips: BTreeMap<String, u64>,
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let reader: Box<dyn Read> = match ext {
        #[cfg(feature = "compression")]
        "gz" => Box::new(flate2::read::MultiGzDecoder::new(file)),
        #[cfg(feature = "compression")]
        "zst" => Box::new(zstd::stream::read::Decoder::new(file).map_err(io_err)?),
        #[cfg(not(feature = "compression"))]
        "gz" | "zst" => {
            return Err(IngestError::CompressionUnavailable {
                path: path.to_path_buf(),
            })
        }
        _ => Box::new(file),
    };
    Ok(Box::new(BufReader::new(reader)))
}

/// Validated records of one dump, grouped by post id, with skip counts by
/// reason.
#[derive(Debug, Clone, Default)]
pub struct RawMonth {
    pub by_post: BTreeMap<String, Vec<CommentRecord>>,
    pub stats: IngestStats,
    pub skips: BTreeMap<String, u64>,
}

/// Reads and validates every record in a dump.
pub fn read_month(path: &Path, options: &IngestOptions) -> Result<RawMonth, IngestError> {
    let reader = open_reader(path)?;
    let mut stats = IngestStats::default();
    let mut skips: BTreeMap<String, u64> = BTreeMap::new();
    let mut by_post: BTreeMap<String, Vec<CommentRecord>> = BTreeMap::new();
    let mut buffered = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        stats.records_read += 1;
        match parse_comment_line(&line, idx + 1)? {
            ParsedLine::Skip(reason) => {
                stats.records_skipped += 1;
                let key = serde_json::to_value(reason)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                *skips.entry(key).or_default() += 1;
            }
            ParsedLine::Record(record) => {
                buffered += 1;
                if buffered > options.max_buffered_records {
                    return Err(IngestError::MemoryBudget {
                        path: path.to_path_buf(),
                        limit: options.max_buffered_records,
                    });
                }
                by_post.entry(record.link_id.clone()).or_default().push(record);
            }
        }
    }
    Ok(RawMonth { by_post, stats, skips })
}

/// Ingests one monthly dump into per-post forests.
pub fn ingest_month(path: &Path, options: &IngestOptions) -> Result<MonthIngest, IngestError> {
    let RawMonth {
        by_post,
        mut stats,
        skips,
    } = read_month(path, options)?;
    let groups: Vec<(String, Vec<CommentRecord>)> = by_post.into_iter().collect();
    let forests = options
        .execution
        .map_owned(groups, |(post, records)| build_forest(records, &post))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    stats.forests_built = forests.len() as u64;
    stats.orphans_promoted = forests.iter().map(|f| f.orphans.len() as u64).sum();
    Ok(MonthIngest {
        forests,
        stats,
        skips,
    })
}

/// Distinct authors across a set of forests.
pub fn authors<'a>(forests: impl IntoIterator<Item = &'a CommentForest>) -> BTreeSet<&'a str> {
    forests
        .into_iter()
        .flat_map(|f| f.records().map(|r| r.author.as_str()))
        .collect()
}
