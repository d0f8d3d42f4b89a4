//! Byte-level BPE with four reserved special tokens.
//!
//! Id layout: `0..256` are raw bytes, then one id per learned merge in
//! merge order, then SOT, EOT, SEP and PAD at the very top. Text is split
//! into pretokens at whitespace boundaries with the whitespace attached to
//! the following word, so merges never cross a word start.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const BYTE_TOKENS: usize = 256;
pub const NUM_SPECIALS: usize = 4;
pub const DEFAULT_VOCAB_SIZE: usize = 8192;
const FILE_MAGIC: &str = "convctl-bpe";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary size {target} is below the minimum {minimum}")]
    TargetTooSmall { target: usize, minimum: usize },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("tokenizer file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Sot,
    Eot,
    Sep,
    Pad,
}

impl Special {
    pub const ALL: [Special; NUM_SPECIALS] = [Special::Sot, Special::Eot, Special::Sep, Special::Pad];

    pub fn escape(self) -> &'static str {
        match self {
            Special::Sot => "<sot>",
            Special::Eot => "<eot>",
            Special::Sep => "<sep>",
            Special::Pad => "<pad>",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(u32, u32)>,
    /// Byte expansion of every non-special id.
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

impl Vocabulary {
    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self, TokenizerError> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = pieces.len() as u32;
            if a >= next || b >= next {
                return Err(TokenizerError::Format {
                    line: rank + 2,
                    message: format!("merge references undefined token ({a}, {b})"),
                });
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
            ranks.insert((a, b), rank as u32);
        }
        Ok(Self {
            merges,
            pieces,
            ranks,
        })
    }

    /// Vocabulary with no merges: bytes plus specials.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges")
    }

    pub fn size(&self) -> usize {
        self.pieces.len() + NUM_SPECIALS
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn first_special(&self) -> u32 {
        self.pieces.len() as u32
    }

    pub fn special(&self, s: Special) -> u32 {
        self.first_special() + s as u32
    }

    pub fn sot(&self) -> u32 {
        self.special(Special::Sot)
    }

    pub fn eot(&self) -> u32 {
        self.special(Special::Eot)
    }

    pub fn sep(&self) -> u32 {
        self.special(Special::Sep)
    }

    pub fn pad(&self) -> u32 {
        self.special(Special::Pad)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.first_special() && (id as usize) < self.size()
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// Encodes plain text. Never emits special ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        for pre in pretokenize(text) {
            self.encode_pretoken(pre.as_bytes(), &mut out);
        }
        out
    }

    fn encode_pretoken(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = self.merges[rank as usize];
            let merged = BYTE_TOKENS as u32 + rank;
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        out.extend(ids);
    }

    /// Expands ids back to text. Specials render as `<sot>`, `<eot>`,
    /// `<sep>` and `<pad>`; byte runs that are not valid UTF-8 are replaced
    /// with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(piece) = self.piece(id) {
                bytes.extend_from_slice(piece);
            } else if self.is_special(id) {
                let special = Special::ALL[(id - self.first_special()) as usize];
                bytes.extend_from_slice(special.escape().as_bytes());
            } else {
                return Err(TokenizerError::UnknownId(id));
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Text serialization; loading it back is exact.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{FILE_MAGIC} v{FILE_VERSION} {}\n", self.size());
        for &(a, b) in &self.merges {
            let _ = writeln!(
                s,
                "{} {}",
                escape_bytes(&self.pieces[a as usize]),
                escape_bytes(&self.pieces[b as usize])
            );
        }
        s.push_str("[specials]\n");
        for sp in Special::ALL {
            let _ = writeln!(s, "{} {}", sp.escape(), self.special(sp));
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, message: String| TokenizerError::Format { line, message };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 3 || fields[0] != FILE_MAGIC || fields[1] != format!("v{FILE_VERSION}") {
            return Err(err(1, format!("bad header {header:?}")));
        }
        let size: usize = fields[2]
            .parse()
            .map_err(|_| err(1, format!("bad size {:?}", fields[2])))?;

        let mut lookup: HashMap<Vec<u8>, u32> =
            (0..=255u8).map(|b| (vec![b], b as u32)).collect();
        let mut merges = Vec::new();
        let mut specials_seen = false;
        for (idx, line) in lines.by_ref() {
            if line == "[specials]" {
                specials_seen = true;
                break;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| err(idx + 1, "merge line needs two tokens".into()))?;
            let a = unescape_bytes(a).map_err(|m| err(idx + 1, m))?;
            let b = unescape_bytes(b).map_err(|m| err(idx + 1, m))?;
            let ia = *lookup
                .get(&a)
                .ok_or_else(|| err(idx + 1, "left token not yet defined".into()))?;
            let ib = *lookup
                .get(&b)
                .ok_or_else(|| err(idx + 1, "right token not yet defined".into()))?;
            let mut joined = a;
            joined.extend_from_slice(&b);
            lookup.insert(joined, (BYTE_TOKENS + merges.len()) as u32);
            merges.push((ia, ib));
        }
        if !specials_seen {
            return Err(err(0, "missing [specials] section".into()));
        }
        let vocab = Self::from_merges(merges)?;
        for (expected, (idx, line)) in Special::ALL.iter().zip(lines) {
            let want = format!("{} {}", expected.escape(), vocab.special(*expected));
            if line != want {
                return Err(err(idx + 1, format!("expected {want:?}, found {line:?}")));
            }
        }
        if vocab.size() != size {
            return Err(err(1, format!("header size {size} != {}", vocab.size())));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if b.is_ascii_graphic() && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape_bytes(s: &str) -> Result<Vec<u8>, String> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            let hex = s
                .get(i + 2..i + 4)
                .filter(|_| raw.get(i + 1) == Some(&b'x'))
                .ok_or_else(|| format!("bad escape in {s:?}"))?;
            out.push(u8::from_str_radix(hex, 16).map_err(|e| e.to_string())?);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}

/// Splits text before every whitespace run that precedes a word. Trailing
/// whitespace becomes its own pretoken.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws: Option<bool> = None;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if let Some(prev) = prev_ws {
            // A new pretoken begins where whitespace follows a word.
            if ws && !prev {
                out.push(&text[start..i]);
                start = i;
            }
        }
        prev_ws = Some(ws);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn joined_piece(pieces: &[Vec<u8>], (a, b): (u32, u32)) -> Vec<u8> {
    let mut joined = pieces[a as usize].clone();
    joined.extend_from_slice(&pieces[b as usize]);
    joined
}

/// Learns merges by repeatedly joining the most frequent adjacent pair.
/// Frequency ties go to the pair whose byte strings compare smallest. A pair
/// whose concatenation is already a token is never merged, so every id has
/// a distinct byte expansion and the file format stays unambiguous.
pub fn train_bpe<'a, I>(corpus: I, target_size: usize) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = &'a str>,
{
    let minimum = BYTE_TOKENS + NUM_SPECIALS;
    if target_size < minimum {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            minimum,
        });
    }

    let mut counts: HashMap<&'a str, u64> = HashMap::new();
    for text in corpus {
        for pre in pretokenize(text) {
            *counts.entry(pre).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.bytes().map(u32::from).collect(), c))
        .collect();
    words.sort();

    let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut known: HashSet<Vec<u8>> = pieces.iter().cloned().collect();
    let mut merges: Vec<(u32, u32)> = Vec::new();
    let budget = target_size - minimum;

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    for (w, c) in &words {
        for p in w.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += c;
        }
    }

    while merges.len() < budget {
        let best = pair_counts
            .iter()
            .filter(|(p, &c)| c >= 2 && !known.contains(&joined_piece(&pieces, **p)))
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Smaller byte strings win ties, so compare reversed.
                    let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                    let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some((a, b)) = best else { break };
        let new_id = pieces.len() as u32;
        let joined = joined_piece(&pieces, (a, b));
        known.insert(joined.clone());
        pieces.push(joined);
        merges.push((a, b));

        for (w, c) in words.iter_mut() {
            if w.len() < 2 || !w.windows(2).any(|p| p[0] == a && p[1] == b) {
                continue;
            }
            for p in w.windows(2) {
                let e = pair_counts.get_mut(&(p[0], p[1])).expect("counted pair");
                *e -= *c;
            }
            let mut next = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(w[i]);
                    i += 1;
                }
            }
            for p in next.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += *c;
            }
            *w = next;
        }
        pair_counts.retain(|_, c| *c > 0);
    }
    Vocabulary::from_merges(merges)
}
