//! Packing of one (conversation, target speaker) pair into a model input.
//!
//! A sample is the target speaker's reference segment followed by the
//! conversation segment:
//!
//! ```text
//! [SEP P.. P] [SEP R.. R] ... | [SOT] turn EOT turn EOT ...
//!  parent       reply           NS    S or NS per author
//! ```
//!
//! The reference segment is cut from the end at 512 tokens, the
//! conversation segment from the beginning at 512 tokens. Only tokens of
//! the target's own turns (including their EOT) carry loss.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{ConversationPath, ReferenceTuple, Turn, UserReferenceStore};
use crate::par::Execution;
use crate::tokenizer::Vocabulary;

pub const MAX_REFERENCE_TOKENS: usize = 512;
pub const MAX_CONVERSATION_TOKENS: usize = 512;
pub const MAX_SAMPLE_TOKENS: usize = MAX_REFERENCE_TOKENS + MAX_CONVERSATION_TOKENS;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("target speaker {0:?} has no turn in the conversation")]
    TargetAbsent(String),
    #[error("sample violates layout invariant: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TokenType {
    /// Parent comment inside the reference history.
    #[serde(rename = "P")]
    RefParent = 0,
    /// The speaker's own reply inside the reference history.
    #[serde(rename = "R")]
    RefReply = 1,
    /// Conversation turn by the target speaker.
    #[serde(rename = "S")]
    Target = 2,
    /// Conversation turn by anyone else, and SOT.
    #[serde(rename = "NS")]
    Other = 3,
}

impl TokenType {
    pub const COUNT: usize = 4;

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Self::RefParent),
            1 => Some(Self::RefReply),
            2 => Some(Self::Target),
            3 => Some(Self::Other),
            _ => None,
        }
    }

    pub fn is_reference(self) -> bool {
        matches!(self, Self::RefParent | Self::RefReply)
    }
}

/// A run of tokens with their types and loss mask.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Segment {
    pub ids: Vec<u32>,
    pub types: Vec<TokenType>,
    pub loss_mask: Vec<u8>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push_all(&mut self, ids: &[u32], ty: TokenType, mask: u8) {
        self.ids.extend_from_slice(ids);
        self.types.extend(std::iter::repeat_n(ty, ids.len()));
        self.loss_mask.extend(std::iter::repeat_n(mask, ids.len()));
    }

    fn keep_first(&mut self, n: usize) {
        self.ids.truncate(n);
        self.types.truncate(n);
        self.loss_mask.truncate(n);
    }

    fn keep_last(&mut self, n: usize) {
        let drop = self.len().saturating_sub(n);
        self.ids.drain(..drop);
        self.types.drain(..drop);
        self.loss_mask.drain(..drop);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub conversation_id: String,
    pub target_speaker: String,
    pub token_ids: Vec<u32>,
    pub type_ids: Vec<TokenType>,
    pub position_ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub ref_len: usize,
    pub conv_len: usize,
}

impl EncodedSample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }

    /// The same sample with the reference segment removed.
    pub fn without_references(&self) -> EncodedSample {
        let r = self.ref_len;
        EncodedSample {
            conversation_id: self.conversation_id.clone(),
            target_speaker: self.target_speaker.clone(),
            token_ids: self.token_ids[r..].to_vec(),
            type_ids: self.type_ids[r..].to_vec(),
            position_ids: (0..self.conv_len as u32).collect(),
            loss_mask: self.loss_mask[r..].to_vec(),
            ref_len: 0,
            conv_len: self.conv_len,
        }
    }

    /// Checks every layout invariant of a packed sample.
    pub fn validate(&self) -> Result<(), EncodeError> {
        let l = self.token_ids.len();
        let bad = |m: String| Err(EncodeError::Layout(m));
        if self.type_ids.len() != l || self.position_ids.len() != l || self.loss_mask.len() != l {
            return bad("list lengths differ".into());
        }
        if self.ref_len + self.conv_len != l {
            return bad(format!("ref_len {} + conv_len {} != {l}", self.ref_len, self.conv_len));
        }
        if self.ref_len > MAX_REFERENCE_TOKENS || self.conv_len > MAX_CONVERSATION_TOKENS {
            return bad(format!("segment too long ({}, {})", self.ref_len, self.conv_len));
        }
        if self.position_ids.iter().enumerate().any(|(i, &p)| p as usize != i) {
            return bad("positions are not 0..L".into());
        }
        for (i, ty) in self.type_ids.iter().enumerate() {
            if ty.is_reference() != (i < self.ref_len) {
                return bad(format!("type {ty:?} at position {i}"));
            }
            let m = self.loss_mask[i];
            if m > 1 || (m == 1 && *ty != TokenType::Target) {
                return bad(format!("mask {m} on {ty:?} at position {i}"));
            }
        }
        Ok(())
    }
}

/// The target's stored tuples minus any whose reply is a turn of `conv`.
pub fn select_references(
    conv: &ConversationPath,
    store: &UserReferenceStore,
    target: &str,
) -> Vec<ReferenceTuple> {
    let in_conv: HashSet<&str> = conv.turns.iter().map(|t| t.comment_id.as_str()).collect();
    store
        .get(target)
        .iter()
        .filter(|t| !in_conv.contains(t.reply_id.as_str()))
        .cloned()
        .collect()
}

/// `[SEP parent]` (typed P, omitted for top-level replies) then `[SEP reply]`
/// (typed R) per tuple, cut from the end at 512 tokens.
pub fn encode_reference_history(refs: &[ReferenceTuple], vocab: &Vocabulary) -> Segment {
    let mut seg = Segment::default();
    let sep = vocab.sep();
    for tuple in refs {
        if let Some(parent) = &tuple.parent {
            seg.push_all(&[sep], TokenType::RefParent, 0);
            seg.push_all(&vocab.encode(parent), TokenType::RefParent, 0);
        }
        seg.push_all(&[sep], TokenType::RefReply, 0);
        seg.push_all(&vocab.encode(&tuple.reply), TokenType::RefReply, 0);
        if seg.len() >= MAX_REFERENCE_TOKENS {
            break;
        }
    }
    seg.keep_first(MAX_REFERENCE_TOKENS);
    seg
}

/// Conversation segment for `target`. When `open_turn` is given, an
/// unfinished target turn with those tokens (and no EOT) is appended.
fn conversation_segment(
    turns: &[Turn],
    target: &str,
    vocab: &Vocabulary,
    open_turn: Option<&[u32]>,
) -> Result<Segment, EncodeError> {
    let last = turns.iter().rposition(|t| t.author == target);
    let kept = match (last, open_turn) {
        (_, Some(_)) => turns,
        (Some(i), None) => &turns[..=i],
        (None, None) => return Err(EncodeError::TargetAbsent(target.to_string())),
    };
    let mut seg = Segment::default();
    seg.push_all(&[vocab.sot()], TokenType::Other, 0);
    for turn in kept {
        let (ty, mask) = if turn.author == target {
            (TokenType::Target, 1)
        } else {
            (TokenType::Other, 0)
        };
        seg.push_all(&vocab.encode(&turn.text), ty, mask);
        seg.push_all(&[vocab.eot()], ty, mask);
    }
    if let Some(open) = open_turn {
        seg.push_all(open, TokenType::Target, 1);
    }
    seg.keep_last(MAX_CONVERSATION_TOKENS);
    Ok(seg)
}

/// Drops turns after the target's last one, types each turn S or NS and
/// keeps the final 512 tokens.
pub fn encode_conversation(
    conv: &ConversationPath,
    target: &str,
    vocab: &Vocabulary,
) -> Result<Segment, EncodeError> {
    conversation_segment(&conv.turns, target, vocab, None)
}

/// Context for generating the target's next turn: every existing turn plus an
/// open target turn holding `partial`.
pub fn encode_generation_context(
    conv: &ConversationPath,
    target: &str,
    partial: &[u32],
    vocab: &Vocabulary,
) -> Segment {
    conversation_segment(&conv.turns, target, vocab, Some(partial))
        .expect("open turn always present")
}

pub fn assemble_sample(
    reference: Segment,
    conversation: Segment,
    target: &str,
    conversation_id: &str,
) -> Result<EncodedSample, EncodeError> {
    let ref_len = reference.len();
    let conv_len = conversation.len();
    let mut token_ids = reference.ids;
    token_ids.extend(conversation.ids);
    let mut type_ids = reference.types;
    type_ids.extend(conversation.types);
    // Reference tokens never carry loss.
    let mut loss_mask = vec![0u8; ref_len];
    loss_mask.extend(conversation.loss_mask);
    let sample = EncodedSample {
        conversation_id: conversation_id.to_string(),
        target_speaker: target.to_string(),
        position_ids: (0..token_ids.len() as u32).collect(),
        token_ids,
        type_ids,
        loss_mask,
        ref_len,
        conv_len,
    };
    sample.validate()?;
    Ok(sample)
}

/// Full sample for one target speaker.
pub fn encode_for_speaker(
    conv: &ConversationPath,
    store: &UserReferenceStore,
    target: &str,
    vocab: &Vocabulary,
) -> Result<EncodedSample, EncodeError> {
    let refs = select_references(conv, store, target);
    let reference = encode_reference_history(&refs, vocab);
    let conversation = encode_conversation(conv, target, vocab)?;
    assemble_sample(reference, conversation, target, &conv.conversation_id)
}

/// One sample per distinct author, in order of first appearance.
pub fn expand_per_speaker(
    conv: &ConversationPath,
    store: &UserReferenceStore,
    vocab: &Vocabulary,
) -> Vec<EncodedSample> {
    conv.speakers()
        .into_iter()
        .map(|s| encode_for_speaker(conv, store, s, vocab).expect("speaker appears in conversation"))
        .collect()
}

/// Encodes a whole corpus, preserving conversation order.
pub fn encode_corpus(
    conversations: &[ConversationPath],
    store: &UserReferenceStore,
    vocab: &Vocabulary,
    execution: Execution,
) -> Vec<EncodedSample> {
    execution
        .map(conversations, |c| expand_per_speaker(c, store, vocab))
        .into_iter()
        .flatten()
        .collect()
}
