//! Reference-conditioned conversation modeling.
//!
//! The pipeline mines multi-turn conversations and per-user reference
//! histories from comment dumps ([`ingest`], [`extract`]), tokenizes
//! ([`tokenizer`]) and packs them into token-typed samples ([`encode`]),
//! trains small transformer variants on a hand-written autodiff substrate
//! ([`tensor`], [`model`], [`train`]) and scores or samples conversations
//! ([`evalgen`]).

pub mod checkpoint;
pub mod dataset;
pub mod encode;
pub mod evalgen;
pub mod extract;
pub mod ingest;
pub mod model;
pub mod par;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use par::Execution;
