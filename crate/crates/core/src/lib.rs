//! Instance-based on-the-fly adaptation for end-to-end speech translation.
//!
//! Each translation request retrieves acoustically similar (audio, translation)
//! pairs from a data pool, fine-tunes a private copy of a pretrained
//! speech-to-text model on them for a few epochs, translates, and throws the
//! copy away.

// `!(x > 0.0)` style guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod datapool;
pub mod engine;
pub mod error;
pub mod harness;
mod hash;
pub mod model;
pub mod optim;
pub mod tensor;
