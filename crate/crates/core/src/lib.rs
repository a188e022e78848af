// SPDX-License-Identifier: Apache-2.0

//! Desk-scale multi-task sequence-to-sequence laboratory.
//!
//! A single encoder-decoder is trained on translation, monolingual
//! summarization and cross-lingual summarization data. The task is selected
//! by a token prepended to the source (`<Trans>`, `<Summary>`,
//! `<PseudoTrans>`), and summarization requests switch the decoder onto a
//! length-ratio positional encoding so that the output length can be
//! requested at inference time.
//!
//! ```text
//! corpus ──► router ──► model (train) ──► decode ──► metrics
//!    │                      ▲
//!    └──► pseudo ───────────┘
//! ```

pub mod corpus;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pseudo;
pub mod router;

pub use error::{Error, Result};
