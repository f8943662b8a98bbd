//! Noisy-label learning toolkit built around joint negative and positive
//! learning: complementary-label (NL/NL+) and weighted cross-entropy
//! (PL/PL+) losses with exact logit gradients, the PL+ candidate-selection
//! rule, label-noise injection, single-stage and three-stage training
//! pipelines, filtering evaluation via average precision, and a
//! pseudo-labeling stage.
//!
//! See the `book/` directory for a guided tour; its code snippets run as
//! doc-tests through the [`guide`] module.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod prob;

pub mod cli;
pub mod config;

pub use error::{Error, Result};

/// Runnable versions of the guide chapters; `cargo test` checks every code
/// block in `book/src/`.
pub mod guide {
    #![doc = include_str!("../../../book/src/introduction.md")]
    //!
    #![doc = include_str!("../../../book/src/losses.md")]
    //!
    #![doc = include_str!("../../../book/src/selection-and-filtering.md")]
    //!
    #![doc = include_str!("../../../book/src/noise.md")]
    //!
    #![doc = include_str!("../../../book/src/training.md")]
    //!
    #![doc = include_str!("../../../book/src/cli.md")]
}
