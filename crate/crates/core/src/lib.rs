//! Symbolic clinical-reasoning rewards for multi-turn diagnostic dialogue.
//!
//! The crate is organised around a [`graph::ReasoningGraph`] of valid
//! answer-category paths. Free-text answers are mapped onto categories by the
//! keyword rules in [`classifier`], scored by [`reward`], generated by
//! [`synth`], evaluated by [`eval`], and optimised by the tabular policy
//! simulator in [`sim`].

pub mod classifier;
pub mod eval;
pub mod graph;
pub mod hashing;
pub mod reward;
pub mod sim;
pub mod synth;

pub use classifier::{ClassifiedTurn, Lexicon};
pub use graph::{Category, ReasoningGraph, ReasoningPath, Step};
pub use reward::{RewardBreakdown, RewardConfig};

/// Toolkit version embedded in every output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
