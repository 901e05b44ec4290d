//! Composite conversation reward.
//!
//! ```text
//! total = mean_t 1{pred_t = target_t}               correctness
//!       + lambda * 1{canonical predicted path valid} consistency
//!       - w_l * mean_t clip01(|len_t - tlen_t| / tlen_t - tau)
//!       - w_m * (NoMatch answers) / T
//! ```
//!
//! Only correctness is a per-turn average of a 0/1 score; consistency looks
//! at the whole conversation. Turns are re-sorted into canonical step order
//! for the consistency check and the latest answer per step wins. Steps that
//! were never asked (improvised conversations) are left open and the path
//! counts as valid when some valid path agrees with every answered step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Lexicon;
use crate::graph::{Category, ReasoningGraph, Step, STEP_COUNT};
use crate::hashing::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("prediction/target length mismatch ({predicted} vs {target})")]
    LengthMismatch { predicted: usize, target: usize },
    #[error("incomplete conversation: {0}")]
    IncompleteConversation(String),
    #[error("target of turn {turn} has zero tokens")]
    DegenerateTarget { turn: usize },
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

fn default_lambda() -> f64 {
    0.5
}
fn default_tolerance() -> f64 {
    0.3
}
fn default_weight() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Consistency weight.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Relative length deviation tolerated without penalty.
    #[serde(default = "default_tolerance")]
    pub length_tolerance: f64,
    #[serde(default = "default_weight")]
    pub length_weight: f64,
    #[serde(default = "default_weight")]
    pub nomatch_weight: f64,
    #[serde(default = "default_true")]
    pub enable_correctness: bool,
    #[serde(default = "default_true")]
    pub enable_consistency: bool,
    #[serde(default = "default_true")]
    pub enable_length: bool,
    #[serde(default = "default_true")]
    pub enable_nomatch: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda: default_lambda(),
            length_tolerance: default_tolerance(),
            length_weight: default_weight(),
            nomatch_weight: default_weight(),
            enable_correctness: true,
            enable_consistency: true,
            enable_length: true,
            enable_nomatch: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let weights = [
            ("lambda", self.lambda),
            ("length_weight", self.length_weight),
            ("nomatch_weight", self.nomatch_weight),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(RewardError::InvalidConfig(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(0.0..10.0).contains(&self.length_tolerance) {
            return Err(RewardError::InvalidConfig(format!(
                "length_tolerance must lie in [0, 10), got {}",
                self.length_tolerance
            )));
        }
        Ok(())
    }

    /// Largest total any conversation can reach under this config.
    pub fn max_total(&self) -> f64 {
        let c = if self.enable_correctness { 1.0 } else { 0.0 };
        let s = if self.enable_consistency { self.lambda } else { 0.0 };
        c + s
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub correctness: f64,
    pub consistency: f64,
    pub length_penalty: f64,
    pub nomatch_penalty: f64,
    pub total: f64,
    pub lambda: f64,
    pub per_turn_correct: Vec<bool>,
    /// Latest answer per step in canonical order; `None` for steps never asked.
    pub predicted_path: Vec<Option<Category>>,
    pub path_valid: bool,
}

/// Whitespace token count used for the length term.
pub fn token_length(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn correctness_term(predicted: &[Category], target: &[Category]) -> Result<f64, RewardError> {
    if predicted.len() != target.len() {
        return Err(RewardError::LengthMismatch {
            predicted: predicted.len(),
            target: target.len(),
        });
    }
    if predicted.is_empty() {
        return Err(RewardError::IncompleteConversation("no turns".into()));
    }
    let hits = predicted.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Canonical step-ordered view of a turn sequence; later answers to the same
/// step overwrite earlier ones.
pub fn canonical_path(turns: &[(Step, Category)]) -> Result<[Option<Category>; STEP_COUNT], RewardError> {
    if turns.is_empty() {
        return Err(RewardError::IncompleteConversation("no turns".into()));
    }
    let mut path = [None; STEP_COUNT];
    for (step, category) in turns {
        if !step.admits(*category) {
            return Err(RewardError::IncompleteConversation(format!(
                "category {category} answered for {step}"
            )));
        }
        path[step.ordinal()] = Some(*category);
    }
    Ok(path)
}

pub fn consistency_term(
    graph: &ReasoningGraph,
    turns: &[(Step, Category)],
    lambda: f64,
) -> Result<f64, RewardError> {
    let path = canonical_path(turns)?;
    Ok(if graph.is_consistent(&path) { lambda } else { 0.0 })
}

/// Length penalty from `(predicted, target)` token counts.
pub fn length_term_from_counts(
    counts: &[(usize, usize)],
    tolerance: f64,
    weight: f64,
) -> Result<f64, RewardError> {
    if counts.is_empty() {
        return Err(RewardError::IncompleteConversation("no turns".into()));
    }
    let mut sum = 0.0;
    for (turn, &(pred, target)) in counts.iter().enumerate() {
        if target == 0 {
            return Err(RewardError::DegenerateTarget { turn });
        }
        sum += turn_length_penalty(pred, target, tolerance);
    }
    Ok(-weight * sum / counts.len() as f64)
}

pub(crate) fn turn_length_penalty(pred: usize, target: usize, tolerance: f64) -> f64 {
    let rel = (pred as f64 - target as f64).abs() / target as f64;
    (rel - tolerance).clamp(0.0, 1.0)
}

pub fn length_term<P: AsRef<str>, T: AsRef<str>>(
    predicted: &[P],
    target: &[T],
    tolerance: f64,
    weight: f64,
) -> Result<f64, RewardError> {
    if predicted.len() != target.len() {
        return Err(RewardError::LengthMismatch {
            predicted: predicted.len(),
            target: target.len(),
        });
    }
    let counts: Vec<_> = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (token_length(p.as_ref()), token_length(t.as_ref())))
        .collect();
    length_term_from_counts(&counts, tolerance, weight)
}

pub fn nomatch_term(predicted: &[Category], weight: f64) -> Result<f64, RewardError> {
    if predicted.is_empty() {
        return Err(RewardError::IncompleteConversation("no turns".into()));
    }
    let misses = predicted.iter().filter(|c| **c == Category::NoMatch).count();
    Ok(-weight * misses as f64 / predicted.len() as f64)
}

/// One turn already reduced to categories and token counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryTurn {
    pub step: Step,
    pub predicted: Category,
    pub target: Category,
    pub predicted_len: usize,
    pub target_len: usize,
}

/// Reward over classified turns.
pub fn reward_from_categories(
    graph: &ReasoningGraph,
    turns: &[CategoryTurn],
    config: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    config.validate()?;
    if turns.is_empty() {
        return Err(RewardError::IncompleteConversation("no turns".into()));
    }
    let predicted: Vec<Category> = turns.iter().map(|t| t.predicted).collect();
    let target: Vec<Category> = turns.iter().map(|t| t.target).collect();
    let stepped: Vec<(Step, Category)> = turns.iter().map(|t| (t.step, t.predicted)).collect();
    let counts: Vec<(usize, usize)> = turns.iter().map(|t| (t.predicted_len, t.target_len)).collect();

    let path = canonical_path(&stepped)?;
    let path_valid = graph.is_consistent(&path);
    let length = length_term_from_counts(&counts, config.length_tolerance, config.length_weight)?;

    let correctness = if config.enable_correctness {
        correctness_term(&predicted, &target)?
    } else {
        0.0
    };
    let consistency = if config.enable_consistency && path_valid {
        config.lambda
    } else {
        0.0
    };
    let length_penalty = if config.enable_length { length } else { 0.0 };
    let nomatch_penalty = if config.enable_nomatch {
        nomatch_term(&predicted, config.nomatch_weight)?
    } else {
        0.0
    };
    let total = correctness + consistency + length_penalty + nomatch_penalty;

    Ok(RewardBreakdown {
        correctness,
        consistency,
        length_penalty,
        nomatch_penalty,
        total,
        lambda: config.lambda,
        per_turn_correct: predicted.iter().zip(&target).map(|(p, t)| p == t).collect(),
        predicted_path: path.to_vec(),
        path_valid,
    })
}

/// Free-text turn as received from a trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTurn {
    pub step: Step,
    pub prediction: String,
    pub target: String,
    /// Overrides the token count of `target` for the length term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_length_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConversation {
    pub breakdown: RewardBreakdown,
    pub predicted_categories: Vec<Category>,
    pub target_categories: Vec<Category>,
}

/// Classifies predictions and targets, then scores the conversation.
pub fn score_turns(
    graph: &ReasoningGraph,
    lexicon: &Lexicon,
    turns: &[ScoredTurn],
    config: &RewardConfig,
) -> Result<ScoredConversation, RewardError> {
    let mut cat_turns = Vec::with_capacity(turns.len());
    for (i, t) in turns.iter().enumerate() {
        let target_len = t.target_length_tokens.unwrap_or_else(|| token_length(&t.target));
        if target_len == 0 {
            return Err(RewardError::DegenerateTarget { turn: i });
        }
        cat_turns.push(CategoryTurn {
            step: t.step,
            predicted: lexicon.classify(t.step, &t.prediction).category,
            target: lexicon.classify(t.step, &t.target).category,
            predicted_len: token_length(&t.prediction),
            target_len,
        });
    }
    let breakdown = reward_from_categories(graph, &cat_turns, config)?;
    Ok(ScoredConversation {
        breakdown,
        predicted_categories: cat_turns.iter().map(|t| t.predicted).collect(),
        target_categories: cat_turns.iter().map(|t| t.target).collect(),
    })
}

pub fn compute_reward(
    graph: &ReasoningGraph,
    lexicon: &Lexicon,
    turns: &[ScoredTurn],
    config: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    score_turns(graph, lexicon, turns, config).map(|s| s.breakdown)
}
