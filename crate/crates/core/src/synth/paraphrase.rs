//! Paraphrase sources for template augmentation.
//!
//! Variants are accepted into a bank only when they classify to the same
//! category as their source template, so augmentation can never change the
//! ground truth of a conversation.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use super::bank::{Split, TemplateBank};
use crate::classifier::Lexicon;
use crate::graph::{Category, Step};

pub const ENDPOINT_ENV: &str = "PATHWISE_PARAPHRASE_ENDPOINT";
pub const API_KEY_ENV: &str = "PATHWISE_PARAPHRASE_API_KEY";
pub const MODEL_ENV: &str = "PATHWISE_PARAPHRASE_MODEL";
const DEFAULT_MODEL: &str = "gpt-4";

#[derive(Debug, Error)]
pub enum ParaphraseError {
    #[error("paraphrase endpoint not configured (set {ENDPOINT_ENV})")]
    NotConfigured,
    #[error("paraphrase request failed: {0}")]
    Transport(String),
    #[error("paraphrase response malformed: {0}")]
    Malformed(String),
}

/// What kind of sentence is being rephrased.
#[derive(Debug, Clone, Copy)]
pub enum ParaphraseKind<'a> {
    Question,
    /// An answer, together with the question it responds to.
    Answer { question: &'a str },
}

pub trait Paraphraser {
    /// Up to `n` rephrasings of `text`.
    fn rephrase(&self, text: &str, kind: ParaphraseKind<'_>, n: usize) -> Result<Vec<String>, ParaphraseError>;
}

/// Prompt sent for question rephrasing; the sentence follows the instruction.
pub fn question_prompt(sentence: &str, n: usize) -> String {
    format!(
        "Perform {n} times augmentation of the following sentence, it is for medical questions so make sure you preserve the meaning concisely.\n\n{sentence}"
    )
}

pub fn answer_prompt(sentence: &str, question: &str, n: usize) -> String {
    format!(
        "Perform {n} times augmentation of the following sentence, it is for medical diagnosis so make sure you preserve the meaning concisely: '{sentence}'. Also note that the question is '{question}', also don't repeat anything related to in response to the question, just make sure the single sentence is grammatically correct and makes sense."
    )
}

/// Splits a model reply into one variant per line, dropping list markers
/// and surrounding quotes.
pub fn parse_variants(reply: &str, n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in reply.lines() {
        let mut s = line.trim();
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 && s[digits..].starts_with(['.', ')', ':']) {
            s = &s[digits + 1..];
        } else if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
            s = rest;
        }
        let s = s.trim().trim_matches(|c| c == '"' || c == '\'').trim();
        if !s.is_empty() && !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
        if out.len() == n {
            break;
        }
    }
    out
}

/// Variants looked up from a fixed table, typically the bank's own list.
#[derive(Debug, Clone, Default)]
pub struct OfflinePool {
    variants: BTreeMap<String, Vec<String>>,
}

impl OfflinePool {
    pub fn new(variants: BTreeMap<String, Vec<String>>) -> Self {
        OfflinePool { variants }
    }

    pub fn from_bank(bank: &TemplateBank) -> Self {
        let mut variants = BTreeMap::new();
        let sources = bank
            .question_templates()
            .map(|(_, t)| t)
            .chain(bank.answer_templates().map(|(_, _, t)| t));
        for t in sources {
            let v = bank.paraphrases_of(t);
            if !v.is_empty() {
                variants.insert(t.to_string(), v.to_vec());
            }
        }
        OfflinePool { variants }
    }
}

impl Paraphraser for OfflinePool {
    fn rephrase(&self, text: &str, _kind: ParaphraseKind<'_>, n: usize) -> Result<Vec<String>, ParaphraseError> {
        Ok(self.variants.get(text).map(|v| v.iter().take(n).cloned().collect()).unwrap_or_default())
    }
}

/// Chat-completions style remote model.
#[derive(Debug, Clone)]
pub struct ExternalLlm {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl ExternalLlm {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ExternalLlm {
            endpoint: endpoint.into(),
            api_key: None,
            model: DEFAULT_MODEL.to_string(),
            timeout: Duration::from_secs(60),
        }
    }

    pub fn from_env() -> Result<Self, ParaphraseError> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| ParaphraseError::NotConfigured)?;
        let mut llm = ExternalLlm::new(endpoint);
        llm.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        if let Ok(model) = std::env::var(MODEL_ENV) {
            llm.model = model;
        }
        Ok(llm)
    }

    fn complete(&self, prompt: &str) -> Result<String, ParaphraseError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut request = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| ParaphraseError::Transport(e.to_string()))?;
        let reply: ChatReply = response
            .body_mut()
            .read_json()
            .map_err(|e| ParaphraseError::Malformed(e.to_string()))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ParaphraseError::Malformed("no choices".into()))
    }
}

impl Paraphraser for ExternalLlm {
    fn rephrase(&self, text: &str, kind: ParaphraseKind<'_>, n: usize) -> Result<Vec<String>, ParaphraseError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let prompt = match kind {
            ParaphraseKind::Question => question_prompt(text, n),
            ParaphraseKind::Answer { question } => answer_prompt(text, question, n),
        };
        let reply = self.complete(&prompt)?;
        Ok(parse_variants(&reply, n).into_iter().filter(|v| v != text).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AugmentReport {
    pub accepted: usize,
    /// Variants that classified to a different category.
    pub discarded: usize,
    /// Variants already present somewhere in the bank.
    pub duplicates: usize,
}

/// Keeps the variants of an answer template that classify like it.
pub fn filter_variants(
    lexicon: &Lexicon,
    step: Step,
    category: Category,
    variants: Vec<String>,
) -> (Vec<String>, usize) {
    let before = variants.len();
    let kept: Vec<String> = variants
        .into_iter()
        .filter(|v| lexicon.classify(step, v).category == category)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Adds up to `n` paraphrases for every question and answer template.
pub fn augment_bank(
    bank: &mut TemplateBank,
    lexicon: &Lexicon,
    paraphraser: &dyn Paraphraser,
    n: usize,
) -> Result<AugmentReport, ParaphraseError> {
    let mut report = AugmentReport::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for split in Split::ALL {
        for step in Step::ALL {
            seen.extend(bank.questions(step, split));
            for &cat in step.categories() {
                seen.extend(bank.answers(step, cat, split));
            }
        }
    }
    let mut fresh = |variants: Vec<String>, report: &mut AugmentReport| -> Vec<String> {
        let mut out = Vec::new();
        for v in variants {
            if seen.insert(v.clone()) {
                out.push(v);
            } else {
                report.duplicates += 1;
            }
        }
        out
    };

    let questions: Vec<(Step, String)> = bank.question_templates().map(|(s, t)| (s, t.to_string())).collect();
    for (_, template) in &questions {
        let variants = paraphraser.rephrase(template, ParaphraseKind::Question, n)?;
        let variants = fresh(variants, &mut report);
        report.accepted += variants.len();
        bank.add_paraphrases(template, variants);
    }

    let answers: Vec<(Step, Category, String)> =
        bank.answer_templates().map(|(s, c, t)| (s, c, t.to_string())).collect();
    for (step, cat, template) in &answers {
        let split = if bank.answers(*step, *cat, Split::Train).contains(template) {
            Split::Train
        } else {
            Split::Eval
        };
        let question = bank.questions(*step, split).into_iter().next().unwrap_or_default();
        let variants = paraphraser.rephrase(template, ParaphraseKind::Answer { question: &question }, n)?;
        let (kept, dropped) = filter_variants(lexicon, *step, *cat, variants);
        report.discarded += dropped;
        let kept = fresh(kept, &mut report);
        report.accepted += kept.len();
        bank.add_paraphrases(template, kept);
    }
    Ok(report)
}
