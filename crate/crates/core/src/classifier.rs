//! Keyword rules that map a free-text answer onto an answer category.
//!
//! Matching runs sentence by sentence over case-folded word tokens:
//!
//! 1. Phrase keywords (more than one token) are matched first, longest
//!    first, and consume their tokens. A consumed negator no longer negates.
//! 2. Single-word keywords are matched on the remaining tokens. A match is
//!    suppressed when an unconsumed negator sits within the preceding
//!    `negation_window` tokens. Phrases are negated the same way unless the
//!    phrase itself opens with a negator ("no abnormality").
//! 3. A negator that is itself a keyword ("not" for a low-quality image)
//!    counts only if nothing negates it and it did not suppress a keyword of
//!    its own category.
//! 4. Several surviving categories are resolved by the step's precedence
//!    list; no survivor means `NoMatch`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Category, Step, UnknownStep, STEP_COUNT};
use crate::hashing::sha256_hex;

const DEFAULT_LEXICON: &str = include_str!("../config/lexicons/bma-default.toml");

const SENTENCE_BREAKS: &[char] = &['.', '!', '?', ';', '\n'];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LexiconError {
    #[error("malformed lexicon document: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("lexicon invariant violated: {0}")]
    Invariant(String),
}

/// Case-folded word tokens of `text`, punctuation removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn sentences(text: &str) -> impl Iterator<Item = Vec<String>> + '_ {
    text.split(SENTENCE_BREAKS)
        .map(tokenize)
        .filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Keyword {
    pub text: String,
    pub tokens: Vec<String>,
    pub is_phrase: bool,
}

impl Keyword {
    fn new(raw: &str) -> Option<Keyword> {
        let tokens = tokenize(raw);
        if tokens.is_empty() {
            return None;
        }
        Some(Keyword {
            text: tokens.join(" "),
            is_phrase: tokens.len() > 1,
            tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeywordRule {
    pub step: Step,
    pub category: Category,
    pub keywords: Vec<Keyword>,
}

/// Result of classifying one answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedTurn {
    pub step: Step,
    pub text: String,
    pub category: Category,
    pub matched_keyword: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconDocument {
    negators: Vec<String>,
    negation_window: usize,
    #[serde(default)]
    precedence: BTreeMap<String, Vec<String>>,
    steps: BTreeMap<String, StepDocument>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepDocument {
    categories: BTreeMap<String, Vec<String>>,
}

#[derive(Serialize)]
struct CanonicalLexicon<'a> {
    negators: &'a [String],
    negation_window: usize,
    precedence: &'a [Vec<Category>; STEP_COUNT],
    rules: &'a [KeywordRule],
}

/// Per-step matching tables derived from the rules.
#[derive(Debug, Clone, Default)]
struct StepTable {
    /// Phrases, longest first.
    phrases: Vec<(Category, Keyword)>,
    singles: HashMap<String, Category>,
}

/// Keyword rules for all five steps plus negation settings.
#[derive(Debug, Clone)]
pub struct Lexicon {
    rules: Vec<KeywordRule>,
    negators: Vec<String>,
    negation_window: usize,
    precedence: [Vec<Category>; STEP_COUNT],
    tables: [StepTable; STEP_COUNT],
    hash: String,
}

fn default_precedence(step: Step) -> Vec<Category> {
    use Category::*;
    match step {
        Step::ImageQuality => vec![LowQuality, HighQuality],
        Step::CellQuality => vec![Blood, Clot, Adequate],
        Step::Abnormality => vec![Inadequate, Abnormal, Normal],
        Step::Proliferation => vec![BlastProlif, PlasmaProlif, Inadequate, NormalProlif],
        Step::Diagnosis => vec![Aml, Mm, Inconclusive, Healthy],
    }
}

fn parse_category(step: Step, label: &str) -> Result<Category, LexiconError> {
    let category: Category = label
        .parse()
        .map_err(|e: crate::graph::UnknownCategory| LexiconError::Schema(format!("{e} for {step}")))?;
    if !step.admits(category) {
        return Err(LexiconError::Schema(format!(
            "category {category} does not belong to {step}"
        )));
    }
    Ok(category)
}

impl Lexicon {
    pub fn load(document: &str) -> Result<Self, LexiconError> {
        let doc: LexiconDocument =
            toml::from_str(document).map_err(|e| LexiconError::Parse(e.message().to_string()))?;
        Self::from_document(doc)
    }

    /// The shipped keyword table.
    pub fn bma_default() -> Self {
        Self::load(DEFAULT_LEXICON).expect("shipped lexicon config is valid")
    }

    fn from_document(doc: LexiconDocument) -> Result<Self, LexiconError> {
        let mut negators = Vec::new();
        for raw in &doc.negators {
            let toks = tokenize(raw);
            if toks.len() != 1 {
                return Err(LexiconError::Invariant(format!(
                    "negator `{raw}` must be a single word"
                )));
            }
            negators.push(toks.into_iter().next().unwrap());
        }

        let mut precedence: [Vec<Category>; STEP_COUNT] =
            std::array::from_fn(|i| default_precedence(Step::ALL[i]));
        for (name, labels) in &doc.precedence {
            let step: Step = name
                .parse()
                .map_err(|e: UnknownStep| LexiconError::Schema(e.to_string()))?;
            let order = labels
                .iter()
                .map(|l| parse_category(step, l))
                .collect::<Result<Vec<_>, _>>()?;
            precedence[step.ordinal()] = order;
        }

        let mut rules = Vec::new();
        for (name, step_doc) in &doc.steps {
            let step: Step = name
                .parse()
                .map_err(|e: UnknownStep| LexiconError::Schema(e.to_string()))?;
            for (label, raw_keywords) in &step_doc.categories {
                let category = parse_category(step, label)?;
                if category == Category::NoMatch {
                    if raw_keywords.is_empty() {
                        continue;
                    }
                    return Err(LexiconError::Invariant(format!(
                        "{step}/NoMatch must not carry keywords"
                    )));
                }
                let mut keywords = Vec::with_capacity(raw_keywords.len());
                for raw in raw_keywords {
                    let kw = Keyword::new(raw).ok_or_else(|| {
                        LexiconError::Invariant(format!("{step}/{category}: empty keyword `{raw}`"))
                    })?;
                    keywords.push(kw);
                }
                rules.push(KeywordRule {
                    step,
                    category,
                    keywords,
                });
            }
        }

        for step in Step::ALL {
            for &category in step.categories() {
                if category == Category::NoMatch {
                    continue;
                }
                let rule = rules
                    .iter()
                    .find(|r| r.step == step && r.category == category);
                match rule {
                    None => {
                        return Err(LexiconError::Invariant(format!(
                            "no keyword rule for {step}/{category}"
                        )))
                    }
                    Some(r) if r.keywords.is_empty() => {
                        return Err(LexiconError::Invariant(format!(
                            "empty keyword list for {step}/{category}"
                        )))
                    }
                    Some(_) => {}
                }
            }
            let mut expected: Vec<Category> = step
                .categories()
                .iter()
                .copied()
                .filter(|c| *c != Category::NoMatch)
                .collect();
            let mut given = precedence[step.ordinal()].clone();
            expected.sort();
            given.sort();
            if expected != given {
                return Err(LexiconError::Invariant(format!(
                    "precedence for {step} must list each non-NoMatch category exactly once"
                )));
            }
        }

        let mut tables: [StepTable; STEP_COUNT] = Default::default();
        for rule in &rules {
            let table = &mut tables[rule.step.ordinal()];
            for kw in &rule.keywords {
                let clash = if kw.is_phrase {
                    table.phrases.iter().any(|(_, k)| k.tokens == kw.tokens)
                } else {
                    table.singles.contains_key(&kw.tokens[0])
                };
                if clash {
                    return Err(LexiconError::Invariant(format!(
                        "keyword `{}` appears twice under {}",
                        kw.text, rule.step
                    )));
                }
                if kw.is_phrase {
                    table.phrases.push((rule.category, kw.clone()));
                } else {
                    table.singles.insert(kw.tokens[0].clone(), rule.category);
                }
            }
        }
        for table in &mut tables {
            // stable sort keeps file order among equal lengths
            table.phrases.sort_by_key(|p| std::cmp::Reverse(p.1.tokens.len()));
        }

        let canonical = CanonicalLexicon {
            negators: &negators,
            negation_window: doc.negation_window,
            precedence: &precedence,
            rules: &rules,
        };
        let hash = sha256_hex(serde_json::to_string(&canonical).expect("serializable").as_bytes());

        Ok(Lexicon {
            rules,
            negators,
            negation_window: doc.negation_window,
            precedence,
            tables,
            hash,
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn rules(&self) -> &[KeywordRule] {
        &self.rules
    }

    pub fn negators(&self) -> &[String] {
        &self.negators
    }

    pub fn negation_window(&self) -> usize {
        self.negation_window
    }

    pub fn precedence(&self, step: Step) -> &[Category] {
        &self.precedence[step.ordinal()]
    }

    pub fn keywords(&self, step: Step, category: Category) -> &[Keyword] {
        self.rules
            .iter()
            .find(|r| r.step == step && r.category == category)
            .map(|r| r.keywords.as_slice())
            .unwrap_or(&[])
    }

    fn is_negator(&self, token: &str) -> bool {
        self.negators.iter().any(|n| n == token)
    }

    pub fn classify(&self, step: Step, text: &str) -> ClassifiedTurn {
        let table = &self.tables[step.ordinal()];
        // (category, keyword, sentence, position)
        let mut survivors: Vec<(Category, String, usize, usize)> = Vec::new();

        for (si, tokens) in sentences(text).enumerate() {
            let n = tokens.len();
            let mut consumed = vec![false; n];
            let mut hits: Vec<(Category, &Keyword, usize)> = Vec::new();

            for (category, kw) in &table.phrases {
                let len = kw.tokens.len();
                let mut start = 0;
                while start + len <= n {
                    let free = consumed[start..start + len].iter().all(|c| !c);
                    if free && tokens[start..start + len] == kw.tokens[..] {
                        consumed[start..start + len].iter_mut().for_each(|c| *c = true);
                        hits.push((*category, kw, start));
                        start += len;
                    } else {
                        start += 1;
                    }
                }
            }

            let negator_at: Vec<bool> = (0..n)
                .map(|i| !consumed[i] && self.is_negator(&tokens[i]))
                .collect();
            let window_of = |p: usize| p.saturating_sub(self.negation_window)..p;
            let negated = |p: usize| window_of(p).any(|q| negator_at[q]);
            // categories each negator suppressed
            let mut suppressed_by: Vec<Vec<Category>> = vec![Vec::new(); n];

            for (category, kw, start) in hits {
                let self_negating = self.is_negator(&kw.tokens[0]);
                if !self_negating && negated(start) {
                    for q in window_of(start).filter(|&q| negator_at[q]) {
                        suppressed_by[q].push(category);
                    }
                } else {
                    survivors.push((category, kw.text.clone(), si, start));
                }
            }

            let mut negator_hits = Vec::new();
            for p in 0..n {
                if consumed[p] {
                    continue;
                }
                let Some(&category) = table.singles.get(&tokens[p]) else {
                    continue;
                };
                if negated(p) {
                    for q in window_of(p).filter(|&q| negator_at[q]) {
                        suppressed_by[q].push(category);
                    }
                } else if negator_at[p] {
                    negator_hits.push((category, p));
                } else {
                    survivors.push((category, tokens[p].clone(), si, p));
                }
            }
            for (category, p) in negator_hits {
                if !suppressed_by[p].contains(&category) {
                    survivors.push((category, tokens[p].clone(), si, p));
                }
            }
        }

        survivors.sort_by_key(|(_, _, si, p)| (*si, *p));
        let winner = self.precedence[step.ordinal()]
            .iter()
            .find(|c| survivors.iter().any(|(sc, ..)| sc == *c));
        let (category, matched_keyword) = match winner {
            Some(&c) => {
                let kw = survivors.iter().find(|(sc, ..)| *sc == c).map(|s| s.1.clone());
                (c, kw)
            }
            None => (Category::NoMatch, None),
        };
        ClassifiedTurn {
            step,
            text: text.to_string(),
            category,
            matched_keyword,
        }
    }

    /// Like [`Lexicon::classify`] with the step given by name.
    pub fn classify_named(&self, step: &str, text: &str) -> Result<ClassifiedTurn, UnknownStep> {
        Ok(self.classify(step.parse()?, text))
    }

    /// Element-wise classification preserving turn order.
    pub fn classify_conversation<S: AsRef<str>>(&self, turns: &[(Step, S)]) -> Vec<Category> {
        turns
            .iter()
            .map(|(step, text)| self.classify(*step, text.as_ref()).category)
            .collect()
    }
}
