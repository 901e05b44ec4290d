//! Template bank: question, answer and hypothesis text pools split into
//! disjoint train and eval halves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Lexicon;
use crate::graph::{Category, ReasoningGraph, Step};
use crate::hashing::sha256_hex;

const DEFAULT_BANK: &str = include_str!("../../config/templates/bma-default.toml");

pub const STATEMENT_SLOT: &str = "[statement]";
pub const RATIONALE_SLOT: &str = "[rationale]";
pub const QUESTION_SLOT: &str = "[Question]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("template bank parse error: {0}")]
    Parse(String),
    #[error("template bank schema error: {0}")]
    Schema(String),
}

/// A problem found by [`TemplateBank::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BankIssue {
    MissingQuestion { step: Step, split: Split },
    MissingAnswer { step: Step, category: Category, split: Split },
    MissingHypothesis { category: Category, split: Split, kind: &'static str },
    RoundTrip { step: Step, expected: Category, got: Category, text: String },
    SharedAcrossSplits { text: String },
    BadWrapper { name: &'static str, slot: &'static str },
}

impl fmt::Display for BankIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BankIssue::MissingQuestion { step, split } => write!(f, "no {split} question for {step}"),
            BankIssue::MissingAnswer { step, category, split } => {
                write!(f, "no {split} answer template for ({step}, {category})")
            }
            BankIssue::MissingHypothesis { category, split, kind } => {
                write!(f, "no {split} {kind} for diagnosis {category}")
            }
            BankIssue::RoundTrip { step, expected, got, text } => {
                write!(f, "({step}, {expected}) template classifies as {got}: {text:?}")
            }
            BankIssue::SharedAcrossSplits { text } => write!(f, "text appears in both splits: {text:?}"),
            BankIssue::BadWrapper { name, slot } => write!(f, "hypothesis wrapper {name} lacks {slot}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pool {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub eval: Vec<String>,
}

impl Pool {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

/// Prompt wrappers for clinician-hypothesis queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisWrappers {
    pub confirm_correct: String,
    pub confirm_wrong: String,
    pub rationalize_correct: String,
    pub rationalize_wrong: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBank {
    version: String,
    hypothesis: HypothesisWrappers,
    #[serde(default)]
    off_topic: Pool,
    questions: BTreeMap<String, Pool>,
    answers: BTreeMap<String, BTreeMap<String, Pool>>,
    #[serde(default)]
    statements: BTreeMap<String, Pool>,
    #[serde(default)]
    rationales: BTreeMap<String, Pool>,
    #[serde(default)]
    paraphrases: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct TemplateBank {
    version: String,
    hash: String,
    hypothesis: HypothesisWrappers,
    off_topic: Pool,
    questions: BTreeMap<Step, Pool>,
    answers: BTreeMap<(Step, Category), Pool>,
    statements: BTreeMap<Category, Pool>,
    rationales: BTreeMap<Category, Pool>,
    paraphrases: BTreeMap<String, Vec<String>>,
}

fn parse_step(name: &str) -> Result<Step, BankError> {
    name.parse().map_err(|_| BankError::Schema(format!("unknown step {name:?}")))
}

fn parse_category(name: &str, step: Step) -> Result<Category, BankError> {
    let cat: Category = name
        .parse()
        .map_err(|_| BankError::Schema(format!("unknown category {name:?}")))?;
    if !step.admits(cat) {
        return Err(BankError::Schema(format!("category {cat} does not belong to {step}")));
    }
    Ok(cat)
}

impl TemplateBank {
    pub fn load(document: &str) -> Result<Self, BankError> {
        let raw: RawBank = toml::from_str(document).map_err(|e| BankError::Parse(e.to_string()))?;
        let mut questions = BTreeMap::new();
        for (name, pool) in raw.questions {
            questions.insert(parse_step(&name)?, pool);
        }
        let mut answers = BTreeMap::new();
        for (step_name, cats) in raw.answers {
            let step = parse_step(&step_name)?;
            for (cat_name, pool) in cats {
                let cat = parse_category(&cat_name, step)?;
                if cat == Category::NoMatch {
                    return Err(BankError::Schema(format!(
                        "NoMatch answers belong in off_topic, not under {step}"
                    )));
                }
                answers.insert((step, cat), pool);
            }
        }
        let diag_pools = |raw: BTreeMap<String, Pool>| -> Result<BTreeMap<Category, Pool>, BankError> {
            let mut out = BTreeMap::new();
            for (name, pool) in raw {
                out.insert(parse_category(&name, Step::Diagnosis)?, pool);
            }
            Ok(out)
        };
        let statements = diag_pools(raw.statements)?;
        let rationales = diag_pools(raw.rationales)?;
        Ok(TemplateBank {
            version: raw.version,
            hash: sha256_hex(document.as_bytes()),
            hypothesis: raw.hypothesis,
            off_topic: raw.off_topic,
            questions,
            answers,
            statements,
            rationales,
            paraphrases: raw.paraphrases,
        })
    }

    pub fn bma_default() -> Self {
        Self::load(DEFAULT_BANK).expect("shipped template bank is valid")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Hash of the loaded document plus any paraphrases added since.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn hypothesis(&self) -> &HypothesisWrappers {
        &self.hypothesis
    }

    fn expand(&self, base: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(base.len() * 2);
        for t in base {
            out.push(t.clone());
            if let Some(vars) = self.paraphrases.get(t) {
                out.extend(vars.iter().cloned());
            }
        }
        out
    }

    /// Question templates plus their paraphrases.
    pub fn questions(&self, step: Step, split: Split) -> Vec<String> {
        self.questions.get(&step).map(|p| self.expand(p.get(split))).unwrap_or_default()
    }

    /// Answer templates plus their paraphrases. `NoMatch` yields the
    /// off-topic pool.
    pub fn answers(&self, step: Step, category: Category, split: Split) -> Vec<String> {
        if category == Category::NoMatch {
            return self.expand(self.off_topic.get(split));
        }
        self.answers
            .get(&(step, category))
            .map(|p| self.expand(p.get(split)))
            .unwrap_or_default()
    }

    pub fn statements(&self, diagnosis: Category, split: Split) -> Vec<String> {
        self.statements.get(&diagnosis).map(|p| self.expand(p.get(split))).unwrap_or_default()
    }

    pub fn rationales(&self, diagnosis: Category, split: Split) -> Vec<String> {
        self.rationales.get(&diagnosis).map(|p| self.expand(p.get(split))).unwrap_or_default()
    }

    /// Base answer templates, without paraphrases, in a stable order.
    pub fn answer_templates(&self) -> impl Iterator<Item = (Step, Category, &str)> + '_ {
        self.answers.iter().flat_map(|(&(step, cat), pool)| {
            pool.train.iter().chain(&pool.eval).map(move |t| (step, cat, t.as_str()))
        })
    }

    pub fn question_templates(&self) -> impl Iterator<Item = (Step, &str)> + '_ {
        self.questions
            .iter()
            .flat_map(|(&step, pool)| pool.train.iter().chain(&pool.eval).map(move |t| (step, t.as_str())))
    }

    pub fn paraphrases_of(&self, template: &str) -> &[String] {
        self.paraphrases.get(template).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Registers extra paraphrases for a template, skipping duplicates.
    pub fn add_paraphrases(&mut self, template: &str, variants: impl IntoIterator<Item = String>) {
        let entry = self.paraphrases.entry(template.to_string()).or_default();
        let mut added = false;
        for v in variants {
            if v != template && !entry.contains(&v) {
                entry.push(v);
                added = true;
            }
        }
        if added {
            let listing = serde_json::to_string(&self.paraphrases).expect("serializable");
            self.hash = sha256_hex(format!("{}{}", self.hash, listing).as_bytes());
        }
    }

    fn all_texts(&self, split: Split) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let pools = self
            .questions
            .values()
            .chain(self.answers.values())
            .chain(self.statements.values())
            .chain(self.rationales.values())
            .chain(std::iter::once(&self.off_topic));
        for pool in pools {
            out.extend(self.expand(pool.get(split)));
        }
        out
    }

    /// Texts present in both the train and the eval pools.
    pub fn shared_texts(&self) -> Vec<String> {
        let train = self.all_texts(Split::Train);
        self.all_texts(Split::Eval).intersection(&train).cloned().collect()
    }

    /// Checks coverage of every category on a valid path, classifier
    /// round-trip of every answer, hypothesis and paraphrase, and split
    /// disjointness. An empty result means the bank is usable.
    pub fn validate(&self, graph: &ReasoningGraph, lexicon: &Lexicon) -> Vec<BankIssue> {
        let mut issues = Vec::new();
        let wrappers = [
            ("confirm_correct", &self.hypothesis.confirm_correct, STATEMENT_SLOT),
            ("confirm_wrong", &self.hypothesis.confirm_wrong, STATEMENT_SLOT),
            ("rationalize_correct", &self.hypothesis.rationalize_correct, RATIONALE_SLOT),
            ("rationalize_wrong", &self.hypothesis.rationalize_wrong, RATIONALE_SLOT),
        ];
        for (name, text, slot) in wrappers {
            if !text.contains(slot) {
                issues.push(BankIssue::BadWrapper { name, slot });
            }
            if name.starts_with("rationalize") && !text.contains(QUESTION_SLOT) {
                issues.push(BankIssue::BadWrapper { name, slot: QUESTION_SLOT });
            }
        }

        let mut reachable: BTreeSet<(Step, Category)> = BTreeSet::new();
        for path in graph.expand_paths() {
            for step in Step::ALL {
                reachable.insert((step, path.category(step)));
            }
        }
        for split in Split::ALL {
            for step in Step::ALL {
                if self.questions(step, split).is_empty() {
                    issues.push(BankIssue::MissingQuestion { step, split });
                }
            }
            for &(step, category) in &reachable {
                if self.answers(step, category, split).is_empty() {
                    issues.push(BankIssue::MissingAnswer { step, category, split });
                }
            }
            for &(_, category) in reachable.iter().filter(|(s, _)| *s == Step::Diagnosis) {
                if self.statements(category, split).is_empty() {
                    issues.push(BankIssue::MissingHypothesis { category, split, kind: "statement" });
                }
                if self.rationales(category, split).is_empty() {
                    issues.push(BankIssue::MissingHypothesis { category, split, kind: "rationale" });
                }
            }
        }

        let mut check = |step: Step, expected: Category, text: &str| {
            let got = lexicon.classify(step, text).category;
            if got != expected {
                issues.push(BankIssue::RoundTrip { step, expected, got, text: text.to_string() });
            }
        };
        for ((step, cat), pool) in &self.answers {
            for split in Split::ALL {
                for text in self.expand(pool.get(split)) {
                    check(*step, *cat, &text);
                }
            }
        }
        for split in Split::ALL {
            for text in self.expand(self.off_topic.get(split)) {
                for step in Step::ALL {
                    check(step, Category::NoMatch, &text);
                }
            }
        }
        for (cat, pool) in self.statements.iter().chain(&self.rationales) {
            for split in Split::ALL {
                for text in self.expand(pool.get(split)) {
                    check(Step::Diagnosis, *cat, &text);
                }
            }
        }

        for text in self.shared_texts() {
            issues.push(BankIssue::SharedAcrossSplits { text });
        }
        issues
    }
}
