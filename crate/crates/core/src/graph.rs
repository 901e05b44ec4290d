//! Symbolic reasoning graph: the five analysis steps, their closed answer
//! categories, and the set of valid category paths.
//!
//! A graph is loaded from a TOML document whose `patterns` list the valid
//! routes through the decision tree, with `"*"` standing for any
//! non-`NoMatch` category of a step. Loading validates the document and
//! expands the patterns once; afterwards the graph is immutable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

/// Number of analysis steps in every conversation path.
pub const STEP_COUNT: usize = 5;

const SCHEMA_VERSION: u32 = 1;

const DEFAULT_GRAPH: &str = include_str!("../config/graphs/bma-default.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("graph invariant violated: {0}")]
    Invariant(String),
    #[error("expected a path of {expected} categories, got {got}")]
    Length { expected: usize, got: usize },
}

/// One of the five ordered analysis steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    ImageQuality,
    CellQuality,
    Abnormality,
    Proliferation,
    Diagnosis,
}

impl Step {
    pub const ALL: [Step; STEP_COUNT] = [
        Step::ImageQuality,
        Step::CellQuality,
        Step::Abnormality,
        Step::Proliferation,
        Step::Diagnosis,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Step> {
        Step::ALL.get(ordinal).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Step::ImageQuality => "ImageQuality",
            Step::CellQuality => "CellQuality",
            Step::Abnormality => "Abnormality",
            Step::Proliferation => "Proliferation",
            Step::Diagnosis => "Diagnosis",
        }
    }

    /// The closed category set of this step, `NoMatch` last.
    pub fn categories(self) -> &'static [Category] {
        use Category::*;
        match self {
            Step::ImageQuality => &[HighQuality, LowQuality, NoMatch],
            Step::CellQuality => &[Adequate, Blood, Clot, NoMatch],
            Step::Abnormality => &[Normal, Abnormal, Inadequate, NoMatch],
            Step::Proliferation => &[BlastProlif, PlasmaProlif, NormalProlif, Inadequate, NoMatch],
            Step::Diagnosis => &[Healthy, Aml, Mm, Inconclusive, NoMatch],
        }
    }

    pub fn admits(self, category: Category) -> bool {
        self.categories().contains(&category)
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown analysis step `{0}`")]
pub struct UnknownStep(pub String);

impl FromStr for Step {
    type Err = UnknownStep;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Step::ALL
            .into_iter()
            .find(|step| step.name() == s)
            .ok_or_else(|| UnknownStep(s.to_string()))
    }
}

/// Answer category label. Labels shared between steps (`Inadequate`,
/// `NoMatch`) are the same value; the step gives the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    HighQuality,
    LowQuality,
    Adequate,
    Blood,
    Clot,
    Normal,
    Abnormal,
    Inadequate,
    BlastProlif,
    PlasmaProlif,
    NormalProlif,
    Healthy,
    #[serde(rename = "AML")]
    Aml,
    #[serde(rename = "MM")]
    Mm,
    Inconclusive,
    NoMatch,
}

impl Category {
    pub const ALL: [Category; 16] = [
        Category::HighQuality,
        Category::LowQuality,
        Category::Adequate,
        Category::Blood,
        Category::Clot,
        Category::Normal,
        Category::Abnormal,
        Category::Inadequate,
        Category::BlastProlif,
        Category::PlasmaProlif,
        Category::NormalProlif,
        Category::Healthy,
        Category::Aml,
        Category::Mm,
        Category::Inconclusive,
        Category::NoMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::HighQuality => "HighQuality",
            Category::LowQuality => "LowQuality",
            Category::Adequate => "Adequate",
            Category::Blood => "Blood",
            Category::Clot => "Clot",
            Category::Normal => "Normal",
            Category::Abnormal => "Abnormal",
            Category::Inadequate => "Inadequate",
            Category::BlastProlif => "BlastProlif",
            Category::PlasmaProlif => "PlasmaProlif",
            Category::NormalProlif => "NormalProlif",
            Category::Healthy => "Healthy",
            Category::Aml => "AML",
            Category::Mm => "MM",
            Category::Inconclusive => "Inconclusive",
            Category::NoMatch => "NoMatch",
        }
    }

    /// Dense index into [`Category::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown answer category `{0}`")]
pub struct UnknownCategory(pub String);

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

/// A concrete category sequence, one entry per step in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReasoningPath(pub [Category; STEP_COUNT]);

impl ReasoningPath {
    pub fn category(&self, step: Step) -> Category {
        self.0[step.ordinal()]
    }

    pub fn categories(&self) -> &[Category] {
        &self.0
    }
}

impl TryFrom<&[Category]> for ReasoningPath {
    type Error = GraphError;

    fn try_from(seq: &[Category]) -> Result<Self, Self::Error> {
        let arr: [Category; STEP_COUNT] = seq.try_into().map_err(|_| GraphError::Length {
            expected: STEP_COUNT,
            got: seq.len(),
        })?;
        Ok(ReasoningPath(arr))
    }
}

impl fmt::Display for ReasoningPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.0.iter().map(|c| c.name()).collect();
        write!(f, "({})", names.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Any,
    Is(Category),
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Any => f.write_str("*"),
            Slot::Is(c) => f.write_str(c.name()),
        }
    }
}

/// One valid route with optional wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathPattern {
    pub slots: [Slot; STEP_COUNT],
}

/// Expands wildcard slots over each step's non-`NoMatch` categories and
/// returns the union of all concrete paths.
pub fn expand_patterns(
    categories: &[Vec<Category>; STEP_COUNT],
    patterns: &[PathPattern],
) -> BTreeSet<ReasoningPath> {
    let mut out = BTreeSet::new();
    for pattern in patterns {
        expand_one(categories, pattern, &mut |path| {
            out.insert(path);
        });
    }
    out
}

fn expand_one(
    categories: &[Vec<Category>; STEP_COUNT],
    pattern: &PathPattern,
    emit: &mut dyn FnMut(ReasoningPath),
) {
    let options: Vec<Vec<Category>> = pattern
        .slots
        .iter()
        .enumerate()
        .map(|(i, slot)| match slot {
            Slot::Is(c) => vec![*c],
            Slot::Any => categories[i]
                .iter()
                .copied()
                .filter(|c| *c != Category::NoMatch)
                .collect(),
        })
        .collect();
    if options.iter().any(Vec::is_empty) {
        return;
    }
    let mut idx = [0usize; STEP_COUNT];
    loop {
        let mut path = [Category::NoMatch; STEP_COUNT];
        for i in 0..STEP_COUNT {
            path[i] = options[i][idx[i]];
        }
        emit(ReasoningPath(path));
        // odometer increment
        let mut i = STEP_COUNT;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < options[i].len() {
                break;
            }
            idx[i] = 0;
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDocument {
    #[serde(default)]
    schema_version: Option<u32>,
    version: String,
    steps: Vec<String>,
    categories: BTreeMap<String, Vec<String>>,
    patterns: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct CanonicalGraph<'a> {
    version: &'a str,
    categories: Vec<Vec<&'static str>>,
    patterns: Vec<Vec<String>>,
}

/// The validated symbolic rule set.
#[derive(Debug, Clone)]
pub struct ReasoningGraph {
    version: String,
    categories: [Vec<Category>; STEP_COUNT],
    patterns: Vec<PathPattern>,
    paths: BTreeSet<ReasoningPath>,
    hash: String,
}

impl ReasoningGraph {
    /// Parses and validates a graph document.
    pub fn load(document: &str) -> Result<Self, GraphError> {
        let doc: GraphDocument =
            toml::from_str(document).map_err(|e| GraphError::Parse(e.message().to_string()))?;
        Self::from_document(doc)
    }

    /// The shipped bone-marrow graph.
    pub fn bma_default() -> Self {
        Self::load(DEFAULT_GRAPH).expect("shipped graph config is valid")
    }

    fn from_document(doc: GraphDocument) -> Result<Self, GraphError> {
        let schema = doc.schema_version.unwrap_or(SCHEMA_VERSION);
        if schema != SCHEMA_VERSION {
            return Err(GraphError::Schema(format!(
                "unsupported schema_version {schema} (expected {SCHEMA_VERSION})"
            )));
        }

        let expected: Vec<&str> = Step::ALL.iter().map(|s| s.name()).collect();
        if doc.steps != expected {
            return Err(GraphError::Schema(format!(
                "steps must be exactly {expected:?}, got {:?}",
                doc.steps
            )));
        }

        let mut categories: [Vec<Category>; STEP_COUNT] = Default::default();
        for (name, labels) in &doc.categories {
            let step: Step = name
                .parse()
                .map_err(|e: UnknownStep| GraphError::Schema(e.to_string()))?;
            let slot = &mut categories[step.ordinal()];
            for label in labels {
                let category = parse_step_category(step, label)?;
                if slot.contains(&category) {
                    return Err(GraphError::Invariant(format!(
                        "category {category} listed twice for {step}"
                    )));
                }
                slot.push(category);
            }
        }
        for step in Step::ALL {
            let cats = &categories[step.ordinal()];
            if cats.is_empty() {
                return Err(GraphError::Schema(format!("no categories listed for {step}")));
            }
            if !cats.contains(&Category::NoMatch) {
                return Err(GraphError::Invariant(format!(
                    "{step} must include the NoMatch category"
                )));
            }
        }

        if doc.patterns.is_empty() {
            return Err(GraphError::Invariant("pattern list is empty".into()));
        }
        let mut patterns = Vec::with_capacity(doc.patterns.len());
        for (pi, raw) in doc.patterns.iter().enumerate() {
            if raw.len() != STEP_COUNT {
                return Err(GraphError::Schema(format!(
                    "pattern {pi} has {} slots, expected {STEP_COUNT}",
                    raw.len()
                )));
            }
            let mut slots = [Slot::Any; STEP_COUNT];
            for (i, label) in raw.iter().enumerate() {
                let step = Step::ALL[i];
                if label == "*" {
                    continue;
                }
                let category = parse_step_category(step, label)?;
                if !categories[i].contains(&category) {
                    return Err(GraphError::Schema(format!(
                        "pattern {pi}: {category} is not among the configured categories of {step}"
                    )));
                }
                if category == Category::NoMatch {
                    return Err(GraphError::Invariant(format!(
                        "pattern {pi}: NoMatch cannot appear in a valid path"
                    )));
                }
                slots[i] = Slot::Is(category);
            }
            if slots.iter().all(|s| *s == Slot::Any) {
                return Err(GraphError::Invariant(format!(
                    "pattern {pi} has no concrete slot"
                )));
            }
            patterns.push(PathPattern { slots });
        }

        // Patterns must describe disjoint path sets.
        let mut paths = BTreeSet::new();
        for (pi, pattern) in patterns.iter().enumerate() {
            let mut dup = None;
            expand_one(&categories, pattern, &mut |p| {
                if !paths.insert(p) && dup.is_none() {
                    dup = Some(p);
                }
            });
            if let Some(p) = dup {
                return Err(GraphError::Invariant(format!(
                    "pattern {pi} repeats concrete path {p}"
                )));
            }
        }
        if paths.is_empty() {
            return Err(GraphError::Invariant("expanded path set is empty".into()));
        }

        let canonical = CanonicalGraph {
            version: &doc.version,
            categories: categories
                .iter()
                .map(|cs| cs.iter().map(|c| c.name()).collect())
                .collect(),
            patterns: patterns
                .iter()
                .map(|p| p.slots.iter().map(|s| s.to_string()).collect())
                .collect(),
        };
        let hash = sha256_hex(serde_json::to_string(&canonical).expect("serializable").as_bytes());

        Ok(ReasoningGraph {
            version: doc.version,
            categories,
            patterns,
            paths,
            hash,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Content hash of the validated graph; identical configs hash equal.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn categories(&self, step: Step) -> &[Category] {
        &self.categories[step.ordinal()]
    }

    pub fn patterns(&self) -> &[PathPattern] {
        &self.patterns
    }

    /// The concrete set of valid paths.
    pub fn expand_paths(&self) -> &BTreeSet<ReasoningPath> {
        &self.paths
    }

    pub fn is_valid_path(&self, seq: &[Category]) -> Result<bool, GraphError> {
        let path = ReasoningPath::try_from(seq)?;
        Ok(self.paths.contains(&path))
    }

    pub fn contains(&self, path: &ReasoningPath) -> bool {
        self.paths.contains(path)
    }

    /// True when some valid path agrees with every answered slot. With all
    /// five slots answered this is plain membership.
    pub fn is_consistent(&self, partial: &[Option<Category>; STEP_COUNT]) -> bool {
        if let Some(full) = complete(partial) {
            return self.paths.contains(&full);
        }
        self.paths.iter().any(|p| {
            partial
                .iter()
                .zip(p.0.iter())
                .all(|(slot, c)| slot.is_none_or(|s| s == *c))
        })
    }

    /// Categories that extend `prefix` towards at least one valid path.
    pub fn admissible_next(&self, prefix: &[Category]) -> BTreeSet<Category> {
        if prefix.len() >= STEP_COUNT {
            return BTreeSet::new();
        }
        self.paths
            .iter()
            .filter(|p| p.0[..prefix.len()] == *prefix)
            .map(|p| p.0[prefix.len()])
            .collect()
    }
}

fn complete(partial: &[Option<Category>; STEP_COUNT]) -> Option<ReasoningPath> {
    let mut out = [Category::NoMatch; STEP_COUNT];
    for (dst, src) in out.iter_mut().zip(partial) {
        *dst = (*src)?;
    }
    Some(ReasoningPath(out))
}

fn parse_step_category(step: Step, label: &str) -> Result<Category, GraphError> {
    let category: Category = label
        .parse()
        .map_err(|e: UnknownCategory| GraphError::Schema(format!("{e} for {step}")))?;
    if !step.admits(category) {
        return Err(GraphError::Schema(format!(
            "category {category} does not belong to {step}"
        )));
    }
    Ok(category)
}
