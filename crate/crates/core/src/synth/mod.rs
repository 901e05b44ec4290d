//! Synthesis of multi-turn review conversations from image labels.
//!
//! Each record is generated from its own seed, derived from the dataset seed
//! and the record index, so records are independent of one another and of
//! generation order. Within a record, the question/answer pair for every
//! step is drawn first in canonical step order; scenario-specific draws
//! (question order, hypotheses) come after. Two scenarios sharing a seed
//! therefore share their question/answer pairs.

pub mod bank;
pub mod paraphrase;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bank::{BankError, BankIssue, Pool, Split, TemplateBank};
pub use paraphrase::{ExternalLlm, OfflinePool, ParaphraseKind, Paraphraser};

use crate::graph::{Category, ReasoningGraph, ReasoningPath, Step, STEP_COUNT};
use crate::hashing::{combined_hash, sha256_hex};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown class label {0:?}")]
    UnknownLabel(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("target path for {0} is not a valid path of the graph")]
    PathNotInGraph(ClassLabel),
    #[error("no {split} template for {what}")]
    MissingTemplate { what: String, split: Split },
    #[error("insufficient templates: {0}")]
    InsufficientTemplates(String),
    #[error("invalid synthesis options: {0}")]
    InvalidOptions(String),
    #[error("dataset line {line}: {message}")]
    Record { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    BloodContamination,
    ParticleContamination,
    #[serde(rename = "AML")]
    Aml,
    #[serde(rename = "MM")]
    Mm,
    Healthy,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::BloodContamination,
        ClassLabel::ParticleContamination,
        ClassLabel::Aml,
        ClassLabel::Mm,
        ClassLabel::Healthy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::BloodContamination => "BloodContamination",
            ClassLabel::ParticleContamination => "ParticleContamination",
            ClassLabel::Aml => "AML",
            ClassLabel::Mm => "MM",
            ClassLabel::Healthy => "Healthy",
        }
    }

    /// Short lowercase form used in image ids and on the command line.
    pub fn short(self) -> &'static str {
        match self {
            ClassLabel::BloodContamination => "blood",
            ClassLabel::ParticleContamination => "particle",
            ClassLabel::Aml => "aml",
            ClassLabel::Mm => "mm",
            ClassLabel::Healthy => "healthy",
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn target_path(self) -> ReasoningPath {
        use Category::*;
        ReasoningPath(match self {
            ClassLabel::Healthy => [HighQuality, Adequate, Normal, NormalProlif, Healthy],
            ClassLabel::Aml => [HighQuality, Adequate, Abnormal, BlastProlif, Aml],
            ClassLabel::Mm => [HighQuality, Adequate, Abnormal, PlasmaProlif, Mm],
            ClassLabel::BloodContamination => [HighQuality, Blood, Inadequate, Inadequate, Inconclusive],
            ClassLabel::ParticleContamination => [HighQuality, Clot, Inadequate, Inadequate, Inconclusive],
        })
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = SynthError;

    /// Accepts the canonical name or the short form, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassLabel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s) || l.short().eq_ignore_ascii_case(s))
            .ok_or_else(|| SynthError::UnknownLabel(s.to_string()))
    }
}

/// Reference class distribution, 16340 images in total.
pub fn paper_default_counts() -> BTreeMap<ClassLabel, usize> {
    BTreeMap::from([
        (ClassLabel::BloodContamination, 10083),
        (ClassLabel::ParticleContamination, 3510),
        (ClassLabel::Aml, 1531),
        (ClassLabel::Mm, 932),
        (ClassLabel::Healthy, 284),
    ])
}

/// Question ordering and hypothesis style of a conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Canonical step order.
    #[serde(rename = "SI")]
    Standard,
    /// Diagnosis asked first, then the remaining steps in order.
    #[serde(rename = "DF")]
    DiagnosisFirst,
    /// Five steps drawn uniformly with replacement.
    #[serde(rename = "II")]
    Improvised,
    #[serde(rename = "CQ_R")]
    ConfirmCorrect,
    #[serde(rename = "CQ_W")]
    ConfirmWrong,
    #[serde(rename = "RQ_R")]
    RationalizeCorrect,
    #[serde(rename = "RQ_W")]
    RationalizeWrong,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::Standard,
        ScenarioKind::DiagnosisFirst,
        ScenarioKind::Improvised,
        ScenarioKind::ConfirmCorrect,
        ScenarioKind::ConfirmWrong,
        ScenarioKind::RationalizeCorrect,
        ScenarioKind::RationalizeWrong,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ScenarioKind::Standard => "SI",
            ScenarioKind::DiagnosisFirst => "DF",
            ScenarioKind::Improvised => "II",
            ScenarioKind::ConfirmCorrect => "CQ_R",
            ScenarioKind::ConfirmWrong => "CQ_W",
            ScenarioKind::RationalizeCorrect => "RQ_R",
            ScenarioKind::RationalizeWrong => "RQ_W",
        }
    }

    /// Whether the clinician hypothesis (if any) contradicts the target.
    pub fn hypothesis_is_wrong(self) -> bool {
        matches!(self, ScenarioKind::ConfirmWrong | ScenarioKind::RationalizeWrong)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ScenarioKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| SynthError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub class_label: ClassLabel,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub step: Step,
    pub prompt: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub image_id: String,
    pub class_label: ClassLabel,
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub turns: Vec<Turn>,
    pub target_path: ReasoningPath,
    pub split: Split,
    /// Diagnosis asserted by the clinician in CQ/RQ scenarios.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<Category>,
}

impl Conversation {
    pub fn target_category(&self, step: Step) -> Category {
        self.target_path.category(step)
    }
}

pub fn target_path_for(graph: &ReasoningGraph, annotation: &AnnotationRecord) -> Result<ReasoningPath, SynthError> {
    let path = annotation.class_label.target_path();
    if !graph.contains(&path) {
        return Err(SynthError::PathNotInGraph(annotation.class_label));
    }
    Ok(path)
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [String], what: impl FnOnce() -> String, split: Split) -> Result<&'a str, SynthError> {
    if pool.is_empty() {
        return Err(SynthError::MissingTemplate { what: what(), split });
    }
    Ok(&pool[rng.random_range(0..pool.len())])
}

pub fn synthesize_conversation(
    graph: &ReasoningGraph,
    bank: &TemplateBank,
    annotation: &AnnotationRecord,
    scenario: ScenarioKind,
    seed: u64,
) -> Result<Conversation, SynthError> {
    let path = target_path_for(graph, annotation)?;
    let split = annotation.split;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pairs: Vec<(String, String)> = Vec::with_capacity(STEP_COUNT);
    for step in Step::ALL {
        let cat = path.category(step);
        let questions = bank.questions(step, split);
        let answers = bank.answers(step, cat, split);
        let q = pick(&mut rng, &questions, || format!("question at {step}"), split)?;
        let a = pick(&mut rng, &answers, || format!("answer ({step}, {cat})"), split)?;
        pairs.push((q.to_string(), a.to_string()));
    }

    let order: Vec<usize> = match scenario {
        ScenarioKind::DiagnosisFirst => vec![4, 0, 1, 2, 3],
        ScenarioKind::Improvised => (0..STEP_COUNT).map(|_| rng.random_range(0..STEP_COUNT)).collect(),
        _ => (0..STEP_COUNT).collect(),
    };

    let diagnosis = path.category(Step::Diagnosis);
    let mut hypothesis = None;
    let mut diagnosis_prompt = pairs[Step::Diagnosis.ordinal()].0.clone();
    if matches!(
        scenario,
        ScenarioKind::ConfirmCorrect
            | ScenarioKind::ConfirmWrong
            | ScenarioKind::RationalizeCorrect
            | ScenarioKind::RationalizeWrong
    ) {
        let asserted = if scenario.hypothesis_is_wrong() {
            let others: Vec<Category> = Step::Diagnosis
                .categories()
                .iter()
                .copied()
                .filter(|c| *c != diagnosis && *c != Category::NoMatch)
                .collect();
            others[rng.random_range(0..others.len())]
        } else {
            diagnosis
        };
        let wrappers = bank.hypothesis();
        diagnosis_prompt = match scenario {
            ScenarioKind::ConfirmCorrect | ScenarioKind::ConfirmWrong => {
                let pool = bank.statements(asserted, split);
                let statement = pick(&mut rng, &pool, || format!("statement for {asserted}"), split)?;
                let wrapper = if scenario.hypothesis_is_wrong() {
                    &wrappers.confirm_wrong
                } else {
                    &wrappers.confirm_correct
                };
                wrapper.replace(bank::STATEMENT_SLOT, statement)
            }
            _ => {
                let pool = bank.rationales(asserted, split);
                let rationale = pick(&mut rng, &pool, || format!("rationale for {asserted}"), split)?;
                let wrapper = if scenario.hypothesis_is_wrong() {
                    &wrappers.rationalize_wrong
                } else {
                    &wrappers.rationalize_correct
                };
                wrapper
                    .replace(bank::RATIONALE_SLOT, rationale)
                    .replace(bank::QUESTION_SLOT, &diagnosis_prompt)
            }
        };
        hypothesis = Some(asserted);
    }

    let turns = order
        .into_iter()
        .map(|i| {
            let step = Step::ALL[i];
            let prompt = if step == Step::Diagnosis {
                diagnosis_prompt.clone()
            } else {
                pairs[i].0.clone()
            };
            Turn { step, prompt, target: pairs[i].1.clone(), prediction: None }
        })
        .collect();

    Ok(Conversation {
        image_id: annotation.image_id.clone(),
        class_label: annotation.class_label,
        scenario,
        seed,
        turns,
        target_path: path,
        split,
        hypothesis,
    })
}

/// Weighted scenario choice applied per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix(pub Vec<(ScenarioKind, f64)>);

impl Default for ScenarioMix {
    fn default() -> Self {
        ScenarioMix(vec![(ScenarioKind::Standard, 1.0)])
    }
}

impl ScenarioMix {
    pub fn uniform(kinds: &[ScenarioKind]) -> Self {
        ScenarioMix(kinds.iter().map(|k| (*k, 1.0)).collect())
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.0.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(SynthError::InvalidOptions("scenario weights must be finite and >= 0".into()));
        }
        if self.0.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
            return Err(SynthError::InvalidOptions("scenario mix has no positive weight".into()));
        }
        Ok(())
    }

    fn choose(&self, rng: &mut ChaCha8Rng) -> ScenarioKind {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut r = rng.random::<f64>() * total;
        for (kind, w) in &self.0 {
            if r < *w {
                return *kind;
            }
            r -= w;
        }
        self.0.iter().rev().find(|(_, w)| *w > 0.0).map(|(k, _)| *k).expect("validated")
    }
}

impl FromStr for ScenarioMix {
    type Err = SynthError;

    /// `SI`, `SI,DF` or `SI=3,II=1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, weight) = match part.split_once('=') {
                Some((n, w)) => (
                    n.trim(),
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| SynthError::InvalidOptions(format!("bad weight in {part:?}")))?,
                ),
                None => (part, 1.0),
            };
            entries.push((name.parse()?, weight));
        }
        let mix = ScenarioMix(entries);
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub counts: BTreeMap<ClassLabel, usize>,
    pub split_fraction: f64,
    pub seed: u64,
    pub scenario_mix: ScenarioMix,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            counts: paper_default_counts(),
            split_fraction: 0.8,
            seed: 0,
            scenario_mix: ScenarioMix::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub toolkit_version: String,
    pub seed: u64,
    pub split_fraction: f64,
    pub scenario_mix: ScenarioMix,
    pub total: usize,
    pub per_class: BTreeMap<ClassLabel, usize>,
    pub per_scenario: BTreeMap<ScenarioKind, usize>,
    pub per_split: BTreeMap<Split, usize>,
    pub graph_hash: String,
    pub bank_hash: String,
    /// Hash over the graph, bank and options.
    pub config_hash: String,
    /// Hash of the JSONL record stream.
    pub dataset_hash: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub conversations: Vec<Conversation>,
}

/// Independent substream value for `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const SPLIT_STREAM_BASE: u64 = 1 << 40;

/// Train membership for `count` records: a seeded permutation whose first
/// `round(count * fraction)` entries go to train.
pub fn split_assignment(count: usize, fraction: f64, seed: u64, class: ClassLabel) -> Vec<Split> {
    let n_train = (count as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM_BASE + class.ordinal() as u64));
    order.shuffle(&mut rng);
    let mut out = vec![Split::Eval; count];
    for &i in &order[..n_train] {
        out[i] = Split::Train;
    }
    out
}

pub fn synthesize_dataset(
    graph: &ReasoningGraph,
    bank: &TemplateBank,
    options: &SynthOptions,
) -> Result<Dataset, SynthError> {
    if !(options.split_fraction > 0.0 && options.split_fraction < 1.0) {
        return Err(SynthError::InvalidOptions(format!(
            "split fraction must lie in (0, 1), got {}",
            options.split_fraction
        )));
    }
    options.scenario_mix.validate()?;
    let shared = bank.shared_texts();
    if let Some(first) = shared.first() {
        return Err(SynthError::InsufficientTemplates(format!(
            "{} text(s) appear in both train and eval pools, e.g. {first:?}",
            shared.len()
        )));
    }

    let mut conversations = Vec::with_capacity(options.counts.values().sum());
    let mut index: u64 = 0;
    for label in ClassLabel::ALL {
        let count = options.counts.get(&label).copied().unwrap_or(0);
        let splits = split_assignment(count, options.split_fraction, options.seed, label);
        for (i, split) in splits.into_iter().enumerate() {
            let record_seed = derive_seed(options.seed, index);
            index += 1;
            let mut scenario_rng = ChaCha8Rng::seed_from_u64(record_seed);
            scenario_rng.set_stream(1);
            let scenario = options.scenario_mix.choose(&mut scenario_rng);
            let annotation = AnnotationRecord {
                image_id: format!("{}-{:05}", label.short(), i),
                class_label: label,
                split,
            };
            let conv = synthesize_conversation(graph, bank, &annotation, scenario, record_seed).map_err(|e| match e {
                SynthError::MissingTemplate { what, split } => {
                    SynthError::InsufficientTemplates(format!("no {split} template for {what}"))
                }
                other => other,
            })?;
            conversations.push(conv);
        }
    }

    let mut per_class = BTreeMap::new();
    let mut per_scenario = BTreeMap::new();
    let mut per_split = BTreeMap::new();
    for c in &conversations {
        *per_class.entry(c.class_label).or_insert(0) += 1;
        *per_scenario.entry(c.scenario).or_insert(0) += 1;
        *per_split.entry(c.split).or_insert(0) += 1;
    }
    let options_json = serde_json::to_string(options).expect("serializable");
    let config_hash = combined_hash(&[
        ("graph", graph.hash()),
        ("bank", bank.hash()),
        ("options", &options_json),
    ]);
    let manifest = DatasetManifest {
        toolkit_version: crate::VERSION.to_string(),
        seed: options.seed,
        split_fraction: options.split_fraction,
        scenario_mix: options.scenario_mix.clone(),
        total: conversations.len(),
        per_class,
        per_scenario,
        per_split,
        graph_hash: graph.hash().to_string(),
        bank_hash: bank.hash().to_string(),
        config_hash,
        dataset_hash: dataset_hash(&conversations),
    };
    Ok(Dataset { manifest, conversations })
}

/// One JSON object per line, newline terminated.
pub fn to_jsonl(conversations: &[Conversation]) -> String {
    let mut out = String::new();
    for c in conversations {
        out.push_str(&serde_json::to_string(c).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<Conversation>, SynthError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SynthError::Record { line: i + 1, message: e.to_string() })
        })
        .collect()
}

/// Content hash of a record stream in its JSONL form.
pub fn dataset_hash(conversations: &[Conversation]) -> String {
    sha256_hex(to_jsonl(conversations).as_bytes())
}
