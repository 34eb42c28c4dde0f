//! Records shared across the pipeline: samples, transcripts and predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::parsing::OffTargetReason;
use crate::prompts::compose_description;
use crate::taxonomy::{AgeLabel, AttributeKind, DatasetId, GenderLabel, TaxonomyError};

/// One image and whatever ground truth its dataset provides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Path of the image relative to the index's image root.
    pub image: String,
    pub dataset: DatasetId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_age: Option<AgeLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_gender: Option<GenderLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_race: Option<usize>,
}

impl Sample {
    pub fn has_truth(&self) -> bool {
        self.truth_age.is_some() || self.truth_gender.is_some() || self.truth_race.is_some()
    }

    pub fn truth(&self, kind: AttributeKind) -> Option<PredictedValue> {
        match kind {
            AttributeKind::Age => self.truth_age.map(PredictedValue::Age),
            AttributeKind::Gender => self.truth_gender.map(PredictedValue::Gender),
            AttributeKind::Race => self.truth_race.map(PredictedValue::Race),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Naive,
    #[default]
    Cot,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Naive => "naive",
            Mode::Cot => "cot",
        })
    }
}

/// Which query in the chain a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Step {
    Ffc,
    Name,
    Attribute(AttributeKind),
}

impl Step {
    pub fn as_str(self) -> &'static str {
        match self {
            Step::Ffc => "ffc",
            Step::Name => "name",
            Step::Attribute(kind) => kind.as_str(),
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Step {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ffc" => Ok(Step::Ffc),
            "name" => Ok(Step::Name),
            other => other.parse().map(Step::Attribute),
        }
    }
}

impl Serialize for Step {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Step {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What happened to one model reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StepOutcome {
    /// Attribute answer mapped onto a label (rendered as its display string).
    Parsed { value: String },
    /// Free-text step (ffc, name) judged usable.
    Accepted,
    OffTarget { reason: OffTargetReason },
    /// The request itself failed; `raw_response` is empty.
    Failed { error: String },
}

impl StepOutcome {
    pub fn is_on_target(&self) -> bool {
        matches!(self, StepOutcome::Parsed { .. } | StepOutcome::Accepted)
    }

    pub fn is_off_target(&self) -> bool {
        matches!(self, StepOutcome::OffTarget { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: Step,
    pub attempt: u32,
    pub prompt_text: String,
    pub raw_response: String,
    pub latency_ms: u64,
    #[serde(flatten)]
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub sample_id: String,
    pub mode: Mode,
    pub steps: Vec<StepRecord>,
    pub composed_description: Option<String>,
    /// Set when a chain-of-thought run lost its ffc or name step and fell back
    /// to naive attribute prompts.
    pub degraded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictedValue {
    Age(AgeLabel),
    Gender(GenderLabel),
    Race(usize),
}

impl PredictedValue {
    pub fn kind(&self) -> AttributeKind {
        match self {
            PredictedValue::Age(_) => AttributeKind::Age,
            PredictedValue::Gender(_) => AttributeKind::Gender,
            PredictedValue::Race(_) => AttributeKind::Race,
        }
    }

    /// Human-readable label for reports, resolved against the dataset's taxonomies.
    pub fn display(&self, dataset: DatasetId) -> String {
        let tax = dataset.taxonomies();
        let name = |t: Option<&crate::taxonomy::Taxonomy>, i: usize| {
            t.and_then(|t| t.category(i))
                .map(str::to_string)
                .unwrap_or_else(|| i.to_string())
        };
        match *self {
            PredictedValue::Age(AgeLabel::Years(y)) => y.to_string(),
            PredictedValue::Age(AgeLabel::Bin(b)) => name(tax.age_bins.as_ref(), b),
            PredictedValue::Gender(g) => name(tax.gender.as_ref(), g.index()),
            PredictedValue::Race(r) => name(tax.race.as_ref(), r),
        }
    }

    /// Category index for categorical values.
    pub fn class_index(&self) -> Option<usize> {
        match *self {
            PredictedValue::Age(AgeLabel::Bin(b)) => Some(b),
            PredictedValue::Age(AgeLabel::Years(_)) => None,
            PredictedValue::Gender(g) => Some(g.index()),
            PredictedValue::Race(r) => Some(r),
        }
    }

    pub fn years(&self) -> Option<u32> {
        match *self {
            PredictedValue::Age(AgeLabel::Years(y)) => Some(y),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Parsed { attempt: u32 },
    EmbeddingFallback,
    Imputed,
    /// The attribute could not be resolved at all (endpoint failure, or the
    /// fallback was disabled or failed).
    Unresolvable { cause: String },
}

impl Resolution {
    pub fn label(&self) -> &'static str {
        match self {
            Resolution::Parsed { .. } => "parsed",
            Resolution::EmbeddingFallback => "embedding_fallback",
            Resolution::Imputed => "imputed",
            Resolution::Unresolvable { .. } => "unresolvable",
        }
    }

    pub fn is_post_retry_off_target(&self) -> bool {
        matches!(self, Resolution::EmbeddingFallback | Resolution::Imputed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub kind: AttributeKind,
    pub value: Option<PredictedValue>,
    pub resolution: Resolution,
    /// Number of model calls made for this attribute.
    pub attempts: u32,
    pub final_raw_text: String,
    pub first_attempt_off_target: bool,
}

/// Checks the structural invariants a pipeline transcript and its predictions
/// must satisfy. Returns every violation found.
pub fn check_transcript(
    transcript: &Transcript,
    predictions: &[Prediction],
    retries_n: u32,
) -> Result<(), Vec<String>> {
    let mut problems = Vec::new();
    let steps = &transcript.steps;

    for (i, s) in steps.iter().enumerate() {
        if s.attempt == 0 || s.attempt > retries_n {
            problems.push(format!("step {i} ({}) has attempt {} outside 1..={retries_n}", s.step, s.attempt));
        }
        if s.prompt_text.trim().is_empty() {
            problems.push(format!("step {i} ({}) has an empty prompt", s.step));
        }
    }

    // Attempts within each contiguous group count up from 1.
    let mut prev: Option<&StepRecord> = None;
    for s in steps {
        let expected = match prev {
            Some(p) if p.step == s.step => p.attempt + 1,
            _ => 1,
        };
        if s.attempt != expected {
            problems.push(format!("{} attempt {} follows attempt {:?}", s.step, s.attempt, prev.map(|p| p.attempt)));
        }
        prev = Some(s);
    }

    let is_prelude = |s: &StepRecord| matches!(s.step, Step::Ffc | Step::Name);
    let prelude_len = steps.iter().take_while(|s| is_prelude(s)).count();
    if steps[prelude_len..].iter().any(is_prelude) {
        problems.push("ffc/name step after an attribute step".to_string());
    }
    let ffc: Vec<&StepRecord> = steps.iter().filter(|s| s.step == Step::Ffc).collect();
    let name: Vec<&StepRecord> = steps.iter().filter(|s| s.step == Step::Name).collect();

    match transcript.mode {
        Mode::Naive => {
            if !ffc.is_empty() || !name.is_empty() {
                problems.push("naive transcript contains ffc/name steps".to_string());
            }
            if transcript.composed_description.is_some() {
                problems.push("naive transcript carries a description".to_string());
            }
        }
        Mode::Cot => {
            if let Some(first_name) = steps.iter().position(|s| s.step == Step::Name) {
                if steps.iter().rposition(|s| s.step == Step::Ffc).is_some_and(|last_ffc| last_ffc > first_name) {
                    problems.push("ffc steps interleave with name steps".to_string());
                }
            }
            if transcript.degraded {
                if transcript.composed_description.is_some() {
                    problems.push("degraded transcript carries a description".to_string());
                }
            } else {
                match (ffc.last(), name.last(), &transcript.composed_description) {
                    (Some(f), Some(n), Some(d)) => match compose_description(&f.raw_response, &n.raw_response) {
                        Ok(expected) if &expected == d => {
                            for s in &steps[prelude_len..] {
                                if !s.prompt_text.contains(d.as_str()) {
                                    problems.push(format!("{} prompt does not embed the description", s.step));
                                }
                            }
                        }
                        _ => problems.push("description does not match final ffc/name replies".to_string()),
                    },
                    _ => problems.push("cot transcript lacks ffc, name or description".to_string()),
                }
            }
        }
    }

    let kinds: std::collections::BTreeSet<AttributeKind> = predictions.iter().map(|p| p.kind).collect();
    let bound = 2 * retries_n as usize + kinds.len() * retries_n as usize;
    if steps.len() > bound {
        problems.push(format!("{} steps exceed the bound {bound}", steps.len()));
    }

    for p in predictions {
        if p.sample_id != transcript.sample_id {
            problems.push(format!("prediction for {} attached to {}", p.sample_id, transcript.sample_id));
        }
        let group: Vec<&StepRecord> = steps.iter().filter(|s| s.step == Step::Attribute(p.kind)).collect();
        if group.is_empty() {
            problems.push(format!("{} prediction has no transcript step", p.kind));
            continue;
        }
        if group.len() as u32 != p.attempts {
            problems.push(format!("{}: {} steps but {} attempts recorded", p.kind, group.len(), p.attempts));
        }
        if p.first_attempt_off_target != matches!(group[0].outcome, StepOutcome::OffTarget { .. }) {
            problems.push(format!("{}: first_attempt_off_target disagrees with step 1", p.kind));
        }
        match &p.resolution {
            Resolution::Parsed { attempt } => {
                if *attempt == 0 || *attempt > retries_n || *attempt != p.attempts {
                    problems.push(format!("{}: parsed at attempt {attempt} with {} calls", p.kind, p.attempts));
                }
                if !group.last().is_some_and(|s| s.outcome.is_on_target()) {
                    problems.push(format!("{}: parsed but final step is off-target", p.kind));
                }
            }
            Resolution::EmbeddingFallback | Resolution::Imputed => {
                if p.attempts != retries_n || group.iter().any(|s| s.outcome.is_on_target()) {
                    problems.push(format!("{}: fallback without {retries_n} off-target attempts", p.kind));
                }
            }
            Resolution::Unresolvable { .. } => {}
        }
    }

    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}
