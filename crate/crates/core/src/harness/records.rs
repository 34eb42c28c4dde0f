//! Row formats for the predictions CSV and transcripts JSONL files.

use serde::{Deserialize, Serialize};

use crate::domain::{Mode, PredictedValue, Prediction, Resolution, Sample, StepRecord, Transcript};
use crate::taxonomy::{AgeLabel, AgeScheme, AttributeKind, DatasetId, GenderLabel};

/// One line of `transcripts.jsonl`: a step plus the sample it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub sample_id: String,
    pub mode: Mode,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composed_description: Option<String>,
    #[serde(flatten)]
    pub record: StepRecord,
}

impl TranscriptLine {
    pub fn from_transcript(t: &Transcript) -> Vec<TranscriptLine> {
        t.steps
            .iter()
            .map(|s| TranscriptLine {
                sample_id: t.sample_id.clone(),
                mode: t.mode,
                degraded: t.degraded,
                composed_description: t.composed_description.clone(),
                record: s.clone(),
            })
            .collect()
    }

    /// Regroups lines into transcripts, one per run of equal sample ids.
    pub fn into_transcripts(lines: Vec<TranscriptLine>) -> Vec<Transcript> {
        let mut out: Vec<Transcript> = Vec::new();
        for line in lines {
            match out.last_mut() {
                Some(t) if t.sample_id == line.sample_id => t.steps.push(line.record),
                _ => out.push(Transcript {
                    sample_id: line.sample_id,
                    mode: line.mode,
                    steps: vec![line.record],
                    composed_description: line.composed_description,
                    degraded: line.degraded,
                }),
            }
        }
        out
    }
}

/// One row of `predictions.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub attribute: AttributeKind,
    pub truth: String,
    pub prediction: String,
    pub resolution: String,
    pub attempts: u32,
    pub first_attempt_off_target: bool,
}

impl PredictionRow {
    pub fn new(sample: &Sample, p: &Prediction) -> Self {
        let show = |v: Option<PredictedValue>| v.map(|v| v.display(sample.dataset)).unwrap_or_default();
        PredictionRow {
            sample_id: p.sample_id.clone(),
            attribute: p.kind,
            truth: show(sample.truth(p.kind)),
            prediction: show(p.value),
            resolution: p.resolution.label().to_string(),
            attempts: p.attempts,
            first_attempt_off_target: p.first_attempt_off_target,
        }
    }

    /// Rebuilds a prediction from a saved row. The unresolvable cause and the
    /// raw text are not stored in the CSV and come back empty.
    pub fn to_prediction(&self, dataset: DatasetId) -> Result<Prediction, String> {
        let value = if self.prediction.is_empty() {
            None
        } else {
            Some(parse_value(dataset, self.attribute, &self.prediction)?)
        };
        let resolution = match self.resolution.as_str() {
            "parsed" => Resolution::Parsed { attempt: self.attempts },
            "embedding_fallback" => Resolution::EmbeddingFallback,
            "imputed" => Resolution::Imputed,
            "unresolvable" => Resolution::Unresolvable { cause: String::new() },
            other => return Err(format!("unknown resolution `{other}`")),
        };
        Ok(Prediction {
            sample_id: self.sample_id.clone(),
            kind: self.attribute,
            value,
            resolution,
            attempts: self.attempts,
            final_raw_text: String::new(),
            first_attempt_off_target: self.first_attempt_off_target,
        })
    }
}

fn parse_value(dataset: DatasetId, kind: AttributeKind, text: &str) -> Result<PredictedValue, String> {
    let tax = dataset.taxonomies();
    let unknown = || format!("`{text}` is not a {dataset} {kind} label");
    let index = |t: Option<&crate::taxonomy::Taxonomy>| t.and_then(|t| t.index_of(text)).ok_or_else(unknown);
    match kind {
        AttributeKind::Age => match dataset.age_scheme() {
            AgeScheme::Continuous { .. } => text
                .parse::<u32>()
                .map(|y| PredictedValue::Age(AgeLabel::Years(y)))
                .map_err(|_| unknown()),
            AgeScheme::Binned => index(tax.age_bins.as_ref()).map(|b| PredictedValue::Age(AgeLabel::Bin(b))),
        },
        AttributeKind::Gender => index(tax.gender.as_ref())
            .and_then(|i| GenderLabel::from_index(i).ok_or_else(unknown))
            .map(PredictedValue::Gender),
        AttributeKind::Race => index(tax.race.as_ref()).map(PredictedValue::Race),
    }
}
