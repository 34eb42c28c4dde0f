use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, UnresolvedAge};
use super::records::{PredictionRow, TranscriptLine};
use super::report::render_markdown;
use super::HarnessError;
use crate::client::{HttpClient, ImagePayload, ModelClient, ScriptedMock};
use crate::datasets::{index_dataset, select_eval_set, DatasetIndex};
use crate::domain::{check_transcript, Mode, Prediction, Resolution, Sample, Step};
use crate::metrics::{
    classification_scores, off_target_scores, regression_scores, ClassificationScores, MapeZeroPolicy, OffTargetScores,
    RegressionScores,
};
use crate::pipeline::{run_sample, ChainContext, ChainPlan, SampleOutcome};
use crate::prompts::TemplateSet;
use crate::taxonomy::{AgeScheme, AttributeKind, DatasetId};

pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.md";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    /// `running`, `complete` or `aborted`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: RunConfig,
    pub config_digest: String,
    pub dataset: DatasetId,
    pub dataset_digest: String,
    pub template_digest: String,
    /// Digest of the mock fixtures, for mock-backed runs.
    pub fixture_digest: Option<String>,
    pub mode: Mode,
    pub retries: u32,
    pub temperature: f64,
    pub kinds: Vec<AttributeKind>,
    pub samples: usize,
    /// Samples carried over from an earlier, interrupted run.
    pub resumed_samples: usize,
    pub transcript_violations: Vec<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scores {
    Regression(RegressionScores),
    Classification(ClassificationScores),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    /// Predictions that entered the scores.
    pub n_scored: usize,
    /// Predictions left out (no value, or no ground truth).
    pub n_excluded: usize,
    pub scores: Option<Scores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_name: String,
    pub dataset: DatasetId,
    pub mode: Mode,
    pub samples: usize,
    pub age: Option<AttributeMetrics>,
    pub gender: Option<AttributeMetrics>,
    pub race: Option<AttributeMetrics>,
    pub off_target: OffTargetScores,
    pub off_target_by_attribute: BTreeMap<AttributeKind, OffTargetScores>,
}

impl RunMetrics {
    pub fn attribute(&self, kind: AttributeKind) -> Option<&AttributeMetrics> {
        match kind {
            AttributeKind::Age => self.age.as_ref(),
            AttributeKind::Gender => self.gender.as_ref(),
            AttributeKind::Race => self.race.as_ref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: RunMetrics,
    pub transcripts: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
}

/// Scores a finished set of predictions against the samples' ground truth.
pub fn compute_metrics(
    run_name: &str,
    dataset: DatasetId,
    mode: Mode,
    samples: &[Sample],
    predictions: &[Prediction],
    mape_zero_policy: MapeZeroPolicy,
    unresolved_age: UnresolvedAge,
) -> RunMetrics {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut per_kind: BTreeMap<AttributeKind, AttributeMetrics> = BTreeMap::new();
    let mut off_by_kind = BTreeMap::new();

    for &kind in dataset.attributes() {
        let preds: Vec<&Prediction> = predictions.iter().filter(|p| p.kind == kind).collect();
        off_by_kind.insert(kind, off_target_scores(&preds.iter().map(|p| (*p).clone()).collect::<Vec<_>>()));
        let continuous = kind == AttributeKind::Age && matches!(dataset.age_scheme(), AgeScheme::Continuous { .. });

        let metrics = if continuous {
            let midpoint = dataset.age_scheme().midpoint();
            let mut pv = Vec::new();
            let mut tv = Vec::new();
            for p in &preds {
                let truth = by_id.get(p.sample_id.as_str()).and_then(|s| s.truth(kind)).and_then(|t| t.years());
                let pred = match (p.value.and_then(|v| v.years()), unresolved_age) {
                    (Some(y), _) => Some(y),
                    (None, UnresolvedAge::ImputeMidpoint) => midpoint,
                    (None, UnresolvedAge::Exclude) => None,
                };
                if let (Some(t), Some(y)) = (truth, pred) {
                    tv.push(t as f64);
                    pv.push(y as f64);
                }
            }
            let (scores, note) = match regression_scores(&pv, &tv, mape_zero_policy) {
                Ok(s) => (Some(Scores::Regression(s)), None),
                Err(e) => (None, Some(e.to_string())),
            };
            AttributeMetrics {
                n_scored: pv.len(),
                n_excluded: preds.len() - pv.len(),
                scores,
                note,
            }
        } else {
            let k = dataset.taxonomies().for_kind(kind).map(|t| t.len()).unwrap_or(0);
            let mut pv = Vec::new();
            let mut tv = Vec::new();
            for p in &preds {
                let truth = by_id
                    .get(p.sample_id.as_str())
                    .and_then(|s| s.truth(kind))
                    .and_then(|t| t.class_index());
                if let (Some(t), Some(c)) = (truth, p.value.and_then(|v| v.class_index())) {
                    tv.push(t);
                    pv.push(c);
                }
            }
            let (scores, note) = match classification_scores(&pv, &tv, k) {
                Ok(s) => (Some(Scores::Classification(s)), None),
                Err(e) => (None, Some(e.to_string())),
            };
            AttributeMetrics {
                n_scored: pv.len(),
                n_excluded: preds.len() - pv.len(),
                scores,
                note,
            }
        };
        per_kind.insert(kind, metrics);
    }

    RunMetrics {
        run_name: run_name.to_string(),
        dataset,
        mode,
        samples: samples.len(),
        age: per_kind.remove(&AttributeKind::Age),
        gender: per_kind.remove(&AttributeKind::Gender),
        race: per_kind.remove(&AttributeKind::Race),
        off_target: off_target_scores(predictions),
        off_target_by_attribute: off_by_kind,
    }
}

/// Runs the configured evaluation. `mock` overrides the fixture file named in
/// the config.
pub async fn run(config: &RunConfig, mock: Option<&Path>) -> Result<RunArtifacts, HarnessError> {
    match mock.or(config.mock.as_deref()) {
        Some(path) => {
            let client = ScriptedMock::from_file(path).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
            let digest = client.digest();
            run_with_client(config, &client, Some(digest)).await
        }
        None => {
            let client = HttpClient::new(config.endpoint.clone(), config.concurrency * 3)?;
            run_with_client(config, &client, None).await
        }
    }
}

fn load_index(config: &RunConfig) -> Result<DatasetIndex, HarnessError> {
    let section = &config.dataset;
    let index = match (&section.index, &section.root) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(HarnessError::DatasetMissing(format!("index {} does not exist", path.display())));
            }
            DatasetIndex::load(path)?
        }
        (None, Some(root)) => {
            if !root.is_dir() {
                return Err(HarnessError::DatasetMissing(format!("{} is not a directory", root.display())));
            }
            index_dataset(section.id, root, section.labels.as_deref())?.0
        }
        (None, None) => return Err(HarnessError::ConfigInvalid("[dataset] needs `index` or `root`".into())),
    };
    if index.dataset != section.id {
        return Err(HarnessError::ConfigInvalid(format!(
            "index holds {} samples but the config names {}",
            index.dataset, section.id
        )));
    }
    Ok(index)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::io(path, e))?;
    write_atomic(path, (text + "\n").as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn transcript_bytes(outcomes: &[&SampleOutcome]) -> Result<Vec<u8>, HarnessError> {
    let mut out = Vec::new();
    for o in outcomes {
        for line in TranscriptLine::from_transcript(&o.transcript) {
            serde_json::to_writer(&mut out, &line).map_err(|e| HarnessError::io(TRANSCRIPTS_FILE, e))?;
            out.push(b'\n');
        }
    }
    Ok(out)
}

fn prediction_rows(outcomes: &[&SampleOutcome], samples: &HashMap<&str, &Sample>) -> Vec<PredictionRow> {
    outcomes
        .iter()
        .flat_map(|o| {
            let sample = samples[o.transcript.sample_id.as_str()];
            o.predictions.iter().map(move |p| PredictionRow::new(sample, p))
        })
        .collect()
}

fn csv_bytes(rows: &[PredictionRow], with_header: bool) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(with_header).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::io(PREDICTIONS_FILE, e))?;
    }
    if with_header && rows.is_empty() {
        w.write_record([
            "sample_id",
            "attribute",
            "truth",
            "prediction",
            "resolution",
            "attempts",
            "first_attempt_off_target",
        ])
        .map_err(|e| HarnessError::io(PREDICTIONS_FILE, e))?;
    }
    w.into_inner().map_err(|e| HarnessError::io(PREDICTIONS_FILE, e))
}

/// Completed samples left by an earlier run of the same config in `dir`.
/// Truncated lines and partially written samples are dropped.
fn load_prior(
    dir: &Path,
    config_digest: &str,
    dataset: DatasetId,
    kinds: &[AttributeKind],
    selected: &HashMap<&str, &Sample>,
) -> Result<BTreeMap<String, SampleOutcome>, HarnessError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let Ok(text) = fs::read_to_string(&manifest_path) else {
        return Ok(BTreeMap::new());
    };
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| HarnessError::BadArtifacts {
        dir: dir.to_path_buf(),
        message: format!("unreadable manifest: {e}"),
    })?;
    if manifest.config_digest != config_digest {
        return Err(HarnessError::ConfigInvalid(format!(
            "{} holds a run with a different configuration",
            dir.display()
        )));
    }

    let mut steps: BTreeMap<String, Vec<TranscriptLine>> = BTreeMap::new();
    if let Ok(f) = File::open(dir.join(TRANSCRIPTS_FILE)) {
        for line in BufReader::new(f).lines().map_while(Result::ok) {
            if let Ok(l) = serde_json::from_str::<TranscriptLine>(&line) {
                steps.entry(l.sample_id.clone()).or_default().push(l);
            }
        }
    }
    let mut rows: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    if let Ok(mut r) = csv::ReaderBuilder::new().flexible(true).from_path(dir.join(PREDICTIONS_FILE)) {
        for row in r.deserialize::<PredictionRow>().filter_map(Result::ok) {
            if let Ok(p) = row.to_prediction(dataset) {
                rows.entry(p.sample_id.clone()).or_default().push(p);
            }
        }
    }

    let mut out = BTreeMap::new();
    for (id, mut predictions) in rows {
        if !selected.contains_key(id.as_str()) {
            continue;
        }
        let Some(lines) = steps.remove(&id) else { continue };
        let got: Vec<AttributeKind> = predictions.iter().map(|p| p.kind).collect();
        if got != kinds {
            continue;
        }
        let transcript = TranscriptLine::into_transcripts(lines).remove(0);
        for p in &mut predictions {
            p.final_raw_text = transcript
                .steps
                .iter()
                .rev()
                .find(|s| s.step == Step::Attribute(p.kind))
                .map(|s| s.raw_response.clone())
                .unwrap_or_default();
        }
        out.insert(id, SampleOutcome { transcript, predictions });
    }
    Ok(out)
}

fn all_unresolvable(outcome: &SampleOutcome) -> Option<String> {
    let causes: Vec<&str> = outcome
        .predictions
        .iter()
        .map(|p| match &p.resolution {
            Resolution::Unresolvable { cause } => Some(cause.as_str()),
            _ => None,
        })
        .collect::<Option<_>>()?;
    Some(causes.first().copied().unwrap_or_default().to_string())
}

/// Runs the evaluation against an explicit client.
pub async fn run_with_client<C: ModelClient + ?Sized>(
    config: &RunConfig,
    client: &C,
    fixture_digest: Option<String>,
) -> Result<RunArtifacts, HarnessError> {
    let templates = match &config.templates {
        Some(path) => TemplateSet::load(path)?,
        None => TemplateSet::default_set(),
    };
    templates.validate()?;
    let index = load_index(config)?;
    let n = config.eval_count.unwrap_or(index.len());
    let mut samples = select_eval_set(&index, n, config.seed)?;
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let plan = ChainPlan::for_dataset(index.dataset, config.mode, config.parallel_steps);

    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let config_digest = config.digest();
    let mut done = load_prior(&dir, &config_digest, index.dataset, &plan.kinds, &by_id)?;

    let mut manifest = RunManifest {
        run_name: config.run_name.clone(),
        status: "running".into(),
        error: None,
        config: config.clone(),
        config_digest,
        dataset: index.dataset,
        dataset_digest: index.manifest_digest.clone(),
        template_digest: templates.digest(),
        fixture_digest,
        mode: config.mode,
        retries: config.retries,
        temperature: config.temperature,
        kinds: plan.kinds.clone(),
        samples: samples.len(),
        resumed_samples: done.len(),
        transcript_violations: Vec::new(),
        started_at: now(),
        finished_at: None,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;

    let transcripts_path = dir.join(TRANSCRIPTS_FILE);
    let predictions_path = dir.join(PREDICTIONS_FILE);
    {
        let kept: Vec<&SampleOutcome> = done.values().collect();
        write_atomic(&transcripts_path, &transcript_bytes(&kept)?)?;
        write_atomic(&predictions_path, &csv_bytes(&prediction_rows(&kept, &by_id), true)?)?;
    }

    let ctx = ChainContext {
        client,
        templates: &templates,
        policy: config.policy(),
        temperature: config.temperature,
        max_tokens: config.endpoint.max_tokens,
        model_name: config.endpoint.model.clone(),
    };
    let todo: Vec<&Sample> = samples.iter().filter(|s| !done.contains_key(&s.id)).collect();
    let total = samples.len();
    let mut unresolvable = done.values().filter(|o| all_unresolvable(o).is_some()).count();

    let result: Result<(), HarnessError> = async {
        let open = |p: &Path| {
            OpenOptions::new()
                .append(true)
                .open(p)
                .map_err(|e| HarnessError::io(p, e))
        };
        let mut transcripts_out = open(&transcripts_path)?;
        let mut predictions_out = open(&predictions_path)?;
        let mut first_cause: Option<String> = None;

        let mut outcomes = futures::stream::iter(todo.iter().copied())
            .map(|sample| {
                let ctx = &ctx;
                let plan = &plan;
                let path = index.image_path(sample);
                async move {
                    let bytes = tokio::fs::read(&path).await.map_err(|e| HarnessError::io(&path, e))?;
                    let image = ImagePayload::new(bytes, ImagePayload::media_type_for(&path));
                    Ok::<_, HarnessError>(run_sample(sample, &image, plan, ctx).await?)
                }
            })
            .buffer_unordered(config.concurrency);

        while let Some(outcome) = outcomes.try_next().await? {
            let refs = [&outcome];
            transcripts_out
                .write_all(&transcript_bytes(&refs)?)
                .map_err(|e| HarnessError::io(&transcripts_path, e))?;
            predictions_out
                .write_all(&csv_bytes(&prediction_rows(&refs, &by_id), false)?)
                .map_err(|e| HarnessError::io(&predictions_path, e))?;
            if let Some(cause) = all_unresolvable(&outcome) {
                unresolvable += 1;
                first_cause.get_or_insert(cause);
            }
            done.insert(outcome.transcript.sample_id.clone(), outcome);
            if unresolvable * 2 > total {
                return Err(HarnessError::HealthGuard {
                    unresolvable,
                    total,
                    cause: first_cause.unwrap_or_else(|| "unknown".into()),
                });
            }
        }
        Ok(())
    }
    .await;

    if let Err(e) = result {
        manifest.status = "aborted".into();
        manifest.error = Some(e.to_string());
        manifest.finished_at = Some(now());
        write_json(&manifest_path, &manifest)?;
        return Err(e);
    }

    let ordered: Vec<&SampleOutcome> = done.values().collect();
    write_atomic(&transcripts_path, &transcript_bytes(&ordered)?)?;
    write_atomic(&predictions_path, &csv_bytes(&prediction_rows(&ordered, &by_id), true)?)?;

    for o in &ordered {
        if let Err(problems) = check_transcript(&o.transcript, &o.predictions, config.retries) {
            manifest
                .transcript_violations
                .extend(problems.into_iter().map(|p| format!("{}: {p}", o.transcript.sample_id)));
        }
    }

    let predictions: Vec<Prediction> = ordered.iter().flat_map(|o| o.predictions.iter().cloned()).collect();
    let metrics = compute_metrics(
        &config.run_name,
        index.dataset,
        config.mode,
        &samples,
        &predictions,
        config.mape_zero_policy,
        config.unresolved_age,
    );
    let metrics_path = dir.join(METRICS_FILE);
    write_json(&metrics_path, &metrics)?;
    let report_path = dir.join(REPORT_FILE);
    write_atomic(&report_path, render_markdown(std::slice::from_ref(&metrics)).as_bytes())?;

    manifest.status = "complete".into();
    manifest.finished_at = Some(now());
    write_json(&manifest_path, &manifest)?;

    Ok(RunArtifacts {
        dir,
        manifest,
        metrics,
        transcripts: transcripts_path,
        predictions: predictions_path,
        report: report_path,
    })
}
