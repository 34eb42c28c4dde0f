//! Per-sample inference chains.
//!
//! Naive mode asks each attribute question directly. Chain-of-thought mode
//! first collects a facial-feature description and a suggested name (two
//! independent image queries), composes them into a demographic description,
//! and injects that description into each attribute question.

use futures::future::join_all;

use crate::client::{ChatRequest, ClientError, ImagePayload, ModelClient, RequestTag};
use crate::domain::{Mode, PredictedValue, Prediction, Sample, Step, StepOutcome, StepRecord, Transcript};
use crate::parsing::judge_free_text;
use crate::prompts::{compose_description, render_attribute, render_ffc, render_name, AnswerSpace, PromptError, TemplateSet};
use crate::remediation::{resolve, AttemptReply, ResolutionPolicy, Target, TargetValue};
use crate::taxonomy::{AgeLabel, AgeScheme, AttributeKind, DatasetId, GenderLabel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainPlan {
    pub mode: Mode,
    pub kinds: Vec<AttributeKind>,
    /// Run the ffc and name queries concurrently.
    pub parallel_steps: bool,
}

impl ChainPlan {
    /// Queries every attribute the dataset has ground truth for.
    pub fn for_dataset(dataset: DatasetId, mode: Mode, parallel_steps: bool) -> Self {
        ChainPlan {
            mode,
            kinds: dataset.attributes().to_vec(),
            parallel_steps,
        }
    }
}

/// Everything a chain needs besides the sample itself.
pub struct ChainContext<'a, C: ModelClient + ?Sized> {
    pub client: &'a C,
    pub templates: &'a TemplateSet,
    pub policy: ResolutionPolicy,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub transcript: Transcript,
    pub predictions: Vec<Prediction>,
}

impl<C: ModelClient + ?Sized> ChainContext<'_, C> {
    fn request(&self, image: &ImagePayload, prompt: &str, sample_id: &str, step: Step, attempt: u32) -> ChatRequest {
        let mut req = ChatRequest::user(
            image.clone(),
            prompt,
            RequestTag {
                sample_id: sample_id.to_string(),
                step,
                attempt,
            },
        );
        req.temperature = self.temperature;
        req.max_tokens = self.max_tokens;
        req.model_name = self.model_name.clone();
        req
    }

    async fn call(&self, image: &ImagePayload, prompt: &str, sample_id: &str, step: Step, attempt: u32) -> Result<AttemptReply, ClientError> {
        let req = self.request(image, prompt, sample_id, step, attempt);
        let resp = self.client.complete(&req).await?;
        Ok(AttemptReply {
            text: resp.text,
            latency_ms: resp.latency_ms,
        })
    }
}

fn answer_space(dataset: DatasetId, kind: AttributeKind) -> (Target<'static>, AnswerSpace<'static>) {
    let tax = dataset.taxonomies();
    match (kind, dataset.age_scheme()) {
        (AttributeKind::Age, AgeScheme::Continuous { min, max }) => (
            Target::Years {
                midpoint: dataset.age_scheme().midpoint().unwrap_or(min),
            },
            AnswerSpace::Range { min, max },
        ),
        _ => {
            let t = tax
                .for_kind(kind)
                .unwrap_or_else(|| panic!("{dataset} has no {kind} taxonomy"));
            let target = if kind == AttributeKind::Age {
                Target::Bin(t)
            } else {
                Target::Category(t)
            };
            (target, AnswerSpace::Categories(t))
        }
    }
}

fn to_predicted(kind: AttributeKind, value: TargetValue) -> Option<PredictedValue> {
    match (kind, value) {
        (AttributeKind::Age, TargetValue::Years(y)) => Some(PredictedValue::Age(AgeLabel::Years(y))),
        (AttributeKind::Age, TargetValue::Index(b)) => Some(PredictedValue::Age(AgeLabel::Bin(b))),
        (AttributeKind::Gender, TargetValue::Index(i)) => GenderLabel::from_index(i).map(PredictedValue::Gender),
        (AttributeKind::Race, TargetValue::Index(i)) => Some(PredictedValue::Race(i)),
        _ => None,
    }
}

async fn attribute_group<C: ModelClient + ?Sized>(
    sample: &Sample,
    image: &ImagePayload,
    kind: AttributeKind,
    prompt_mode: Mode,
    description: Option<&str>,
    ctx: &ChainContext<'_, C>,
) -> Result<(Vec<StepRecord>, Prediction), PromptError> {
    let (target, space) = answer_space(sample.dataset, kind);
    let prompt = render_attribute(ctx.templates, kind, prompt_mode, description, space)?;
    let step = Step::Attribute(kind);
    let resolved = resolve(target, &ctx.policy, ctx.client, |attempt| {
        ctx.call(image, &prompt, &sample.id, step, attempt)
    })
    .await;
    let steps = resolved
        .attempts
        .iter()
        .map(|a| StepRecord {
            step,
            attempt: a.attempt,
            prompt_text: prompt.clone(),
            raw_response: a.raw_response.clone(),
            latency_ms: a.latency_ms,
            outcome: a.outcome.clone(),
        })
        .collect::<Vec<_>>();
    let prediction = Prediction {
        sample_id: sample.id.clone(),
        kind,
        value: resolved.value.and_then(|v| to_predicted(kind, v)),
        resolution: resolved.resolution,
        attempts: resolved.attempts.len() as u32,
        final_raw_text: resolved.final_raw_text,
        first_attempt_off_target: resolved.first_attempt_off_target,
    };
    Ok((steps, prediction))
}

async fn attribute_groups<C: ModelClient + ?Sized>(
    sample: &Sample,
    image: &ImagePayload,
    plan: &ChainPlan,
    prompt_mode: Mode,
    description: Option<&str>,
    ctx: &ChainContext<'_, C>,
) -> Result<(Vec<StepRecord>, Vec<Prediction>), PromptError> {
    let groups = join_all(
        plan.kinds
            .iter()
            .map(|&kind| attribute_group(sample, image, kind, prompt_mode, description, ctx)),
    )
    .await;
    let mut steps = Vec::new();
    let mut predictions = Vec::new();
    for group in groups {
        let (s, p) = group?;
        steps.extend(s);
        predictions.push(p);
    }
    Ok((steps, predictions))
}

/// Asks a free-text question until the reply is usable or the retry budget
/// runs out. Returns the steps taken and the usable reply, if any.
async fn free_text_group<C: ModelClient + ?Sized>(
    sample: &Sample,
    image: &ImagePayload,
    step: Step,
    prompt: &str,
    ctx: &ChainContext<'_, C>,
) -> (Vec<StepRecord>, Option<String>) {
    let mut steps = Vec::new();
    for attempt in 1..=ctx.policy.retries_n.max(1) {
        let record = |raw: String, latency_ms: u64, outcome: StepOutcome| StepRecord {
            step,
            attempt,
            prompt_text: prompt.to_string(),
            raw_response: raw,
            latency_ms,
            outcome,
        };
        match ctx.call(image, prompt, &sample.id, step, attempt).await {
            Err(e) => {
                steps.push(record(String::new(), 0, StepOutcome::Failed { error: e.to_string() }));
                return (steps, None);
            }
            Ok(reply) => match judge_free_text(&reply.text) {
                Some(reason) => steps.push(record(reply.text, reply.latency_ms, StepOutcome::OffTarget { reason })),
                None => {
                    let text = reply.text.clone();
                    steps.push(record(reply.text, reply.latency_ms, StepOutcome::Accepted));
                    return (steps, Some(text));
                }
            },
        }
    }
    (steps, None)
}

pub async fn run_naive<C: ModelClient + ?Sized>(
    sample: &Sample,
    image: &ImagePayload,
    plan: &ChainPlan,
    ctx: &ChainContext<'_, C>,
) -> Result<SampleOutcome, PromptError> {
    let (steps, predictions) = attribute_groups(sample, image, plan, Mode::Naive, None, ctx).await?;
    Ok(SampleOutcome {
        transcript: Transcript {
            sample_id: sample.id.clone(),
            mode: Mode::Naive,
            steps,
            composed_description: None,
            degraded: false,
        },
        predictions,
    })
}

pub async fn run_cot<C: ModelClient + ?Sized>(
    sample: &Sample,
    image: &ImagePayload,
    plan: &ChainPlan,
    ctx: &ChainContext<'_, C>,
) -> Result<SampleOutcome, PromptError> {
    let ffc_prompt = render_ffc(ctx.templates)?;
    let name_prompt = render_name(ctx.templates)?;

    let ((ffc_steps, ffc_text), (name_steps, name_text)) = if plan.parallel_steps {
        futures::join!(
            free_text_group(sample, image, Step::Ffc, &ffc_prompt, ctx),
            free_text_group(sample, image, Step::Name, &name_prompt, ctx),
        )
    } else {
        let ffc = free_text_group(sample, image, Step::Ffc, &ffc_prompt, ctx).await;
        let name = if ffc.1.is_some() {
            free_text_group(sample, image, Step::Name, &name_prompt, ctx).await
        } else {
            (Vec::new(), None)
        };
        (ffc, name)
    };

    let mut steps = ffc_steps;
    steps.extend(name_steps);

    let description = match (ffc_text, name_text) {
        (Some(f), Some(n)) => compose_description(&f, &n).ok(),
        _ => None,
    };
    let (prompt_mode, degraded) = match description {
        Some(_) => (Mode::Cot, false),
        None => (Mode::Naive, true),
    };
    let (attr_steps, predictions) = attribute_groups(sample, image, plan, prompt_mode, description.as_deref(), ctx).await?;
    steps.extend(attr_steps);

    Ok(SampleOutcome {
        transcript: Transcript {
            sample_id: sample.id.clone(),
            mode: Mode::Cot,
            steps,
            composed_description: description,
            degraded,
        },
        predictions,
    })
}

pub async fn run_sample<C: ModelClient + ?Sized>(
    sample: &Sample,
    image: &ImagePayload,
    plan: &ChainPlan,
    ctx: &ChainContext<'_, C>,
) -> Result<SampleOutcome, PromptError> {
    match plan.mode {
        Mode::Naive => run_naive(sample, image, plan, ctx).await,
        Mode::Cot => run_cot(sample, image, plan, ctx).await,
    }
}
