//! Off-target remediation: repeat an attribute query until the reply parses or
//! the retry budget runs out, then fall back once.
//!
//! Categorical attributes fall back to the category whose text embedding is
//! most cosine-similar to the last reply. Continuous age has no categories to
//! compare against and is imputed as the midpoint of the dataset's age range.

use std::future::Future;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, ModelClient};
use crate::domain::{Resolution, StepOutcome};
use crate::parsing::{parse_age_years, parse_bin, parse_category, OffTargetReason, ParseOutcome};
use crate::taxonomy::Taxonomy;

pub const DEFAULT_RETRIES: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FallbackKind {
    #[default]
    Embedding,
    Impute,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolutionPolicy {
    pub retries_n: u32,
    pub fallback: FallbackKind,
}

impl Default for ResolutionPolicy {
    fn default() -> Self {
        ResolutionPolicy {
            retries_n: DEFAULT_RETRIES,
            fallback: FallbackKind::Embedding,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemediationError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("vectors have dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding call failed: {0}")]
    Embed(#[from] ClientError),
    #[error("embedder returned {got} vectors for {expected} texts")]
    WrongCount { expected: usize, got: usize },
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, RemediationError> {
    if u.len() != v.len() {
        return Err(RemediationError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(RemediationError::ZeroVector);
    }
    Ok(dot / (nu * nv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FallbackChoice {
    pub index: usize,
    /// True when the reply was blank and index 0 was taken without embedding.
    pub imputed: bool,
}

/// Picks the category most similar to `raw_text`. The reply and all category
/// names go to the embedder in a single call; ties go to the lower index.
pub async fn fallback_nearest<E: ModelClient + ?Sized>(
    raw_text: &str,
    taxonomy: &Taxonomy,
    embedder: &E,
) -> Result<FallbackChoice, RemediationError> {
    if raw_text.trim().is_empty() {
        return Ok(FallbackChoice { index: 0, imputed: true });
    }
    let mut texts = Vec::with_capacity(taxonomy.len() + 1);
    texts.push(raw_text.to_string());
    texts.extend(taxonomy.categories().iter().cloned());
    let vectors = embedder.embed(&texts).await?;
    if vectors.len() != texts.len() {
        return Err(RemediationError::WrongCount {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    let query = vectors[0].values();
    let mut best: Option<(usize, f64)> = None;
    for (index, v) in vectors[1..].iter().enumerate() {
        let sim = cosine(query, v.values())?;
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((index, sim));
        }
    }
    Ok(FallbackChoice {
        index: best.map(|(i, _)| i).unwrap_or(0),
        imputed: false,
    })
}

/// What an attribute answer is parsed into.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Continuous age; `midpoint` is imputed when nothing parses.
    Years { midpoint: u32 },
    Category(&'a Taxonomy),
    Bin(&'a Taxonomy),
}

impl Target<'_> {
    pub fn parse(&self, text: &str) -> ParseOutcome<TargetValue> {
        match self {
            Target::Years { .. } => parse_age_years(text).map(TargetValue::Years),
            Target::Category(t) => parse_category(text, t).map(TargetValue::Index),
            Target::Bin(t) => parse_bin(text, t).map(TargetValue::Index),
        }
    }

    pub fn display(&self, value: TargetValue) -> String {
        match (self, value) {
            (Target::Category(t) | Target::Bin(t), TargetValue::Index(i)) => {
                t.category(i).map(str::to_string).unwrap_or_else(|| i.to_string())
            }
            (_, TargetValue::Years(y)) => y.to_string(),
            (_, TargetValue::Index(i)) => i.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetValue {
    Years(u32),
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptReply {
    pub text: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptLog {
    pub attempt: u32,
    pub raw_response: String,
    pub latency_ms: u64,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub value: Option<TargetValue>,
    pub resolution: Resolution,
    pub attempts: Vec<AttemptLog>,
    pub final_raw_text: String,
    pub first_attempt_off_target: bool,
    pub embed_calls: u32,
}

/// Runs `attempt_fn(1)`, `attempt_fn(2)`, ... until a reply parses or
/// `policy.retries_n` replies were off-target, then applies the fallback once.
/// A failed request ends the loop with `Unresolvable`.
pub async fn resolve<F, Fut, E>(target: Target<'_>, policy: &ResolutionPolicy, embedder: &E, mut attempt_fn: F) -> Resolved
where
    F: FnMut(u32) -> Fut,
    Fut: Future<Output = Result<AttemptReply, ClientError>>,
    E: ModelClient + ?Sized,
{
    let retries = policy.retries_n.max(1);
    let mut attempts: Vec<AttemptLog> = Vec::new();
    let first_off = |a: &[AttemptLog]| a.first().is_some_and(|l| l.outcome.is_off_target());

    for attempt in 1..=retries {
        let reply = match attempt_fn(attempt).await {
            Ok(r) => r,
            Err(e) => {
                attempts.push(AttemptLog {
                    attempt,
                    raw_response: String::new(),
                    latency_ms: 0,
                    outcome: StepOutcome::Failed { error: e.to_string() },
                });
                return Resolved {
                    value: None,
                    resolution: Resolution::Unresolvable { cause: e.to_string() },
                    final_raw_text: last_text(&attempts),
                    first_attempt_off_target: first_off(&attempts),
                    attempts,
                    embed_calls: 0,
                };
            }
        };
        let parsed = target.parse(&reply.text);
        let outcome = match parsed {
            ParseOutcome::Value(v) => StepOutcome::Parsed { value: target.display(v) },
            ParseOutcome::OffTarget(reason) => StepOutcome::OffTarget { reason },
        };
        attempts.push(AttemptLog {
            attempt,
            raw_response: reply.text,
            latency_ms: reply.latency_ms,
            outcome,
        });
        if let ParseOutcome::Value(v) = parsed {
            return Resolved {
                value: Some(v),
                resolution: Resolution::Parsed { attempt },
                final_raw_text: last_text(&attempts),
                first_attempt_off_target: first_off(&attempts),
                attempts,
                embed_calls: 0,
            };
        }
    }

    let final_raw_text = last_text(&attempts);
    let mut embed_calls = 0;
    let (value, resolution) = match (target, policy.fallback) {
        (_, FallbackKind::Fail) => (
            None,
            Resolution::Unresolvable {
                cause: format!("{retries} off-target replies and fallback disabled"),
            },
        ),
        (Target::Years { midpoint }, _) => (Some(TargetValue::Years(midpoint)), Resolution::Imputed),
        (Target::Category(_) | Target::Bin(_), FallbackKind::Impute) => (Some(TargetValue::Index(0)), Resolution::Imputed),
        (Target::Category(t) | Target::Bin(t), FallbackKind::Embedding) => {
            if !final_raw_text.trim().is_empty() {
                embed_calls = 1;
            }
            match fallback_nearest(&final_raw_text, t, embedder).await {
                Ok(FallbackChoice { index, imputed: false }) => (Some(TargetValue::Index(index)), Resolution::EmbeddingFallback),
                Ok(FallbackChoice { index, imputed: true }) => (Some(TargetValue::Index(index)), Resolution::Imputed),
                Err(e) => (None, Resolution::Unresolvable { cause: e.to_string() }),
            }
        }
    };
    Resolved {
        value,
        resolution,
        first_attempt_off_target: first_off(&attempts),
        attempts,
        final_raw_text,
        embed_calls,
    }
}

fn last_text(attempts: &[AttemptLog]) -> String {
    attempts.last().map(|a| a.raw_response.clone()).unwrap_or_default()
}

/// Off-target reasons seen across a set of attempts, in order.
pub fn reasons(attempts: &[AttemptLog]) -> Vec<OffTargetReason> {
    attempts
        .iter()
        .filter_map(|a| match a.outcome {
            StepOutcome::OffTarget { reason } => Some(reason),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::ScriptedMock;
    use crate::taxonomy::DatasetId;
    use std::cell::Cell;

    fn replies<'a>(list: &'a [&'a str]) -> impl FnMut(u32) -> std::future::Ready<Result<AttemptReply, ClientError>> + 'a {
        move |attempt| {
            std::future::ready(Ok(AttemptReply {
                text: list[(attempt - 1) as usize].to_string(),
                latency_ms: 0,
            }))
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        assert!((cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - 0.974631846).abs() < 1e-9);
        assert!((expected - 0.974631846).abs() < 1e-9);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(RemediationError::ZeroVector));
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[tokio::test]
    async fn stops_at_first_parse() {
        let mock = ScriptedMock::new();
        let calls = Cell::new(0);
        let list = ["unknown", "unsure", "32", "40", "50"];
        let r = resolve(Target::Years { midpoint: 58 }, &ResolutionPolicy::default(), &mock, |a| {
            calls.set(calls.get() + 1);
            replies(&list)(a)
        })
        .await;
        assert_eq!(calls.get(), 3);
        assert_eq!(r.resolution, Resolution::Parsed { attempt: 3 });
        assert_eq!(r.value, Some(TargetValue::Years(32)));
        assert!(r.first_attempt_off_target);
        assert_eq!(r.attempts.len(), 3);
    }

    #[tokio::test]
    async fn first_attempt_hit_skips_fallback() {
        let mock = ScriptedMock::new();
        let gender = DatasetId::Utkface.taxonomies().gender.as_ref().unwrap();
        let r = resolve(Target::Category(gender), &ResolutionPolicy::default(), &mock, replies(&["Female"])).await;
        assert_eq!(r.resolution, Resolution::Parsed { attempt: 1 });
        assert_eq!(r.value, Some(TargetValue::Index(1)));
        assert!(!r.first_attempt_off_target);
        assert_eq!(mock.embed_calls(), 0);
    }

    #[tokio::test]
    async fn exhausted_budget_embeds_once() {
        let race = DatasetId::Utkface.taxonomies().race.as_ref().unwrap();
        let mut mock = ScriptedMock::new().with_embedding("a person", vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        for (i, c) in race.categories().iter().enumerate() {
            let mut v = vec![0.0; 5];
            v[i] = 1.0;
            mock = mock.with_embedding(c.clone(), v);
        }
        let calls = Cell::new(0);
        let r = resolve(Target::Category(race), &ResolutionPolicy::default(), &mock, |_| {
            calls.set(calls.get() + 1);
            std::future::ready(Ok(AttemptReply {
                text: "a person".into(),
                latency_ms: 0,
            }))
        })
        .await;
        assert_eq!(calls.get(), 5);
        assert_eq!(mock.embed_calls(), 1);
        assert_eq!(r.resolution, Resolution::EmbeddingFallback);
        assert_eq!(r.value, Some(TargetValue::Index(2)));
    }

    #[tokio::test]
    async fn continuous_age_imputes_midpoint() {
        let mock = ScriptedMock::new();
        let r = resolve(Target::Years { midpoint: 34 }, &ResolutionPolicy::default(), &mock, replies(&["?"; 5])).await;
        assert_eq!(r.resolution, Resolution::Imputed);
        assert_eq!(r.value, Some(TargetValue::Years(34)));
        assert_eq!(mock.embed_calls(), 0);
    }

    #[tokio::test]
    async fn fail_policy_and_transport_errors() {
        let mock = ScriptedMock::new();
        let policy = ResolutionPolicy {
            retries_n: 2,
            fallback: FallbackKind::Fail,
        };
        let r = resolve(Target::Years { midpoint: 34 }, &policy, &mock, replies(&["?", "?"])).await;
        assert!(matches!(r.resolution, Resolution::Unresolvable { .. }));

        let r = resolve(Target::Years { midpoint: 34 }, &ResolutionPolicy::default(), &mock, |_| {
            std::future::ready(Err(ClientError::Transport("refused".into())))
        })
        .await;
        assert!(matches!(r.resolution, Resolution::Unresolvable { ref cause } if cause.contains("refused")));
        assert_eq!(r.attempts.len(), 1);
        assert!(!r.first_attempt_off_target);
    }

    #[tokio::test]
    async fn blank_reply_imputes_first_category() {
        let mock = ScriptedMock::new();
        let race = DatasetId::Utkface.taxonomies().race.as_ref().unwrap();
        let choice = fallback_nearest("  ", race, &mock).await.unwrap();
        assert_eq!(choice, FallbackChoice { index: 0, imputed: true });
        assert_eq!(mock.embed_calls(), 0);
    }

    #[tokio::test]
    async fn tie_goes_to_lower_index() {
        let race = DatasetId::Utkface.taxonomies().race.as_ref().unwrap();
        // Query at 60 degrees from both Black and Indian: cosine 0.5 each.
        let q = vec![0.0, 0.5, 0.0, 0.5, 0.0];
        let mut mock = ScriptedMock::new().with_embedding("unclear", q);
        let s = 0.5f64.sqrt();
        let vecs: [[f64; 5]; 5] = [
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [s, s, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, s, s],
            [0.0, 0.0, 0.0, 0.0, 1.0],
        ];
        for (c, v) in race.categories().iter().zip(vecs) {
            mock = mock.with_embedding(c.clone(), v.to_vec());
        }
        let choice = fallback_nearest("unclear", race, &mock).await.unwrap();
        assert_eq!(choice.index, 1);
    }
}
