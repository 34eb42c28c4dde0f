//! Demographic attribute estimation with vision-language models.
//!
//! A model is asked for age, gender and race of a face image, either directly
//! or after describing facial features and suggesting a name. Replies are
//! parsed against dataset taxonomies, off-target replies are retried and
//! finally mapped to the nearest category by embedding similarity, and the
//! results are scored.

pub mod client;
pub mod datasets;
pub mod domain;
pub mod harness;
pub mod metrics;
pub mod parsing;
pub mod pipeline;
pub mod prompts;
pub mod remediation;
pub mod taxonomy;
