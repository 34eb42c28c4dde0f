use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::client::EndpointConfig;
use crate::domain::Mode;
use crate::metrics::MapeZeroPolicy;
use crate::remediation::{FallbackKind, ResolutionPolicy, DEFAULT_RETRIES};
use crate::taxonomy::DatasetId;

/// How unresolvable continuous-age predictions enter the regression metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnresolvedAge {
    /// Score them as the midpoint of the dataset's age range.
    #[default]
    ImputeMidpoint,
    /// Leave them out of the age metrics.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub id: DatasetId,
    /// A saved index from `demoscope ingest`.
    #[serde(default)]
    pub index: Option<PathBuf>,
    /// Raw dataset directory, indexed on the fly when no index is given.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Label file for FairFace and CACD.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    /// Directory the run writes into.
    pub out_dir: PathBuf,
    /// Samples to evaluate; all of them when absent.
    #[serde(default)]
    pub eval_count: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub temperature: f64,
    /// Samples in flight at once.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Template file; the built-in set when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub fallback: FallbackKind,
    #[serde(default)]
    pub mape_zero_policy: MapeZeroPolicy,
    #[serde(default)]
    pub unresolved_age: UnresolvedAge,
    #[serde(default = "default_true")]
    pub parallel_steps: bool,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub endpoint: EndpointConfig,
    /// Fixture file for the scripted mock; replaces the endpoint when set.
    #[serde(default)]
    pub mock: Option<PathBuf>,
}

fn default_retries() -> u32 {
    DEFAULT_RETRIES
}

fn default_concurrency() -> usize {
    4
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.templates,
            &mut self.mock,
            &mut self.dataset.index,
            &mut self.dataset.root,
            &mut self.dataset.labels,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    fn check(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::ConfigInvalid(m.to_string()));
        if self.run_name.trim().is_empty() {
            return bad("run_name is empty");
        }
        if self.retries == 0 {
            return bad("retries must be at least 1");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be in [0, 2]");
        }
        if self.eval_count == Some(0) {
            return bad("eval_count must be positive");
        }
        if let MapeZeroPolicy::Epsilon(e) = self.mape_zero_policy {
            if !(e > 0.0 && e.is_finite()) {
                return bad("mape epsilon must be positive");
            }
        }
        if self.dataset.index.is_none() && self.dataset.root.is_none() {
            return bad("[dataset] needs `index` or `root`");
        }
        Ok(())
    }

    pub fn policy(&self) -> ResolutionPolicy {
        ResolutionPolicy {
            retries_n: self.retries,
            fallback: self.fallback,
        }
    }

    /// Digest of the settings that determine a run's outputs. The output
    /// directory is left out so the same run can be repeated elsewhere.
    pub fn digest(&self) -> String {
        let mut copy = self.clone();
        copy.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&copy).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
run_name = "t"
out_dir = "out"

[dataset]
id = "utkface"
root = "faces"
"#;

    #[test]
    fn defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.retries, 5);
        assert_eq!(c.concurrency, 4);
        assert_eq!(c.temperature, 0.0);
        assert_eq!(c.mode, Mode::Cot);
        assert!(c.parallel_steps);
        assert_eq!(c.fallback, FallbackKind::Embedding);
    }

    #[test]
    fn rejects_bad_values() {
        for extra in ["retries = 0", "concurrency = 0", "temperature = 3.0", "eval_count = 0", "bogus = 1"] {
            let text = format!("{extra}\n{MINIMAL}");
            let err = RunConfig::parse(&text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{extra}");
        }
        let err = RunConfig::parse("run_name = \"x\"\nout_dir = \"o\"\n[dataset]\nid = \"cacd\"\n").unwrap_err();
        assert!(err.to_string().contains("index"));
    }

    #[test]
    fn mape_policy_forms() {
        let c = RunConfig::parse(&format!("mape_zero_policy = {{ epsilon = 0.5 }}\n{MINIMAL}")).unwrap();
        assert_eq!(c.mape_zero_policy, MapeZeroPolicy::Epsilon(0.5));
        let c = RunConfig::parse(&format!("mape_zero_policy = \"exclude\"\n{MINIMAL}")).unwrap();
        assert_eq!(c.mape_zero_policy, MapeZeroPolicy::Exclude);
    }

    #[test]
    fn relative_paths_follow_config() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.out_dir, PathBuf::from("/cfg/out"));
        assert_eq!(c.dataset.root, Some(PathBuf::from("/cfg/faces")));
        let before = c.digest();
        c.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(c.digest(), before);
    }
}
