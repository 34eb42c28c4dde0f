use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::datasets::{index_dataset, label_histograms, DatasetIndex, SkipReport};
use crate::taxonomy::{AttributeKind, DatasetId};

#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub index: DatasetIndex,
    pub histograms: BTreeMap<AttributeKind, BTreeMap<String, usize>>,
    pub skipped: SkipReport,
}

impl Diagnostics {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dataset: {}", self.index.dataset);
        let _ = writeln!(out, "samples: {}", self.index.len());
        let _ = writeln!(out, "digest: {}", self.index.manifest_digest);
        for (kind, counts) in &self.histograms {
            let _ = writeln!(out, "{kind}:");
            for (label, n) in counts {
                let _ = writeln!(out, "  {label}: {n}");
            }
        }
        let _ = writeln!(out, "skipped: {}", self.skipped.len());
        out.push_str(&self.skipped.to_text());
        out
    }
}

/// The label file for a FairFace or CACD root: `explicit` if given, else the
/// only CSV file directly inside `root`.
pub fn find_labels(dataset: DatasetId, root: &Path, explicit: Option<&Path>) -> Result<Option<PathBuf>, HarnessError> {
    if let Some(p) = explicit {
        return Ok(Some(p.to_path_buf()));
    }
    if dataset == DatasetId::Utkface {
        return Ok(None);
    }
    let entries = std::fs::read_dir(root).map_err(|e| HarnessError::DatasetMissing(format!("{}: {e}", root.display())))?;
    let mut csvs: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    csvs.sort();
    match csvs.len() {
        1 => Ok(csvs.pop()),
        0 => Err(HarnessError::DatasetMissing(format!("no label CSV in {}", root.display()))),
        _ => Err(HarnessError::ConfigInvalid(format!(
            "several CSV files in {}; pass --labels",
            root.display()
        ))),
    }
}

/// Indexes a dataset directory and summarizes what was found.
pub fn validate(dataset: DatasetId, root: &Path, labels: Option<&Path>) -> Result<Diagnostics, HarnessError> {
    if !root.is_dir() {
        return Err(HarnessError::DatasetMissing(format!("{} is not a directory", root.display())));
    }
    let labels = find_labels(dataset, root, labels)?;
    let (index, skipped) = index_dataset(dataset, root, labels.as_deref())?;
    Ok(Diagnostics {
        histograms: label_histograms(&index),
        index,
        skipped,
    })
}
