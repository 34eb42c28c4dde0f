//! Dataset adapters. Each turns a dataset's on-disk layout into a
//! [`DatasetIndex`] of validated samples plus a report of skipped records.
//!
//! Layouts:
//! * UTKFace: a flat directory of `[age]_[gender]_[race]_[timestamp].jpg`
//!   files; gender 0 = male, 1 = female; race 0..4 = White, Black, Asian,
//!   Indian, Others.
//! * FairFace: a label CSV with `file,age,gender,race` columns (extra columns
//!   ignored) and an image directory the `file` paths are relative to.
//! * CACD: a `file,age` CSV and an image directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::Sample;
use crate::taxonomy::{AgeLabel, AgeScheme, AttributeKind, DatasetId, GenderLabel};

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "webp"];

/// Release spellings in the FairFace label files that differ from the
/// taxonomy's display strings.
const FAIRFACE_RELEASE_LABELS: [(&str, &str); 2] = [("more than 70", "70+"), ("Latino_Hispanic", "Latino")];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("no usable samples found for {0}")]
    EmptyDataset(DatasetId),
    #[error("row {row}: {column} `{value}` is not a known category")]
    UnknownCategory { row: u64, column: String, value: String },
    #[error("row {row}: image `{file}` not found")]
    MissingImage { row: u64, file: String },
    #[error("requested {requested} samples but the index has {available}")]
    TooLarge { requested: usize, available: usize },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("malformed index file: {0}")]
    Malformed(String),
    #[error("index digest {stored} does not match its contents ({computed})")]
    DigestMismatch { stored: String, computed: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub entries: Vec<SkipEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub record: String,
    pub reason: String,
}

impl SkipReport {
    fn push(&mut self, record: impl Into<String>, reason: impl Into<String>) {
        self.entries.push(SkipEntry {
            record: record.into(),
            reason: reason.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("skipped {} record(s)\n", self.entries.len());
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}", e.record, e.reason);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub dataset: DatasetId,
    /// Directory sample image paths are relative to.
    pub image_root: PathBuf,
    pub samples: Vec<Sample>,
    /// SHA-256 over the dataset id and samples; the image root is excluded.
    pub manifest_digest: String,
}

impl DatasetIndex {
    /// Sorts samples by id, checks id uniqueness and label validity, and
    /// stamps the digest.
    pub fn new(dataset: DatasetId, image_root: PathBuf, mut samples: Vec<Sample>) -> Result<Self, DatasetError> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in samples.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(DatasetError::DuplicateId(pair[0].id.clone()));
            }
        }
        for s in &samples {
            validate_sample(s).map_err(DatasetError::Malformed)?;
        }
        if samples.is_empty() {
            return Err(DatasetError::EmptyDataset(dataset));
        }
        let manifest_digest = content_digest(dataset, &samples);
        Ok(DatasetIndex {
            dataset,
            image_root,
            samples,
            manifest_digest,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_path(&self, sample: &Sample) -> PathBuf {
        self.image_root.join(&sample.image)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| io_err(path, e))?;
        fs::write(path, json + "\n").map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| DatasetError::Malformed(e.to_string()))?;
        let computed = content_digest(index.dataset, &index.samples);
        if computed != index.manifest_digest {
            return Err(DatasetError::DigestMismatch {
                stored: index.manifest_digest,
                computed,
            });
        }
        let mut image_root = index.image_root.clone();
        if image_root.is_relative() {
            if let Some(parent) = path.parent() {
                image_root = parent.join(image_root);
            }
        }
        Ok(DatasetIndex { image_root, ..index })
    }
}

fn content_digest(dataset: DatasetId, samples: &[Sample]) -> String {
    let json = serde_json::to_vec(&(dataset, samples)).expect("samples serialize");
    hex::encode(Sha256::digest(&json))
}

/// Checks a sample's labels against its dataset's taxonomies and age range.
pub fn validate_sample(sample: &Sample) -> Result<(), String> {
    if !sample.has_truth() {
        return Err(format!("{}: no ground-truth labels", sample.id));
    }
    let tax = sample.dataset.taxonomies();
    match (sample.truth_age, sample.dataset.age_scheme()) {
        (None, _) => {}
        (Some(AgeLabel::Years(y)), AgeScheme::Continuous { min, max }) => {
            if y < min || y > max {
                return Err(format!("{}: age {y} outside [{min}, {max}]", sample.id));
            }
        }
        (Some(AgeLabel::Bin(b)), AgeScheme::Binned) => {
            if tax.age_bins.as_ref().is_none_or(|t| b >= t.len()) {
                return Err(format!("{}: age bin {b} out of range", sample.id));
            }
        }
        (Some(other), _) => return Err(format!("{}: age label {other:?} does not fit the dataset", sample.id)),
    }
    if sample.truth_gender.is_some() && tax.gender.is_none() {
        return Err(format!("{}: dataset has no gender labels", sample.id));
    }
    if let Some(r) = sample.truth_race {
        if tax.race.as_ref().is_none_or(|t| r >= t.len()) {
            return Err(format!("{}: race index {r} out of range", sample.id));
        }
    }
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn parse_utkface_name(name: &str) -> Result<(u32, GenderLabel, usize), String> {
    let parts: Vec<&str> = name.split('_').collect();
    if parts.len() < 4 {
        return Err("expected age_gender_race_timestamp".into());
    }
    let age: u32 = parts[0].parse().map_err(|_| format!("age `{}` is not an integer", parts[0]))?;
    let gender = match parts[1] {
        "0" => GenderLabel::Male,
        "1" => GenderLabel::Female,
        g => return Err(format!("gender code `{g}` is not 0 or 1")),
    };
    let race: usize = parts[2]
        .parse()
        .ok()
        .filter(|r| *r < 5)
        .ok_or_else(|| format!("race code `{}` is not 0..4", parts[2]))?;
    let AgeScheme::Continuous { min, max } = DatasetId::Utkface.age_scheme() else {
        unreachable!("utkface ages are continuous")
    };
    if age < min || age > max {
        return Err(format!("age {age} outside [{min}, {max}]"));
    }
    Ok((age, gender, race))
}

pub fn index_utkface(root_dir: &Path) -> Result<(DatasetIndex, SkipReport), DatasetError> {
    let mut names: Vec<String> = fs::read_dir(root_dir)
        .map_err(|e| io_err(root_dir, e))?
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();

    let mut skips = SkipReport::default();
    let mut samples = Vec::new();
    for name in names {
        if !is_image(Path::new(&name)) {
            skips.push(&name, "not an image file");
            continue;
        }
        match parse_utkface_name(&name) {
            Ok((age, gender, race)) => samples.push(Sample {
                id: name.clone(),
                image: name,
                dataset: DatasetId::Utkface,
                truth_age: Some(AgeLabel::Years(age)),
                truth_gender: Some(gender),
                truth_race: Some(race),
            }),
            Err(reason) => skips.push(&name, reason),
        }
    }
    if samples.is_empty() {
        return Err(DatasetError::EmptyDataset(DatasetId::Utkface));
    }
    Ok((DatasetIndex::new(DatasetId::Utkface, root_dir.to_path_buf(), samples)?, skips))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, DatasetError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file))
}

#[derive(Debug, Deserialize)]
struct FairfaceRow {
    file: String,
    age: String,
    gender: String,
    race: String,
}

fn fairface_label(value: &str) -> &str {
    FAIRFACE_RELEASE_LABELS
        .iter()
        .find(|(release, _)| *release == value)
        .map_or(value, |(_, display)| display)
}

pub fn index_fairface(labels_csv: &Path, image_dir: &Path) -> Result<(DatasetIndex, SkipReport), DatasetError> {
    let tax = DatasetId::Fairface.taxonomies();
    let (bins, genders, races) = (
        tax.age_bins.as_ref().expect("fairface bins"),
        tax.gender.as_ref().expect("fairface gender"),
        tax.race.as_ref().expect("fairface race"),
    );
    let header = csv_header(labels_csv)?;
    let mut reader = csv_reader(labels_csv)?;
    let mut skips = SkipReport::default();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| io_err(labels_csv, e))?;
        let row = record.position().map_or(0, |p| p.line());
        let parsed: FairfaceRow = match record.deserialize(Some(&header)) {
            Ok(r) => r,
            Err(e) => {
                skips.push(format!("row {row}"), e.to_string());
                continue;
            }
        };
        if [&parsed.file, &parsed.age, &parsed.gender, &parsed.race].iter().any(|c| c.is_empty()) {
            skips.push(format!("row {row}"), "blank cell");
            continue;
        }
        let lookup = |t: &crate::taxonomy::Taxonomy, column: &str, value: &str| {
            t.index_of(fairface_label(value)).ok_or_else(|| DatasetError::UnknownCategory {
                row,
                column: column.to_string(),
                value: value.to_string(),
            })
        };
        let age = lookup(bins, "age", &parsed.age)?;
        let gender = lookup(genders, "gender", &parsed.gender)?;
        let race = lookup(races, "race", &parsed.race)?;
        if !image_dir.join(&parsed.file).is_file() {
            return Err(DatasetError::MissingImage { row, file: parsed.file });
        }
        samples.push(Sample {
            id: parsed.file.clone(),
            image: parsed.file,
            dataset: DatasetId::Fairface,
            truth_age: Some(AgeLabel::Bin(age)),
            truth_gender: GenderLabel::from_index(gender),
            truth_race: Some(race),
        });
    }
    if samples.is_empty() {
        return Err(DatasetError::EmptyDataset(DatasetId::Fairface));
    }
    Ok((DatasetIndex::new(DatasetId::Fairface, image_dir.to_path_buf(), samples)?, skips))
}

fn csv_header(path: &Path) -> Result<csv::StringRecord, DatasetError> {
    let mut reader = csv_reader(path)?;
    reader.headers().cloned().map_err(|e| io_err(path, e))
}

#[derive(Debug, Deserialize)]
struct CacdRow {
    file: String,
    age: String,
}

pub fn index_cacd(metadata: &Path, image_dir: &Path) -> Result<(DatasetIndex, SkipReport), DatasetError> {
    let AgeScheme::Continuous { min, max } = DatasetId::Cacd.age_scheme() else {
        unreachable!("cacd ages are continuous")
    };
    let header = csv_header(metadata)?;
    let mut reader = csv_reader(metadata)?;
    let mut skips = SkipReport::default();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| io_err(metadata, e))?;
        let row = record.position().map_or(0, |p| p.line());
        let parsed: CacdRow = match record.deserialize(Some(&header)) {
            Ok(r) => r,
            Err(e) => {
                skips.push(format!("row {row}"), e.to_string());
                continue;
            }
        };
        let Ok(age) = parsed.age.parse::<u32>() else {
            skips.push(format!("row {row}"), format!("age `{}` is not an integer", parsed.age));
            continue;
        };
        if age < min || age > max {
            skips.push(format!("row {row} ({})", parsed.file), format!("age {age} outside [{min}, {max}]"));
            continue;
        }
        if !image_dir.join(&parsed.file).is_file() {
            return Err(DatasetError::MissingImage { row, file: parsed.file });
        }
        samples.push(Sample {
            id: parsed.file.clone(),
            image: parsed.file,
            dataset: DatasetId::Cacd,
            truth_age: Some(AgeLabel::Years(age)),
            truth_gender: None,
            truth_race: None,
        });
    }
    if samples.is_empty() {
        return Err(DatasetError::EmptyDataset(DatasetId::Cacd));
    }
    Ok((DatasetIndex::new(DatasetId::Cacd, image_dir.to_path_buf(), samples)?, skips))
}

/// Dispatches to the adapter for `dataset`. FairFace and CACD need a label
/// file; UTKFace reads labels from file names.
pub fn index_dataset(dataset: DatasetId, root: &Path, labels: Option<&Path>) -> Result<(DatasetIndex, SkipReport), DatasetError> {
    let need_labels = || {
        labels.ok_or_else(|| DatasetError::Io {
            path: root.display().to_string(),
            message: format!("{dataset} needs a label CSV"),
        })
    };
    match dataset {
        DatasetId::Utkface => index_utkface(root),
        DatasetId::Fairface => index_fairface(need_labels()?, root),
        DatasetId::Cacd => index_cacd(need_labels()?, root),
    }
}

/// Deterministic subset: samples (sorted by id) shuffled with a seeded
/// ChaCha8 stream, then the first `n` taken.
pub fn select_eval_set(index: &DatasetIndex, n: usize, seed: u64) -> Result<Vec<Sample>, DatasetError> {
    if n > index.len() {
        return Err(DatasetError::TooLarge {
            requested: n,
            available: index.len(),
        });
    }
    let mut samples = index.samples.clone();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    samples.truncate(n);
    Ok(samples)
}

/// Per-attribute label counts, keyed by display label.
pub fn label_histograms(index: &DatasetIndex) -> BTreeMap<AttributeKind, BTreeMap<String, usize>> {
    let mut out: BTreeMap<AttributeKind, BTreeMap<String, usize>> = BTreeMap::new();
    for s in &index.samples {
        for &kind in index.dataset.attributes() {
            if let Some(v) = s.truth(kind) {
                *out.entry(kind).or_default().entry(v.display(index.dataset)).or_default() += 1;
            }
        }
    }
    out
}

/// Ids in `samples` that are not unique.
pub fn duplicate_ids(samples: &[Sample]) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    samples
        .iter()
        .filter(|s| !seen.insert(s.id.clone()))
        .map(|s| s.id.clone())
        .collect()
}
