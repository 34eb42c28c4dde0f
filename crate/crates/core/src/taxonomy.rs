//! Attribute vocabularies: the three demographic attributes, the per-dataset
//! category sets, and the binned age groups used by FairFace.
//!
//! Category order is significant everywhere. It fixes the index stored in
//! predictions, the order categories are listed in prompts, and the tie-break
//! order of the embedding fallback.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound accepted for any age in years.
pub const MAX_AGE_YEARS: u32 = 130;

const SYNONYMS_CSV: &str = include_str!("../data/synonyms.csv");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("taxonomy `{0}` has no categories")]
    Empty(String),
    #[error("taxonomy `{name}` lists category `{category}` twice")]
    DuplicateCategory { name: String, category: String },
    #[error("synonym `{alias}` points at index {index}, taxonomy `{name}` has {len} categories")]
    BadSynonym {
        name: String,
        alias: String,
        index: usize,
        len: usize,
    },
    #[error("taxonomy `{0}`: bins must be contiguous, sorted, start at 0 and match the category count")]
    BadBins(String),
    #[error("taxonomy `{0}` has no age bins")]
    NoBins(String),
    #[error("age {0} is outside [0, {MAX_AGE_YEARS}]")]
    AgeOutOfRange(u32),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Age,
    Gender,
    Race,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 3] = [AttributeKind::Age, AttributeKind::Gender, AttributeKind::Race];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeKind::Age => "age",
            AttributeKind::Gender => "gender",
            AttributeKind::Race => "race",
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeKind {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "age" => Ok(AttributeKind::Age),
            "gender" => Ok(AttributeKind::Gender),
            "race" | "ethnicity" => Ok(AttributeKind::Race),
            other => Err(TaxonomyError::UnknownAttribute(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GenderLabel {
    Male,
    Female,
}

impl GenderLabel {
    /// Position in the gender taxonomy.
    pub fn index(self) -> usize {
        match self {
            GenderLabel::Male => 0,
            GenderLabel::Female => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(GenderLabel::Male),
            1 => Some(GenderLabel::Female),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Utkface,
    Fairface,
    Cacd,
}

impl DatasetId {
    pub const ALL: [DatasetId; 3] = [DatasetId::Utkface, DatasetId::Fairface, DatasetId::Cacd];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Utkface => "utkface",
            DatasetId::Fairface => "fairface",
            DatasetId::Cacd => "cacd",
        }
    }

    /// Attributes the dataset carries ground truth for, in query order.
    pub fn attributes(self) -> &'static [AttributeKind] {
        match self {
            DatasetId::Utkface | DatasetId::Fairface => &AttributeKind::ALL,
            DatasetId::Cacd => &[AttributeKind::Age],
        }
    }

    pub fn age_scheme(self) -> AgeScheme {
        match self {
            DatasetId::Utkface => AgeScheme::Continuous { min: 0, max: 116 },
            DatasetId::Cacd => AgeScheme::Continuous { min: 14, max: 54 },
            DatasetId::Fairface => AgeScheme::Binned,
        }
    }

    pub fn taxonomies(self) -> &'static DatasetTaxonomies {
        &canonical_taxonomies()[&self]
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "utkface" => Ok(DatasetId::Utkface),
            "fairface" => Ok(DatasetId::Fairface),
            "cacd" => Ok(DatasetId::Cacd),
            other => Err(TaxonomyError::UnknownDataset(other.to_string())),
        }
    }
}

/// How a dataset labels age.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgeScheme {
    /// Integer years within the dataset's documented range (inclusive).
    Continuous { min: u32, max: u32 },
    /// Index into the dataset's age-bin taxonomy.
    Binned,
}

impl AgeScheme {
    /// Midpoint of the documented range, used when an age answer cannot be
    /// recovered. Rounded half away from zero.
    pub fn midpoint(self) -> Option<u32> {
        match self {
            AgeScheme::Continuous { min, max } => Some(round_half_away(f64::from(min + max) / 2.0)),
            AgeScheme::Binned => None,
        }
    }
}

/// Rounds half away from zero and clamps to the valid age range.
pub fn round_half_away(value: f64) -> u32 {
    let r = value.round();
    if r <= 0.0 {
        0
    } else if r >= f64::from(MAX_AGE_YEARS) {
        MAX_AGE_YEARS
    } else {
        r as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgeLabel {
    Years(u32),
    Bin(usize),
}

/// Inclusive age range for one bin; `upper = None` marks the open top bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBin {
    pub lower: u32,
    pub upper: Option<u32>,
}

impl AgeBin {
    pub fn contains(&self, age: u32) -> bool {
        age >= self.lower && self.upper.is_none_or(|u| age <= u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Synonym {
    pub index: usize,
    /// Weak aliases (pronouns) only decide when no explicit word matched.
    pub weak: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    name: String,
    categories: Vec<String>,
    synonyms: BTreeMap<String, Synonym>,
    bins: Option<Vec<AgeBin>>,
}

impl Taxonomy {
    pub fn new(name: impl Into<String>, categories: &[&str]) -> Result<Self, TaxonomyError> {
        let name = name.into();
        if categories.is_empty() {
            return Err(TaxonomyError::Empty(name));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in categories {
            if !seen.insert(c.to_lowercase()) {
                return Err(TaxonomyError::DuplicateCategory {
                    name,
                    category: c.to_string(),
                });
            }
        }
        Ok(Taxonomy {
            name,
            categories: categories.iter().map(|c| c.to_string()).collect(),
            synonyms: BTreeMap::new(),
            bins: None,
        })
    }

    pub fn with_bins(mut self, bins: Vec<AgeBin>) -> Result<Self, TaxonomyError> {
        let bad = || TaxonomyError::BadBins(self.name.clone());
        if bins.len() != self.categories.len() || bins.first().map(|b| b.lower) != Some(0) {
            return Err(bad());
        }
        for pair in bins.windows(2) {
            match pair[0].upper {
                Some(u) if u >= pair[0].lower && pair[1].lower == u + 1 => {}
                _ => return Err(bad()),
            }
        }
        if let Some(last) = bins.last() {
            if last.upper.is_some_and(|u| u < last.lower) {
                return Err(bad());
            }
        }
        self.bins = Some(bins);
        Ok(self)
    }

    pub fn add_synonym(&mut self, alias: &str, index: usize, weak: bool) -> Result<(), TaxonomyError> {
        if index >= self.categories.len() {
            return Err(TaxonomyError::BadSynonym {
                name: self.name.clone(),
                alias: alias.to_string(),
                index,
                len: self.categories.len(),
            });
        }
        self.synonyms
            .insert(alias.trim().to_lowercase(), Synonym { index, weak });
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn category(&self, index: usize) -> Option<&str> {
        self.categories.get(index).map(String::as_str)
    }

    pub fn synonyms(&self) -> &BTreeMap<String, Synonym> {
        &self.synonyms
    }

    pub fn bins(&self) -> Option<&[AgeBin]> {
        self.bins.as_deref()
    }

    /// Exact, case-sensitive match against display strings.
    pub fn index_of(&self, display: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == display)
    }

    /// Case-insensitive lookup over display strings, then aliases.
    pub fn lookup(&self, text: &str) -> Option<usize> {
        let key = text.trim().to_lowercase();
        self.categories
            .iter()
            .position(|c| c.to_lowercase() == key)
            .or_else(|| self.synonyms.get(&key).map(|s| s.index))
    }

    /// Display strings joined the way prompts list them.
    pub fn joined(&self) -> String {
        self.categories.join(", ")
    }
}

/// Maps an age in years onto the bin containing it.
pub fn bin_of(age_years: u32, taxonomy: &Taxonomy) -> Result<usize, TaxonomyError> {
    let bins = taxonomy
        .bins()
        .ok_or_else(|| TaxonomyError::NoBins(taxonomy.name().to_string()))?;
    if age_years > MAX_AGE_YEARS {
        return Err(TaxonomyError::AgeOutOfRange(age_years));
    }
    bins.iter()
        .position(|b| b.contains(age_years))
        .ok_or(TaxonomyError::AgeOutOfRange(age_years))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTaxonomies {
    pub race: Option<Taxonomy>,
    pub gender: Option<Taxonomy>,
    pub age_bins: Option<Taxonomy>,
}

impl DatasetTaxonomies {
    /// Categorical taxonomy for an attribute, if the attribute is categorical here.
    pub fn for_kind(&self, kind: AttributeKind) -> Option<&Taxonomy> {
        match kind {
            AttributeKind::Age => self.age_bins.as_ref(),
            AttributeKind::Gender => self.gender.as_ref(),
            AttributeKind::Race => self.race.as_ref(),
        }
    }
}

pub const UTKFACE_RACES: [&str; 5] = ["White", "Black", "Asian", "Indian", "Others"];
pub const FAIRFACE_RACES: [&str; 7] = [
    "White",
    "Black",
    "Indian",
    "East Asian",
    "Southeast Asian",
    "Middle Eastern",
    "Latino",
];
pub const GENDERS: [&str; 2] = ["Male", "Female"];
pub const FAIRFACE_AGE_BINS: [&str; 9] = [
    "0-2", "3-9", "10-19", "20-29", "30-39", "40-49", "50-59", "60-69", "70+",
];

fn fairface_bin_edges() -> Vec<AgeBin> {
    FAIRFACE_AGE_BINS
        .iter()
        .map(|label| match label.strip_suffix('+') {
            Some(lower) => AgeBin {
                lower: lower.parse().expect("static bin label"),
                upper: None,
            },
            None => {
                let (lo, hi) = label.split_once('-').expect("static bin label");
                AgeBin {
                    lower: lo.parse().expect("static bin label"),
                    upper: Some(hi.parse().expect("static bin label")),
                }
            }
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct SynonymRow {
    pattern: String,
    attribute: String,
    category: String,
    dataset: String,
    weak: u8,
}

fn apply_synonyms(map: &mut BTreeMap<DatasetId, DatasetTaxonomies>, csv_text: &str) -> Result<(), String> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    for row in reader.deserialize::<SynonymRow>() {
        let row = row.map_err(|e| e.to_string())?;
        let kind: AttributeKind = row.attribute.parse().map_err(|e: TaxonomyError| e.to_string())?;
        let targets: Vec<DatasetId> = if row.dataset == "*" {
            DatasetId::ALL.to_vec()
        } else {
            vec![row.dataset.parse().map_err(|e: TaxonomyError| e.to_string())?]
        };
        for id in targets {
            let entry = map.get_mut(&id).expect("all datasets present");
            let tax = match kind {
                AttributeKind::Gender => entry.gender.as_mut(),
                AttributeKind::Race => entry.race.as_mut(),
                AttributeKind::Age => entry.age_bins.as_mut(),
            };
            let Some(tax) = tax else { continue };
            let index = tax
                .index_of(&row.category)
                .ok_or_else(|| format!("synonym `{}` names unknown category `{}`", row.pattern, row.category))?;
            tax.add_synonym(&row.pattern, index, row.weak != 0)
                .map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn build_canonical() -> BTreeMap<DatasetId, DatasetTaxonomies> {
    let gender = || Taxonomy::new("gender", &GENDERS).expect("static taxonomy");
    let mut map = BTreeMap::new();
    map.insert(
        DatasetId::Utkface,
        DatasetTaxonomies {
            race: Some(Taxonomy::new("utkface.race", &UTKFACE_RACES).expect("static taxonomy")),
            gender: Some(gender()),
            age_bins: None,
        },
    );
    map.insert(
        DatasetId::Fairface,
        DatasetTaxonomies {
            race: Some(Taxonomy::new("fairface.race", &FAIRFACE_RACES).expect("static taxonomy")),
            gender: Some(gender()),
            age_bins: Some(
                Taxonomy::new("fairface.age", &FAIRFACE_AGE_BINS)
                    .and_then(|t| t.with_bins(fairface_bin_edges()))
                    .expect("static taxonomy"),
            ),
        },
    );
    map.insert(
        DatasetId::Cacd,
        DatasetTaxonomies {
            race: None,
            gender: None,
            age_bins: None,
        },
    );
    apply_synonyms(&mut map, SYNONYMS_CSV).expect("bundled synonym table is valid");
    map
}

/// Built-in taxonomies for every supported dataset.
pub fn canonical_taxonomies() -> &'static BTreeMap<DatasetId, DatasetTaxonomies> {
    static CANON: OnceLock<BTreeMap<DatasetId, DatasetTaxonomies>> = OnceLock::new();
    CANON.get_or_init(build_canonical)
}
