#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use demoscope::client::ScriptedMock;
use demoscope::datasets::DatasetIndex;
use demoscope::domain::Sample;
use demoscope::parsing::ParseOutcome;
use demoscope::remediation::Target;
use demoscope::taxonomy::{AgeScheme, AttributeKind, DatasetId};

/// Bytes that stand in for an image; only the mock ever sees them.
pub const FAKE_JPEG: &[u8] = &[0xff, 0xd8, 0xff, 0xe0, 0x00, 0x10];

/// Writes `n` well-formed UTKFace files and returns their names.
pub fn write_utkface_dir(dir: &Path, n: usize) -> Vec<String> {
    fs::create_dir_all(dir).unwrap();
    (0..n)
        .map(|i| {
            let name = format!("{}_{}_{}_20170116{:02}.jpg", 20 + 3 * i, i % 2, i % 5, i);
            fs::write(dir.join(&name), FAKE_JPEG).unwrap();
            name
        })
        .collect()
}

pub const FAIRFACE_AGES: [&str; 9] = ["0-2", "3-9", "10-19", "20-29", "30-39", "40-49", "50-59", "60-69", "more than 70"];
pub const FAIRFACE_RACES: [&str; 7] = [
    "White",
    "Black",
    "Indian",
    "East Asian",
    "Southeast Asian",
    "Middle Eastern",
    "Latino_Hispanic",
];

/// Writes `n` FairFace rows (release spelling) with images under `val/`.
/// Returns the label file path.
pub fn write_fairface_dir(dir: &Path, n: usize) -> PathBuf {
    fs::create_dir_all(dir.join("val")).unwrap();
    let mut csv = String::from("file,age,gender,race,service_test\n");
    for i in 0..n {
        let file = format!("val/{}.jpg", i + 1);
        fs::write(dir.join(&file), FAKE_JPEG).unwrap();
        let gender = if i % 2 == 0 { "Male" } else { "Female" };
        csv.push_str(&format!(
            "{file},{},{gender},{},True\n",
            FAIRFACE_AGES[i % 9],
            FAIRFACE_RACES[i % 7]
        ));
    }
    let labels = dir.join("fairface_label_val.csv");
    fs::write(&labels, csv).unwrap();
    labels
}

pub struct CorpusCase {
    pub line: usize,
    pub dataset: DatasetId,
    pub kind: AttributeKind,
    pub response: String,
    pub expected: String,
}

pub fn load_corpus() -> Vec<CorpusCase> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/parser_corpus.csv");
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .enumerate()
        .map(|(i, r)| {
            let r = r.unwrap();
            CorpusCase {
                line: i + 2,
                dataset: r[0].parse().unwrap(),
                kind: r[1].parse().unwrap(),
                response: r[2].to_string(),
                expected: r[3].to_string(),
            }
        })
        .collect()
}

/// Runs a corpus case through the attribute parser and renders the verdict
/// the way the corpus spells it.
pub fn corpus_verdict(case: &CorpusCase) -> String {
    let tax = case.dataset.taxonomies();
    let target = match (case.kind, case.dataset.age_scheme()) {
        (AttributeKind::Age, AgeScheme::Continuous { min, .. }) => Target::Years { midpoint: min },
        (AttributeKind::Age, AgeScheme::Binned) => Target::Bin(tax.age_bins.as_ref().unwrap()),
        (kind, _) => Target::Category(tax.for_kind(kind).unwrap()),
    };
    match target.parse(&case.response) {
        ParseOutcome::Value(v) => target.display(v),
        ParseOutcome::OffTarget(reason) => format!("off_target:{reason}"),
    }
}

/// Fixture design over the first four samples (sorted by id) of a 10-sample
/// UTKFace cot run:
///
/// * sample 0: first age reply refuses, second parses.
/// * sample 1: all five age replies are off-target, so age is imputed.
/// * sample 2: all five gender replies are off-target, so the embedding
///   fallback picks the gender.
/// * sample 3: first race reply is off-target, second parses.
///
/// Every other reply parses on the first attempt. Of 30 predictions, 4 are
/// off-target on the first attempt and 2 remain off-target after retries.
pub fn utk_fixtures(samples: &[Sample]) -> ScriptedMock {
    let mut mock = ScriptedMock::new()
        .with_embedding("unclear", vec![0.2, 0.9])
        .with_embedding("Male", vec![1.0, 0.0])
        .with_embedding("Female", vec![0.0, 1.0]);
    let races = ["White", "Black", "Asian", "Indian", "Others"];
    for (i, s) in samples.iter().enumerate() {
        let id = &s.id;
        mock = mock
            .with_reply(format!("{id}/ffc/1"), "Short grey hair, faint crow's feet, no facial hair.")
            .with_reply(format!("{id}/name/1"), "Smith John");
        let gender = if s.truth_gender.unwrap().index() == 0 { "male" } else { "female" };
        let race = races[s.truth_race.unwrap()];
        match i {
            0 => {
                mock = mock
                    .with_reply(format!("{id}/age/1"), "Sorry, I cannot estimate that.")
                    .with_reply(format!("{id}/age/2"), "30");
            }
            1 => {
                for a in 1..=5 {
                    mock = mock.with_reply(format!("{id}/age/{a}"), "quite old");
                }
            }
            _ => mock = mock.with_reply(format!("{id}/age/1"), "25"),
        }
        if i == 2 {
            for a in 1..=5 {
                mock = mock.with_reply(format!("{id}/gender/{a}"), "unclear");
            }
        } else {
            mock = mock.with_reply(format!("{id}/gender/1"), gender);
        }
        if i == 3 {
            mock = mock
                .with_reply(format!("{id}/race/1"), "mixed")
                .with_reply(format!("{id}/race/2"), race);
        } else {
            mock = mock.with_reply(format!("{id}/race/1"), race);
        }
    }
    mock
}

pub fn utk_samples(dir: &Path) -> Vec<Sample> {
    demoscope::datasets::index_utkface(dir).unwrap().0.samples
}

pub fn save_index(index: &DatasetIndex, path: &Path) {
    index.save(path).unwrap();
}

/// Direct-formula reference implementations, written independently of the
/// library's metrics module.
pub mod oracle {
    pub fn mse(p: &[f64], t: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - t[i]) * (p[i] - t[i]);
        }
        s / p.len() as f64
    }

    pub fn mae(p: &[f64], t: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - t[i]).abs();
        }
        s / p.len() as f64
    }

    pub fn r2(p: &[f64], t: &[f64]) -> Option<f64> {
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for i in 0..p.len() {
            ss_res += (t[i] - p[i]).powi(2);
            ss_tot += (t[i] - mean).powi(2);
        }
        if ss_tot == 0.0 {
            None
        } else {
            Some(1.0 - ss_res / ss_tot)
        }
    }

    /// Zero truths excluded.
    pub fn mape(p: &[f64], t: &[f64]) -> Option<f64> {
        let mut s = 0.0;
        let mut n = 0;
        for i in 0..p.len() {
            if t[i] != 0.0 {
                s += ((t[i] - p[i]) / t[i]).abs();
                n += 1;
            }
        }
        (n > 0).then(|| 100.0 * s / n as f64)
    }

    pub fn accuracy(p: &[usize], t: &[usize]) -> f64 {
        p.iter().zip(t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
    }

    pub fn kappa(p: &[usize], t: &[usize], k: usize) -> Option<f64> {
        let n = p.len() as f64;
        let p_o = accuracy(p, t);
        let mut p_e = 0.0;
        for c in 0..k {
            let in_p = p.iter().filter(|&&x| x == c).count() as f64;
            let in_t = t.iter().filter(|&&x| x == c).count() as f64;
            p_e += (in_p / n) * (in_t / n);
        }
        if p_e == 1.0 {
            if p_o == 1.0 {
                Some(1.0)
            } else {
                None
            }
        } else {
            Some((p_o - p_e) / (1.0 - p_e))
        }
    }

    pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nu * nv)
    }
}
