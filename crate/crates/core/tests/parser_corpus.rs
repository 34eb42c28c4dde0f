mod common;

use std::collections::BTreeSet;

use common::{corpus_verdict, load_corpus};
use demoscope::taxonomy::{AttributeKind, DatasetId};

#[test]
fn corpus_agrees_fully() {
    let cases = load_corpus();
    assert!(cases.len() >= 60, "corpus has {} cases", cases.len());
    let failures: Vec<String> = cases
        .iter()
        .filter_map(|c| {
            let got = corpus_verdict(c);
            (got != c.expected).then(|| format!("line {}: {:?} -> {got}, expected {}", c.line, c.response, c.expected))
        })
        .collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn corpus_covers_every_reason_and_taxonomy() {
    let cases = load_corpus();
    let reasons: BTreeSet<&str> = cases
        .iter()
        .filter_map(|c| c.expected.strip_prefix("off_target:"))
        .collect();
    assert_eq!(reasons, BTreeSet::from(["ambiguous", "empty", "no_match", "refusal"]));
    for dataset in DatasetId::ALL {
        for &kind in dataset.attributes() {
            assert!(
                cases.iter().any(|c| c.dataset == dataset && c.kind == kind && !c.expected.starts_with("off_target")),
                "no on-target case for {dataset} {kind}"
            );
        }
    }
    assert!(cases.iter().any(|c| c.kind == AttributeKind::Age && c.dataset == DatasetId::Fairface));
}
