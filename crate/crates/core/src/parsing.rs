//! Maps raw model text onto taxonomy values.
//!
//! A reply is *on-target* when one of these parsers returns `Value`. Anything
//! else is an `OffTarget` verdict carrying the reason, and the remediation
//! layer decides whether to ask again or fall back.
//!
//! Category matching is whole-word and case-insensitive over the taxonomy's
//! display strings and alias table. A match nested inside a longer match
//! (`asian` inside `east asian`) is ignored. Weak aliases (pronouns) only
//! decide the outcome when no explicit word matched.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{bin_of, round_half_away, Taxonomy, MAX_AGE_YEARS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffTargetReason {
    NoMatch,
    Ambiguous,
    Empty,
    Refusal,
}

impl OffTargetReason {
    pub fn as_str(self) -> &'static str {
        match self {
            OffTargetReason::NoMatch => "no_match",
            OffTargetReason::Ambiguous => "ambiguous",
            OffTargetReason::Empty => "empty",
            OffTargetReason::Refusal => "refusal",
        }
    }
}

impl fmt::Display for OffTargetReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseOutcome<T> {
    Value(T),
    OffTarget(OffTargetReason),
}

impl<T> ParseOutcome<T> {
    pub fn value(self) -> Option<T> {
        match self {
            ParseOutcome::Value(v) => Some(v),
            ParseOutcome::OffTarget(_) => None,
        }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> ParseOutcome<U> {
        match self {
            ParseOutcome::Value(v) => ParseOutcome::Value(f(v)),
            ParseOutcome::OffTarget(r) => ParseOutcome::OffTarget(r),
        }
    }
}

const REFUSAL_PHRASES: &[&str] = &[
    "sorry",
    "cannot",
    "can't",
    "can not",
    "unable to",
    "not able to",
    "not possible",
    "impossible to",
    "i don't",
    "i do not",
    "won't",
    "refuse",
    "not appropriate",
    "as an ai",
];

/// True when the text reads like a refusal or an admission of inability.
pub fn is_refusal(text: &str) -> bool {
    let lower = text.to_lowercase().replace('\u{2019}', "'");
    REFUSAL_PHRASES.iter().any(|p| lower.contains(p))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte spans where `pattern` occurs in `haystack` on word boundaries. A
/// pattern edge that is itself punctuation (`70+`) needs no boundary there.
fn find_word(haystack: &str, pattern: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    if pattern.is_empty() {
        return spans;
    }
    let first = pattern.chars().next().map(is_word_char).unwrap_or(false);
    let last = pattern.chars().next_back().map(is_word_char).unwrap_or(false);
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(pattern) {
        let start = from + pos;
        let end = start + pattern.len();
        let before_ok = !first || haystack[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = !last || haystack[end..].chars().next().is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok {
            spans.push((start, end));
        }
        from = start + haystack[start..].chars().next().map_or(1, char::len_utf8);
    }
    spans
}

/// Trims whitespace, wrapping quotes and trailing sentence punctuation.
fn strip_answer(text: &str) -> String {
    text.trim()
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '*' | '.' | '!' | ',' | ';' | ':'))
        .to_lowercase()
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    start: usize,
    end: usize,
    index: usize,
    weak: bool,
}

fn category_hits(lower: &str, taxonomy: &Taxonomy) -> Vec<Hit> {
    let mut hits = Vec::new();
    for (index, display) in taxonomy.categories().iter().enumerate() {
        for (start, end) in find_word(lower, &display.to_lowercase()) {
            hits.push(Hit { start, end, index, weak: false });
        }
    }
    for (alias, syn) in taxonomy.synonyms() {
        for (start, end) in find_word(lower, alias) {
            hits.push(Hit {
                start,
                end,
                index: syn.index,
                weak: syn.weak,
            });
        }
    }
    // Drop hits strictly nested inside a longer hit.
    let all = hits.clone();
    hits.retain(|h| {
        !all.iter()
            .any(|o| o.start <= h.start && o.end >= h.end && (o.end - o.start) > (h.end - h.start))
    });
    hits
}

fn distinct(indices: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = indices.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Parses a categorical answer against `taxonomy`.
pub fn parse_category(text: &str, taxonomy: &Taxonomy) -> ParseOutcome<usize> {
    if text.trim().is_empty() {
        return ParseOutcome::OffTarget(OffTargetReason::Empty);
    }
    let whole = strip_answer(text);
    if let Some(index) = taxonomy.lookup(&whole) {
        return ParseOutcome::Value(index);
    }

    let lower = text.to_lowercase();
    let hits = category_hits(&lower, taxonomy);
    let strong = distinct(hits.iter().filter(|h| !h.weak).map(|h| h.index));
    let chosen = if strong.is_empty() {
        distinct(hits.iter().filter(|h| h.weak).map(|h| h.index))
    } else {
        strong
    };
    match chosen.as_slice() {
        [single] => ParseOutcome::Value(*single),
        [] if is_refusal(text) => ParseOutcome::OffTarget(OffTargetReason::Refusal),
        [] => ParseOutcome::OffTarget(OffTargetReason::NoMatch),
        _ => ParseOutcome::OffTarget(OffTargetReason::Ambiguous),
    }
}

fn age_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?x)
            (?:\bbetween\s+(?P<b_lo>\d+(?:\.\d+)?)\s+and\s+(?P<b_hi>\d+(?:\.\d+)?))
            | (?:(?P<lo>\d+(?:\.\d+)?)\s*(?:-|\u{2013}|\u{2014}|\bto\b)\s*(?P<hi>\d+(?:\.\d+)?))
            | (?:(?P<decade>\d0)'?s\b)
            | (?P<num>\d+(?:\.\d+)?)
            ",
        )
        .expect("static regex")
    })
}

fn in_age_range(v: f64) -> bool {
    v.is_finite() && (0.0..=f64::from(MAX_AGE_YEARS) + 0.5).contains(&v) && round_half_away(v) <= MAX_AGE_YEARS
}

/// Extracts an age in years from free text.
///
/// Scans left to right and takes the first usable numeric construct: a range
/// (`20-29`, `20 to 29`, `between 20 and 29`) yields its rounded midpoint, a
/// decade (`30s`) yields the decade midpoint, a plain number in `[0, 130]` is
/// rounded half away from zero. Numbers glued to letters (`x2`) are skipped.
pub fn parse_age_years(text: &str) -> ParseOutcome<u32> {
    if text.trim().is_empty() {
        return ParseOutcome::OffTarget(OffTargetReason::Empty);
    }
    let lower = text.to_lowercase();
    for caps in age_regex().captures_iter(&lower) {
        let m = caps.get(0).expect("whole match");
        let glued_before = lower[..m.start()].chars().next_back().is_some_and(|c| c.is_alphanumeric() || c == '.');
        if glued_before {
            continue;
        }
        let num = |name: &str| caps.name(name).and_then(|g| g.as_str().parse::<f64>().ok());
        let value = if let (Some(lo), Some(hi)) = (num("b_lo").or(num("lo")), num("b_hi").or(num("hi"))) {
            if !(in_age_range(lo) && in_age_range(hi)) || hi < lo {
                continue;
            }
            (lo + hi) / 2.0
        } else if let Some(decade) = num("decade") {
            decade + 5.0
        } else if let Some(n) = num("num") {
            let after = &lower[m.end()..];
            if after.starts_with(|c: char| c.is_alphabetic()) && !after.starts_with("yo") && !after.starts_with("y/o") {
                continue;
            }
            n
        } else {
            continue;
        };
        if in_age_range(value) {
            return ParseOutcome::Value(round_half_away(value));
        }
    }
    if is_refusal(text) {
        ParseOutcome::OffTarget(OffTargetReason::Refusal)
    } else {
        ParseOutcome::OffTarget(OffTargetReason::NoMatch)
    }
}

/// Parses a binned-age answer: an exact bin label first, otherwise a numeric
/// age mapped onto its bin.
pub fn parse_bin(text: &str, taxonomy: &Taxonomy) -> ParseOutcome<usize> {
    if text.trim().is_empty() {
        return ParseOutcome::OffTarget(OffTargetReason::Empty);
    }
    if taxonomy.bins().is_none() {
        return ParseOutcome::OffTarget(OffTargetReason::NoMatch);
    }
    let lower = text.to_lowercase();
    let exact = distinct(
        taxonomy
            .categories()
            .iter()
            .enumerate()
            .filter(|(_, label)| {
                find_word(&lower, &label.to_lowercase())
                    .iter()
                    .any(|&(s, e)| {
                        // `70+` must not be read out of `170+`, nor `0-2` out of `10-29`.
                        lower[..s].chars().next_back().is_none_or(|c| !c.is_ascii_digit() && c != '-')
                            && lower[e..].chars().next().is_none_or(|c| !c.is_ascii_digit())
                    })
            })
            .map(|(i, _)| i),
    );
    match exact.as_slice() {
        [single] => return ParseOutcome::Value(*single),
        [] => {}
        _ => return ParseOutcome::OffTarget(OffTargetReason::Ambiguous),
    }
    match parse_age_years(text) {
        ParseOutcome::Value(age) => match bin_of(age, taxonomy) {
            Ok(bin) => ParseOutcome::Value(bin),
            Err(_) => ParseOutcome::OffTarget(OffTargetReason::NoMatch),
        },
        ParseOutcome::OffTarget(r) => ParseOutcome::OffTarget(r),
    }
}

/// Verdict for free-text chain steps (facial description, name), which have
/// no category to parse: empty or refusing replies are off-target.
pub fn judge_free_text(text: &str) -> Option<OffTargetReason> {
    if text.trim().is_empty() {
        Some(OffTargetReason::Empty)
    } else if is_refusal(text) && text.split_whitespace().count() < 25 {
        Some(OffTargetReason::Refusal)
    } else {
        None
    }
}
