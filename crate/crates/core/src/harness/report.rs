use std::collections::BTreeSet;
use std::path::PathBuf;

use super::run::{RunMetrics, Scores, METRICS_FILE};
use super::HarnessError;
use crate::taxonomy::AttributeKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}` (md or csv)")),
        }
    }
}

#[derive(Clone, Copy)]
enum Style {
    Fixed(usize),
    /// A fraction shown as a percentage.
    Percent(usize),
    /// A value already in percent.
    PercentValue(usize),
}

type Getter = Box<dyn Fn(&RunMetrics) -> Option<f64>>;

struct Column {
    header: &'static str,
    style: Style,
    value: Getter,
}

fn regression(m: &RunMetrics) -> Option<&crate::metrics::RegressionScores> {
    match m.age.as_ref()?.scores.as_ref()? {
        Scores::Regression(r) => Some(r),
        Scores::Classification(_) => None,
    }
}

fn classification(m: &RunMetrics, kind: AttributeKind) -> Option<&crate::metrics::ClassificationScores> {
    match m.attribute(kind)?.scores.as_ref()? {
        Scores::Classification(c) => Some(c),
        Scores::Regression(_) => None,
    }
}

/// Columns in table order: age block, gender block, ethnicity block,
/// off-target rates. Blocks no run has data for are left out.
fn columns(runs: &[RunMetrics]) -> Vec<Column> {
    let any_regression = runs.iter().any(|m| regression(m).is_some());
    let any_binned = runs.iter().any(|m| classification(m, AttributeKind::Age).is_some());
    let any = |kind| runs.iter().any(|m| m.attribute(kind).is_some());
    let mut cols: Vec<Column> = Vec::new();
    let mut push = |header, style, value: Getter| cols.push(Column { header, style, value });

    if any_regression {
        push("Age MSE", Style::Fixed(2), Box::new(|m| regression(m).map(|r| r.mse)));
        push("Age RMSE", Style::Fixed(2), Box::new(|m| regression(m).map(|r| r.rmse)));
        push("Age MAE", Style::Fixed(2), Box::new(|m| regression(m).map(|r| r.mae)));
        push("Age R²", Style::Fixed(4), Box::new(|m| regression(m).and_then(|r| r.r2)));
        push("Age MAPE", Style::PercentValue(2), Box::new(|m| regression(m).and_then(|r| r.mape_percent)));
    }
    for (kind, label_acc, label_kappa, present) in [
        (AttributeKind::Age, "Age Accuracy", "Age Kappa", any_binned),
        (AttributeKind::Gender, "Gender Accuracy", "Gender Kappa", any(AttributeKind::Gender)),
        (AttributeKind::Race, "Ethnicity Accuracy", "Ethnicity Kappa", any(AttributeKind::Race)),
    ] {
        if present {
            push(label_acc, Style::Fixed(4), Box::new(move |m| classification(m, kind).map(|c| c.accuracy)));
            push(label_kappa, Style::Fixed(4), Box::new(move |m| classification(m, kind).and_then(|c| c.kappa)));
        }
    }
    push("Off-target Rate", Style::Percent(1), Box::new(|m| m.off_target.post_retry_rate));
    push(
        "First-attempt Off-target Rate",
        Style::Percent(1),
        Box::new(|m| m.off_target.first_attempt_rate),
    );
    cols
}

fn cell(value: Option<f64>, style: Style) -> String {
    match (value, style) {
        (None, _) => "-".into(),
        (Some(v), Style::Fixed(d)) => format!("{v:.d$}"),
        (Some(v), Style::Percent(d)) => format!("{:.d$}%", v * 100.0),
        (Some(v), Style::PercentValue(d)) => format!("{v:.d$}%"),
    }
}

/// A markdown table with one row per run.
pub fn render_markdown(runs: &[RunMetrics]) -> String {
    let cols = columns(runs);
    let mut out = String::new();
    let mut header = vec!["Run", "Mode", "Dataset"];
    header.extend(cols.iter().map(|c| c.header));
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", header.iter().map(|_| "---|").collect::<String>()));
    for m in runs {
        let mut row = vec![m.run_name.clone(), m.mode.to_string(), m.dataset.to_string()];
        row.extend(cols.iter().map(|c| cell((c.value)(m), c.style)));
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

/// The same table as CSV, with unrounded values and rates as fractions.
pub fn render_csv(runs: &[RunMetrics]) -> String {
    let cols = columns(runs);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["Run", "Mode", "Dataset"];
    header.extend(cols.iter().map(|c| c.header));
    w.write_record(&header).expect("in-memory write");
    for m in runs {
        let mut row = vec![m.run_name.clone(), m.mode.to_string(), m.dataset.to_string()];
        row.extend(cols.iter().map(|c| (c.value)(m).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

/// Loads each run's metrics and renders a comparison table. Runs over
/// different datasets are refused unless `force` is set.
pub fn report(dirs: &[PathBuf], force: bool, format: ReportFormat) -> Result<String, HarnessError> {
    let mut runs = Vec::new();
    for dir in dirs {
        let path = dir.join(METRICS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::BadArtifacts {
            dir: dir.clone(),
            message: format!("{METRICS_FILE}: {e}"),
        })?;
        let metrics: RunMetrics = serde_json::from_str(&text).map_err(|e| HarnessError::BadArtifacts {
            dir: dir.clone(),
            message: format!("{METRICS_FILE}: {e}"),
        })?;
        runs.push(metrics);
    }
    let datasets: BTreeSet<_> = runs.iter().map(|m| m.dataset.as_str()).collect();
    if datasets.len() > 1 && !force {
        return Err(HarnessError::SchemaMismatch(
            datasets.into_iter().collect::<Vec<_>>().join(", "),
        ));
    }
    Ok(match format {
        ReportFormat::Markdown => render_markdown(&runs),
        ReportFormat::Csv => render_csv(&runs),
    })
}
