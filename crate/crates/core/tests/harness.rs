mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use common::{utk_fixtures, utk_samples, write_fairface_dir, write_utkface_dir};
use demoscope::client::ScriptedMock;
use demoscope::harness::{
    report, run, run_with_client, HarnessError, ReportFormat, RunConfig, RunManifest, MANIFEST_FILE, PREDICTIONS_FILE,
    TRANSCRIPTS_FILE,
};

struct Setup {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    fixtures: PathBuf,
}

fn setup() -> Setup {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("utk");
    write_utkface_dir(&root, 10);
    let fixtures = tmp.path().join("fixtures.json");
    fs::write(&fixtures, utk_fixtures(&utk_samples(&root)).to_json()).unwrap();
    Setup {
        root,
        fixtures,
        _tmp: tmp,
    }
}

fn write_config(dir: &Path, name: &str, mode: &str, root: &Path, extra: &str) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    fs::write(
        &path,
        format!(
            "run_name = \"{name}\"\nout_dir = \"runs/{name}\"\nmode = \"{mode}\"\n{extra}\n\n[dataset]\nid = \"utkface\"\nroot = \"{}\"\n",
            root.display()
        ),
    )
    .unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[tokio::test]
async fn mock_runs_are_byte_identical() {
    let s = setup();
    let base = s.root.parent().unwrap();
    let a = RunConfig::load(&write_config(base, "a", "cot", &s.root, "")).unwrap();
    let b = RunConfig::load(&write_config(base, "b", "cot", &s.root, "")).unwrap();
    let ra = run(&a, Some(&s.fixtures)).await.unwrap();
    let rb = run(&b, Some(&s.fixtures)).await.unwrap();

    let rows = fs::read_to_string(&ra.predictions).unwrap();
    assert_eq!(rows.lines().count(), 31);
    assert_eq!(read(&ra.predictions), read(&rb.predictions));
    assert_eq!(read(&ra.transcripts), read(&rb.transcripts));
    assert!(ra.manifest.transcript_violations.is_empty(), "{:?}", ra.manifest.transcript_violations);
    assert_eq!(ra.manifest.retries, 5);
    assert!(ra.manifest.fixture_digest.is_some());

    let off = &ra.metrics.off_target;
    assert_eq!(off.total, 30);
    assert_eq!(off.first_attempt_rate, Some(4.0 / 30.0));
    assert_eq!(off.post_retry_rate, Some(2.0 / 30.0));
    assert_eq!(off.counts.embedding_fallback, 1);
    assert_eq!(off.counts.imputed, 1);
}

#[tokio::test]
async fn transcripts_join_every_prediction() {
    let s = setup();
    let base = s.root.parent().unwrap();
    let cfg = RunConfig::load(&write_config(base, "j", "cot", &s.root, "")).unwrap();
    let out = run(&cfg, Some(&s.fixtures)).await.unwrap();
    let transcripts = fs::read_to_string(&out.transcripts).unwrap();
    let lines: Vec<serde_json::Value> = transcripts.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut reader = csv::Reader::from_path(&out.predictions).unwrap();
    for row in reader.records() {
        let row = row.unwrap();
        let n = lines
            .iter()
            .filter(|l| l["sample_id"] == row[0] && l["step"] == row[1])
            .count();
        assert!(n >= 1, "no transcript step for {row:?}");
        assert_eq!(n.to_string(), row[5].to_string(), "attempts mismatch for {row:?}");
    }
}

#[tokio::test]
async fn resume_skips_completed_samples() {
    let s = setup();
    let base = s.root.parent().unwrap();
    let cfg = RunConfig::load(&write_config(base, "r", "naive", &s.root, "")).unwrap();
    let full = run(&cfg, Some(&s.fixtures)).await.unwrap();
    let want_pred = read(&full.predictions);
    let want_tr = read(&full.transcripts);

    // Keep the first 4 samples, leave a truncated line behind, and mark the
    // run unfinished.
    let pred = String::from_utf8(want_pred.clone()).unwrap();
    let kept: Vec<&str> = pred.lines().take(1 + 4 * 3).collect();
    fs::write(&full.predictions, format!("{}\n{}", kept.join("\n"), "zz_partial,age,")).unwrap();
    let tr = String::from_utf8(want_tr.clone()).unwrap();
    let ids: Vec<String> = utk_samples(&s.root).iter().take(4).map(|s| s.id.clone()).collect();
    let kept_tr: Vec<&str> = tr
        .lines()
        .filter(|l| ids.iter().any(|id| l.contains(&format!("\"sample_id\":\"{id}\""))))
        .collect();
    fs::write(&full.transcripts, format!("{}\n{{\"sample_id\":", kept_tr.join("\n"))).unwrap();

    let mock = ScriptedMock::from_file(&s.fixtures).unwrap();
    let resumed = run_with_client(&cfg, &mock, Some(mock.digest())).await.unwrap();
    assert_eq!(resumed.manifest.resumed_samples, 4);
    // Samples 0-3 carry all the retries; the other six answer each attribute once.
    assert_eq!(mock.chat_calls(), 6 * 3);
    assert_eq!(read(&resumed.predictions), want_pred);
    assert_eq!(read(&resumed.transcripts), want_tr);
}

#[tokio::test]
async fn changed_config_refuses_to_resume() {
    let s = setup();
    let base = s.root.parent().unwrap();
    let cfg = RunConfig::load(&write_config(base, "c", "naive", &s.root, "")).unwrap();
    run(&cfg, Some(&s.fixtures)).await.unwrap();
    let mut other = cfg.clone();
    other.retries = 3;
    let err = run(&other, Some(&s.fixtures)).await.unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[tokio::test]
async fn health_guard_aborts_dead_endpoint() {
    let s = setup();
    let base = s.root.parent().unwrap();
    let empty = base.join("empty.json");
    fs::write(&empty, "{}").unwrap();
    let cfg = RunConfig::load(&write_config(base, "h", "cot", &s.root, "concurrency = 1")).unwrap();
    let err = run(&cfg, Some(&empty)).await.unwrap_err();
    match &err {
        HarnessError::HealthGuard { unresolvable, total, cause } => {
            assert_eq!((*unresolvable, *total), (6, 10));
            assert!(cause.contains("no fixture"), "{cause}");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(err.exit_code(), 1);
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(cfg.out_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.status, "aborted");
}

#[tokio::test]
async fn unreachable_endpoint_trips_guard_not_dataset_error() {
    let s = setup();
    let base = s.root.parent().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let extra = format!(
        "eval_count = 2\n[endpoint]\nbase_url = \"http://{addr}/v1\"\ntransport_retries = 0\ntimeout_secs = 2"
    );
    // [endpoint] must come after the top-level keys but before [dataset].
    let path = base.join("u.toml");
    fs::write(
        &path,
        format!(
            "run_name = \"u\"\nout_dir = \"runs/u\"\n{extra}\n\n[dataset]\nid = \"utkface\"\nroot = \"{}\"\n",
            s.root.display()
        ),
    )
    .unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    let err = run(&cfg, None).await.unwrap_err();
    let HarnessError::HealthGuard { cause, .. } = &err else {
        panic!("unexpected {err}")
    };
    assert!(cause.contains("transport"), "{cause}");
}

#[tokio::test]
async fn report_table_order_and_schema_guard() {
    let s = setup();
    let base = s.root.parent().unwrap();
    let naive = RunConfig::load(&write_config(base, "naive", "naive", &s.root, "")).unwrap();
    let cot = RunConfig::load(&write_config(base, "cot", "cot", &s.root, "")).unwrap();
    run(&naive, Some(&s.fixtures)).await.unwrap();
    run(&cot, Some(&s.fixtures)).await.unwrap();
    let dirs = vec![naive.out_dir.clone(), cot.out_dir.clone()];

    let md = report(&dirs, false, ReportFormat::Markdown).unwrap();
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines.len(), 4);
    let header: Vec<&str> = lines[0].trim_matches('|').split('|').map(str::trim).collect();
    assert_eq!(
        header,
        vec![
            "Run",
            "Mode",
            "Dataset",
            "Age MSE",
            "Age RMSE",
            "Age MAE",
            "Age R²",
            "Age MAPE",
            "Gender Accuracy",
            "Gender Kappa",
            "Ethnicity Accuracy",
            "Ethnicity Kappa",
            "Off-target Rate",
            "First-attempt Off-target Rate"
        ]
    );
    assert!(lines[3].contains("| cot |") && lines[3].contains("6.7%") && lines[3].contains("13.3%"));
    assert_eq!(md, report(&dirs, false, ReportFormat::Markdown).unwrap());

    let single = report(&dirs[..1], false, ReportFormat::Csv).unwrap();
    assert_eq!(single.lines().count(), 2);

    let ff_root = base.join("ff");
    write_fairface_dir(&ff_root, 4);
    let ff_path = base.join("ff.toml");
    fs::write(
        &ff_path,
        "run_name = \"ff\"\nout_dir = \"runs/ff\"\nmode = \"naive\"\n\n[dataset]\nid = \"fairface\"\nroot = \"ff\"\nlabels = \"ff/fairface_label_val.csv\"\n",
    )
    .unwrap();
    let ff = RunConfig::load(&ff_path).unwrap();
    let mut mock = ScriptedMock::new();
    for i in 1..=4 {
        mock = mock
            .with_reply(format!("val/{i}.jpg/age/1"), "25")
            .with_reply(format!("val/{i}.jpg/gender/1"), "Female")
            .with_reply(format!("val/{i}.jpg/race/1"), "White");
    }
    run_with_client(&ff, &mock, None).await.unwrap();
    let mixed = vec![naive.out_dir.clone(), ff.out_dir.clone()];
    let err = report(&mixed, false, ReportFormat::Markdown).unwrap_err();
    assert!(matches!(err, HarnessError::SchemaMismatch(_)));
    let forced = report(&mixed, true, ReportFormat::Markdown).unwrap();
    assert!(forced.lines().next().unwrap().contains("Age Accuracy"));
}

fn demoscope() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demoscope"))
}

#[test]
fn cli_exit_codes() {
    let s = setup();
    let base = s.root.parent().unwrap();

    let bad = base.join("bad.toml");
    fs::write(&bad, "run_name = \"x\"\nretries = 0\n").unwrap();
    let out = demoscope().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let good = write_config(base, "cli", "cot", &s.root, "");
    let out = demoscope()
        .args(["run", "--config"])
        .arg(&good)
        .arg("--mock")
        .arg(&s.fixtures)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(base.join("runs/cli").join(PREDICTIONS_FILE).is_file());
    assert!(base.join("runs/cli").join(TRANSCRIPTS_FILE).is_file());

    let out = demoscope().arg("report").arg(base.join("runs/cli")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Off-target Rate"));

    let out = demoscope().arg("report").arg(base.join("nowhere")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = demoscope().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_validate_and_ingest() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = demoscope()
        .args(["validate", "--dataset", "utkface", "--root"])
        .arg(&empty)
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no usable samples"));

    let root = tmp.path().join("utk");
    write_utkface_dir(&root, 5);
    fs::write(root.join("9_2_0_x.jpg"), b"x").unwrap();
    let out = demoscope()
        .args(["validate", "--dataset", "utkface", "--root"])
        .arg(&root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("samples: 5") && text.contains("skipped: 1"), "{text}");
    assert!(text.contains("race:") && text.contains("Others: 1"), "{text}");

    let ff = tmp.path().join("ff");
    write_fairface_dir(&ff, 3);
    let index = tmp.path().join("ff_index.json");
    let out = demoscope()
        .args(["ingest", "--dataset", "fairface", "--root"])
        .arg(&ff)
        .arg("--out")
        .arg(&index)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = demoscope::datasets::DatasetIndex::load(&index).unwrap();
    assert_eq!(loaded.len(), 3);
}
