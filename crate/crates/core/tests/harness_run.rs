//! Full runs over the scripted fixtures with the in-process mock backend.

use std::fs;

use univrse::backends::http::BackendConfig;
use univrse::baselines::Method;
use univrse::harness::config::BackendsConfig;
use univrse::harness::fixture::{write_vqa_fixture, write_vrg_fixture, VQA_BEHAVIORS};
use univrse::harness::record::{latest_by_id, read_records};
use univrse::harness::run::RECORDS_FILE;
use univrse::harness::{calibrate, ingest_dataset, label_dataset, report, run, Backends, HarnessError, RunConfig, Task};

fn records_in(dir: &std::path::Path) -> Vec<univrse::harness::RunRecord> {
    latest_by_id(read_records(&dir.join(RECORDS_FILE)).unwrap())
}

#[tokio::test]
async fn vqa_fixture_separates_overconfident_records() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_vqa_fixture(tmp.path(), 11).unwrap();
    let backends = Backends::from_config(&fx.config).unwrap();
    let data = ingest_dataset(&fx.dataset).unwrap();
    let out = tmp.path().join("run");
    let summary = run(&data, &fx.config, &backends, "fixture", &out, Some(Task::Vqa)).await.unwrap();
    assert_eq!((summary.processed, summary.failed), (10, 0));

    let recs = records_in(&out);
    for (r, b) in recs.iter().zip(VQA_BEHAVIORS) {
        assert!(r.step_errors.is_empty(), "{}: {:?}", r.id, r.step_errors);
        assert_eq!(r.label.as_ref().unwrap().h, u64::from(b.hallucinated()));
        // CrossCheck needs an auxiliary model, which the fixture lacks.
        assert!(r.score(Method::CrossCheck).is_none());
    }
    let rows = report(&out, None).unwrap().rows;
    let auc = |m: Method| rows.iter().find(|r| r.method == m).unwrap().auc.clone().unwrap();
    assert_eq!(auc(Method::UniVrse), 1.0);
    assert_eq!(auc(Method::Se), 0.75);

    let cal = calibrate(&out, None).unwrap();
    assert_eq!(cal.calibration.youden_j, 1.0);
    assert!(out.join("calibration.json").exists());
}

#[tokio::test]
async fn interrupted_run_resumes_without_redoing_records() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_vqa_fixture(tmp.path(), 3).unwrap();
    let backends = Backends::from_config(&fx.config).unwrap();
    let data = ingest_dataset(&fx.dataset).unwrap();
    let out = tmp.path().join("run");

    let first = run(&data[..4], &fx.config, &backends, "fixture", &out, None).await.unwrap();
    assert_eq!(first.processed, 4);
    // A torn trailing line, as left by a crash mid-write.
    let path = out.join(RECORDS_FILE);
    let mut body = fs::read_to_string(&path).unwrap();
    body.push_str("{\"id\":\"q0");
    fs::write(&path, body).unwrap();

    let second = run(&data, &fx.config, &backends, "fixture", &out, None).await.unwrap();
    assert_eq!((second.processed, second.skipped), (6, 4));
    assert_eq!(records_in(&out).len(), 10);
}

#[tokio::test]
async fn changed_config_cannot_reuse_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_vqa_fixture(tmp.path(), 3).unwrap();
    let backends = Backends::from_config(&fx.config).unwrap();
    let data = ingest_dataset(&fx.dataset).unwrap();
    let out = tmp.path().join("run");
    run(&data[..1], &fx.config, &backends, "fixture", &out, None).await.unwrap();
    let other = RunConfig { lambda: 2.0, ..fx.config.clone() };
    let err = run(&data, &other, &backends, "fixture", &out, None).await.unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[tokio::test]
async fn report_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_vqa_fixture(tmp.path(), 5).unwrap();
    let backends = Backends::from_config(&fx.config).unwrap();
    let data = ingest_dataset(&fx.dataset).unwrap();
    let out = tmp.path().join("run");
    run(&data, &fx.config, &backends, "fixture", &out, None).await.unwrap();
    let a = report(&out, None).unwrap();
    let b = report(&out, None).unwrap();
    assert_eq!(a.csv, b.csv);
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap(), a.csv);
    assert!(a.summary.contains("UniVRSE"));
}

#[tokio::test]
async fn vrg_fixture_scores_claims() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_vrg_fixture(tmp.path(), 8).unwrap();
    let backends = Backends::from_config(&fx.config).unwrap();
    let data = ingest_dataset(&fx.dataset).unwrap();
    let out = tmp.path().join("run");
    let summary = run(&data, &fx.config, &backends, "reports", &out, Some(Task::Vrg)).await.unwrap();
    assert_eq!((summary.processed, summary.failed), (2, 0));

    let recs = records_in(&out);
    assert_eq!(recs[0].claims.len(), 2);
    assert_eq!(recs[1].claims.len(), 1);
    for r in &recs {
        assert!(r.step_errors.is_empty(), "{}: {:?}", r.id, r.step_errors);
    }
    let vse = |i: usize| recs[i].score(Method::UniVrse).unwrap().value;
    assert!(vse(0) < vse(1), "{} vs {}", vse(0), vse(1));
    assert_eq!(recs[0].label.as_ref().unwrap().alpha_h, 0.0);
    assert_eq!(recs[1].label.as_ref().unwrap().alpha_h, 1.0);
}

#[tokio::test]
async fn labeling_uses_the_scripted_judge() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_vqa_fixture(tmp.path(), 1).unwrap();
    let backends = Backends::from_config(&fx.config).unwrap();
    let data = ingest_dataset(&fx.dataset).unwrap();
    let labels = label_dataset(&data, 2, &backends).await;
    assert!(labels.failures.is_empty());
    let hallucinated = labels.entries.iter().filter(|e| e.h > 0).count();
    assert_eq!(hallucinated, 4);
}

#[tokio::test]
async fn unreachable_backend_is_a_bootstrap_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_vqa_fixture(tmp.path(), 1).unwrap();
    let dead = BackendConfig {
        max_retries: 0,
        timeout_secs: 2.0,
        ..BackendConfig::new("http://127.0.0.1:9/v1", "mock")
    };
    let cfg = RunConfig {
        backends: BackendsConfig {
            mock_script: None,
            vlm: Some(dead.clone()),
            nli: Some(dead.clone()),
            llm: Some(dead),
            auxiliary: vec![],
        },
        ..fx.config.clone()
    };
    let backends = Backends::from_config(&cfg).unwrap();
    let data = ingest_dataset(&fx.dataset).unwrap();
    let err = run(&data, &cfg, &backends, "fixture", &tmp.path().join("run"), None).await.unwrap_err();
    assert!(matches!(err, HarnessError::Bootstrap(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[tokio::test]
async fn task_filter_with_no_matches_is_an_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_vqa_fixture(tmp.path(), 1).unwrap();
    let backends = Backends::from_config(&fx.config).unwrap();
    let data = ingest_dataset(&fx.dataset).unwrap();
    let err = run(&data, &fx.config, &backends, "fixture", &tmp.path().join("run"), Some(Task::Vrg))
        .await
        .unwrap_err();
    assert_eq!(err.exit_code(), 4);
}
