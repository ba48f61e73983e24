use std::collections::HashMap;
use std::path::Path;

use dst_lab::config::ExperimentConfig;
use dst_lab::lab::{self, RunDir, RunStatus};
use dst_lab::noise::NoiseKind;

fn noisy_config() -> ExperimentConfig {
    ExperimentConfig {
        classes: 3,
        per_class: 200,
        test_per_class: 100,
        hidden: vec![16],
        noise_kind: NoiseKind::SymC1,
        noise_ratio: 0.5,
        warmup_epochs: 5,
        total_epochs: 12,
        batch_size: 64,
        scatter_every: 4,
        ..ExperimentConfig::default()
    }
}

/// Branch-condition counts straight from a selection CSV.
fn count_selection(path: &Path) -> HashMap<String, (usize, usize, usize)> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let meets = |branch: &str, state: &str| match branch {
        "labeled" => state == "i" || state == "ii",
        "predicted" => state == "i" || state == "iii",
        "wrong" => state == "iv" || state == "v",
        _ => unreachable!(),
    };
    ["labeled", "predicted", "wrong"]
        .into_iter()
        .map(|b| {
            let size = rows.iter().filter(|r| &r[2] == b).count();
            let hits = rows.iter().filter(|r| &r[2] == b && meets(b, &r[6])).count();
            let relevant = rows.iter().filter(|r| meets(b, &r[6])).count();
            (b.to_string(), (size, hits, relevant))
        })
        .collect()
}

#[test]
fn selection_report_matches_counting_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = noisy_config();
    let outcome = lab::run(&cfg, tmp.path()).unwrap();
    let dir = RunDir::new(tmp.path());
    let mut checked = 0;
    for epoch in cfg.warmup_epochs..cfg.total_epochs {
        if !cfg.writes_scatter(epoch) {
            assert!(!dir.selection(epoch, 1).exists());
            continue;
        }
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.epoch_report(epoch)).unwrap()).unwrap();
        for entry in report["train"].as_array().unwrap() {
            let net = entry["net"].as_u64().unwrap() as usize;
            let sel = &entry["division"]["selection"];
            assert_eq!(entry["division"]["source_net"].as_u64().unwrap() as usize, 3 - net);
            for (branch, (size, hits, relevant)) in count_selection(&dir.selection(epoch, net)) {
                let stats = &sel[&branch];
                assert_eq!(stats["size"].as_u64().unwrap() as usize, size);
                let expect = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
                assert_eq!(stats["precision"].as_f64(), expect(hits, size), "{branch} precision");
                assert_eq!(stats["recall"].as_f64(), expect(hits, relevant), "{branch} recall");
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 4);
    assert_eq!(outcome.summary.final_selection.len(), 2);
}

#[test]
fn summary_metrics_follow_epoch_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = noisy_config();
    let outcome = lab::run(&cfg, tmp.path()).unwrap();
    let dir = RunDir::new(tmp.path());
    let model: Vec<f64> = (0..cfg.total_epochs)
        .map(|e| {
            let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.epoch_report(e)).unwrap()).unwrap();
            v["test_accuracy"]["model"].as_f64().unwrap()
        })
        .collect();
    let s = &outcome.summary;
    assert_eq!(s.status, RunStatus::Completed);
    assert_eq!(s.metric("model.best"), model.iter().copied().reduce(f64::max));
    let last: f64 = model[model.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!((s.metric("model.last").unwrap() - last).abs() < 1e-12);
    assert_eq!(s.metric("model.final"), model.last().copied());
}

#[test]
fn scatter_states_agree_with_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = noisy_config();
    lab::run(&cfg, tmp.path()).unwrap();
    let dir = RunDir::new(tmp.path());
    let ds = dst_lab::noise::read_dataset(&dir.dataset_csv(), &dir.dataset_manifest()).unwrap();
    let rows = lab::read_scatter(&dir.scatter(cfg.total_epochs - 1, 1)).unwrap();
    assert_eq!(rows.len(), ds.len());
    for (i, (state, p)) in rows.iter().enumerate() {
        let expected =
            dst_lab::noise::SampleState::classify(ds.noisy_labels()[i], ds.samples()[i].true_label, p.predicted_label);
        assert_eq!(*state, expected);
        assert!(p.l_prd <= p.l_nis);
    }
}

#[test]
fn numeric_failure_keeps_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { lr: 1e200, momentum: 0.0, ..noisy_config() };
    let err = lab::run(&cfg, tmp.path()).unwrap_err();
    assert!(!err.is_config(), "{err}");
    let summary = lab::Summary::load(&RunDir::new(tmp.path()).summary()).unwrap();
    assert_eq!(summary.status, RunStatus::Failed);
    assert!(summary.error.is_some());
    assert!(RunDir::new(tmp.path()).manifest().is_file());
}

#[test]
fn manifest_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    lab::run(&noisy_config(), &first).unwrap();
    let manifest = lab::read_manifest(&first).unwrap();
    let second = tmp.path().join("second");
    lab::run(&manifest.config, &second).unwrap();
    for rel in ["summary.json", "dataset.csv", "checkpoints/epoch_011_net2.bin"] {
        assert_eq!(std::fs::read(first.join(rel)).unwrap(), std::fs::read(second.join(rel)).unwrap(), "{rel}");
    }
}
