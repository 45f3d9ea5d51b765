mod common;

use std::fs;
use std::path::Path;

use synthesis_core::corpus::Schema;
use synthesis_core::decode::DecodeConfig;
use synthesis_core::measure::MeasurerSpec;
use synthesis_core::runner::{
    emit_plot_data, load_records, run_experiment, ExperimentConfig, InstanceOutcome, PlotKind, RunError, StudyKind,
    RECORDS_FILE, SPREAD_BINS,
};

fn setup(dir: &Path, study: StudyKind, schema: Schema, n: usize) -> ExperimentConfig {
    let corpus = dir.join("corpus.jsonl");
    let text = match schema {
        Schema::Movies => common::synthetic_movies(n, 7),
        Schema::Trials => common::synthetic_trials(n, 7),
    };
    fs::write(&corpus, text).unwrap();
    let mut cfg = ExperimentConfig::new(study, corpus, schema, dir.join("out"));
    cfg.decode = Some(DecodeConfig {
        max_tokens: 12,
        ..DecodeConfig::default()
    });
    cfg
}

fn record_types(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("out").join(RECORDS_FILE))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["type"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect()
}

#[test]
fn calibration_reports_three_sources_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run_experiment(&setup(dir.path(), StudyKind::Calibration, Schema::Movies, 8)).unwrap();
    let m = &rec.aggregate.as_ref().unwrap().metrics;
    for src in ["reference", "inputs", "system"] {
        for key in ["r2", "pcc", "mse", "n"] {
            assert!(m.contains_key(&format!("{src}.{key}")), "missing {src}.{key}: {m:?}");
        }
        assert_eq!(m[&format!("{src}.n")], 8.0);
    }

    let dir = tempfile::tempdir().unwrap();
    let rec = run_experiment(&setup(dir.path(), StudyKind::Calibration, Schema::Trials, 8)).unwrap();
    let m = &rec.aggregate.as_ref().unwrap().metrics;
    for src in ["reference", "inputs", "system"] {
        for key in ["macro_f1", "accuracy"] {
            assert!(m.contains_key(&format!("{src}.{key}")), "missing {src}.{key}: {m:?}");
        }
    }
}

#[test]
fn records_file_is_config_instances_aggregate_timing() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run_experiment(&setup(dir.path(), StudyKind::Calibration, Schema::Movies, 5)).unwrap();
    let types = record_types(dir.path());
    let mut expected = vec!["config".to_string()];
    expected.extend(std::iter::repeat_n("instance".to_string(), 5));
    expected.extend(["aggregate".to_string(), "timing".to_string()]);
    assert_eq!(types, expected);
    let ids: Vec<&str> = rec.instances.iter().map(|r| r.instance_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    let loaded = load_records(&dir.path().join("out").join(RECORDS_FILE)).unwrap();
    assert_eq!(loaded, rec);
}

#[test]
fn interrupted_run_keeps_completed_instances() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run_experiment(&setup(dir.path(), StudyKind::Calibration, Schema::Movies, 6)).unwrap();
    let path = dir.path().join("out").join(RECORDS_FILE);
    let full = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = full.lines().collect();

    // Config plus three instances, then half of the fourth instance line.
    let mut cut = lines[..4].join("\n");
    cut.push('\n');
    cut.push_str(&lines[4][..lines[4].len() / 2]);
    fs::write(&path, &cut).unwrap();
    let loaded = load_records(&path).unwrap();
    assert_eq!(loaded.instances, rec.instances[..3].to_vec());
    assert!(loaded.aggregate.is_none() && loaded.timing.is_none());

    // A corrupt line followed by more content is an error, not a truncation.
    fs::write(&path, format!("{cut}\n{}\n", lines[5])).unwrap();
    assert!(matches!(load_records(&path), Err(RunError::Record { line: 5, .. })));
}

#[test]
fn plot_tables_have_expected_cardinalities() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), StudyKind::Permutation, Schema::Movies, 6);
    cfg.n_permutations = 4;
    let rec = run_experiment(&cfg).unwrap();
    let spread = emit_plot_data(&rec, PlotKind::SpreadHist).unwrap();
    assert_eq!(spread.rows.len(), SPREAD_BINS);
    let total: usize = spread.rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    let completed = rec
        .instances
        .iter()
        .filter(|r| matches!(r.outcome, InstanceOutcome::Permutation(_)))
        .count();
    assert_eq!(completed, 6);
    assert_eq!(total, completed * 4);
    assert!(emit_plot_data(&rec, PlotKind::EntropyHist).is_err());

    let dir = tempfile::tempdir().unwrap();
    let rec = run_experiment(&setup(dir.path(), StudyKind::Composition, Schema::Movies, 6)).unwrap();
    let scatter = emit_plot_data(&rec, PlotKind::SensitivityScatter).unwrap();
    let points: usize = rec
        .instances
        .iter()
        .filter_map(|r| match &r.outcome {
            InstanceOutcome::Composition(c) => Some(c.schedule.len()),
            _ => None,
        })
        .sum();
    assert!(points > 0);
    assert_eq!(scatter.rows.len(), points);
    assert_eq!(scatter.header.len(), 5);

    let dir = tempfile::tempdir().unwrap();
    let rec = run_experiment(&setup(dir.path(), StudyKind::Improve, Schema::Movies, 6)).unwrap();
    let ranges = emit_plot_data(&rec, PlotKind::CandidateRangeHist).unwrap();
    assert_eq!(ranges.rows.len(), 6);
    for row in &ranges.rows {
        let (lo, hi, range): (f64, f64, f64) = (
            row[1].parse().unwrap(),
            row[2].parse().unwrap(),
            row[3].parse().unwrap(),
        );
        assert!(range >= 0.0 && (hi - lo - range).abs() < 1e-12);
    }
    assert!(ranges.to_tsv().starts_with("instance_id\tmin\tmax\trange\n"));
}

#[test]
fn worker_count_does_not_change_results() {
    let run = |workers: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = setup(dir.path(), StudyKind::Permutation, Schema::Trials, 8);
        cfg.n_permutations = 3;
        cfg.workers = workers;
        let rec = run_experiment(&cfg).unwrap();
        let agg = rec.aggregate_json().unwrap();
        (rec.instances, agg)
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn improve_deltas_are_selected_minus_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run_experiment(&setup(dir.path(), StudyKind::Improve, Schema::Movies, 10)).unwrap();
    let m = &rec.aggregate.as_ref().unwrap().metrics;
    let mut baseline = (Vec::new(), Vec::new());
    let mut selected = (Vec::new(), Vec::new());
    for r in &rec.instances {
        let InstanceOutcome::Improve(res) = &r.outcome else {
            panic!("{:?}", r.outcome)
        };
        baseline.0.push(res.baseline.measurement.unwrap().as_scalar());
        baseline.1.push(res.gold);
        if let Some(v) = res.selection.measurement() {
            selected.0.push(v.as_scalar());
            selected.1.push(res.gold);
        }
    }
    let mse =
        |(p, t): &(Vec<f64>, Vec<f64>)| p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
    let r2 = |(p, t): &(Vec<f64>, Vec<f64>)| {
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let ss_tot: f64 = t.iter().map(|y| (y - mean).powi(2)).sum();
        1.0 - mse(&(p.clone(), t.clone())) * t.len() as f64 / ss_tot
    };
    assert!((m["baseline.mse"] - mse(&baseline)).abs() < 1e-12);
    assert!((m["selected.mse"] - mse(&selected)).abs() < 1e-12);
    assert!((m["baseline.r2"] - r2(&baseline)).abs() < 1e-9);
    assert!((m["selected.r2"] - r2(&selected)).abs() < 1e-9);
    assert!((m["delta.mse"] - (mse(&selected) - mse(&baseline))).abs() < 1e-12);
    assert!((m["delta.r2"] - (m["selected.r2"] - m["baseline.r2"])).abs() < 1e-15);
    assert_eq!(m["abstained"], (10 - selected.0.len()) as f64);
}

#[test]
fn flip_on_movies_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&setup(dir.path(), StudyKind::Flip, Schema::Movies, 3)).unwrap_err();
    assert!(err.is_config(), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn instance_failures_name_stage_and_cause() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path(), StudyKind::Calibration, Schema::Movies, 3);
    cfg.measurer = Some(MeasurerSpec {
        timeout_ms: 500,
        ..MeasurerSpec::external(format!("tcp://{addr}"))
    });
    cfg.generator = synthesis_core::runner::GeneratorSpec::default();
    let rec = run_experiment(&cfg).unwrap();
    assert_eq!(rec.failed_instances(), 3);
    for r in &rec.instances {
        let e = r.error().unwrap();
        assert_eq!(e.stage, "measure_documents");
        assert!(e.cause.contains(&addr.to_string()), "{}", e.cause);
        assert!(e.retryable);
    }
    let agg = rec.aggregate.unwrap();
    assert_eq!((agg.errors, agg.completed), (3, 0));
}
