use std::path::Path;

use icudil::harness::{
    grid_search, prepare_data, read_records, report_emit, run_comparison, run_on, select_best, ExperimentConfig,
    GridCell, ScoreSplit, RESULTS_FILE,
};
use icudil::strategy::Method;
use icudil::tasks::TaskKind;
use icudil::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_task(TaskKind::Ihm);
    c.seeds = 2;
    c.cohort_size = Some(400);
    c.model.hidden_width = 6;
    c.model.num_layers = 1;
    c.epochs = 1;
    c.buffer_capacity = 12;
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn end_to_end_run_counts_test_reads() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let data = prepare_data(&config).unwrap();
    let records = run_on(&config, &data, &[Method::Combined], ScoreSplit::Test, false).unwrap();
    let r = &records[0];
    // Every seed scores both sources after each of the two phases.
    assert_eq!(r.test_reads, 2 * 2 * config.seeds);
    assert_eq!(r.seeds, vec![0, 1]);
    let (mean, std) = r.final_psa("auc_roc").unwrap();
    assert!((0.0..=1.0).contains(&mean) && std >= 0.0);
    assert_eq!(r.per_seed(2, "MIMIC-III", "auc_roc").len(), 2);
    assert_eq!(r.checksums.len(), 2);
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.seeds = 1;
    let methods = [Method::Baseline, Method::AdjustedReplay];
    let data = prepare_data(&config).unwrap();
    let par = run_on(&config, &data, &methods, ScoreSplit::Validation, false).unwrap();
    config.parallel = false;
    let data = prepare_data(&config).unwrap();
    let seq = run_on(&config, &data, &methods, ScoreSplit::Validation, false).unwrap();
    for (a, b) in par.iter().zip(&seq) {
        assert_eq!(a.checksums, b.checksums);
        assert_eq!(a.report, b.report);
        assert_eq!(a.test_reads, 0);
    }
}

#[test]
fn comparison_writes_records_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.seeds = 1;
    run_comparison(&config, &[Method::Baseline, Method::Ewc]).unwrap();
    for m in ["baseline", "ewc"] {
        let run = dir.path().join(format!("ihm-{m}-south"));
        for f in [RESULTS_FILE, "metrics.csv", "config.kv", "seed_0.json"] {
            assert!(run.join(f).is_file(), "{m}: missing {f}");
        }
    }
    let back = ExperimentConfig::load(Some(&dir.path().join("ihm-ewc-south/config.kv")), &[]).unwrap();
    assert_eq!(back.method, Method::Ewc);
    assert_eq!(back.digest(), {
        let mut c = config.clone();
        c.method = Method::Ewc;
        c.digest()
    });

    assert_eq!(read_records(dir.path()).unwrap().len(), 2);
    let emitted = report_emit(dir.path()).unwrap();
    let table = std::fs::read_to_string(&emitted.table).unwrap();
    assert!(table.contains("baseline") && table.contains("ewc"));
    assert!(emitted.first_source.is_file());
    assert!(!emitted.histograms.is_empty());
}

#[test]
fn report_without_results_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(report_emit(dir.path()), Err(Error::NoResults(_))));
    assert!(matches!(read_records(&dir.path().join("missing")), Err(Error::NoResults(_))));
}

#[test]
fn grid_search_never_touches_test_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.seeds = 1;
    config.method = Method::Combined;
    let result = grid_search(&config, &[1, 2], &[2.0, 4.0]).unwrap();
    assert_eq!(result.test_reads, 0);
    assert_eq!(result.cells.len(), 4);
    assert_eq!(&result.best, select_best(&result.cells));
}

#[test]
fn grid_ties_prefer_small_importance_then_few_epochs() {
    let cell = |epochs, importance, validation_psa| GridCell {
        epochs,
        importance,
        validation_psa,
    };
    let cells = [cell(4, 6.0, 0.8), cell(2, 6.0, 0.8), cell(6, 4.0, 0.8), cell(8, 4.0, 0.8), cell(2, 2.0, 0.7)];
    assert_eq!(select_best(&cells), &cells[2]);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.kv");
    std::fs::write(&path, "task = ihm\nbogus = 1\n").unwrap();
    assert!(matches!(ExperimentConfig::load(Some(&path), &[]), Err(Error::Kv(_)) | Err(Error::Config(_))));
    assert!(ExperimentConfig::load(None, &["task=ihm".into(), "epochs=zero".into()]).is_err());
    let ok = ExperimentConfig::load(None, &["task=phenotyping".into(), "seeds=3".into()]).unwrap();
    assert_eq!((ok.seeds, ok.importance, ok.buffer_capacity), (3, 4.0, 500));
}
