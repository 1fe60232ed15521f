use distillforge::harness::{
    emit_tables_and_curves, run_experiment, run_pipeline, ExperimentConfig, GridSpec, Pipeline,
    TaskSource,
};
use distillforge::model::{CellType, Seq2SeqConfig};
use distillforge::synth::SyntheticTaskSpec;
use distillforge::train::TrainConfig;

fn tiny_config() -> ExperimentConfig {
    let model = |merges| Seq2SeqConfig {
        bpe_merges: merges,
        embed_size: 8,
        hidden_size: 8,
        cell_type: CellType::Gru,
        ..Seq2SeqConfig::large()
    };
    ExperimentConfig {
        task: TaskSource::Synthetic {
            spec: SyntheticTaskSpec::default(),
            train: 60,
            valid: 8,
            test: 8,
        },
        large: model(10000),
        small: model(30),
        budget: 2,
        teacher_budget: 2,
        trials: vec![1, 2],
        beam: 2,
        train: TrainConfig {
            batch_size: 150,
            checkpoint_every: 3,
            initial_lr: 0.01,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn full_pipeline_writes_every_table() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&tiny_config(), Some(dir.path())).unwrap();
    assert_eq!(report.rows.len(), 15);
    assert!(report.all_complete());
    for r in &report.rows {
        assert_eq!(r.trials.len(), 2);
        // Equal compute within the matrix.
        for t in &r.trials {
            assert_eq!(t.metrics.last().unwrap().updates, 6);
        }
    }
    for f in [
        "table1.tsv",
        "table2.tsv",
        "table3.tsv",
        "curves.tsv",
        "summary.md",
        "oracle.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let table3 = std::fs::read_to_string(dir.path().join("table3.tsv")).unwrap();
    assert_eq!(table3.lines().count(), 6);
    let table2 = std::fs::read_to_string(dir.path().join("table2.tsv")).unwrap();
    assert!(table2.starts_with("dataset\tavg_tokens\tvocab_size\nbase\t"));
    let before = std::fs::read_to_string(dir.path().join("table1.tsv")).unwrap();
    let rebuilt = emit_tables_and_curves(dir.path()).unwrap();
    assert_eq!(rebuilt.table1, before);
    assert!(dir
        .path()
        .join("datasets")
        .join("base+kd+bt.manifest.json")
        .is_file());
}

#[test]
fn experiment_cells_are_deterministic() {
    let config = ExperimentConfig {
        recipe: "base+kd".parse().unwrap(),
        trials: vec![3],
        ..tiny_config()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&config, Some(a.path())).unwrap();
    let rb = run_experiment(&config, Some(b.path())).unwrap();
    assert_eq!(ra.trials[0].test_bleu, rb.trials[0].test_bleu);
    let metrics = |d: &std::path::Path| {
        let log = d
            .join("cells")
            .join("base+kd.small.dropout.2")
            .join("trial-3")
            .join("metrics.tsv");
        std::fs::read_to_string(log)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once('\t').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(metrics(a.path()), metrics(b.path()));
}

#[test]
fn grid_records_every_point() {
    let mut p = Pipeline::new(tiny_config(), None).unwrap();
    let grid = GridSpec {
        bpe: vec![10000, 20],
        sizes: vec![4, 8],
    };
    let points = p
        .grid_search(&grid, &["base".parse().unwrap()], None)
        .unwrap();
    assert_eq!(points.len(), 4);
    assert!(points
        .iter()
        .all(|pt| pt.valid_bleu.is_some() && pt.params > 0));
    assert!(points[0].params < points[1].params);
}
