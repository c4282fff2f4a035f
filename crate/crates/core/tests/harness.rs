use icl_lab::datasets::Example;
use icl_lab::harness::{
    emit_results, load_results_json, results_to_csv, run_experiment, DecodeCfg, ExperimentConfig, OutputFormat, Prepared,
    CSV_COLUMNS,
};
use icl_lab::masks::{BlockMaskConfig, MaskSpec};

fn small(extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
            "dataset": {{"synth": {{"num_labels": 8, "train_size": 300, "test_size": 40, "seed": 3}}}},
            "template": "trec",
            "strategies": [{{"kind": "random_prefix"}}, {{"kind": "bm25"}}, {{"kind": "recall_overlap"}}],
            "k_list": [2, 8, 24],
            "seeds": [0, 1]{extra}
        }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

fn strip_runtime(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn worker_count_does_not_change_results() {
    let one = run_experiment(&small(r#", "workers": 1"#)).unwrap();
    let four = run_experiment(&small(r#", "workers": 4"#)).unwrap();
    assert_eq!(
        strip_runtime(&results_to_csv(&one.results).unwrap()),
        strip_runtime(&results_to_csv(&four.results).unwrap())
    );
}

#[test]
fn cached_prefix_matches_fresh_prompts() {
    let cached = run_experiment(&small(r#", "cache_prefix": true, "masks": ["full", {"b": 2, "sink": 1, "local": 1}]"#)).unwrap();
    let fresh = run_experiment(&small(r#", "cache_prefix": false, "masks": ["full", {"b": 2, "sink": 1, "local": 1}]"#)).unwrap();
    assert_eq!(cached.results.len(), fresh.results.len());
    for (a, b) in cached.results.iter().zip(&fresh.results) {
        assert_eq!(a.key, b.key);
        assert_eq!(a.records, b.records);
    }
}

#[test]
fn block_mask_wider_than_k_matches_full() {
    let full = run_experiment(&small(r#", "masks": ["full"]"#)).unwrap();
    let wide = run_experiment(&small(r#", "masks": [{"b": 24, "sink": 0, "local": 0}]"#)).unwrap();
    for (a, b) in full.results.iter().zip(&wide.results) {
        assert_eq!(a.records, b.records);
    }
}

#[test]
fn prefix_cache_reused_across_test_inputs() {
    let cfg = small("");
    let prep = Prepared::new(&cfg).unwrap();
    let demos: Vec<Example> = prep.dataset.train[..10].to_vec();
    let mask = MaskSpec::Block(BlockMaskConfig::new(3, 1, 1).unwrap());
    let decode = DecodeCfg { boost: 1e4, max_len: 8 };
    let prefix = prep.encode_prefix(&demos, &mask).unwrap();
    for t in &prep.dataset.test {
        let a = prep.predict_from_prefix(&prefix, &t.input, true, &decode).unwrap();
        let b = prep.predict_fresh(&demos, &t.input, &mask, true, &decode).unwrap();
        assert_eq!(a, b);
        assert!(prep.dataset.label_space.contains(&a));
    }
}

#[test]
fn json_results_round_trip() {
    let out = run_experiment(&small(r#", "reshuffles": 1"#)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/dir/results.json");
    emit_results(&out.results, OutputFormat::from_path(&path), &path).unwrap();
    let back = load_results_json(&path).unwrap();
    assert_eq!(back, out.results);
    assert!(back.iter().all(|r| r.flip_rate.is_some()));
}

#[test]
fn csv_has_one_row_per_grid_point() {
    let out = run_experiment(&small("")).unwrap();
    let csv = results_to_csv(&out.results).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(lines.count(), 3 * 3 * 2);
}

#[test]
fn config_errors_surface_before_running() {
    let mut cfg = small("");
    cfg.k_list = vec![500];
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.is_config());
    assert!(ExperimentConfig::from_json(r#"{"dataset": {"synth": {"num_labels": 2, "train_size": 10, "test_size": 2, "seed": 0}}, "strategies": [], "k_list": [1]}"#)
        .and_then(|c| c.validate())
        .is_err());
    assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
}

#[test]
fn decoding_failure_is_reported_not_raised() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("multi.jsonl");
    let mut lines = Vec::new();
    for i in 0..30 {
        let label = ["new york", "new jersey", "old york"][i % 3];
        let split = if i < 24 { "train" } else { "test" };
        lines.push(format!(r#"{{"input": "word{} thing", "label": "{label}", "split": "{split}"}}"#, i % 5));
    }
    std::fs::write(&data, lines.join("\n")).unwrap();
    let cfg = ExperimentConfig::from_json(&format!(
        r#"{{"dataset": {{"path": {:?}}}, "strategies": [{{"kind": "random_prefix"}}], "k_list": [0, 2], "seeds": [0], "boost": 1e-6}}"#,
        data
    ))
    .unwrap();
    let out = run_experiment(&cfg).unwrap();
    let failure = out.failure.expect("weak boost must fail");
    assert!(failure.contains("k=0"), "{failure}");
    assert!(out.results.is_empty());
}
