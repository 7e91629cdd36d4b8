use flylora::adapters::count_activated_params;
use flylora::experiments::{
    activation_energy_profile, evaluate_merged, granularity_config, make_synthetic_task, merge_ablation_config,
    run_merge_experiment, run_single_task, sign_test, ExperimentConfig, Phase, TaskKind, TaskSpec, VariantSpec,
};
use flylora::merging::{merge_weight_average, MergeSpec, TaskMergeMetric};
use flylora::training::train_adapter;
use flylora::{Adapter, AdapterConfig, DenseMatrix, TrainOptions, Variant};

fn small_config(variants: Vec<VariantSpec>, tasks: usize) -> ExperimentConfig {
    ExperimentConfig {
        tasks: (0..tasks)
            .map(|i| TaskSpec::new(format!("t{i}"), TaskKind::LinearTeacher, 48, 12, 256, 0.05, 40 + i as u64))
            .collect(),
        variants,
        seeds: vec![1, 2],
        train: TrainOptions {
            epochs: 6,
            lr: 0.05,
            batch_size: 16,
            seed: 0,
        },
        corr_columns: 4,
        corr_samples: 32,
    }
}

#[test]
fn flylora_full_rank_trace_matches_lora_fa() {
    let cfg = small_config(
        vec![
            VariantSpec::new("flylora", Variant::FlyLora, 8, 8),
            VariantSpec::new("lora-fa", Variant::LoraFa, 8, 8),
        ],
        1,
    );
    let res = run_single_task(&cfg).unwrap();
    for pair in res.cells.chunks(2) {
        let (a, b) = (&pair[0].trace.records, &pair[1].trace.records);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x.train_loss - y.train_loss).abs() <= 1e-10);
            assert!((x.eval_loss - y.eval_loss).abs() <= 1e-10);
        }
    }
}

#[test]
fn param_count_rows_match_the_formula() {
    let cfg = small_config(
        vec![
            VariantSpec::new("lora", Variant::Lora, 8, 8),
            VariantSpec::new("flylora", Variant::FlyLora, 8, 2),
            VariantSpec::split("split", 8, 4, 2),
            VariantSpec::new("lora-fa", Variant::LoraFa, 8, 8),
        ],
        1,
    );
    let res = run_single_task(&cfg).unwrap();
    let expect = |label: &str| match label {
        "lora" => count_activated_params(Variant::Lora, 48, 8, 8, 1).unwrap(),
        "flylora" => count_activated_params(Variant::FlyLora, 48, 8, 2, 1).unwrap(),
        "split" => count_activated_params(Variant::SplitLora, 48, 8, 4, 4).unwrap(),
        _ => count_activated_params(Variant::LoraFa, 48, 8, 8, 1).unwrap(),
    };
    let rows: Vec<_> = res.rows.iter().filter(|r| r.metric == "param-count").collect();
    assert_eq!(rows.len(), 8);
    for r in rows {
        assert_eq!(r.value, expect(&r.variant) as f64, "{}", r.variant);
    }
}

#[test]
fn single_task_rows_are_complete_and_ordered() {
    let cfg = small_config(vec![VariantSpec::new("flylora", Variant::FlyLora, 8, 2)], 2);
    let res = run_single_task(&cfg).unwrap();
    let metrics: Vec<&str> = res.rows.iter().take(4).map(|r| r.metric.as_str()).collect();
    assert_eq!(metrics, ["mse", "param-count", "energy-q25", "offdiag-corr"]);
    assert_eq!(res.rows.len(), 2 * 2 * 4);
    assert!(res.rows.iter().all(|r| r.phase == Phase::BeforeMerge && r.value.is_finite()));
    let order: Vec<(u64, &str)> = res.cells.iter().map(|c| (c.seed, c.task.as_str())).collect();
    assert_eq!(order, [(1, "t0"), (1, "t1"), (2, "t0"), (2, "t1")]);
}

#[test]
fn before_merge_rows_equal_single_task_rows() {
    let variants = vec![
        VariantSpec::new("flylora", Variant::FlyLora, 8, 2),
        VariantSpec::new("lora", Variant::Lora, 8, 8),
    ];
    let cfg = small_config(variants, 2);
    let single = run_single_task(&cfg).unwrap();
    let merged = run_merge_experiment(&cfg).unwrap();
    let before: Vec<_> = merged.rows.iter().filter(|r| r.phase == Phase::BeforeMerge).cloned().collect();
    let mut want = single.rows.clone();
    let mut got = before;
    let key = |r: &flylora::experiments::ResultRow| (r.seed, r.variant.clone(), r.task.clone(), r.metric.clone());
    want.sort_by_key(key);
    got.sort_by_key(key);
    assert_eq!(got, want);
    let after = merged.rows.iter().filter(|r| r.phase == Phase::AfterMerge && r.metric == "delta-pct").count();
    assert_eq!(after, 2 * 2 * 2);
    assert_eq!(merged.groups.len(), 4);
}

#[test]
fn merge_needs_two_tasks() {
    let cfg = small_config(vec![VariantSpec::new("flylora", Variant::FlyLora, 8, 2)], 1);
    assert!(run_merge_experiment(&cfg).is_err());
}

#[test]
fn merging_copies_of_one_adapter_leaves_the_task_unchanged() {
    let task = make_synthetic_task(TaskKind::LinearTeacher, 48, 12, 256, 0.05, 3).unwrap();
    let cfg = AdapterConfig::new(Variant::Lora, 12, 48, 8, 8);
    let mut ad = Adapter::build(cfg, DenseMatrix::zeros(12, 48), 5).unwrap();
    let opts = TrainOptions {
        epochs: 5,
        ..TrainOptions::default()
    };
    let trace = train_adapter(&mut ad, &task, &opts).unwrap();
    let copies = vec![ad.clone(), ad.clone(), ad.clone()];
    let spec = MergeSpec::from_adapters(&copies, None).unwrap();
    let after = evaluate_merged(&task, &merge_weight_average(&spec), ad.base()).unwrap();
    let before = trace.last().eval_metric;
    let m = TaskMergeMetric::new("t", "mse", before, after, false);
    assert!(m.delta_pct.abs() < 1e-9, "Δ% = {}", m.delta_pct);
}

#[test]
fn flylora_cross_term_below_dense_lora() {
    let mut cfg = merge_ablation_config((0..5).collect());
    cfg.variants = vec![
        VariantSpec::new("flylora", Variant::FlyLora, 16, 4),
        VariantSpec::new("lora", Variant::Lora, 16, 16),
    ];
    cfg.train.epochs = 20;
    let res = run_merge_experiment(&cfg).unwrap();
    let frac = |label: &str| -> Vec<f64> {
        res.rows
            .iter()
            .filter(|r| r.variant == label && r.metric == "cross-term-fraction")
            .map(|r| r.value)
            .collect()
    };
    let (fly, lora) = (frac("flylora"), frac("lora"));
    let (wins, n) = sign_test(&fly, &lora);
    assert!(wins >= 4 && n == 5, "flylora lower in {wins}/{n}: {fly:?} vs {lora:?}");
    assert!(fly.iter().sum::<f64>() < lora.iter().sum::<f64>());
}

#[test]
fn finer_granularity_is_no_worse() {
    let res = run_single_task(&granularity_config((0..5).collect(), 20)).unwrap();
    let loss = |label: &str| -> Vec<f64> {
        res.cells
            .iter()
            .filter(|c| c.variant == label)
            .map(|c| c.trace.last().eval_loss)
            .collect()
    };
    let (fine, coarse) = (loss("split-32x1"), loss("split-4x8"));
    let no_worse = fine.iter().zip(&coarse).filter(|(f, c)| f <= c).count();
    assert!(no_worse >= 4, "finer no worse in {no_worse}/5: {fine:?} vs {coarse:?}");
    assert!(fine.iter().sum::<f64>() <= coarse.iter().sum::<f64>());
    assert_eq!(res.cells.len(), 4 * 5);
}

#[test]
fn trained_energy_profile_is_a_cdf() {
    let cfg = small_config(vec![VariantSpec::new("flylora", Variant::FlyLora, 8, 2)], 1);
    let res = run_single_task(&cfg).unwrap();
    let cell = &res.cells[0];
    let prof = activation_energy_profile(&cell.adapter, &cell.realized.test.inputs).unwrap();
    assert!(!prof.degenerate);
    assert!(prof.curve.windows(2).all(|w| w[0] <= w[1]));
    assert!((prof.curve.last().unwrap() - 1.0).abs() <= 1e-12);
    assert!(prof.q25() >= 0.25);
}

#[test]
fn identical_configs_give_identical_reports() {
    let cfg = small_config(vec![VariantSpec::new("flylora", Variant::FlyLora, 8, 2)], 2);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.json");
    let c = dir.path().join("c.csv");
    let r1 = run_merge_experiment(&cfg).unwrap().rows;
    let r2 = run_merge_experiment(&cfg).unwrap().rows;
    use flylora::experiments::{emit_report, rows_from_json, ReportFormat};
    emit_report(&r1, &a, ReportFormat::Csv).unwrap();
    emit_report(&r2, &c, ReportFormat::Csv).unwrap();
    emit_report(&r1, &b, ReportFormat::Json).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(rows_from_json(&std::fs::read_to_string(&b).unwrap()).unwrap(), r1);
}

#[test]
fn report_io_error_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = flylora::experiments::emit_report(&[], blocker.join("r.csv"), flylora::experiments::ReportFormat::Csv)
        .unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}
