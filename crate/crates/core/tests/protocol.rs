use std::path::PathBuf;

use seqcl::error::Error;
use seqcl::evaluation::RunKey;
use seqcl::models::ModelKind;
use seqcl::protocol::{
    execute_plan, grid_search, run_assessment, run_parallel, run_stream, select_best, ExperimentPlan, GridEntry,
    GridPoint, GridSpec, GridValue, Journal, RunSpec,
};
use seqcl::strategies::{EpochBudget, StrategyConfig, StrategyKind, TrainConfig};
use seqcl::streams::{assert_no_leakage, build_class_incremental, holdout_split, ClassOrder, Dataset, Scenario};

fn mnist(train: usize, test: usize) -> Dataset {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    Dataset::mnist(&dir).unwrap().take_per_class(train, test)
}

fn stream(steps: usize, train: usize) -> Scenario {
    build_class_incremental(&mnist(train, 20), 2, steps, &ClassOrder::Identity).unwrap()
}

fn mlp(kind: StrategyKind) -> RunSpec {
    let mut spec = RunSpec {
        strategy: StrategyConfig::new(kind),
        train: TrainConfig {
            epochs: EpochBudget::Fixed(3),
            ..TrainConfig::default()
        },
        ..RunSpec::default()
    };
    spec.model.kind = ModelKind::Mlp;
    spec
}

fn key() -> RunKey {
    RunKey {
        benchmark: "smnist".into(),
        strategy: "test".into(),
        model: "mlp".into(),
        chunk: None,
        head_mode: "single".into(),
    }
}

#[test]
fn grid_of_one_returns_its_acc() {
    let sc = stream(3, 30);
    let base = mlp(StrategyKind::Ewc);
    let grid = GridSpec {
        lambda: Some(vec![0.5]),
        ..Default::default()
    };
    let res = grid_search(&base, &grid, &sc, 4, &key(), 1, None).unwrap();
    assert_eq!(res.table.len(), 1);
    assert_eq!(res.best, 0);
    let spec = grid.apply(&res.table[0].point, &base).unwrap();
    assert_eq!(spec.strategy.lambda, 0.5);
    let direct = run_stream(&spec, &sc, 4, key()).unwrap().acc().unwrap();
    assert_eq!(res.best_entry().acc, direct);
}

#[test]
fn identical_points_keep_first() {
    let sc = stream(2, 20);
    let grid = GridSpec {
        lambda: Some(vec![1.0, 1.0]),
        ..Default::default()
    };
    let res = grid_search(&mlp(StrategyKind::Ewc), &grid, &sc, 0, &key(), 1, None).unwrap();
    assert_eq!(res.table[0].acc, res.table[1].acc);
    assert_eq!(res.best, 0);
}

#[test]
fn tie_breaks() {
    let entry = |lambda: f64, acc: f64, param_count: usize| GridEntry {
        point: GridPoint(vec![("lambda".into(), GridValue::Num(lambda))]),
        acc,
        param_count,
    };
    assert_eq!(select_best(&[]), None);
    assert_eq!(select_best(&[entry(1.0, 0.5, 10), entry(0.1, 0.6, 99)]), Some(1));
    assert_eq!(select_best(&[entry(1.0, 0.5, 10), entry(0.1, 0.5, 9)]), Some(1));
    assert_eq!(select_best(&[entry(1.0, 0.5, 10), entry(0.1, 0.5, 10)]), Some(1));
    assert_eq!(select_best(&[entry(1.0, 0.5, 10), entry(1.0, 0.5, 10)]), Some(0));
    let sc = stream(2, 10);
    let mut small = mlp(StrategyKind::Naive);
    small.model.hidden_size = 4;
    let mut big = small.clone();
    big.model.hidden_size = 8;
    assert!(small.param_count(&sc).unwrap() < big.param_count(&sc).unwrap());
}

#[test]
fn empty_grid_is_configuration_error() {
    let sc = stream(2, 10);
    let grid = GridSpec {
        lambda: Some(vec![]),
        ..Default::default()
    };
    let err = grid_search(&mlp(StrategyKind::Ewc), &grid, &sc, 0, &key(), 1, None).unwrap_err();
    assert!(matches!(err, Error::Configuration(_)), "{err}");
}

#[test]
fn extreme_ewc_lambda_freezes_the_model() {
    let sc = stream(3, 60);
    let base = mlp(StrategyKind::Ewc);
    let grid = GridSpec {
        lambda: Some(vec![0.0, 1e6]),
        ..Default::default()
    };
    let res = grid_search(&base, &grid, &sc, 2, &key(), 1, None).unwrap();
    let best = res.best_entry();
    assert!(res.table.iter().all(|e| e.acc <= best.acc));
    let stiff = grid.apply(&res.table[1].point, &base).unwrap();
    assert_eq!(stiff.strategy.lambda, 1e6);
    let rec = run_stream(&stiff, &sc, 2, key()).unwrap();
    let ta = &rec.diagnostics.train_accuracy;
    assert!(ta[1] < ta[0], "train accuracy per step {ta:?}");
}

#[test]
fn assessment_is_deterministic_per_seed() {
    let sc = stream(3, 20);
    let spec = mlp(StrategyKind::Replay);
    let one = run_assessment(&spec, &sc, &[11], &key(), 1, None).unwrap();
    assert_eq!(one.len(), 1);
    let again = run_assessment(&spec, &sc, &[11, 12], &key(), 2, None).unwrap();
    assert_eq!(again[0].matrix, one[0].matrix);
    assert_eq!(again[0].seed, 11);
    assert_ne!(again[1].matrix, one[0].matrix);
}

#[test]
fn online_guard() {
    let sc = stream(2, 10);
    let mut gem = mlp(StrategyKind::Gem);
    let err = run_stream(&gem, &sc, 0, key()).unwrap_err();
    assert!(matches!(err, Error::Configuration(_)));
    gem.allow_offline_projection = true;
    run_stream(&gem, &sc, 0, key()).unwrap();
    gem.allow_offline_projection = false;
    gem.train = TrainConfig::default().online();
    run_stream(&gem, &sc, 0, key()).unwrap();
    let plan = ExperimentPlan {
        base: mlp(StrategyKind::Naive),
        online_regime: true,
        ..ExperimentPlan::default()
    };
    assert!(plan.validate().is_err());
}

#[test]
fn journal_skips_finished_points() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.jsonl");
    let sc = stream(2, 20);
    let base = mlp(StrategyKind::Ewc);
    let grid = GridSpec {
        lambda: Some(vec![0.1, 10.0]),
        ..Default::default()
    };
    let first = {
        let j = Journal::open(&path).unwrap();
        grid_search(&base, &grid, &sc, 0, &key(), 1, Some(&j)).unwrap()
    };
    // a resumed sweep must read finished points back instead of retraining
    let text = std::fs::read_to_string(&path).unwrap();
    let marked = text.replacen(&format!("\"value\":{}", first.table[0].acc), "\"value\":0.0123", 1);
    assert_ne!(marked, text);
    std::fs::write(&path, marked).unwrap();
    let j = Journal::open(&path).unwrap();
    let resumed = grid_search(&base, &grid, &sc, 0, &key(), 1, Some(&j)).unwrap();
    assert_eq!(resumed.table[0].acc, 0.0123);
    assert_eq!(resumed.table[1].acc, first.table[1].acc);
    assert_eq!(j.len(), 2);
}

#[test]
fn plan_selects_then_assesses() {
    let data = mnist(20, 10);
    let (val, assess) = holdout_split(&data, 2, 2, Some(2), &ClassOrder::Identity, false).unwrap();
    assert_no_leakage(&val, &assess).unwrap();
    let plan = ExperimentPlan {
        base: mlp(StrategyKind::Ewc),
        grid: GridSpec {
            lambda: Some(vec![0.0, 1.0]),
            ..Default::default()
        },
        num_seeds: 2,
        ..ExperimentPlan::default()
    };
    let out = execute_plan(&plan, Some(&val), &assess, &key(), 1, None).unwrap();
    let sel = out.selection.as_ref().unwrap();
    assert_eq!(out.chosen, plan.grid.apply(&sel.best_entry().point, &plan.base).unwrap());
    assert_eq!(out.records.len(), 2);
    for r in &out.records {
        assert_eq!(r.matrix.trained(), 2);
        let classes: Vec<usize> = assess.classes().into_iter().collect();
        assert_eq!(classes, vec![4, 5, 6, 7]);
    }
}

#[test]
fn no_leakage_on_generated_splits() {
    let data = mnist(5, 2);
    for seed in 0..20 {
        for v in 1..4 {
            let (val, assess) = holdout_split(&data, 2, v, None, &ClassOrder::Seeded(seed), false).unwrap();
            assert_no_leakage(&val, &assess).unwrap();
            let vc = val.manifest.classes();
            assert!(assess.manifest.classes().is_disjoint(&vc));
        }
    }
    let (a, b) = holdout_split(&data, 2, 3, None, &ClassOrder::Identity, true).unwrap();
    assert!(matches!(assert_no_leakage(&a, &b), Err(Error::Protocol(_))));
}

#[test]
fn joint_is_one_row() {
    let sc = stream(3, 20);
    let rec = run_stream(&mlp(StrategyKind::Joint), &sc, 0, key()).unwrap();
    assert_eq!(rec.matrix.trained(), 1);
    assert_eq!(rec.matrix.evaluated(), 3);
    assert_eq!(rec.step_seconds.len(), 1);
    assert!(rec.acc().unwrap() > 0.5);
}

#[test]
fn future_steps_recorded_on_request() {
    let sc = stream(3, 10);
    let mut spec = mlp(StrategyKind::Naive);
    spec.evaluate_future = true;
    let rec = run_stream(&spec, &sc, 0, key()).unwrap();
    assert!(rec.matrix.rows().iter().flatten().all(Option::is_some));
    spec.evaluate_future = false;
    let rec = run_stream(&spec, &sc, 0, key()).unwrap();
    assert_eq!(rec.matrix.get(0, 2), None);
}

#[test]
fn training_time_grows_with_epochs() {
    let sc = build_class_incremental(&mnist(40, 5).rechunk(28).unwrap(), 2, 2, &ClassOrder::Identity).unwrap();
    let timed = |epochs: usize| {
        let mut spec = mlp(StrategyKind::Naive);
        spec.model.kind = ModelKind::Lstm;
        spec.train.epochs = EpochBudget::Fixed(epochs);
        let runs: Vec<f64> = (0..3)
            .map(|_| run_stream(&spec, &sc, 0, key()).unwrap().step_seconds.iter().sum())
            .collect();
        runs.into_iter().fold(f64::INFINITY, f64::min)
    };
    let (t2, t4) = (timed(2), timed(4));
    assert!(t4 >= 1.5 * t2, "2 epochs {t2}s, 4 epochs {t4}s");
}

#[test]
fn parallel_results_keep_order() {
    let work: Vec<_> = (0..17u64).map(|i| move || i * i).collect();
    assert_eq!(run_parallel(4, work), (0..17u64).map(|i| i * i).collect::<Vec<_>>());
    let sc = stream(2, 10);
    let spec = mlp(StrategyKind::Naive);
    let seq = run_assessment(&spec, &sc, &[1, 2, 3], &key(), 1, None).unwrap();
    let par = run_assessment(&spec, &sc, &[1, 2, 3], &key(), 3, None).unwrap();
    assert_eq!(seq, par.into_iter().map(|mut r| {
        r.step_seconds = seq.iter().find(|s| s.seed == r.seed).unwrap().step_seconds.clone();
        r
    }).collect::<Vec<_>>());
}
