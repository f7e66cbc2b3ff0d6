//! End-to-end acceptance checks on the desk-scale Split MNIST setup: 200
//! training and 100 test images per class, five steps of two classes,
//! hidden size 32, five seeds. Each check prints one PASS/FAIL line.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqcl::autodiff::grad_check;
use seqcl::data::SequenceBatch;
use seqcl::error::Error;
use seqcl::evaluation::{mean_std, RunKey, RunRecord};
use seqcl::models::{Classifier, HeadMode, ModelConfig, ModelKind};
use seqcl::protocol::{assessment_seed, grid_search, run_assessment, run_stream, GridSpec, RunSpec};
use seqcl::qpsolver::{solve, verify_kkt, QPInstance, QPStatus};
use seqcl::strategies::{EpochBudget, StrategyConfig, StrategyKind};
use seqcl::streams::{
    assert_no_leakage, build_class_incremental, holdout_split, synth_sequences, ClassOrder, Dataset, Scenario,
    SynthKind,
};

const TRAIN: usize = 200;
const TEST: usize = 100;
const STEPS: usize = 5;
const SEEDS: usize = 5;
/// Training images per class for the chunk-size comparison.
const SEQLEN_TRAIN: usize = 100;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, passed: bool, detail: &str) {
    let line = format!("acceptance {} {name}: {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(passed, "{name}: {detail}");
}

fn info(detail: &str) {
    let mut out = std::io::stdout().lock();
    out.write_all(format!("acceptance info {detail}\n").as_bytes()).unwrap();
}

fn mnist() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
        Dataset::mnist(&dir).unwrap()
    })
}

fn desk(train: usize, chunk: usize) -> Scenario {
    let data = mnist().take_per_class(train, TEST).rechunk(chunk).unwrap();
    build_class_incremental(&data, 2, STEPS, &ClassOrder::Identity).unwrap()
}

fn seeds() -> Vec<u64> {
    (0..SEEDS).map(|i| assessment_seed(0, i)).collect()
}

fn spec(model: ModelKind, kind: StrategyKind) -> RunSpec {
    let mut s = RunSpec {
        strategy: StrategyConfig::new(kind),
        ..RunSpec::default()
    };
    s.model.kind = model;
    s.model.hidden_size = 32;
    if kind.requires_online() {
        s.train = s.train.online();
    }
    s
}

fn key(label: &str) -> RunKey {
    RunKey {
        benchmark: "smnist".into(),
        strategy: label.into(),
        ..RunKey::default()
    }
}

struct Runs {
    records: Vec<RunRecord>,
    seconds: f64,
}

impl Runs {
    fn accs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.acc().unwrap()).collect()
    }

    fn mean(&self) -> f64 {
        mean_std(&self.accs()).0
    }

    fn std(&self) -> f64 {
        mean_std(&self.accs()).1
    }
}

/// Five-seed assessment, computed once per label.
fn runs(label: &str, make: impl FnOnce() -> (RunSpec, Scenario)) -> Arc<Runs> {
    static CACHE: OnceLock<Mutex<BTreeMap<String, Arc<Runs>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(label) {
        return r.clone();
    }
    let (spec, sc) = make();
    let t0 = Instant::now();
    let records = run_assessment(&spec, &sc, &seeds(), &key(label), 1, None).unwrap();
    let r = Arc::new(Runs {
        records,
        seconds: t0.elapsed().as_secs_f64(),
    });
    info(&format!("{label}: ACC {:.4} ± {:.4} ({:.0}s)", r.mean(), r.std(), r.seconds));
    cache.lock().unwrap().insert(label.into(), r.clone());
    r
}

/// Hyperparameters chosen on the desk stream itself with the seed-0 model.
fn selected(label: &str, base: RunSpec, grid: GridSpec) -> RunSpec {
    static CACHE: OnceLock<Mutex<BTreeMap<String, RunSpec>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(s) = cache.lock().unwrap().get(label) {
        return s.clone();
    }
    let res = grid_search(&base, &grid, &desk(TRAIN, 28), 0, &key(label), 1, None).unwrap();
    let chosen = grid.apply(&res.best_entry().point, &base).unwrap();
    let table: Vec<String> = res.table.iter().map(|e| format!("{} {:.4}", e.point, e.acc)).collect();
    info(&format!("{label} selection: {} -> {}", table.join(", "), res.best_entry().point));
    cache.lock().unwrap().insert(label.into(), chosen.clone());
    chosen
}

fn lambda_grid() -> GridSpec {
    GridSpec {
        lambda: Some(vec![0.1, 1.0, 10.0, 100.0]),
        ..GridSpec::default()
    }
}

fn gem_spec() -> RunSpec {
    let grid = GridSpec {
        gamma: Some(vec![0.0, 0.5, 1.0]),
        ..GridSpec::default()
    };
    selected("gem", spec(ModelKind::Mlp, StrategyKind::Gem), grid)
}

fn mlp(kind: StrategyKind) -> Arc<Runs> {
    let label = format!("mlp-{}", kind.name());
    runs(&label, || {
        let s = match kind {
            StrategyKind::Ewc | StrategyKind::Mas | StrategyKind::Lwf => {
                selected(kind.name(), spec(ModelKind::Mlp, kind), lambda_grid())
            }
            StrategyKind::Gem => gem_spec(),
            _ => spec(ModelKind::Mlp, kind),
        };
        (s, desk(TRAIN, 28))
    })
}

fn replay_with_p(p: usize) -> Arc<Runs> {
    if p == 5 {
        return mlp(StrategyKind::Replay);
    }
    runs(&format!("mlp-replay-p{p}"), || {
        let mut s = spec(ModelKind::Mlp, StrategyKind::Replay);
        s.strategy.p = p;
        (s, desk(TRAIN, 28))
    })
}

fn lstm_naive() -> Arc<Runs> {
    runs("lstm-naive", || (spec(ModelKind::Lstm, StrategyKind::Naive), desk(TRAIN, 28)))
}

fn lstm_seqlen(kind: StrategyKind, chunk: usize) -> Arc<Runs> {
    runs(&format!("lstm-{}-chunk{chunk}", kind.name()), || {
        let mut s = match kind {
            StrategyKind::Gem => {
                let mut g = gem_spec();
                g.model.kind = ModelKind::Lstm;
                g.strategy.patterns_per_step = 32;
                g
            }
            _ => spec(ModelKind::Lstm, kind),
        };
        if !kind.requires_online() {
            s.train.epochs = EpochBudget::UntilAccuracy {
                target: 0.99,
                max_epochs: 10,
            };
        }
        (s, desk(SEQLEN_TRAIN, chunk))
    })
}

#[test]
fn naive_forgets_everything_but_the_last_step() {
    let _g = serial();
    let t0 = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, r) in [("mlp", mlp(StrategyKind::Naive)), ("lstm", lstm_naive())] {
        let worst_old = r
            .records
            .iter()
            .flat_map(|rec| {
                let last = rec.matrix.last_row().unwrap();
                last[..last.len() - 1].iter().map(|a| a.unwrap()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        let acc = r.mean();
        ok &= (0.15..=0.25).contains(&acc) && worst_old <= 0.05 && r.seconds <= 600.0;
        parts.push(format!("{name} ACC {acc:.4}, max old-step accuracy {worst_old:.4}, {:.0}s", r.seconds));
    }
    report(
        "total forgetting (ACC in [0.15, 0.25], old steps <= 0.05, <= 10 min)",
        ok,
        &format!("{} (checked in {:.0}s)", parts.join("; "), t0.elapsed().as_secs_f64()),
    );
}

#[test]
fn regularization_does_not_help_class_incremental() {
    let _g = serial();
    let naive = mlp(StrategyKind::Naive).mean();
    let ewc = mlp(StrategyKind::Ewc).mean();
    let mas = mlp(StrategyKind::Mas).mean();
    report(
        "EWC and MAS within 0.05 of Naive",
        (ewc - naive).abs() <= 0.05 && (mas - naive).abs() <= 0.05,
        &format!("naive {naive:.4}, ewc {ewc:.4}, mas {mas:.4}"),
    );
}

#[test]
fn replay_and_gem_recover() {
    let _g = serial();
    let naive = mlp(StrategyKind::Naive).mean();
    let replay = mlp(StrategyKind::Replay).mean();
    let gem = mlp(StrategyKind::Gem).mean();
    let bar = naive + 0.35;
    let lstm = (
        lstm_seqlen(StrategyKind::Replay, 28).mean(),
        lstm_seqlen(StrategyKind::Gem, 28).mean(),
    );
    info(&format!(
        "lstm chunk 28 ({SEQLEN_TRAIN}/class): replay {:.4}, gem {:.4}, naive (200/class) {:.4}",
        lstm.0,
        lstm.1,
        lstm_naive().mean()
    ));
    report(
        "Replay (K=20, P=5) and GEM >= Naive + 0.35 (MLP, 5 seeds)",
        replay >= bar && gem >= bar,
        &format!("naive {naive:.4}, replay {replay:.4}, gem {gem:.4}, bar {bar:.4}"),
    );
}

#[test]
fn longer_sequences_forget_more() {
    let _g = serial();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in [StrategyKind::Replay, StrategyKind::Gem] {
        let long = lstm_seqlen(kind, 4).mean();
        let short = lstm_seqlen(kind, 28).mean();
        ok &= short >= long + 0.05;
        parts.push(format!("{} chunk 28 {short:.4} vs chunk 4 {long:.4}", kind.name()));
    }
    report("ACC(chunk 28) >= ACC(chunk 4) + 0.05 for Replay and GEM", ok, &parts.join("; "));
}

#[test]
fn joint_training_beats_every_strategy() {
    let _g = serial();
    let joint = mlp(StrategyKind::Joint).mean();
    let others: Vec<(StrategyKind, f64)> = [
        StrategyKind::Naive,
        StrategyKind::Ewc,
        StrategyKind::Mas,
        StrategyKind::Lwf,
        StrategyKind::Replay,
        StrategyKind::Gem,
        StrategyKind::Agem,
    ]
    .into_iter()
    .map(|k| (k, mlp(k).mean()))
    .collect();
    let best = others.iter().map(|o| o.1).fold(0.0, f64::max);
    let listing: Vec<String> = others.iter().map(|(k, a)| format!("{} {a:.4}", k.name())).collect();
    report(
        "Joint strictly above every strategy",
        others.iter().all(|o| joint > o.1),
        &format!("joint {joint:.4}, best other {best:.4} ({})", listing.join(", ")),
    );
}

#[test]
fn multi_head_beats_single_head() {
    let _g = serial();
    let single = mlp(StrategyKind::Naive).mean();
    let multi = runs("mlp-naive-multi", || {
        let mut s = spec(ModelKind::Mlp, StrategyKind::Naive);
        s.model.head_mode = HeadMode::Multi;
        (s, desk(TRAIN, 28).into_task_incremental().unwrap())
    })
    .mean();
    report(
        "multi-head Naive >= single-head Naive + 0.30",
        multi >= single + 0.30,
        &format!("multi {multi:.4}, single {single:.4}"),
    );
}

#[test]
fn agem_collapses_in_single_task() {
    let _g = serial();
    let naive = mlp(StrategyKind::Naive).mean();
    let agem = mlp(StrategyKind::Agem).mean();
    report(
        "A-GEM within 0.10 of Naive",
        (agem - naive).abs() <= 0.10,
        &format!("agem {agem:.4}, naive {naive:.4}"),
    );
}

fn qp_instance(rng: &mut ChaCha8Rng) -> QPInstance {
    let m = rng.random_range(1..=10);
    let n = rng.random_range(m..=50);
    let g = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows = (0..m).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    QPInstance::new(g, rows, rng.random_range(0.0..0.5)).unwrap()
}

fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

fn feasible(inst: &QPInstance, z: &[f64], slack: f64) -> bool {
    inst.rows
        .iter()
        .all(|r| r.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() >= inst.gamma - slack)
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    u.into_iter().map(|x| x / norm).collect()
}

#[test]
fn qp_solver_matches_sampling_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut solve_time = Duration::ZERO;
    let (mut worst_kkt, mut worst_gap, mut failures) = (0.0f64, f64::NEG_INFINITY, Vec::new());
    for i in 0..1000 {
        let inst = qp_instance(&mut rng);
        let t0 = Instant::now();
        let sol = solve(&inst).unwrap();
        solve_time += t0.elapsed();
        let kkt = verify_kkt(&inst, &sol);
        worst_kkt = worst_kkt.max(kkt);
        if sol.status != QPStatus::Optimal || kkt >= 1e-8 || !feasible(&inst, &sol.z, 1e-9) {
            failures.push(i);
            continue;
        }
        let f = half_sq_dist(&inst.g, &sol.z);
        // feasible points near the solution and near the unconstrained optimum
        let n = inst.g.len();
        for k in 0..400 {
            let r = 10f64.powf(rng.random_range(-6.0..0.0));
            let centre = if k % 2 == 0 { &sol.z } else { &inst.g };
            let u = random_direction(&mut rng, n);
            let cand: Vec<f64> = centre.iter().zip(&u).map(|(c, d)| c + r * d).collect();
            if feasible(&inst, &cand, 0.0) {
                worst_gap = worst_gap.max(f - half_sq_dist(&inst.g, &cand));
            }
        }
    }
    let secs = solve_time.as_secs_f64();
    report(
        "QP solver: KKT < 1e-8, no sampled feasible point better by 1e-7, < 5 s",
        failures.is_empty() && worst_gap <= 1e-7 && secs < 5.0,
        &format!(
            "1000 instances, worst KKT {worst_kkt:.2e}, worst oracle gap {worst_gap:.2e}, solve time {secs:.2}s, failures {failures:?}"
        ),
    );
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, len: usize, feat: usize, classes: usize) -> SequenceBatch {
    let seqs: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..len * feat).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = seqs.iter().map(Vec::as_slice).collect();
    let targets = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    SequenceBatch::pack(&refs, targets, feat, 0.0)
}

#[test]
fn autodiff_matches_finite_differences() {
    let _g = serial();
    let mut worst = BTreeMap::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in [ModelKind::Mlp, ModelKind::Lstm] {
            let (feat, len, classes) = (2, 5, 4);
            let config = ModelConfig {
                kind,
                input_size: if kind == ModelKind::Mlp { feat * len } else { feat },
                hidden_size: rng.random_range(2..=5),
                num_layers: rng.random_range(1..=2),
                head_mode: HeadMode::Single,
                num_classes_total: classes,
            };
            let model = Classifier::new(config, seed).unwrap();
            let batch = random_batch(&mut rng, 3, len, feat, classes);
            // zero biases put whole dead ReLU layers exactly on the kink
            let params: Vec<_> = model
                .params()
                .iter()
                .map(|p| {
                    let mut v = p.value.clone();
                    if p.name.ends_with("bias") {
                        v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
                    }
                    v
                })
                .collect();
            let err = grad_check(
                |g, vars| {
                    let logits = model.forward(g, vars, &batch, None)?;
                    g.cross_entropy(logits, &batch.targets, None)
                },
                &params,
                1e-5,
            )
            .unwrap();
            let w = worst.entry(format!("{kind:?}")).or_insert(0.0f64);
            *w = w.max(err);
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    report(
        "gradient check, MLP and 5-step LSTM, 100 seeds, max relative error < 1e-4",
        max < 1e-4,
        &worst.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect::<Vec<_>>().join(", "),
    );
}

fn labels(sc: &Scenario) -> BTreeSet<usize> {
    sc.steps
        .iter()
        .flat_map(|s| s.train.labels.iter().chain(&s.test.labels))
        .copied()
        .collect()
}

#[test]
fn protocol_is_leak_free_and_deterministic() {
    let _g = serial();
    let synth = Dataset::from_set(
        "featureseq",
        &synth_sequences(SynthKind::Spectrogram, 12, 3, 1).unwrap(),
        1,
    );
    let small = mnist().take_per_class(4, 2);
    let (mut checked, mut leaks) = (0, 0);
    for data in [&small, &synth] {
        for order in 0..25u64 {
            for cps in 1..=3 {
                for nval in 1..=3 {
                    let split = holdout_split(data, cps, nval, None, &ClassOrder::Seeded(order), false);
                    let (val, assess) = match split {
                        Err(Error::Configuration(_)) => continue,
                        other => other.unwrap(),
                    };
                    checked += 1;
                    let disjoint = labels(&val).is_disjoint(&labels(&assess));
                    if assert_no_leakage(&val, &assess).is_err() || !disjoint {
                        leaks += 1;
                    }
                }
            }
        }
    }

    let data = mnist().take_per_class(20, 10).rechunk(28).unwrap();
    let sc = build_class_incremental(&data, 2, 3, &ClassOrder::Seeded(3)).unwrap();
    let mut mismatches = Vec::new();
    for model in [ModelKind::Mlp, ModelKind::Lstm] {
        for kind in [StrategyKind::Naive, StrategyKind::Replay, StrategyKind::Ewc] {
            let mut s = spec(model, kind);
            s.model.hidden_size = 8;
            s.train.epochs = EpochBudget::Fixed(2);
            let bits = |r: &RunRecord| -> Vec<Option<u64>> {
                r.matrix.rows().iter().flatten().map(|a| a.map(f64::to_bits)).collect()
            };
            let a = run_stream(&s, &sc, 42, RunKey::default()).unwrap();
            let b = run_stream(&s, &sc, 42, RunKey::default()).unwrap();
            let par = run_assessment(&s, &sc, &[42, 43], &RunKey::default(), 2, None).unwrap();
            if bits(&a) != bits(&b) || bits(&a) != bits(&par[0]) {
                mismatches.push(format!("{model:?}/{}", kind.name()));
            }
        }
    }
    report(
        "no class leakage on generated splits; same seed gives bit-identical matrices",
        checked > 0 && leaks == 0 && mismatches.is_empty(),
        &format!("{checked} splits checked, {leaks} leaking; 6 configurations rerun, mismatches {mismatches:?}"),
    );
}

#[test]
fn replay_improves_with_more_patterns_per_class() {
    let _g = serial();
    let ps = [1, 3, 5, 10];
    let runs: Vec<Arc<Runs>> = ps.iter().map(|&p| replay_with_p(p)).collect();
    let means: Vec<f64> = runs.iter().map(|r| r.mean()).collect();
    let pooled = (runs.iter().map(|r| r.std().powi(2)).sum::<f64>() / runs.len() as f64).sqrt();
    let ok = means.windows(2).all(|w| w[1] >= w[0] - pooled);
    let listing: Vec<String> = ps.iter().zip(&means).map(|(p, m)| format!("P={p} {m:.4}")).collect();
    report(
        "Replay ACC non-decreasing in P within one pooled std",
        ok,
        &format!("{}, pooled std {pooled:.4}", listing.join(", ")),
    );
}

fn property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> String {
    let mut runner = TestRunner::new(Config {
        cases: 500,
        failure_persistence: None,
        ..Config::default()
    });
    match runner.run(&strategy, test) {
        Ok(()) => format!("{name} ok"),
        Err(e) => format!("{name} FAILED: {e}"),
    }
}

#[test]
fn strategy_state_invariants_hold() {
    let _g = serial();
    let seeds = || (any::<u64>(), any::<u64>());
    let results = [
        property(
            "importance >= 0",
            (seeds(), common::model_kind(), 1usize..5),
            |((s, d), k, n)| common::importance_is_nonnegative(s, d, k, n),
        ),
        property("replay cap", (seeds(), 1usize..8, 1usize..4), |((s, d), n, t)| {
            common::replay_buffer_respects_cap(s, d, n, t)
        }),
        property("head isolation", (seeds(), common::model_kind()), |((s, d), k)| {
            common::multi_head_training_leaves_other_heads_alone(s, d, k)
        }),
        property(
            "LwF step 1 = Naive",
            (seeds(), common::model_kind(), 1usize..5),
            |((s, d), k, n)| common::lwf_first_step_is_naive(s, d, k, n),
        ),
        property("A-GEM agreement", common::gradient_pair(), |(g, r)| {
            common::agem_projection_agrees_with_reference(&g, &r)
        }),
    ];
    report(
        "strategy-state properties, 500 cases each",
        results.iter().all(|r| r.ends_with(" ok")),
        &results.join("; "),
    );
}
