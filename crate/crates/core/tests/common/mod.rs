#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqcl::data::SequenceSet;
use seqcl::models::{HeadMode, ModelConfig, ModelKind};
use seqcl::strategies::{agem_project, EpochBudget, Learner, StrategyConfig, StrategyKind, TrainConfig};
use seqcl::streams::Step;

pub const FEAT: usize = 3;
pub const LEN: usize = 2;

pub fn toy_set(rng: &mut ChaCha8Rng, classes: &[usize], per_class: usize) -> SequenceSet {
    let mut s = SequenceSet::new(FEAT);
    for _ in 0..per_class {
        for &c in classes {
            let v = (0..FEAT * LEN)
                .map(|j| rng.random_range(-1.0..1.0) + if j % FEAT == c % FEAT { 1.5 } else { 0.0 })
                .collect();
            s.push(v, c).unwrap();
        }
    }
    s
}

pub fn toy_steps(seed: u64, num_steps: usize, per_class: usize) -> Vec<Step> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_steps)
        .map(|i| {
            let classes = vec![2 * i, 2 * i + 1];
            Step {
                index: i,
                task_label: i,
                train: toy_set(&mut rng, &classes, per_class),
                test: toy_set(&mut rng, &classes, 2),
                classes_introduced: classes,
            }
        })
        .collect()
}

pub fn model(kind: ModelKind, head_mode: HeadMode, num_steps: usize, extra: usize) -> ModelConfig {
    let step_width = FEAT + extra;
    ModelConfig {
        kind,
        input_size: if kind == ModelKind::Mlp { step_width * LEN } else { step_width },
        hidden_size: 4,
        num_layers: 1,
        head_mode,
        num_classes_total: 2 * num_steps,
    }
}

pub fn train(epochs: usize) -> TrainConfig {
    TrainConfig {
        minibatch: 4,
        epochs: EpochBudget::Fixed(epochs),
        ..TrainConfig::default()
    }
}

pub fn learner(kind: StrategyKind, model_kind: ModelKind, heads: HeadMode, steps: usize, seed: u64) -> Learner {
    let strategy = StrategyConfig {
        patterns_per_step: 4,
        sample_size: 4,
        k: 3,
        p: 2,
        ..StrategyConfig::new(kind)
    };
    let width = strategy.task_vector_width(steps);
    Learner::new(model(model_kind, heads, steps, width), strategy, train(1), width, seed).unwrap()
}

pub fn model_kind() -> impl Strategy<Value = ModelKind> {
    prop_oneof![Just(ModelKind::Mlp), Just(ModelKind::Lstm)]
}

type Check = Result<(), TestCaseError>;

/// LwF has nothing to distill on its first step.
pub fn lwf_first_step_is_naive(seed: u64, data_seed: u64, kind: ModelKind, per_class: usize) -> Check {
    let steps = toy_steps(data_seed, 2, per_class);
    let mut naive = learner(StrategyKind::Naive, kind, HeadMode::Single, 2, seed);
    let mut lwf = learner(StrategyKind::Lwf, kind, HeadMode::Single, 2, seed);
    naive.train_step(&steps[0]).unwrap();
    lwf.train_step(&steps[0]).unwrap();
    let a: Vec<u64> = naive.model().flat_params().iter().map(|x| x.to_bits()).collect();
    let b: Vec<u64> = lwf.model().flat_params().iter().map(|x| x.to_bits()).collect();
    prop_assert_eq!(a, b);
    Ok(())
}

pub fn importance_is_nonnegative(seed: u64, data_seed: u64, kind: ModelKind, per_class: usize) -> Check {
    let steps = toy_steps(data_seed, 2, per_class);
    for strategy in [StrategyKind::Ewc, StrategyKind::Mas] {
        let mut l = learner(strategy, kind, HeadMode::Single, 2, seed);
        for s in &steps {
            l.train_step(s).unwrap();
        }
        let st = l.state();
        let omegas: Vec<&f64> = st.omegas.iter().flat_map(|p| &p.omega).chain(&st.mas.omega).collect();
        prop_assert!(!omegas.is_empty());
        prop_assert!(omegas.iter().all(|w| w.is_finite() && **w >= 0.0));
    }
    Ok(())
}

pub fn replay_buffer_respects_cap(seed: u64, data_seed: u64, per_class: usize, num_steps: usize) -> Check {
    let steps = toy_steps(data_seed, num_steps, per_class);
    let mut l = learner(StrategyKind::Replay, ModelKind::Mlp, HeadMode::Single, num_steps, seed);
    for s in &steps {
        l.train_step(s).unwrap();
        let buf = &l.state().replay;
        for c in buf.classes() {
            prop_assert!(buf.count(c) <= 3);
            prop_assert_eq!(buf.count(c), per_class.min(3));
        }
    }
    prop_assert_eq!(l.state().replay.classes().len(), 2 * num_steps);
    Ok(())
}

pub fn multi_head_training_leaves_other_heads_alone(seed: u64, data_seed: u64, kind: ModelKind) -> Check {
    let steps = toy_steps(data_seed, 2, 3);
    let mut l = learner(StrategyKind::Naive, kind, HeadMode::Multi, 2, seed);
    l.train_step(&steps[0]).unwrap();
    let head0 = |l: &Learner| -> Vec<Vec<f64>> {
        l.model()
            .params()
            .iter()
            .filter(|p| p.name.starts_with("head0."))
            .map(|p| p.value.data().to_vec())
            .collect()
    };
    let before = head0(&l);
    prop_assert_eq!(before.len(), 2);
    let pred_before = l.predict(&steps[0].test, &steps[0]).unwrap();
    l.train_step(&steps[1]).unwrap();
    prop_assert_eq!(head0(&l), before);
    prop_assert_eq!(l.model().heads().len(), 2);
    // step 1 outputs never leak into task-0 predictions
    let pred_after = l.predict(&steps[0].test, &steps[0]).unwrap();
    prop_assert!(pred_after.iter().chain(&pred_before).all(|c| *c < 2));
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// After projection the update never opposes the reference gradient.
pub fn agem_projection_agrees_with_reference(g: &[f64], r: &[f64]) -> Check {
    let (z, fired) = agem_project(g, r, false);
    let scale = dot(g, g).sqrt() * dot(r, r).sqrt();
    let zr = dot(&z, r);
    prop_assert!(zr >= -1e-12 * scale.max(1.0), "ĝ·g_ref = {zr}");
    if !fired {
        prop_assert_eq!(z.as_slice(), g);
    }
    Ok(())
}

pub fn gradient_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            proptest::collection::vec(-10.0f64..10.0, n),
            proptest::collection::vec(-10.0f64..10.0, n),
        )
    })
}
