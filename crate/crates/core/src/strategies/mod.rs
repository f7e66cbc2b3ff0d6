//! Continual-learning strategies as hooks around one shared training loop:
//! loss terms (EWC, MAS, LwF), gradient projections (GEM, A-GEM), minibatch
//! augmentation (Replay), and the end-of-step state updates.

pub mod importance;
pub mod memory;
pub mod optim;
pub mod projection;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_flat_grad, Graph, Tensor, Var};
use crate::data::{SequenceBatch, SequenceSet};
use crate::error::{Error, Result};
use crate::models::{Classifier, HeadMode, ModelConfig};
use crate::streams::{derive_seed, Scenario, Step};

pub use importance::{
    ce_gradient, ewc_importance, importance_penalty, importance_penalty_value, mas_contribution, FisherBatching,
    ImportancePair, MasState,
};
pub use memory::{EpisodicMemory, ReplayBuffer, StoredPattern};
pub use optim::{Optimizer, OptimizerKind};
pub use projection::{agem_project, gem_project, GemOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Naive,
    Joint,
    Ewc,
    Mas,
    Lwf,
    Gem,
    Agem,
    Replay,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::Naive,
        StrategyKind::Joint,
        StrategyKind::Ewc,
        StrategyKind::Mas,
        StrategyKind::Lwf,
        StrategyKind::Gem,
        StrategyKind::Agem,
        StrategyKind::Replay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Joint => "joint",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Mas => "mas",
            StrategyKind::Lwf => "lwf",
            StrategyKind::Gem => "gem",
            StrategyKind::Agem => "agem",
            StrategyKind::Replay => "replay",
        }
    }

    pub fn parse(s: &str) -> Option<StrategyKind> {
        StrategyKind::ALL.into_iter().find(|k| k.name() == s.to_ascii_lowercase())
    }

    /// Strategies that only make sense in the two-epoch online regime.
    pub fn requires_online(self) -> bool {
        matches!(self, StrategyKind::Gem | StrategyKind::Agem)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Penalty weight for EWC, MAS and LwF.
    pub lambda: f64,
    /// LwF: per-step penalty weights, indexed by step (last value repeats).
    pub lambda_schedule: Option<Vec<f64>>,
    pub temperature: f64,
    pub gamma: f64,
    pub patterns_per_step: usize,
    pub sample_size: usize,
    /// Replay: patterns kept per class.
    pub k: usize,
    /// Replay: patterns added per previous class to each minibatch.
    pub p: usize,
    pub fisher: FisherBatching,
    pub agem_unconditional: bool,
    /// A-GEM: append a one-hot step vector to every timestep's input.
    pub task_vector: bool,
    /// Single head: exclude never-seen output units from the softmax.
    pub mask_unseen: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::Naive,
            lambda: 1.0,
            lambda_schedule: None,
            temperature: 1.0,
            gamma: 0.5,
            patterns_per_step: 256,
            sample_size: 256,
            k: 20,
            p: 5,
            fisher: FisherBatching::Minibatch,
            agem_unconditional: false,
            task_vector: true,
            mask_unseen: true,
        }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            ..StrategyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("strategy.lambda must be finite and >= 0, got {}", self.lambda));
        }
        if let Some(s) = &self.lambda_schedule {
            if s.is_empty() || s.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return bad("strategy.lambda_schedule needs finite values >= 0".into());
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("strategy.temperature must be > 0, got {}", self.temperature));
        }
        if !self.gamma.is_finite() {
            return bad("strategy.gamma must be finite".into());
        }
        match self.kind {
            StrategyKind::Gem | StrategyKind::Agem if self.patterns_per_step == 0 => {
                return bad("strategy.patterns_per_step must be positive".into())
            }
            StrategyKind::Agem if self.sample_size == 0 => {
                return bad("strategy.sample_size must be positive".into())
            }
            _ => {}
        }
        if matches!(self.kind, StrategyKind::Ewc | StrategyKind::Mas) && self.lambda > 1e7 {
            log::warn!("lambda {} is far outside the usual grid", self.lambda);
        }
        if self.kind == StrategyKind::Lwf && self.temperature > 10.0 {
            log::warn!("temperature {} is outside the usual grid", self.temperature);
        }
        if self.kind == StrategyKind::Gem && !(0.0..=1.0).contains(&self.gamma) {
            log::warn!("gamma {} is outside the usual grid [0, 1]", self.gamma);
        }
        Ok(())
    }

    /// Penalty weight in effect while training step `step`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        match &self.lambda_schedule {
            Some(s) => s[step.min(s.len() - 1)],
            None => self.lambda,
        }
    }

    /// Width of the one-hot step vector appended to inputs, given the
    /// number of steps in the stream.
    pub fn task_vector_width(&self, num_steps: usize) -> usize {
        if self.kind == StrategyKind::Agem && self.task_vector {
            num_steps
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpochBudget {
    Fixed(usize),
    /// Stop after the first epoch whose running training accuracy reaches
    /// `target`, or after `max_epochs`.
    UntilAccuracy { target: f64, max_epochs: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub epochs: EpochBudget,
    pub clip_norm: Option<f64>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            minibatch: 32,
            epochs: EpochBudget::UntilAccuracy {
                target: 0.99,
                max_epochs: 20,
            },
            clip_norm: Some(5.0),
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    /// Two epochs over minibatches of ten.
    pub fn online(mut self) -> Self {
        self.epochs = EpochBudget::Fixed(2);
        self.minibatch = 10;
        self
    }

    pub fn is_online(&self) -> bool {
        self.epochs == EpochBudget::Fixed(2) && self.minibatch == 10
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Configuration(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.minibatch == 0 || self.eval_batch == 0 {
            return Err(Error::Configuration("train.minibatch and train.eval_batch must be positive".into()));
        }
        match self.epochs {
            EpochBudget::Fixed(0) | EpochBudget::UntilAccuracy { max_epochs: 0, .. } => {
                Err(Error::Configuration("train.epochs must allow at least one epoch".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Everything a strategy carries from one step to the next.
#[derive(Clone, Debug)]
pub struct StrategyState {
    /// EWC: one importance/anchor pair per past step.
    pub omegas: Vec<ImportancePair>,
    /// MAS: running importance and the anchor of the latest step.
    pub mas: MasState,
    pub mas_anchor: Vec<f64>,
    /// LwF: the classifier as it was at the end of the previous step.
    pub frozen: Option<Classifier>,
    /// GEM / A-GEM episodic memory.
    pub memory: EpisodicMemory,
    pub replay: ReplayBuffer,
}

impl StrategyState {
    fn new(cfg: &StrategyConfig) -> Self {
        StrategyState {
            omegas: Vec::new(),
            mas: MasState::default(),
            mas_anchor: Vec::new(),
            frozen: None,
            memory: EpisodicMemory::default(),
            replay: ReplayBuffer::new(cfg.k),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub updates: u64,
    pub gem_qp_solves: u64,
    pub gem_fallbacks: u64,
    pub agem_projections: u64,
    pub epochs: Vec<usize>,
    pub train_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub seconds: f64,
}

struct Group {
    batch: SequenceBatch,
    task: Option<usize>,
}

struct Evaluated {
    loss: f64,
    grad: Vec<f64>,
    correct: usize,
}

/// Index of the largest active logit in every row.
fn argmax_rows(logits: &Tensor, mask: Option<&[bool]>) -> Vec<usize> {
    let (rows, cols) = logits.dims2();
    (0..rows)
        .map(|r| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let mut best = None::<(usize, f64)>;
            for (j, &v) in row.iter().enumerate() {
                if mask.is_some_and(|m| !m[j]) {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map_or(0, |(j, _)| j)
        })
        .collect()
}

fn select_tensor_cols(t: &Tensor, cols: &[usize]) -> Tensor {
    let (rows, c) = t.dims2();
    let data = (0..rows)
        .flat_map(|r| cols.iter().map(move |&j| (r, j)))
        .map(|(r, j)| t.data()[r * c + j])
        .collect();
    Tensor::matrix(rows, cols.len(), data).expect("selected shape")
}

/// One training run: a model plus the strategy state, fed step by step.
pub struct Learner {
    model: Classifier,
    strategy: StrategyConfig,
    train: TrainConfig,
    task_vector_width: usize,
    state: StrategyState,
    optimizer: Optimizer,
    data_rng: ChaCha8Rng,
    memory_rng: ChaCha8Rng,
    steps_done: usize,
    diagnostics: Diagnostics,
}

impl Learner {
    /// `model` must already account for the task-vector extension of the
    /// input when `task_vector_width > 0`.
    pub fn new(
        model: ModelConfig,
        strategy: StrategyConfig,
        train: TrainConfig,
        task_vector_width: usize,
        seed: u64,
    ) -> Result<Self> {
        strategy.validate()?;
        train.validate()?;
        Ok(Learner {
            model: Classifier::new(model, derive_seed(seed, 11))?,
            state: StrategyState::new(&strategy),
            optimizer: Optimizer::new(train.optimizer, train.learning_rate),
            strategy,
            train,
            task_vector_width,
            data_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 12)),
            memory_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 13)),
            steps_done: 0,
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Classifier {
        &mut self.model
    }

    pub fn state(&self) -> &StrategyState {
        &self.state
    }

    pub fn strategy(&self) -> &StrategyConfig {
        &self.strategy
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    fn with_task_vector(&self, batch: SequenceBatch, hot: &[Option<usize>]) -> Result<SequenceBatch> {
        if self.task_vector_width == 0 {
            Ok(batch)
        } else {
            batch.with_one_hot(hot, self.task_vector_width)
        }
    }

    fn train_batch(&self, set: &SequenceSet, idx: &[usize], step: usize) -> Result<SequenceBatch> {
        self.with_task_vector(set.batch(idx), &vec![Some(step); idx.len()])
    }

    /// Groups stored patterns by head, each group packed into one batch.
    fn pattern_groups(&self, patterns: &[&StoredPattern], feat_dim: usize) -> Result<Vec<Group>> {
        let mut tasks: Vec<Option<usize>> = patterns.iter().map(|p| self.model.head_task(p.task)).collect();
        tasks.sort_unstable();
        tasks.dedup();
        let mut out = Vec::new();
        for task in tasks {
            let chosen: Vec<&&StoredPattern> =
                patterns.iter().filter(|p| self.model.head_task(p.task) == task).collect();
            let seqs: Vec<&[f64]> = chosen.iter().map(|p| p.values.as_slice()).collect();
            let targets = chosen.iter().map(|p| p.label).collect();
            let hot: Vec<Option<usize>> = chosen.iter().map(|p| Some(p.step)).collect();
            let batch = self.with_task_vector(SequenceBatch::pack(&seqs, targets, feat_dim, 0.0), &hot)?;
            out.push(Group { batch, task });
        }
        Ok(out)
    }

    /// Mean cross-entropy over all rows of `groups`, plus the strategy's
    /// regularizers when `regularize` is set. The first group holds the
    /// current step's inputs.
    fn evaluate(&self, groups: &[Group], regularize: bool, step: usize) -> Result<Evaluated> {
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g);
        let total: usize = groups.iter().map(|gr| gr.batch.rows()).sum();
        let mut loss: Option<Var> = None;
        let mut correct = 0;
        let acc = |g: &mut Graph, term: Var, loss: &mut Option<Var>| -> Result<()> {
            *loss = Some(match *loss {
                Some(l) => g.add(l, term)?,
                None => term,
            });
            Ok(())
        };
        for (gi, grp) in groups.iter().enumerate() {
            let features = self.model.features(&mut g, &vars, &grp.batch)?;
            let logits = self.model.head_logits(&mut g, &vars, features, grp.task)?;
            let targets = self.model.unit_targets(grp.task, &grp.batch.targets)?;
            let mask = if self.strategy.mask_unseen {
                self.model.output_mask(grp.task)?
            } else {
                None
            };
            let ce = g.cross_entropy(logits, &targets, mask.as_deref())?;
            let ce = g.scale(ce, grp.batch.rows() as f64 / total as f64);
            acc(&mut g, ce, &mut loss)?;
            if gi == 0 {
                let pred = argmax_rows(g.value(logits), mask.as_deref());
                correct = pred.iter().zip(&targets).filter(|(a, b)| a == b).count();
                if regularize {
                    if let Some(kl) = self.lwf_term(&mut g, &vars, features, logits, grp, step)? {
                        acc(&mut g, kl, &mut loss)?;
                    }
                }
            }
        }
        if regularize {
            let pen = match self.strategy.kind {
                StrategyKind::Ewc => {
                    importance_penalty(&mut g, &self.model, &vars, &self.state.omegas, self.strategy.lambda)?
                }
                StrategyKind::Mas if !self.state.mas_anchor.is_empty() => {
                    let pair = ImportancePair {
                        omega: self.state.mas.omega.clone(),
                        anchor: self.state.mas_anchor.clone(),
                    };
                    importance_penalty(&mut g, &self.model, &vars, &[pair], self.strategy.lambda)?
                }
                _ => None,
            };
            if let Some(p) = pen {
                acc(&mut g, p, &mut loss)?;
            }
        }
        let loss = loss.ok_or_else(|| Error::Protocol("no data in minibatch".into()))?;
        let mut grads = g.backward(loss)?;
        Ok(Evaluated {
            loss: g.value(loss).item(),
            grad: importance::flat_gradients(&self.model, &vars, &mut grads),
            correct,
        })
    }

    /// `λ · KL(frozen ‖ current)` on the current inputs, restricted to the
    /// output units the frozen model had.
    fn lwf_term(
        &self,
        g: &mut Graph,
        vars: &[Var],
        features: Var,
        logits: Var,
        grp: &Group,
        step: usize,
    ) -> Result<Option<Var>> {
        let Some(frozen) = self.state.frozen.as_ref().filter(|_| self.strategy.kind == StrategyKind::Lwf) else {
            return Ok(None);
        };
        let lambda = self.strategy.lambda_at(step);
        if lambda == 0.0 {
            return Ok(None);
        }
        let t = self.strategy.temperature;
        let mut fg = Graph::new();
        let fvars = frozen.bind_frozen(&mut fg);
        let ffeat = frozen.features(&mut fg, &fvars, &grp.batch)?;
        let mut total: Option<Var> = None;
        match self.model.config().head_mode {
            HeadMode::Single => {
                let cols = frozen.seen_classes();
                if cols.is_empty() {
                    return Ok(None);
                }
                let fl = frozen.head_logits(&mut fg, &fvars, ffeat, None)?;
                let p = select_tensor_cols(fg.value(fl), &cols);
                let q = g.select_cols(logits, &cols)?;
                total = Some(g.kl_divergence(&p, q, t)?);
            }
            HeadMode::Multi => {
                for head in frozen.heads() {
                    let fl = frozen.head_logits(&mut fg, &fvars, ffeat, Some(head.task))?;
                    let p = fg.value(fl).clone();
                    let q = self.model.head_logits(g, vars, features, Some(head.task))?;
                    let kl = g.kl_divergence(&p, q, t)?;
                    total = Some(match total {
                        Some(s) => g.add(s, kl)?,
                        None => kl,
                    });
                }
            }
        }
        Ok(total.map(|k| g.scale(k, lambda)))
    }

    fn memory_gradient(&self, patterns: &[&StoredPattern], feat_dim: usize, step: usize) -> Result<Vec<f64>> {
        let groups = self.pattern_groups(patterns, feat_dim)?;
        Ok(self.evaluate(&groups, false, step)?.grad)
    }

    /// Trains on one step, then updates the strategy state.
    pub fn train_step(&mut self, step: &Step) -> Result<StepReport> {
        if step.train.is_empty() {
            return Err(Error::Protocol(format!("step {} has no training data", step.index)));
        }
        let started = Instant::now();
        let feat_dim = step.train.feat_dim;
        self.model.observe_classes(step.task_label, &step.train.classes())?;
        let task = self.model.head_task(step.task_label);
        self.optimizer.reset();
        let (max_epochs, target) = match self.train.epochs {
            EpochBudget::Fixed(n) => (n, None),
            EpochBudget::UntilAccuracy { target, max_epochs } => (max_epochs, Some(target)),
        };
        let mut order: Vec<usize> = (0..step.train.len()).collect();
        let mut epochs = 0;
        let mut running = 0.0;
        for _ in 0..max_epochs {
            order.shuffle(&mut self.data_rng);
            let mut correct = 0;
            for idx in order.chunks(self.train.minibatch) {
                correct += self.update(step, idx, task, feat_dim)?;
            }
            epochs += 1;
            running = correct as f64 / order.len() as f64;
            if target.is_some_and(|t| running >= t) {
                break;
            }
        }
        self.end_of_step(step, task)?;
        self.steps_done += 1;
        self.diagnostics.epochs.push(epochs);
        self.diagnostics.train_accuracy.push(running);
        Ok(StepReport {
            epochs,
            train_accuracy: running,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    fn update(&mut self, step: &Step, idx: &[usize], task: Option<usize>, feat_dim: usize) -> Result<usize> {
        let mut groups = vec![Group {
            batch: self.train_batch(&step.train, idx, step.index)?,
            task,
        }];
        if self.strategy.kind == StrategyKind::Replay && self.strategy.p > 0 {
            let extra: Vec<StoredPattern> = self
                .state
                .replay
                .sample(self.strategy.p, &mut self.memory_rng)
                .into_iter()
                .cloned()
                .collect();
            let refs: Vec<&StoredPattern> = extra.iter().collect();
            groups.extend(self.pattern_groups(&refs, feat_dim)?);
        }
        let ev = self.evaluate(&groups, true, self.steps_done)?;
        if !ev.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", step.index)));
        }
        let mut grad = ev.grad;
        match self.strategy.kind {
            StrategyKind::Gem if !self.state.memory.steps.is_empty() => {
                let mut refs = Vec::with_capacity(self.state.memory.steps.len());
                for past in &self.state.memory.steps {
                    let pats: Vec<&StoredPattern> = past.iter().collect();
                    if !pats.is_empty() {
                        refs.push(self.memory_gradient(&pats, feat_dim, self.steps_done)?);
                    }
                }
                let out = gem_project(&grad, &refs, self.strategy.gamma)?;
                if out.solution.is_some() {
                    self.diagnostics.gem_qp_solves += 1;
                }
                if out.fell_back() {
                    self.diagnostics.gem_fallbacks += 1;
                }
                grad = out.z;
            }
            StrategyKind::Agem if !self.state.memory.is_empty() => {
                let sample: Vec<StoredPattern> = self
                    .state
                    .memory
                    .sample_pooled(self.strategy.sample_size, &mut self.memory_rng)
                    .into_iter()
                    .cloned()
                    .collect();
                let refs: Vec<&StoredPattern> = sample.iter().collect();
                let g_ref = self.memory_gradient(&refs, feat_dim, self.steps_done)?;
                let (z, fired) = agem_project(&grad, &g_ref, self.strategy.agem_unconditional);
                if fired {
                    self.diagnostics.agem_projections += 1;
                }
                grad = z;
            }
            _ => {}
        }
        if let Some(c) = self.train.clip_norm {
            clip_flat_grad(&mut grad, c);
        }
        let mut theta = self.model.flat_params();
        self.optimizer.step(&mut theta, &grad);
        self.model.set_flat_params(&theta)?;
        self.diagnostics.updates += 1;
        Ok(ev.correct)
    }

    fn end_of_step(&mut self, step: &Step, task: Option<usize>) -> Result<()> {
        match self.strategy.kind {
            StrategyKind::Ewc => {
                let omega = ewc_importance(
                    &self.model,
                    &step.train,
                    task,
                    self.strategy.fisher,
                    self.train.minibatch,
                    self.strategy.mask_unseen,
                )?;
                self.state.omegas.push(ImportancePair {
                    omega,
                    anchor: self.model.flat_params(),
                });
            }
            StrategyKind::Mas => {
                let idx: Vec<usize> = (0..step.train.len()).collect();
                for chunk in idx.chunks(self.train.minibatch) {
                    let c = mas_contribution(&self.model, &step.train.batch(chunk), task)?;
                    self.state.mas.update(&c);
                }
                self.state.mas_anchor = self.model.flat_params();
            }
            StrategyKind::Lwf => self.state.frozen = Some(self.model.clone()),
            StrategyKind::Gem | StrategyKind::Agem => self.state.memory.store(
                &step.train,
                step.task_label,
                step.index,
                self.strategy.patterns_per_step,
                &mut self.memory_rng,
            ),
            StrategyKind::Replay => {
                self.state
                    .replay
                    .store(&step.train, step.task_label, step.index, &mut self.memory_rng)
            }
            StrategyKind::Naive | StrategyKind::Joint => {}
        }
        Ok(())
    }

    /// Predicted global class ids for `set`, evaluated as data from `step`.
    /// Task labels (and the step one-hot) are only used with multiple heads.
    pub fn predict(&self, set: &SequenceSet, step: &Step) -> Result<Vec<usize>> {
        let multi = self.model.config().head_mode == HeadMode::Multi;
        let task = self.model.head_task(step.task_label);
        let mut out = Vec::with_capacity(set.len());
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(self.train.eval_batch) {
            let hot = vec![multi.then_some(step.index); chunk.len()];
            let batch = self.with_task_vector(set.batch(chunk), &hot)?;
            out.extend(self.model.predict(&batch, task)?);
        }
        Ok(out)
    }

    /// Test accuracy on `step`.
    pub fn accuracy(&self, step: &Step) -> Result<f64> {
        if step.test.is_empty() {
            return Err(Error::Protocol(format!("step {} has no test data", step.index)));
        }
        let pred = self.predict(&step.test, step)?;
        let hits = pred.iter().zip(&step.test.labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / pred.len() as f64)
    }
}

/// The whole stream merged into one step, for the offline upper bound.
pub fn joint_step(scenario: &Scenario) -> Result<Step> {
    if scenario.kind.multi_task() {
        return Err(Error::Unsupported("joint training over multiple task labels".into()));
    }
    let first = scenario
        .steps
        .first()
        .ok_or_else(|| Error::Protocol("empty scenario".into()))?;
    let mut train = SequenceSet::new(first.train.feat_dim);
    let mut test = SequenceSet::new(first.test.feat_dim);
    for s in &scenario.steps {
        train.extend(&s.train)?;
        test.extend(&s.test)?;
    }
    let mut classes: Vec<usize> = scenario.classes().into_iter().collect();
    classes.sort_unstable();
    Ok(Step {
        index: 0,
        task_label: 0,
        train,
        test,
        classes_introduced: classes,
    })
}
