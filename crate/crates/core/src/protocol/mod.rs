//! Experiment driver: model selection on a validation stream, assessment on
//! a held-out stream, multi-seed runs, resumable sweeps.

mod grid;
mod journal;

pub use grid::{GridPoint, GridSpec, GridValue};
pub use journal::Journal;

use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{acc_metric, AccuracyMatrix, RunKey, RunRecord};
use crate::models::{Classifier, HeadMode, ModelConfig, ModelKind};
use crate::strategies::{joint_step, Learner, StrategyConfig, StrategyKind, TrainConfig};
use crate::streams::{derive_seed, Scenario};

/// Model hyperparameters; input width and class count come from the scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub head_mode: HeadMode,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Lstm,
            hidden_size: 32,
            num_layers: 1,
            head_mode: HeadMode::Single,
        }
    }
}

/// Everything needed to train one model on one stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub train: TrainConfig,
    /// Also evaluate steps not yet trained on.
    pub evaluate_future: bool,
    /// Lets GEM and A-GEM run outside the online regime.
    pub allow_offline_projection: bool,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.train.validate()?;
        if self.model.hidden_size == 0 || self.model.num_layers == 0 {
            return Err(Error::Configuration(
                "model.hidden_size and model.num_layers must be positive".into(),
            ));
        }
        if self.strategy.kind.requires_online() && !self.train.is_online() && !self.allow_offline_projection {
            return Err(Error::Configuration(format!(
                "{} runs in the online regime (2 epochs, minibatch 10); set allow_offline_projection to override",
                self.strategy.kind.name()
            )));
        }
        Ok(())
    }

    fn task_vector_width(&self, scenario: &Scenario) -> usize {
        if self.strategy.kind == StrategyKind::Joint {
            0
        } else {
            self.strategy.task_vector_width(scenario.len())
        }
    }

    /// Concrete model configuration for `scenario`.
    pub fn model_config(&self, scenario: &Scenario) -> Result<ModelConfig> {
        let first = scenario
            .steps
            .first()
            .ok_or_else(|| Error::Protocol("empty scenario".into()))?;
        let width = first.train.feat_dim + self.task_vector_width(scenario);
        let input_size = match self.model.kind {
            ModelKind::Lstm => width,
            ModelKind::Mlp => {
                let mut len = None;
                for s in &scenario.steps {
                    for set in [&s.train, &s.test] {
                        if set.is_empty() {
                            continue;
                        }
                        let l = set.uniform_len().ok_or_else(|| {
                            Error::Unsupported("the MLP needs sequences of one fixed length".into())
                        })?;
                        if *len.get_or_insert(l) != l {
                            return Err(Error::Unsupported("the MLP needs sequences of one fixed length".into()));
                        }
                    }
                }
                width * len.ok_or_else(|| Error::Protocol("scenario has no data".into()))?
            }
        };
        let num_classes_total = scenario.classes().iter().max().map_or(0, |c| c + 1);
        let cfg = ModelConfig {
            kind: self.model.kind,
            input_size,
            hidden_size: self.model.hidden_size,
            num_layers: self.model.num_layers,
            head_mode: self.model.head_mode,
            num_classes_total,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Trainable parameter count on `scenario` (heads created up front count once).
    pub fn param_count(&self, scenario: &Scenario) -> Result<usize> {
        Ok(Classifier::new(self.model_config(scenario)?, 0)?.param_count())
    }
}

/// Trains `spec` through `scenario` with `seed` and records `R`.
/// Joint training fits the union once and yields a one-row matrix.
pub fn run_stream(spec: &RunSpec, scenario: &Scenario, seed: u64, key: RunKey) -> Result<RunRecord> {
    spec.validate()?;
    if scenario.is_empty() {
        return Err(Error::Protocol("empty scenario".into()));
    }
    let model = spec.model_config(scenario)?;
    let width = spec.task_vector_width(scenario);
    let mut learner = Learner::new(model, spec.strategy.clone(), spec.train.clone(), width, seed)?;
    let t = scenario.len();
    let mut step_seconds = Vec::new();
    let matrix = if spec.strategy.kind == StrategyKind::Joint {
        let joint = joint_step(scenario)?;
        step_seconds.push(learner.train_step(&joint)?.seconds);
        let mut r = AccuracyMatrix::new(1, t);
        for (j, step) in scenario.steps.iter().enumerate() {
            r.set(0, j, learner.accuracy(step)?)?;
        }
        r
    } else {
        let mut r = AccuracyMatrix::new(t, t);
        for (i, step) in scenario.steps.iter().enumerate() {
            let report = learner.train_step(step)?;
            step_seconds.push(report.seconds);
            let upto = if spec.evaluate_future { t } else { i + 1 };
            for (j, eval) in scenario.steps[..upto].iter().enumerate() {
                r.set(i, j, learner.accuracy(eval)?)?;
            }
            log::debug!(
                "{} step {i}: {} epochs, train acc {:.3}, test acc {:.3}",
                spec.strategy.kind.name(),
                report.epochs,
                report.train_accuracy,
                r.get(i, i).unwrap_or(f64::NAN)
            );
        }
        r
    };
    Ok(RunRecord {
        key,
        tags: Default::default(),
        config: serde_json::to_value(spec)?,
        seed,
        matrix,
        step_seconds,
        diagnostics: learner.diagnostics().clone(),
    })
}

/// Runs `work` on up to `jobs` threads, returning results in input order.
pub fn run_parallel<T, F>(jobs: usize, work: Vec<F>) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let n = work.len();
    if jobs <= 1 || n <= 1 {
        return work.into_iter().map(|f| f()).collect();
    }
    let slots: Vec<Mutex<Option<F>>> = work.into_iter().map(|f| Mutex::new(Some(f))).collect();
    let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                if i >= n {
                    break;
                }
                let f = slots[i].lock().expect("work slot").take().expect("taken once");
                let out = f();
                *results[i].lock().expect("result slot") = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

/// One scored grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub point: GridPoint,
    pub acc: f64,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub table: Vec<GridEntry>,
    pub best: usize,
}

impl GridResult {
    pub fn best_entry(&self) -> &GridEntry {
        &self.table[self.best]
    }
}

fn journal_id(prefix: &str, key: &RunKey, extra: &str, seed: u64) -> String {
    format!(
        "{prefix}|{}|{}|{}|{:?}|{}|{extra}|{seed}",
        key.benchmark, key.strategy, key.model, key.chunk, key.head_mode
    )
}

/// Index of the highest ACC; ties go to fewer parameters, then to the
/// smaller point, then to the earlier entry.
pub fn select_best(table: &[GridEntry]) -> Option<usize> {
    (0..table.len()).min_by(|&a, &b| {
        let (x, y) = (&table[a], &table[b]);
        y.acc
            .total_cmp(&x.acc)
            .then(x.param_count.cmp(&y.param_count))
            .then(x.point.cmp(&y.point))
            .then(a.cmp(&b))
    })
}

/// Trains every grid point on `validation` and picks the highest ACC.
/// Ties go to the smaller model, then to the earlier point in grid order.
pub fn grid_search(
    base: &RunSpec,
    grid: &GridSpec,
    validation: &Scenario,
    seed: u64,
    key: &RunKey,
    jobs: usize,
    journal: Option<&Journal>,
) -> Result<GridResult> {
    if validation.is_empty() {
        return Err(Error::Protocol("validation stream is empty".into()));
    }
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Configuration("grid has no points".into()));
    }
    let specs = points
        .iter()
        .map(|p| grid.apply(p, base))
        .collect::<Result<Vec<_>>>()?;
    for s in &specs {
        s.validate()?;
    }
    let work: Vec<_> = points
        .iter()
        .zip(&specs)
        .map(|(point, spec)| {
            let key = key.clone();
            move || -> Result<GridEntry> {
                let id = journal_id("validation", &key, &point.to_string(), seed);
                let param_count = spec.param_count(validation)?;
                if let Some(acc) = journal.and_then(|j| j.get::<f64>(&id)) {
                    return Ok(GridEntry {
                        point: point.clone(),
                        acc,
                        param_count,
                    });
                }
                let acc = acc_metric(&run_stream(spec, validation, seed, key)?.matrix)?;
                log::info!("validation {point}: ACC {acc:.4}");
                if let Some(j) = journal {
                    j.put(&id, &acc)?;
                }
                Ok(GridEntry {
                    point: point.clone(),
                    acc,
                    param_count,
                })
            }
        })
        .collect();
    let table = run_parallel(jobs, work).into_iter().collect::<Result<Vec<_>>>()?;
    let best = select_best(&table).expect("nonempty grid");
    Ok(GridResult { table, best })
}

/// Seed of assessment run `i`.
pub fn assessment_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, 1000 + i as u64)
}

/// `seeds` independent runs of `spec` on `assessment`.
pub fn run_assessment(
    spec: &RunSpec,
    assessment: &Scenario,
    seeds: &[u64],
    key: &RunKey,
    jobs: usize,
    journal: Option<&Journal>,
) -> Result<Vec<RunRecord>> {
    let spec_id = serde_json::to_string(spec)?;
    let work: Vec<_> = seeds
        .iter()
        .map(|&seed| {
            let key = key.clone();
            let spec_id = &spec_id;
            move || -> Result<RunRecord> {
                let id = journal_id("assessment", &key, spec_id, seed);
                if let Some(rec) = journal.and_then(|j| j.get::<RunRecord>(&id)) {
                    return Ok(rec);
                }
                let rec = run_stream(spec, assessment, seed, key)?;
                log::info!("assessment seed {seed}: ACC {:.4}", rec.acc()?);
                if let Some(j) = journal {
                    j.put(&id, &rec)?;
                }
                Ok(rec)
            }
        })
        .collect();
    run_parallel(jobs, work).into_iter().collect()
}

/// Grid search on the validation stream followed by multi-seed assessment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub base: RunSpec,
    pub grid: GridSpec,
    pub num_validation_steps: usize,
    pub num_seeds: usize,
    pub seed: u64,
    pub online_regime: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            base: RunSpec::default(),
            grid: GridSpec::default(),
            num_validation_steps: 3,
            num_seeds: 5,
            seed: 0,
            online_regime: false,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.online_regime && !self.base.train.is_online() {
            return Err(Error::Configuration(
                "online_regime requires train.epochs = 2 and train.minibatch = 10".into(),
            ));
        }
        if self.num_seeds == 0 {
            return Err(Error::Configuration("num_seeds must be positive".into()));
        }
        self.base.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds).map(|i| assessment_seed(self.seed, i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub selection: Option<GridResult>,
    pub chosen: RunSpec,
    pub records: Vec<RunRecord>,
}

/// Selects on `validation` when the grid has more than one point, then
/// assesses the chosen configuration on `assessment`.
pub fn execute_plan(
    plan: &ExperimentPlan,
    validation: Option<&Scenario>,
    assessment: &Scenario,
    key: &RunKey,
    jobs: usize,
    journal: Option<&Journal>,
) -> Result<PlanOutcome> {
    plan.validate()?;
    let points = plan.grid.points();
    let (selection, chosen) = if points.len() > 1 {
        let validation =
            validation.ok_or_else(|| Error::Configuration("a grid needs a validation stream".into()))?;
        let res = grid_search(&plan.base, &plan.grid, validation, plan.seed, key, jobs, journal)?;
        let chosen = plan.grid.apply(&res.best_entry().point, &plan.base)?;
        (Some(res), chosen)
    } else {
        let chosen = match points.first() {
            Some(p) => plan.grid.apply(p, &plan.base)?,
            None => plan.base.clone(),
        };
        (None, chosen)
    };
    let records = run_assessment(&chosen, assessment, &plan.seeds(), key, jobs, journal)?;
    Ok(PlanOutcome {
        selection,
        chosen,
        records,
    })
}
