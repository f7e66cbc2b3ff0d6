//! Run configuration files and `--set` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqcl::models::{HeadMode, ModelKind};
use seqcl::protocol::{ExperimentPlan, GridSpec, ModelSpec, RunSpec};
use seqcl::strategies::{StrategyConfig, StrategyKind, TrainConfig};
use seqcl::streams::ClassOrder;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const DATA_ROOT_VAR: &str = "SEQCL_DATA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Smnist,
    Pmnist,
    Strokes,
    Featureseq,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Smnist => "smnist",
            Benchmark::Pmnist => "pmnist",
            Benchmark::Strokes => "strokes",
            Benchmark::Featureseq => "featureseq",
        }
    }

    fn is_mnist(self) -> bool {
        matches!(self, Benchmark::Smnist | Benchmark::Pmnist)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioChoice {
    ClassIncremental,
    DomainIncremental,
    TaskIncremental,
}

/// Where model selection happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// No validation stream; the grid must have one point.
    None,
    /// Validation classes held out from the assessment stream.
    Holdout,
    /// Selection and assessment on the same stream.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderSpec {
    Named(String),
    Seed(u64),
    List(Vec<usize>),
}

impl OrderSpec {
    pub fn resolve(&self) -> Result<ClassOrder, CliError> {
        match self {
            OrderSpec::Named(n) if n == "identity" => Ok(ClassOrder::Identity),
            OrderSpec::Named(n) => Err(CliError::Config(format!(
                "class_order: expected \"identity\", a seed or a list, got {n:?}"
            ))),
            OrderSpec::Seed(s) => Ok(ClassOrder::Seeded(*s)),
            OrderSpec::List(l) => Ok(ClassOrder::Explicit(l.clone())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Directory with the four MNIST IDX files.
    pub mnist: Option<PathBuf>,
    /// Stroke text file.
    pub strokes: Option<PathBuf>,
    /// Feature-sequence text file.
    pub featureseq: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub name: Option<String>,
    pub benchmark: Benchmark,
    /// Pixels per timestep on the MNIST benchmarks.
    pub chunk: usize,
    pub scenario: ScenarioChoice,
    pub classes_per_step: usize,
    /// Assessment steps; all that fit when unset.
    pub num_steps: Option<usize>,
    pub class_order: OrderSpec,
    /// Training patterns kept per class; all when unset.
    pub train_per_class: Option<usize>,
    /// Test patterns per class (held out of the file for text datasets).
    pub test_per_class: usize,
    pub selection: Selection,
    pub num_validation_steps: usize,
    pub seeds: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub online_regime: bool,
    pub allow_offline_projection: bool,
    pub evaluate_future: bool,
    pub data: DataPaths,
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub train: TrainConfig,
    pub grid: GridSpec,
    /// Extra labels copied onto every run record.
    pub tags: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            name: None,
            benchmark: Benchmark::Smnist,
            chunk: 28,
            scenario: ScenarioChoice::ClassIncremental,
            classes_per_step: 2,
            num_steps: None,
            class_order: OrderSpec::Named("identity".into()),
            train_per_class: None,
            test_per_class: 100,
            selection: Selection::None,
            num_validation_steps: 3,
            seeds: 5,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            online_regime: false,
            allow_offline_projection: false,
            evaluate_future: false,
            data: DataPaths::default(),
            model: ModelSpec::default(),
            strategy: StrategyConfig::default(),
            train: TrainConfig::default(),
            grid: GridSpec::default(),
            tags: BTreeMap::new(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key.path=value` to a parsed config table. Values are read as
/// TOML (numbers, booleans, arrays); anything else is a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {assignment:?}: expected key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set {assignment:?}: empty key segment")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {key}: {p} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Parses config text, applies overrides and checks every field.
pub fn load(text: &str, overrides: &[String], base_dir: &Path) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("config: {}", e.message())))?;
    cfg.resolve_paths(base_dir);
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Fills unset data paths from the data-root variable and anchors
    /// relative paths at `base_dir`.
    pub fn resolve_paths(&mut self, base_dir: &Path) {
        if let Ok(root) = std::env::var(DATA_ROOT_VAR) {
            let root = PathBuf::from(root);
            self.data.mnist.get_or_insert_with(|| root.join("mnist"));
            self.data.strokes.get_or_insert_with(|| root.join("strokes.txt"));
            self.data.featureseq.get_or_insert_with(|| root.join("featureseq.txt"));
        }
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        for p in [&mut self.data.mnist, &mut self.data.strokes, &mut self.data.featureseq]
            .into_iter()
            .flatten()
        {
            anchor(p);
        }
        anchor(&mut self.output_dir);
    }

    pub fn data_path(&self) -> (&'static str, Option<&PathBuf>) {
        match self.benchmark {
            Benchmark::Smnist | Benchmark::Pmnist => ("data.mnist", self.data.mnist.as_ref()),
            Benchmark::Strokes => ("data.strokes", self.data.strokes.as_ref()),
            Benchmark::Featureseq => ("data.featureseq", self.data.featureseq.as_ref()),
        }
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            model: self.model.clone(),
            strategy: self.strategy.clone(),
            train: self.train.clone(),
            evaluate_future: self.evaluate_future,
            allow_offline_projection: self.allow_offline_projection,
        }
    }

    pub fn plan(&self) -> ExperimentPlan {
        ExperimentPlan {
            base: self.run_spec(),
            grid: self.grid.clone(),
            num_validation_steps: self.num_validation_steps,
            num_seeds: self.seeds,
            seed: self.seed,
            online_regime: self.online_regime,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.version != CONFIG_VERSION {
            return bad("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version));
        }
        let (field, path) = self.data_path();
        match path {
            None => {
                return bad(
                    field,
                    format!("not set (use --set {field}=PATH or the {DATA_ROOT_VAR} variable)"),
                )
            }
            Some(p) if !p.exists() => return bad(field, format!("{} does not exist", p.display())),
            _ => {}
        }
        if self.benchmark.is_mnist() && (self.chunk == 0 || 784 % self.chunk != 0) {
            return bad("chunk", format!("{} does not divide 784", self.chunk));
        }
        if self.classes_per_step == 0 {
            return bad("classes_per_step", "must be positive".into());
        }
        if self.num_steps == Some(0) {
            return bad("num_steps", "must be positive".into());
        }
        if self.seeds == 0 {
            return bad("seeds", "must be positive".into());
        }
        if self.test_per_class == 0 {
            return bad("test_per_class", "must be positive".into());
        }
        self.class_order.resolve()?;
        match (self.benchmark, self.scenario) {
            (Benchmark::Pmnist, ScenarioChoice::DomainIncremental) => {}
            (Benchmark::Pmnist, s) => return bad("scenario", format!("pmnist is domain-incremental, not {s:?}")),
            (_, ScenarioChoice::DomainIncremental) if !self.benchmark.is_mnist() => {
                return bad("scenario", "domain-incremental streams need fixed-size inputs (pmnist)".into())
            }
            _ => {}
        }
        let multi = self.model.head_mode == HeadMode::Multi;
        if multi != (self.scenario == ScenarioChoice::TaskIncremental) {
            return bad(
                "model.head_mode",
                "multi-head models go with task-incremental scenarios and only with them".into(),
            );
        }
        if self.model.kind == ModelKind::Mlp && self.benchmark == Benchmark::Strokes {
            return bad("model.kind", "strokes have variable length; use the lstm".into());
        }
        if self.strategy.kind == StrategyKind::Joint && self.scenario == ScenarioChoice::TaskIncremental {
            return bad("strategy.kind", "joint training is single-task".into());
        }
        if self.selection == Selection::None && self.grid.points().len() > 1 {
            return bad("selection", "a grid with several points needs holdout or shared selection".into());
        }
        self.plan()
            .validate()
            .map_err(|e| CliError::Config(format!("plan: {e}")))?;
        for p in self.grid.points() {
            self.grid
                .apply(&p, &self.run_spec())
                .and_then(|s| s.validate())
                .map_err(|e| CliError::Config(format!("grid point {p}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
