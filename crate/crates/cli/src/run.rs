//! `run`: build the streams of a config, execute its plan and persist every
//! artifact under a fresh timestamped directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use seqcl::evaluation::{emit_report, RunKey, RunRecord};
use seqcl::models::{HeadMode, ModelKind};
use seqcl::protocol::{execute_plan, GridResult, Journal, RunSpec};
use seqcl::strategies::StrategyKind;
use seqcl::streams::{
    assert_no_leakage, build_class_incremental, build_domain_incremental, derive_seed, holdout_split,
    read_feature_sequences, read_strokes, Dataset, Scenario,
};

use crate::config::{self, Benchmark, RunConfig, ScenarioChoice, Selection};
use crate::{io_err, CliError};

pub const CONFIG_FILE: &str = "config.toml";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const SELECTION_FILE: &str = "selection.json";
pub const RECORDS_DIR: &str = "records";
pub const ASSESSMENT_MANIFEST: &str = "assessment.manifest.json";
pub const VALIDATION_MANIFEST: &str = "validation.manifest.json";
pub const LATEST_FILE: &str = "latest";

const VALIDATION_PERMUTATION_TAG: u64 = 0x7a11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub selection: Option<GridResult>,
    pub chosen: RunSpec,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let (_, path) = cfg.data_path();
    let path = path.ok_or_else(|| CliError::Config("data path unset".into()))?;
    let ds = match cfg.benchmark {
        Benchmark::Smnist | Benchmark::Pmnist => Dataset::mnist(path)?
            .take_per_class(cfg.train_per_class.unwrap_or(usize::MAX), cfg.test_per_class)
            .rechunk(cfg.chunk)?,
        Benchmark::Strokes => Dataset::from_set("strokes", &read_strokes(path)?, cfg.test_per_class)
            .take_per_class(cfg.train_per_class.unwrap_or(usize::MAX), usize::MAX),
        Benchmark::Featureseq => {
            Dataset::from_set("featureseq", &read_feature_sequences(path)?, cfg.test_per_class)
                .take_per_class(cfg.train_per_class.unwrap_or(usize::MAX), usize::MAX)
        }
    };
    Ok(ds)
}

/// Validation stream (if selection needs one) and assessment stream.
pub fn build_streams(cfg: &RunConfig, ds: &Dataset) -> Result<(Option<Scenario>, Scenario), CliError> {
    if cfg.scenario == ScenarioChoice::DomainIncremental {
        let assessment = build_domain_incremental(ds, cfg.num_steps.unwrap_or(5), cfg.seed)?;
        let validation = match cfg.selection {
            Selection::None => None,
            Selection::Shared => Some(assessment.clone()),
            Selection::Holdout => Some(build_domain_incremental(
                ds,
                cfg.num_validation_steps,
                derive_seed(cfg.seed, VALIDATION_PERMUTATION_TAG),
            )?),
        };
        return Ok((validation, assessment));
    }
    let order = cfg.class_order.resolve()?;
    let cps = cfg.classes_per_step;
    let (validation, assessment) = match cfg.selection {
        Selection::None => {
            let steps = cfg.num_steps.unwrap_or(ds.classes().len() / cps);
            (None, build_class_incremental(ds, cps, steps, &order)?)
        }
        Selection::Holdout => {
            let (v, a) = holdout_split(ds, cps, cfg.num_validation_steps, cfg.num_steps, &order, false)?;
            assert_no_leakage(&v, &a)?;
            (Some(v), a)
        }
        Selection::Shared => {
            let (v, a) = holdout_split(ds, cps, cfg.num_validation_steps, cfg.num_steps, &order, true)?;
            (Some(v), a)
        }
    };
    if cfg.scenario == ScenarioChoice::TaskIncremental {
        let validation = validation.map(Scenario::into_task_incremental).transpose()?;
        return Ok((validation, assessment.into_task_incremental()?));
    }
    Ok((validation, assessment))
}

pub fn run_key(cfg: &RunConfig) -> RunKey {
    let mnist = matches!(cfg.benchmark, Benchmark::Smnist | Benchmark::Pmnist);
    RunKey {
        benchmark: cfg.benchmark.name().into(),
        strategy: cfg.strategy.kind.name().into(),
        model: match cfg.model.kind {
            ModelKind::Mlp => "mlp".into(),
            ModelKind::Lstm => "lstm".into(),
        },
        chunk: (mnist && cfg.model.kind == ModelKind::Lstm).then_some(cfg.chunk),
        head_mode: match cfg.model.head_mode {
            HeadMode::Single => "single".into(),
            HeadMode::Multi => "multi".into(),
        },
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn fresh_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let label = cfg.name.clone().unwrap_or_else(|| {
        let k = run_key(cfg);
        format!("{}-{}-{}", k.benchmark, k.strategy, k.model)
    });
    let base = format!("{stamp}-{label}");
    let mut dir = cfg.output_dir.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = cfg.output_dir.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

/// Starts a new run of `cfg`; returns the run directory.
pub fn start(cfg: &RunConfig, jobs: usize) -> Result<PathBuf, CliError> {
    let dir = fresh_dir(cfg)?;
    write(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let latest = cfg.output_dir.join(LATEST_FILE);
    write(&latest, &format!("{}\n", dir.display()))?;
    info!("run directory {}", dir.display());
    execute(&dir, cfg, jobs)?;
    Ok(dir)
}

/// Continues the run owning `journal`, skipping every finished unit.
pub fn resume(journal: &Path, jobs: usize) -> Result<PathBuf, CliError> {
    let dir = journal
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path)
        .map_err(|e| CliError::Config(format!("--resume: cannot read {}: {e}", cfg_path.display())))?;
    let cfg = config::load(&text, &[], &dir)?;
    info!("resuming {}", dir.display());
    execute(&dir, &cfg, jobs)?;
    Ok(dir)
}

fn execute(dir: &Path, cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let (validation, assessment) = build_streams(cfg, &ds)?;
    write(&dir.join(ASSESSMENT_MANIFEST), &assessment.manifest.to_json())?;
    if let Some(v) = &validation {
        write(&dir.join(VALIDATION_MANIFEST), &v.manifest.to_json())?;
    }
    info!(
        "{} assessment steps, classes {:?}",
        assessment.len(),
        assessment.classes()
    );
    let journal = Journal::open(&dir.join(JOURNAL_FILE))?;
    let key = run_key(cfg);
    let outcome = execute_plan(&cfg.plan(), validation.as_ref(), &assessment, &key, jobs.max(1), Some(&journal))?;
    if let Some(sel) = &outcome.selection {
        info!("selected {} (validation ACC {:.4})", sel.best_entry().point, sel.best_entry().acc);
    }
    let selection = SelectionFile {
        selection: outcome.selection,
        chosen: outcome.chosen,
    };
    write(
        &dir.join(SELECTION_FILE),
        &(serde_json::to_string_pretty(&selection).expect("selection serializes") + "\n"),
    )?;
    let records_dir = dir.join(RECORDS_DIR);
    fs::create_dir_all(&records_dir).map_err(|e| io_err(&records_dir, e))?;
    let mut records = outcome.records;
    for (i, r) in records.iter_mut().enumerate() {
        r.tags.extend(cfg.tags.clone());
        if selection.chosen.strategy.kind == StrategyKind::Replay {
            r.tags.insert("p".into(), selection.chosen.strategy.p.to_string());
        }
        write(&records_dir.join(format!("{i:03}-seed-{}.json", r.seed)), &(r.to_json() + "\n"))?;
        info!("seed {}: ACC {:.4}", r.seed, r.acc()?);
    }
    emit_report(&records, dir)?;
    Ok(())
}

/// Reads every record of a run directory, in file-name order.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, CliError> {
    let rdir = dir.join(RECORDS_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&rdir)
        .map_err(|e| io_err(&rdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            RunRecord::from_json(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
        })
        .collect()
}
