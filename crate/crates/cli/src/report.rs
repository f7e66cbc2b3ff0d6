//! `report` and `verify`: cross-run aggregation and artifact checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use seqcl::evaluation::{emit_report, mean_std, parse_summary, RunRecord};
use seqcl::streams::Manifest;

use crate::config::{RunConfig, Selection};
use crate::run::{
    load_records, ASSESSMENT_MANIFEST, CONFIG_FILE, JOURNAL_FILE, SELECTION_FILE, VALIDATION_MANIFEST,
};
use crate::{io_err, CliError};

/// Aggregates the records of several run directories into `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("report: no run directories given".into()));
    }
    let mut records = Vec::new();
    let mut by_benchmark: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for d in run_dirs {
        let recs = load_records(d)?;
        if recs.is_empty() {
            return Err(CliError::Runtime(format!("{}: no run records", d.display())));
        }
        for b in recs.iter().map(|r| r.key.benchmark.clone()).collect::<BTreeSet<_>>() {
            by_benchmark.entry(b).or_default().push(d.display().to_string());
        }
        records.extend(recs);
    }
    if by_benchmark.len() > 1 {
        let listing: Vec<String> = by_benchmark
            .iter()
            .map(|(b, dirs)| format!("{b}: {}", dirs.join(", ")))
            .collect();
        return Err(CliError::Runtime(format!(
            "cannot aggregate runs of different benchmarks ({})",
            listing.join("; ")
        )));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    Ok(emit_report(&records, out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, result: Result<String, String>) -> Check {
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn check_records(records: &[RunRecord], cfg: Option<&RunConfig>, assessment: Option<&Manifest>) -> Result<String, String> {
    if records.is_empty() {
        return Err("no records".into());
    }
    let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    if seeds.len() != records.len() {
        return Err("repeated seeds".into());
    }
    if let Some(cfg) = cfg {
        if records.len() != cfg.seeds {
            return Err(format!("{} records for {} seeds", records.len(), cfg.seeds));
        }
    }
    for r in records {
        let m = &r.matrix;
        let cells: Vec<f64> = m.rows().iter().flatten().flatten().copied().collect();
        if cells.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(format!("seed {}: accuracy outside [0, 1]", r.seed));
        }
        if let Some(man) = assessment {
            let steps = man.step_classes.len();
            let square = m.trained() == steps;
            if m.evaluated() != steps || !(square || m.trained() == 1) {
                return Err(format!(
                    "seed {}: {}x{} matrix for {steps} steps",
                    r.seed,
                    m.trained(),
                    m.evaluated()
                ));
            }
        }
        for (i, row) in m.rows().iter().enumerate() {
            let trained_through = if m.trained() == 1 { m.evaluated() - 1 } else { i };
            if row.iter().take(trained_through + 1).any(Option::is_none) {
                return Err(format!("seed {}: row {i} misses a trained step", r.seed));
            }
        }
        r.acc().map_err(|e| format!("seed {}: {e}", r.seed))?;
    }
    Ok(format!("{} records", records.len()))
}

fn check_summary(dir: &Path, records: &[RunRecord]) -> Result<String, String> {
    let path = dir.join("summary.csv");
    let rows = parse_summary(&read(&path)?, &path).map_err(|e| e.to_string())?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        let tags: Vec<String> = r.tags.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let id = format!("{:?}|{}", r.key, tags.join(";"));
        groups.entry(id).or_default().push(r.acc().map_err(|e| e.to_string())?);
    }
    if rows.len() != groups.len() {
        return Err(format!("{} summary rows for {} groups", rows.len(), groups.len()));
    }
    for row in &rows {
        let id = format!("{:?}|{}", row.key, row.tags);
        let accs = groups.get(&id).ok_or_else(|| format!("summary row {id} has no records"))?;
        let (mean, std) = mean_std(accs);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * b.abs().max(1e-3);
        if row.n_runs != accs.len() || !close(row.acc_mean, mean) || !close(row.acc_std, std) {
            return Err(format!("summary row {id} disagrees with its records"));
        }
    }
    Ok(format!("{} rows", rows.len()))
}

fn check_journal(dir: &Path) -> Result<String, String> {
    let path = dir.join(JOURNAL_FILE);
    let text = read(&path)?;
    let mut seen = BTreeSet::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("bad journal line: {e}"))?;
        let id = v["id"].as_str().ok_or("journal line without id")?.to_string();
        if !seen.insert(id.clone()) {
            return Err(format!("unit {id} recorded twice"));
        }
    }
    Ok(format!("{} units", seen.len()))
}

/// Checks the artifacts of one run directory.
pub fn verify(dir: &Path) -> Vec<Check> {
    let mut out = Vec::new();
    let cfg: Result<RunConfig, String> =
        read(&dir.join(CONFIG_FILE)).and_then(|t| toml::from_str(&t).map_err(|e| e.to_string()));
    out.push(check("config snapshot", cfg.as_ref().map(|_| "parses".to_string()).map_err(Clone::clone)));
    let cfg = cfg.ok();
    let manifest = |name: &str| read(&dir.join(name)).and_then(|t| Manifest::from_json(&t).map_err(|e| e.to_string()));
    let assessment = manifest(ASSESSMENT_MANIFEST);
    out.push(check(
        "assessment manifest",
        assessment.as_ref().map(|m| format!("{} steps", m.step_classes.len())).map_err(Clone::clone),
    ));
    let assessment = assessment.ok();
    let holdout = cfg.as_ref().is_some_and(|c| c.selection == Selection::Holdout);
    if dir.join(VALIDATION_MANIFEST).exists() || holdout {
        let leak = manifest(VALIDATION_MANIFEST).and_then(|v| {
            let a = assessment.as_ref().ok_or("no assessment manifest")?;
            let shared: Vec<usize> = v.classes().intersection(&a.classes()).copied().collect();
            let nc = v.scenario_kind != seqcl::streams::ScenarioKind::DomainIncremental;
            if holdout && nc && !shared.is_empty() {
                Err(format!("classes {shared:?} in both streams"))
            } else {
                Ok(format!("{} validation classes", v.classes().len()))
            }
        });
        out.push(check("no leakage", leak));
    }
    let records = load_records(dir).map_err(|e| e.to_string());
    out.push(check(
        "run records",
        records
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|r| check_records(r, cfg.as_ref(), assessment.as_ref())),
    ));
    if let Ok(records) = &records {
        out.push(check("summary", check_summary(dir, records)));
    }
    out.push(check(
        "selection",
        read(&dir.join(SELECTION_FILE)).and_then(|t| {
            serde_json::from_str::<crate::run::SelectionFile>(&t)
                .map(|s| s.selection.map_or("single point".into(), |g| format!("best {}", g.best_entry().point)))
                .map_err(|e| e.to_string())
        }),
    ));
    out.push(check("journal", check_journal(dir)));
    out
}
