//! Datasets, file formats and continual-learning scenario construction.

pub mod featseq;
pub mod idx;
pub mod strokes;
pub mod synth;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SequenceSet;
use crate::error::{Error, Result};

pub use featseq::{read_feature_sequences, write_feature_sequences};
pub use idx::read_idx;
pub use strokes::{read_strokes, write_strokes};
pub use synth::{synth_sequences, template_classify, SynthKind};

pub const MANIFEST_VERSION: u32 = 1;

/// SplitMix64 finalizer over `seed ^ tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded permutation of `0..n`; seed 0 is the identity.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if seed != 0 {
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    p
}

/// `out[i] = values[perm[i]]`.
pub fn permute(values: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&j| values[j]).collect()
}

fn permute_set(set: &SequenceSet, perm: &[usize]) -> SequenceSet {
    SequenceSet {
        feat_dim: set.feat_dim,
        sequences: set.sequences.iter().map(|s| permute(s, perm)).collect(),
        labels: set.labels.clone(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: SequenceSet,
    pub test: SequenceSet,
}

impl Dataset {
    /// Loads the four MNIST IDX files (plain or `.gz`) from `dir`.
    pub fn mnist(dir: &Path) -> Result<Dataset> {
        let find = |stem: &str| {
            let plain = dir.join(stem);
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() && !plain.exists() {
                gz
            } else {
                plain
            }
        };
        Ok(Dataset {
            name: "mnist".into(),
            train: read_idx(&find("train-images-idx3-ubyte"), &find("train-labels-idx1-ubyte"))?,
            test: read_idx(&find("t10k-images-idx3-ubyte"), &find("t10k-labels-idx1-ubyte"))?,
        })
    }

    /// Splits one labeled set into train/test, `test_per_class` patterns of
    /// each class going to test, in original order.
    pub fn from_set(name: &str, set: &SequenceSet, test_per_class: usize) -> Dataset {
        let mut taken = std::collections::HashMap::new();
        let (mut tr, mut te) = (Vec::new(), Vec::new());
        for (i, &l) in set.labels.iter().enumerate() {
            let n = taken.entry(l).or_insert(0usize);
            if *n < test_per_class {
                te.push(i);
                *n += 1;
            } else {
                tr.push(i);
            }
        }
        Dataset {
            name: name.into(),
            train: set.subset(&tr),
            test: set.subset(&te),
        }
    }

    /// Keeps the first `train` / `test` patterns of every class.
    pub fn take_per_class(&self, train: usize, test: usize) -> Dataset {
        let take = |set: &SequenceSet, k: usize| {
            let mut count = std::collections::HashMap::new();
            let idx: Vec<usize> = (0..set.len())
                .filter(|&i| {
                    let n = count.entry(set.labels[i]).or_insert(0usize);
                    *n += 1;
                    *n <= k
                })
                .collect();
            set.subset(&idx)
        };
        Dataset {
            name: self.name.clone(),
            train: take(&self.train, train),
            test: take(&self.test, test),
        }
    }

    /// Regroups every sequence into timesteps of `feat_dim` values.
    pub fn rechunk(&self, feat_dim: usize) -> Result<Dataset> {
        Ok(Dataset {
            name: self.name.clone(),
            train: self.train.rechunk(feat_dim)?,
            test: self.test.rechunk(feat_dim)?,
        })
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: BTreeSet<usize> = self.train.classes().into_iter().collect();
        c.extend(self.test.classes());
        c.into_iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "SIT+NC")]
    ClassIncremental,
    #[serde(rename = "SIT+NI")]
    DomainIncremental,
    #[serde(rename = "MT+NC")]
    TaskIncremental,
}

impl ScenarioKind {
    pub fn multi_task(self) -> bool {
        self == ScenarioKind::TaskIncremental
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassOrder {
    Identity,
    Seeded(u64),
    Explicit(Vec<usize>),
}

impl ClassOrder {
    fn resolve(&self, classes: &[usize]) -> Result<Vec<usize>> {
        match self {
            ClassOrder::Identity => Ok(classes.to_vec()),
            ClassOrder::Seeded(seed) => Ok(seeded_permutation(classes.len(), *seed)
                .into_iter()
                .map(|i| classes[i])
                .collect()),
            ClassOrder::Explicit(order) => {
                let distinct: BTreeSet<_> = order.iter().collect();
                if distinct.len() != order.len() {
                    return Err(Error::Configuration("explicit class order repeats a class".into()));
                }
                if let Some(c) = order.iter().find(|c| !classes.contains(c)) {
                    return Err(Error::Configuration(format!("class {c} is not in the dataset")));
                }
                Ok(order.clone())
            }
        }
    }

    fn seed(&self) -> u64 {
        match self {
            ClassOrder::Seeded(s) => *s,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub task_label: usize,
    pub train: SequenceSet,
    pub test: SequenceSet,
    pub classes_introduced: Vec<usize>,
}

/// Everything needed to rebuild a scenario from its raw dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scenario_kind: ScenarioKind,
    pub seed: u64,
    pub source: String,
    pub class_order: Vec<usize>,
    pub step_classes: Vec<Vec<usize>>,
    /// Per-step input permutation; `None` is the identity.
    pub step_permutations: Vec<Option<Vec<usize>>>,
    /// Permutation shared by every step, applied after the per-step one.
    pub input_permutation: Option<Vec<usize>>,
    pub train_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
}

impl Manifest {
    pub fn classes(&self) -> BTreeSet<usize> {
        self.step_classes.iter().flatten().copied().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Configuration(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub manifest: Manifest,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Every class that appears anywhere in the stream.
    pub fn classes(&self) -> BTreeSet<usize> {
        self.manifest.classes()
    }

    /// Same data with task label `i` on step `i`.
    pub fn into_task_incremental(mut self) -> Result<Scenario> {
        if self.kind != ScenarioKind::ClassIncremental {
            return Err(Error::Configuration("multi-task relabeling needs a class-incremental stream".into()));
        }
        for s in &mut self.steps {
            s.task_label = s.index;
        }
        self.kind = ScenarioKind::TaskIncremental;
        self.manifest.scenario_kind = ScenarioKind::TaskIncremental;
        Ok(self)
    }

    /// Rebuilds a scenario from its manifest and raw data.
    pub fn from_manifest(dataset: &Dataset, manifest: &Manifest) -> Result<Scenario> {
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Configuration(format!("unsupported manifest version {}", manifest.version)));
        }
        if manifest.source != dataset.name {
            return Err(Error::Configuration(format!(
                "manifest built from {:?}, got dataset {:?}",
                manifest.source, dataset.name
            )));
        }
        if manifest.step_permutations.len() != manifest.step_classes.len() {
            return Err(Error::Configuration("manifest permutation list does not match steps".into()));
        }
        let mut seen = BTreeSet::new();
        let mut steps = Vec::with_capacity(manifest.step_classes.len());
        for (i, (classes, perm)) in manifest.step_classes.iter().zip(&manifest.step_permutations).enumerate() {
            let mut train = dataset.train.filter_classes(classes);
            let mut test = dataset.test.filter_classes(classes);
            for p in perm.iter().chain(&manifest.input_permutation) {
                check_perm(&train, p)?;
                check_perm(&test, p)?;
                train = permute_set(&train, p);
                test = permute_set(&test, p);
            }
            let introduced: Vec<usize> = classes.iter().copied().filter(|c| seen.insert(*c)).collect();
            let mut introduced = introduced;
            introduced.sort_unstable();
            steps.push(Step {
                index: i,
                task_label: if manifest.scenario_kind.multi_task() { i } else { 0 },
                train,
                test,
                classes_introduced: introduced,
            });
        }
        let sizes = |f: fn(&Step) -> usize| steps.iter().map(f).collect::<Vec<_>>();
        if sizes(|s| s.train.len()) != manifest.train_sizes || sizes(|s| s.test.len()) != manifest.test_sizes {
            return Err(Error::Configuration("dataset does not match manifest split sizes".into()));
        }
        Ok(Scenario {
            kind: manifest.scenario_kind,
            seed: manifest.seed,
            steps,
            manifest: manifest.clone(),
        })
    }
}

fn check_perm(set: &SequenceSet, perm: &[usize]) -> Result<()> {
    match set.sequences.iter().find(|s| s.len() != perm.len()) {
        Some(s) => Err(Error::Configuration(format!(
            "permutation over {} inputs applied to a sequence of {} values",
            perm.len(),
            s.len()
        ))),
        None => Ok(()),
    }
}

fn manifest_sizes(dataset: &Dataset, step_classes: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let count = |set: &SequenceSet, cs: &[usize]| set.labels.iter().filter(|l| cs.contains(l)).count();
    (
        step_classes.iter().map(|c| count(&dataset.train, c)).collect(),
        step_classes.iter().map(|c| count(&dataset.test, c)).collect(),
    )
}

fn nc_manifest(dataset: &Dataset, order: Vec<usize>, seed: u64, cps: usize, steps: usize) -> Manifest {
    let step_classes: Vec<Vec<usize>> = order[..cps * steps].chunks(cps).map(<[usize]>::to_vec).collect();
    let (train_sizes, test_sizes) = manifest_sizes(dataset, &step_classes);
    Manifest {
        version: MANIFEST_VERSION,
        scenario_kind: ScenarioKind::ClassIncremental,
        seed,
        source: dataset.name.clone(),
        class_order: order,
        step_permutations: vec![None; step_classes.len()],
        step_classes,
        input_permutation: None,
        train_sizes,
        test_sizes,
    }
}

/// Class-incremental stream: `num_steps` steps of `classes_per_step`
/// classes each, taken in `class_order`. Targets stay global class ids.
pub fn build_class_incremental(
    dataset: &Dataset,
    classes_per_step: usize,
    num_steps: usize,
    class_order: &ClassOrder,
) -> Result<Scenario> {
    let classes = dataset.classes();
    let order = class_order.resolve(&classes)?;
    if classes_per_step == 0 || classes_per_step * num_steps > order.len() {
        return Err(Error::Configuration(format!(
            "{num_steps} steps × {classes_per_step} classes needs more than the {} available classes",
            order.len()
        )));
    }
    let manifest = nc_manifest(dataset, order, class_order.seed(), classes_per_step, num_steps);
    Scenario::from_manifest(dataset, &manifest)
}

/// Domain-incremental stream: every step holds all classes under its own
/// seeded input permutation; the first step is unpermuted.
pub fn build_domain_incremental(dataset: &Dataset, num_steps: usize, seed: u64) -> Result<Scenario> {
    if num_steps == 0 {
        return Err(Error::Configuration("num_steps must be at least 1".into()));
    }
    let width = dataset
        .train
        .uniform_len()
        .map(|l| l * dataset.train.feat_dim)
        .ok_or_else(|| Error::Configuration("permuted streams need equally sized inputs".into()))?;
    let classes = dataset.classes();
    let step_permutations: Vec<Option<Vec<usize>>> = (0..num_steps)
        .map(|k| (k > 0).then(|| seeded_permutation(width, derive_seed(seed, k as u64).max(1))))
        .collect();
    let step_classes = vec![classes.clone(); num_steps];
    let (train_sizes, test_sizes) = manifest_sizes(dataset, &step_classes);
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        scenario_kind: ScenarioKind::DomainIncremental,
        seed,
        source: dataset.name.clone(),
        class_order: classes,
        step_classes,
        step_permutations,
        input_permutation: None,
        train_sizes,
        test_sizes,
    };
    Scenario::from_manifest(dataset, &manifest)
}

/// Applies one seeded input permutation to every step (seed 0: identity).
pub fn apply_fixed_permutation(scenario: &Scenario, seed: u64) -> Result<Scenario> {
    let mut widths = scenario
        .steps
        .iter()
        .flat_map(|s| s.train.sequences.iter().chain(&s.test.sequences))
        .map(Vec::len);
    let Some(width) = widths.next() else {
        return Ok(scenario.clone());
    };
    if widths.any(|w| w != width) {
        return Err(Error::Configuration("fixed permutation needs equally sized inputs".into()));
    }
    let perm = seeded_permutation(width, seed);
    let mut out = scenario.clone();
    for s in &mut out.steps {
        s.train = permute_set(&s.train, &perm);
        s.test = permute_set(&s.test, &perm);
    }
    out.manifest.input_permutation = Some(match &scenario.manifest.input_permutation {
        Some(prev) => perm.iter().map(|&j| prev[j]).collect(),
        None => perm,
    });
    Ok(out)
}

/// Splits a class order into a validation stream over the first
/// `num_validation_steps` steps' classes and an assessment stream over the
/// remaining classes (at most `max_assessment_steps` steps). With `shared`
/// both streams are the same full stream.
pub fn holdout_split(
    dataset: &Dataset,
    classes_per_step: usize,
    num_validation_steps: usize,
    max_assessment_steps: Option<usize>,
    class_order: &ClassOrder,
    shared: bool,
) -> Result<(Scenario, Scenario)> {
    let classes = dataset.classes();
    let order = class_order.resolve(&classes)?;
    if classes_per_step == 0 {
        return Err(Error::Configuration("classes_per_step must be positive".into()));
    }
    let seed = class_order.seed();
    if shared {
        let steps = (order.len() / classes_per_step).min(max_assessment_steps.unwrap_or(usize::MAX));
        let full = Scenario::from_manifest(dataset, &nc_manifest(dataset, order, seed, classes_per_step, steps))?;
        return Ok((full.clone(), full));
    }
    let held = classes_per_step * num_validation_steps;
    let available = order.len().saturating_sub(held) / classes_per_step;
    let assess_steps = available.min(max_assessment_steps.unwrap_or(usize::MAX));
    if held > order.len() || assess_steps == 0 {
        return Err(Error::Configuration(format!(
            "{} classes cannot fill {num_validation_steps} validation steps and an assessment stream of {classes_per_step} classes per step",
            order.len()
        )));
    }
    let validation = Scenario::from_manifest(
        dataset,
        &nc_manifest(dataset, order[..held].to_vec(), seed, classes_per_step, num_validation_steps),
    )?;
    let assessment = Scenario::from_manifest(
        dataset,
        &nc_manifest(dataset, order[held..].to_vec(), seed, classes_per_step, assess_steps),
    )?;
    Ok((validation, assessment))
}

/// Fails when a class appears in both streams.
pub fn assert_no_leakage(validation: &Scenario, assessment: &Scenario) -> Result<()> {
    let shared: Vec<usize> = validation.classes().intersection(&assessment.classes()).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Protocol(format!("classes {shared:?} leak between validation and assessment")))
    }
}
