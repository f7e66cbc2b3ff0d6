//! `make-data`: synthetic datasets in the stroke and feature-sequence text
//! formats, each with a JSON manifest next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqcl::streams::{synth_sequences, write_feature_sequences, write_strokes, SynthKind};

use crate::{io_err, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Strokes,
    Featureseq,
}

impl DataKind {
    pub fn synth_kind(self) -> SynthKind {
        match self {
            DataKind::Strokes => SynthKind::Stroke,
            DataKind::Featureseq => SynthKind::Spectrogram,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub kind: DataKind,
    pub generator: SynthKind,
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub sequences: usize,
    pub feat_dim: usize,
    pub file: String,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Writes the dataset to `out` and its manifest to `<out>.manifest.json`.
pub fn make_data(kind: DataKind, out: &Path, seed: u64, classes: usize, per_class: usize) -> Result<DataManifest, CliError> {
    if per_class == 0 {
        return Err(CliError::Config("per-class: must be positive".into()));
    }
    let set = synth_sequences(kind.synth_kind(), classes, per_class, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    match kind {
        DataKind::Strokes => write_strokes(out, &set)?,
        DataKind::Featureseq => write_feature_sequences(out, &set)?,
    }
    let manifest = DataManifest {
        kind,
        generator: kind.synth_kind(),
        seed,
        classes,
        per_class,
        sequences: set.len(),
        feat_dim: set.feat_dim,
        file: out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let mpath = manifest_path(out);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|e| io_err(&mpath, e))?;
    Ok(manifest)
}
