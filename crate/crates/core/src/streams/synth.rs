//! Synthetic stand-ins for spoken-command spectrograms and pen strokes.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::data::SequenceSet;
use crate::error::{Error, Result};

pub const SPECTRO_LEN: usize = 101;
pub const SPECTRO_BINS: usize = 40;
pub const STROKE_MIN_LEN: usize = 8;
pub const STROKE_MAX_LEN: usize = 211;

const SPECTRO_NOISE: f64 = 0.6;
const STROKE_NOISE: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    #[serde(rename = "spectrogram-like")]
    Spectrogram,
    #[serde(rename = "stroke-like")]
    Stroke,
}

#[derive(Clone, Debug)]
struct Band {
    amp: f64,
    center: f64,
    swing: f64,
    freq: f64,
    phase: f64,
    width: f64,
    onset: f64,
    offset: f64,
}

#[derive(Clone, Debug)]
struct Shape {
    harmonics: Vec<(f64, f64)>,
    start: f64,
    span: f64,
    aspect: f64,
    breaks: Vec<f64>,
}

impl Shape {
    fn point(&self, u: f64) -> (f64, f64) {
        let th = self.start + self.span * u;
        let r = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(k, &(a, ph))| a * ((k + 2) as f64 * th + ph).cos())
                .sum::<f64>();
        (self.aspect * r * th.cos(), r * th.sin())
    }
}

fn bands(num_classes: usize, seed: u64) -> Vec<Vec<Band>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5bec));
    (0..num_classes)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let onset = rng.random_range(0.0..0.4);
                    Band {
                        amp: rng.random_range(0.6..1.4),
                        center: rng.random_range(3.0..37.0),
                        swing: rng.random_range(0.0..8.0),
                        freq: rng.random_range(0.3..2.5),
                        phase: rng.random_range(0.0..TAU),
                        width: rng.random_range(1.0..3.5),
                        onset,
                        offset: rng.random_range(onset + 0.3..1.0),
                    }
                })
                .collect()
        })
        .collect()
}

fn spectro_template(bands: &[Band]) -> Vec<f64> {
    let mut out = vec![0.0; SPECTRO_LEN * SPECTRO_BINS];
    for t in 0..SPECTRO_LEN {
        let u = t as f64 / (SPECTRO_LEN - 1) as f64;
        for b in bands {
            let env = (((u - b.onset) / 0.05).tanh().max(0.0)) * (((b.offset - u) / 0.05).tanh().max(0.0));
            if env == 0.0 {
                continue;
            }
            let mu = b.center + b.swing * (TAU * b.freq * u + b.phase).sin();
            for f in 0..SPECTRO_BINS {
                let z = (f as f64 - mu) / b.width;
                out[t * SPECTRO_BINS + f] += b.amp * env * (-0.5 * z * z).exp();
            }
        }
    }
    out
}

fn shapes(num_classes: usize, seed: u64) -> Vec<Shape> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x57c0));
    (0..num_classes)
        .map(|_| {
            let n_breaks = rng.random_range(0..3);
            let mut breaks: Vec<f64> = (0..n_breaks).map(|_| rng.random_range(0.2..0.8)).collect();
            breaks.sort_by(f64::total_cmp);
            Shape {
                harmonics: (0..3)
                    .map(|_| (rng.random_range(-0.3..0.3), rng.random_range(0.0..TAU)))
                    .collect(),
                start: rng.random_range(0.0..TAU),
                span: rng.random_range(0.9..1.6) * std::f64::consts::PI,
                aspect: rng.random_range(0.6..1.6),
                breaks,
            }
        })
        .collect()
}

fn fractions(len: usize) -> impl Iterator<Item = f64> {
    (0..len).map(move |j| if len == 1 { 0.0 } else { j as f64 / (len - 1) as f64 })
}

/// Generates `per_class` sequences for each of `num_classes` classes,
/// interleaved by class. Identical arguments give bit-identical data.
pub fn synth_sequences(kind: SynthKind, num_classes: usize, per_class: usize, seed: u64) -> Result<SequenceSet> {
    if num_classes < 2 {
        return Err(Error::Configuration(format!(
            "synthetic sets need at least 2 classes, got {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xda7a));
    match kind {
        SynthKind::Spectrogram => {
            let templates: Vec<Vec<f64>> = bands(num_classes, seed).iter().map(|b| spectro_template(b)).collect();
            let noise = Normal::new(0.0, SPECTRO_NOISE).unwrap();
            let mut set = SequenceSet::new(SPECTRO_BINS);
            for _ in 0..per_class {
                for (c, tpl) in templates.iter().enumerate() {
                    let gain = rng.random_range(0.8..1.2);
                    let v = tpl.iter().map(|&x| gain * x + noise.sample(&mut rng)).collect();
                    set.push(v, c)?;
                }
            }
            Ok(set)
        }
        SynthKind::Stroke => {
            let shapes = shapes(num_classes, seed);
            let noise = Normal::new(0.0, STROKE_NOISE).unwrap();
            let mut set = SequenceSet::new(3);
            for _ in 0..per_class {
                for (c, shape) in shapes.iter().enumerate() {
                    let len = rng.random_range(STROKE_MIN_LEN..=STROKE_MAX_LEN);
                    let scale = rng.random_range(0.7..1.3);
                    let origin = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    let mut prev = (0.0, 0.0);
                    let mut v = Vec::with_capacity(len * 3);
                    let us: Vec<f64> = fractions(len).collect();
                    for (j, &u) in us.iter().enumerate() {
                        let (x, y) = shape.point(u);
                        let p = (
                            origin.0 + scale * x + noise.sample(&mut rng),
                            origin.1 + scale * y + noise.sample(&mut rng),
                        );
                        let lifted = j + 1 == len
                            || us.get(j + 1).is_some_and(|&next| shape.breaks.iter().any(|&b| u < b && next >= b));
                        v.extend_from_slice(&[p.0 - prev.0, p.1 - prev.1, if lifted { 1.0 } else { 0.0 }]);
                        prev = p;
                    }
                    set.push(v, c)?;
                }
            }
            Ok(set)
        }
    }
}

fn normalized_points(points: &mut [(f64, f64)]) {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let rms = (points.iter().map(|p| (p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    for p in points.iter_mut() {
        *p = ((p.0 - cx) / rms, (p.1 - cy) / rms);
    }
}

/// Nearest-class-template classifier that knows the generating templates.
/// Spectrograms are matched by normalized correlation; strokes by mean
/// squared distance after centering and scale normalization.
pub fn template_classify(kind: SynthKind, num_classes: usize, seed: u64, set: &SequenceSet) -> Vec<usize> {
    let argmin = |scores: Vec<f64>| {
        scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    };
    match kind {
        SynthKind::Spectrogram => {
            let templates: Vec<Vec<f64>> = bands(num_classes, seed).iter().map(|b| spectro_template(b)).collect();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            set.sequences
                .iter()
                .map(|s| {
                    argmin(
                        templates
                            .iter()
                            .map(|t| -t.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / norm(t))
                            .collect(),
                    )
                })
                .collect()
        }
        SynthKind::Stroke => {
            let shapes = shapes(num_classes, seed);
            set.sequences
                .iter()
                .map(|s| {
                    let mut acc = (0.0, 0.0);
                    let mut pts: Vec<(f64, f64)> = s
                        .chunks_exact(3)
                        .map(|d| {
                            acc = (acc.0 + d[0], acc.1 + d[1]);
                            acc
                        })
                        .collect();
                    normalized_points(&mut pts);
                    argmin(
                        shapes
                            .iter()
                            .map(|shape| {
                                let mut tpl: Vec<(f64, f64)> = fractions(pts.len()).map(|u| shape.point(u)).collect();
                                normalized_points(&mut tpl);
                                tpl.iter()
                                    .zip(&pts)
                                    .map(|(a, b)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2))
                                    .sum::<f64>()
                            })
                            .collect(),
                    )
                })
                .collect()
        }
    }
}
