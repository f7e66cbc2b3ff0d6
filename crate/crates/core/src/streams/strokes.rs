//! Stroke line records: `label<TAB>dx dy pen;dx dy pen;...`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::SequenceSet;
use crate::error::{Error, Result};

fn parse_record(line: &str, path: &Path, offset: u64) -> Result<(usize, Vec<f64>)> {
    let (label, body) = line
        .split_once('\t')
        .ok_or_else(|| Error::format(path, offset, "missing tab after label"))?;
    let label: usize = label
        .trim()
        .parse()
        .map_err(|_| Error::format(path, offset, format!("bad label {label:?}")))?;
    let mut values = Vec::new();
    for point in body.split(';') {
        let point = point.trim();
        if point.is_empty() {
            continue;
        }
        let fields: Vec<&str> = point.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::format(path, offset, format!("point {point:?} needs 3 fields")));
        }
        let mut xyz = [0.0; 3];
        for (slot, f) in xyz.iter_mut().zip(&fields) {
            *slot = f
                .replace('\u{2212}', "-")
                .parse()
                .map_err(|_| Error::format(path, offset, format!("bad number {f:?}")))?;
        }
        if xyz[2] != 0.0 && xyz[2] != 1.0 {
            return Err(Error::format(path, offset, format!("pen bit {} not in {{0,1}}", xyz[2])));
        }
        values.extend_from_slice(&xyz);
    }
    if values.is_empty() {
        return Err(Error::format(path, offset, "empty sequence"));
    }
    Ok((label, values))
}

/// Parses stroke records from any reader; `origin` labels errors.
pub fn parse_strokes<R: BufRead>(reader: R, origin: &Path) -> Result<SequenceSet> {
    let mut set = SequenceSet::new(3);
    let mut offset = 0u64;
    for line in reader.split(b'\n') {
        let raw = line.map_err(|e| Error::io(origin, e))?;
        let start = offset;
        offset += raw.len() as u64 + 1;
        let text = std::str::from_utf8(&raw)
            .map_err(|_| Error::format(origin, start, "line is not UTF-8"))?
            .trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        let (label, values) = parse_record(text, origin, start)?;
        set.push(values, label)?;
    }
    Ok(set)
}

pub fn read_strokes(path: &Path) -> Result<SequenceSet> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_strokes(BufReader::new(f), path)
}

pub fn format_strokes<W: Write>(mut w: W, set: &SequenceSet) -> std::io::Result<()> {
    for (seq, label) in set.sequences.iter().zip(&set.labels) {
        write!(w, "{label}\t")?;
        for (i, p) in seq.chunks_exact(3).enumerate() {
            if i > 0 {
                w.write_all(b";")?;
            }
            write!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_strokes(path: &Path, set: &SequenceSet) -> Result<()> {
    if set.feat_dim != 3 {
        return Err(Error::Parameter(format!("stroke sets have 3 features, got {}", set.feat_dim)));
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    format_strokes(&mut w, set).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Converts Quick, Draw! "simplified" ndjson drawings (one JSON object per
/// line with `word` and `drawing: [[xs, ys], ...]`) into stroke sequences.
/// Absolute points become displacements; the pen bit is 1 on the last point
/// of every stroke. Words outside `classes` are skipped.
pub fn convert_quickdraw_ndjson<R: BufRead>(reader: R, classes: &[&str], origin: &Path) -> Result<SequenceSet> {
    #[derive(serde::Deserialize)]
    struct Drawing {
        word: String,
        drawing: Vec<[Vec<f64>; 2]>,
    }
    let mut set = SequenceSet::new(3);
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let d: Drawing = serde_json::from_str(&line)
            .map_err(|e| Error::format(origin, start, format!("drawing record: {e}")))?;
        let Some(label) = classes.iter().position(|c| *c == d.word) else {
            continue;
        };
        let (mut px, mut py) = (0.0, 0.0);
        let mut values = Vec::new();
        for [xs, ys] in &d.drawing {
            if xs.len() != ys.len() {
                return Err(Error::format(origin, start, "stroke x/y lengths differ"));
            }
            for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
                let pen = if i + 1 == xs.len() { 1.0 } else { 0.0 };
                values.extend_from_slice(&[x - px, y - py, pen]);
                px = x;
                py = y;
            }
        }
        if values.is_empty() {
            return Err(Error::format(origin, start, "empty drawing"));
        }
        set.push(values, label)?;
    }
    Ok(set)
}
