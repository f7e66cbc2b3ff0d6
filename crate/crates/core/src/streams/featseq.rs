//! Fixed-length feature-sequence text files.
//!
//! ```text
//! n_seq seq_len feat_dim
//! #label
//! f f ... f        (seq_len lines of feat_dim values)
//!
//! #label
//! ...
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::SequenceSet;
use crate::error::{Error, Result};

pub fn parse_feature_sequences<R: BufRead>(reader: R, origin: &Path) -> Result<SequenceSet> {
    let mut lines = Vec::new();
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let start = offset;
        offset += line.len() as u64 + 1;
        if !line.trim().is_empty() {
            lines.push((start, line));
        }
    }
    let mut it = lines.into_iter();
    let (at, header) = it
        .next()
        .ok_or_else(|| Error::format(origin, 0, "missing header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(origin, at, "header must be `n_seq seq_len feat_dim`"))?;
    let [n_seq, seq_len, feat_dim] = dims[..] else {
        return Err(Error::format(origin, at, "header must be `n_seq seq_len feat_dim`"));
    };
    if seq_len == 0 || feat_dim == 0 {
        return Err(Error::format(origin, at, "seq_len and feat_dim must be positive"));
    }
    let mut set = SequenceSet::new(feat_dim);
    for _ in 0..n_seq {
        let (at, label_line) = it
            .next()
            .ok_or_else(|| Error::format(origin, offset, "fewer sequences than declared"))?;
        let label = label_line
            .strip_prefix('#')
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| Error::format(origin, at, "expected `#label` line"))?;
        let mut values = Vec::with_capacity(seq_len * feat_dim);
        for _ in 0..seq_len {
            let (at, row) = it
                .next()
                .ok_or_else(|| Error::format(origin, offset, "sequence shorter than seq_len"))?;
            if row.starts_with('#') {
                return Err(Error::format(origin, at, "sequence shorter than seq_len"));
            }
            let before = values.len();
            for f in row.split_whitespace() {
                values.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::format(origin, at, format!("bad number {f:?}")))?,
                );
            }
            if values.len() - before != feat_dim {
                return Err(Error::format(origin, at, format!("expected {feat_dim} values")));
            }
        }
        set.push(values, label)?;
    }
    if let Some((at, _)) = it.next() {
        return Err(Error::format(origin, at, "more data than declared"));
    }
    Ok(set)
}

pub fn read_feature_sequences(path: &Path) -> Result<SequenceSet> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_feature_sequences(BufReader::new(f), path)
}

pub fn format_feature_sequences<W: Write>(mut w: W, set: &SequenceSet) -> std::io::Result<()> {
    let seq_len = set.uniform_len().unwrap_or(0);
    writeln!(w, "{} {} {}", set.len(), seq_len, set.feat_dim)?;
    for (i, (seq, label)) in set.sequences.iter().zip(&set.labels).enumerate() {
        if i > 0 {
            w.write_all(b"\n")?;
        }
        writeln!(w, "#{label}")?;
        for row in seq.chunks_exact(set.feat_dim) {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    w.write_all(b" ")?;
                }
                write!(w, "{v}")?;
            }
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_feature_sequences(path: &Path, set: &SequenceSet) -> Result<()> {
    if !set.is_empty() && set.uniform_len().is_none() {
        return Err(Error::Parameter("feature-sequence files need a fixed length".into()));
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    format_feature_sequences(&mut w, set).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
