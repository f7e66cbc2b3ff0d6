//! Binary model checkpoints.
//!
//! Layout (little-endian): `b"SQCL"`, version `u32`, config record length
//! `u32` + JSON bytes, parameter count `u32`, then per parameter: name length
//! `u32`, UTF-8 name, rank `u32`, `rank` dims as `u64`, and the `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Classifier, Head, ModelConfig};
use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SQCL";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Record {
    config: ModelConfig,
    seed: u64,
    heads: Vec<Head>,
    seen: Vec<bool>,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Classifier) -> std::io::Result<()> {
    let record = Record {
        config: model.config.clone(),
        seed: model.seed,
        heads: model.heads.clone(),
        seen: model.seen.clone(),
    };
    let json = serde_json::to_vec(&record)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for p in &model.params {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> std::result::Result<Vec<u8>, (u64, String)> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| (self.offset, format!("truncated: {e}")))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> std::result::Result<u32, (u64, String)> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, (u64, String)> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Reads a checkpoint; `origin` only labels errors.
pub fn read_checkpoint<R: Read>(r: R, origin: &Path) -> Result<Classifier> {
    let mut cur = Cursor { inner: r, offset: 0 };
    let fail = |(off, msg): (u64, String)| Error::format(origin, off, msg);
    let magic = cur.bytes(4).map_err(fail)?;
    if magic != MAGIC {
        return Err(Error::format(origin, 0, "bad magic"));
    }
    let version = cur.u32().map_err(fail)?;
    if version != VERSION {
        return Err(Error::format(origin, 4, format!("unsupported version {version}")));
    }
    let len = cur.u32().map_err(fail)? as usize;
    let at = cur.offset;
    let record: Record = serde_json::from_slice(&cur.bytes(len).map_err(fail)?)
        .map_err(|e| Error::format(origin, at, format!("config record: {e}")))?;
    let count = cur.u32().map_err(fail)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32().map_err(fail)? as usize;
        let at = cur.offset;
        let name = String::from_utf8(cur.bytes(name_len).map_err(fail)?)
            .map_err(|_| Error::format(origin, at, "parameter name is not UTF-8"))?;
        let rank = cur.u32().map_err(fail)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64().map_err(fail)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.bytes(n * 8).map_err(fail)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Parameter::new(name, Tensor::new(shape, data)?));
    }
    let model = Classifier {
        config: record.config,
        params,
        heads: record.heads,
        seen: record.seen,
        seed: record.seed,
    };
    if model.heads.iter().any(|h| h.weight >= count || h.bias >= count) {
        return Err(Error::format(origin, cur.offset, "head refers to a missing parameter"));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Classifier) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, model).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f), path)
}
