//! Big-endian IDX files as distributed with MNIST, optionally gzipped.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::data::SequenceSet;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, at as u64, "truncated header"))
}

/// Parsed image file: `count` images of `rows × cols` bytes each.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<u8>>,
}

pub fn parse_idx_images(buf: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(buf, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(path, 0, format!("image magic {magic:#010x}, expected 0x00000803")));
    }
    let count = be_u32(buf, 4, path)? as usize;
    let rows = be_u32(buf, 8, path)? as usize;
    let cols = be_u32(buf, 12, path)? as usize;
    let size = rows * cols;
    let need = 16 + count * size;
    if buf.len() < need {
        return Err(Error::format(
            path,
            buf.len() as u64,
            format!("truncated payload: {count} images need {need} bytes"),
        ));
    }
    let pixels = (0..count)
        .map(|i| buf[16 + i * size..16 + (i + 1) * size].to_vec())
        .collect();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(buf: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(buf, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(path, 0, format!("label magic {magic:#010x}, expected 0x00000801")));
    }
    let count = be_u32(buf, 4, path)? as usize;
    if buf.len() < 8 + count {
        return Err(Error::format(path, buf.len() as u64, format!("truncated payload: {count} labels")));
    }
    Ok(buf[8..8 + count].to_vec())
}

/// Reads an image/label file pair. Every image becomes a one-timestep
/// sequence of `rows * cols` features, scaled by exactly 1/255.
pub fn read_idx(images: &Path, labels: &Path) -> Result<SequenceSet> {
    let img = parse_idx_images(&read_all(images)?, images)?;
    let lab = parse_idx_labels(&read_all(labels)?, labels)?;
    if img.pixels.len() != lab.len() {
        return Err(Error::format(
            labels,
            4,
            format!("{} labels for {} images", lab.len(), img.pixels.len()),
        ));
    }
    let mut set = SequenceSet::new((img.rows * img.cols).max(1));
    for (px, &l) in img.pixels.iter().zip(&lab) {
        set.push(px.iter().map(|&p| f64::from(p) / 255.0).collect(), usize::from(l))?;
    }
    Ok(set)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len() * rows * cols);
    for v in [IMAGE_MAGIC, pixels.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for p in pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(dir: &Path, pixels: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        write_bytes(&ip, &encode_idx_images(rows, cols, pixels)).unwrap();
        write_bytes(&lp, &encode_idx_labels(labels)).unwrap();
        (ip, lp)
    }

    #[test]
    fn one_image_scaled_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = pair(dir.path(), &[vec![0, 255, 128, 64]], 2, 2, &[7]);
        let set = read_idx(&ip, &lp).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels, vec![7]);
        let v = &set.sequences[0];
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 128.0 / 255.0);
        assert!((v[2] - 0.50196).abs() < 1e-5);
        assert!((v[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = pair(dir.path(), &[vec![1, 2, 3, 4]], 2, 2, &[1, 2]);
        assert!(matches!(read_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn swapped_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = pair(dir.path(), &[vec![1, 2, 3, 4]], 2, 2, &[1]);
        let err = read_idx(&lp, &ip).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = encode_idx_images(2, 2, &[vec![1, 2, 3, 4]]);
        bytes.pop();
        let ip = dir.path().join("img");
        write_bytes(&ip, &bytes).unwrap();
        let lp = dir.path().join("lab");
        write_bytes(&lp, &encode_idx_labels(&[1])).unwrap();
        match read_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_payload_is_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = pair(dir.path(), &[], 28, 28, &[]);
        let set = read_idx(&ip, &lp).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let gz = |bytes: Vec<u8>| {
            let mut e = GzEncoder::new(Vec::new(), flate2::Compression::default());
            e.write_all(&bytes).unwrap();
            e.finish().unwrap()
        };
        let ip = dir.path().join("img.gz");
        let lp = dir.path().join("lab.gz");
        write_bytes(&ip, &gz(encode_idx_images(1, 2, &[vec![51, 102]]))).unwrap();
        write_bytes(&lp, &gz(encode_idx_labels(&[3]))).unwrap();
        let set = read_idx(&ip, &lp).unwrap();
        assert_eq!(set.sequences[0], vec![0.2, 0.4]);
    }
}
