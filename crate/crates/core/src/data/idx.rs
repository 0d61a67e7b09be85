//! IDX (MNIST-family) reader. Files may be gzip-compressed; compression is
//! detected from the magic bytes, not the file name.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::SampleShape;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const SIDE: u32 = 28;
const CLASSES: usize = 10;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "file truncated inside header".into(),
        })
}

fn format_err(path: &Path, offset: usize, message: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    }
}

/// Load an image/label IDX pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_maybe_gz(ip)?;
    let labels = read_maybe_gz(lp)?;

    let magic = be_u32(&images, 0, ip)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(ip, 0, format!("bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")));
    }
    let count = be_u32(&images, 4, ip)? as usize;
    let (rows, cols) = (be_u32(&images, 8, ip)?, be_u32(&images, 12, ip)?);
    if rows != SIDE || cols != SIDE {
        return Err(format_err(ip, 8, format!("expected {SIDE}x{SIDE} images, found {rows}x{cols}")));
    }
    let pixels = (SIDE * SIDE) as usize;
    let need = 16 + count * pixels;
    if images.len() < need {
        return Err(format_err(ip, images.len(), format!("truncated: {count} images need {need} bytes")));
    }

    let magic = be_u32(&labels, 0, lp)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(lp, 0, format!("bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")));
    }
    let label_count = be_u32(&labels, 4, lp)? as usize;
    if label_count != count {
        return Err(format_err(lp, 4, format!("{label_count} labels for {count} images")));
    }
    if labels.len() < 8 + count {
        return Err(format_err(lp, labels.len(), format!("truncated: {count} labels need {} bytes", 8 + count)));
    }
    let ys: Vec<usize> = labels[8..8 + count].iter().map(|&b| b as usize).collect();
    if let Some(k) = ys.iter().position(|&y| y >= CLASSES) {
        return Err(format_err(lp, 8 + k, format!("label {} out of range", ys[k])));
    }
    let inputs = images[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    let name = ip.file_name().map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(name, SampleShape::image(SIDE as usize, SIDE as usize, 1), inputs, ys, CLASSES)
}

fn find_pair(dir: &Path, prefix: &str) -> Result<(PathBuf, PathBuf)> {
    let pick = |stem: &str| -> Result<PathBuf> {
        for suffix in ["", ".gz"] {
            let p = dir.join(format!("{stem}{suffix}"));
            if p.is_file() {
                return Ok(p);
            }
        }
        Err(Error::Data(format!("missing {stem}[.gz] in {}", dir.display())))
    };
    Ok((
        pick(&format!("{prefix}-images-idx3-ubyte"))?,
        pick(&format!("{prefix}-labels-idx1-ubyte"))?,
    ))
}

/// Load the standard `train-*` and `t10k-*` files from one directory.
pub fn load_idx_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let (ti, tl) = find_pair(dir, "train")?;
    let (vi, vl) = find_pair(dir, "t10k")?;
    Ok((load_idx(ti, tl)?, load_idx(vi, vl)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    fn images(n: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, n, 28, 28] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * 784) as usize));
        b
    }

    fn labels(ys: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(ys.len() as u32).to_be_bytes());
        b.extend_from_slice(ys);
        b
    }

    #[test]
    fn single_zero_image() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_idx(write(dir.path(), "i", &images(1, 0)), write(dir.path(), "l", &labels(&[7]))).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[7]);
        assert!(ds.sample(0).iter().all(|&v| v == 0.0));
        assert_eq!(ds.shape(), SampleShape::image(28, 28, 1));
    }

    #[test]
    fn gzip_is_detected_and_pixels_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&images(2, 255)).unwrap();
        let gz = enc.finish().unwrap();
        let ds = load_idx(write(dir.path(), "i.gz", &gz), write(dir.path(), "l", &labels(&[1, 2]))).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.sample(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_idx(write(dir.path(), "i", &images(2, 0)), write(dir.path(), "l", &labels(&[1]))).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = images(1, 0);
        bad[3] = 0x01;
        let l = write(dir.path(), "l", &labels(&[0]));
        assert!(matches!(load_idx(write(dir.path(), "bad", &bad), &l), Err(Error::Format { offset: 0, .. })));
        let mut short = images(1, 0);
        short.truncate(100);
        assert!(matches!(load_idx(write(dir.path(), "short", &short), &l), Err(Error::Format { .. })));
        let mut dims = images(1, 0);
        dims[11] = 32;
        assert!(matches!(load_idx(write(dir.path(), "dims", &dims), &l), Err(Error::Format { offset: 8, .. })));
    }
}
