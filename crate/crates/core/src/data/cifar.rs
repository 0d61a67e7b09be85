use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::SampleShape;

const RECORD: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// Load CIFAR-10 binary batches (1 label byte + 3072 channel-major pixel
/// bytes per record). Pixels are re-laid out channels-innermost and scaled
/// to `[0, 1]`.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (bytes.len() - bytes.len() % RECORD) as u64,
                message: format!("size {} is not a multiple of {RECORD}", bytes.len()),
            });
        }
        for (k, rec) in bytes.chunks_exact(RECORD).enumerate() {
            let y = rec[0] as usize;
            if y >= 10 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (k * RECORD) as u64,
                    message: format!("label {y} out of range"),
                });
            }
            labels.push(y);
            let px = &rec[1..];
            for i in 0..PLANE {
                for c in 0..3 {
                    inputs.push(px[c * PLANE + i] as f32 / 255.0);
                }
            }
        }
    }
    Dataset::new("cifar10", SampleShape::image(SIDE, SIDE, 3), inputs, labels, 10)
}
