use std::path::Path;

use super::{LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by 32x32 R, G and B planes.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

fn parse(path: &Path, bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        let offset = (bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN) as u64;
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg: format!(
                "truncated record: file length {} is not a multiple of {CIFAR_RECORD_LEN}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: (i * CIFAR_RECORD_LEN) as u64,
                msg: format!("label byte {} out of range 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Reads one CIFAR-10 binary batch file.
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    load_cifar10_files(&[path.as_ref()])
}

/// Concatenates several CIFAR-10 binary batch files in the given order.
pub fn load_cifar10_files<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let (px, lb) = parse(p, &bytes)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    if labels.is_empty() {
        return Err(Error::Config("CIFAR-10 input contains no records".into()));
    }
    let images = Tensor::new(&[labels.len(), 3, 32, 32], pixels)?;
    LabeledDataset::new(Role::Active, images, labels, 10)
}
