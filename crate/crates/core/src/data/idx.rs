use std::path::Path;

use super::{LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unsigned-byte, rank 3: `N x H x W` grayscale images.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte, rank 4: `N x H x W x C` interleaved images.
pub const IDX_IMAGES_RGB_MAGIC: u32 = 0x0000_0804;
/// Unsigned-byte, rank 1: `N` labels.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Idx {
    magic: u32,
    dims: Vec<usize>,
    payload_offset: usize,
}

fn header(path: &Path, bytes: &[u8]) -> Result<Idx> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 4 {
        return Err(fmt("file shorter than the IDX magic".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let rank = (magic & 0xff) as usize;
    let hdr = 4 + 4 * rank;
    if bytes.len() < hdr {
        return Err(fmt(format!("truncated IDX header (rank {rank})")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() != hdr + payload {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len().min(hdr + payload) as u64,
            msg: format!("payload length {} does not match dims {dims:?}", bytes.len() - hdr),
        });
    }
    Ok(Idx {
        magic,
        dims,
        payload_offset: hdr,
    })
}

/// Reads an IDX image file and its label file.
///
/// Rank-3 images (`0x00000803`) load as one channel; rank-4 images
/// (`0x00000804`, `N x H x W x C`) are de-interleaved to `N x C x H x W`.
/// The class count is `max label + 1` unless `classes` is given.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    classes: Option<usize>,
) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let ih = header(ip, &ib)?;
    let lh = header(lp, &lb)?;
    if ih.magic != IDX_IMAGES_MAGIC && ih.magic != IDX_IMAGES_RGB_MAGIC {
        return Err(Error::Format {
            path: ip.to_path_buf(),
            msg: format!("magic {:#010x} is not an IDX image file", ih.magic),
        });
    }
    if lh.magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            msg: format!("magic {:#010x} is not an IDX label file", lh.magic),
        });
    }
    let n = ih.dims[0];
    if lh.dims[0] != n {
        return Err(Error::dim("idx images/labels", &ih.dims, &lh.dims));
    }
    if n == 0 {
        return Err(Error::Config(format!("{} holds no images", ip.display())));
    }
    let (h, w) = (ih.dims[1], ih.dims[2]);
    let c = if ih.magic == IDX_IMAGES_RGB_MAGIC { ih.dims[3] } else { 1 };
    let raw = &ib[ih.payload_offset..];
    let mut pixels = vec![0.0f32; n * c * h * w];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let src = ((i * h + y) * w + x) * c + ch;
                    pixels[((i * c + ch) * h + y) * w + x] = raw[src] as f32 / 255.0;
                }
            }
        }
    }
    let labels: Vec<usize> = lb[lh.payload_offset..].iter().map(|&b| b as usize).collect();
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let images = Tensor::new(&[n, c, h, w], pixels)?;
    LabeledDataset::new(Role::Active, images, labels, k)
}

/// Writes an IDX file: big-endian magic and dims followed by raw bytes.
pub fn write_idx(path: impl AsRef<Path>, magic: u32, dims: &[usize], data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
