use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resizes one `[C_p, H_p, W_p]` image to `target = (C, H, W)`.
///
/// Spatial resampling is bilinear with half-pixel centers. Channels: a
/// single-channel image is replicated to `C`; extra channels are dropped.
/// Identical shapes are returned unchanged.
pub fn adapt_passive(image: &Tensor<f32>, target: [usize; 3]) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim("adapt_passive(image)", s, &target));
    }
    let (cp, hp, wp) = (s[0], s[1], s[2]);
    let [c, h, w] = target;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("adapt target extents must be positive, got {target:?}")));
    }
    if s == target {
        return Ok(image.clone());
    }
    let channel_src: Vec<usize> = if cp == c {
        (0..c).collect()
    } else if cp == 1 {
        vec![0; c]
    } else if cp > c {
        log::warn!("passive images have {cp} channels, keeping the first {c}");
        (0..c).collect()
    } else {
        return Err(Error::Config(format!(
            "cannot adapt {cp}-channel passive images to {c} channels"
        )));
    };

    let resized: Vec<Vec<f32>> = (0..cp)
        .map(|k| resize_plane(&image.data()[k * hp * wp..(k + 1) * hp * wp], hp, wp, h, w))
        .collect();
    let mut out = Vec::with_capacity(c * h * w);
    for &src in &channel_src {
        out.extend_from_slice(&resized[src]);
    }
    Tensor::new(&target, out)
}

fn resize_plane(src: &[f32], hp: usize, wp: usize, h: usize, w: usize) -> Vec<f32> {
    if (hp, wp) == (h, w) {
        return src.to_vec();
    }
    let coord = |dst: usize, n_src: usize, n_dst: usize| -> (usize, usize, f32) {
        let scale = n_src as f64 / n_dst as f64;
        let x = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, (x - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, hp, h);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, wp, w);
            let top = src[y0 * wp + x0] * (1.0 - fx) + src[y0 * wp + x1] * fx;
            let bot = src[y1 * wp + x0] * (1.0 - fx) + src[y1 * wp + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Applies [`adapt_passive`] to every image of a dataset.
pub fn adapt_dataset(ds: &LabeledDataset, target: [usize; 3]) -> Result<LabeledDataset> {
    if ds.image_shape() == target {
        return Ok(ds.clone());
    }
    let [c, h, w] = ds.image_shape();
    let plane = c * h * w;
    let mut data = Vec::with_capacity(ds.len() * target.iter().product::<usize>());
    for i in 0..ds.len() {
        let img = Tensor::new(&[c, h, w], ds.images.data()[i * plane..(i + 1) * plane].to_vec())?;
        data.extend_from_slice(adapt_passive(&img, target)?.data());
    }
    let images = Tensor::new(&[ds.len(), target[0], target[1], target[2]], data)?;
    LabeledDataset::new(ds.role, images, ds.labels.clone(), ds.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_shape_is_bitwise_identity() {
        let img = Tensor::new(&[3, 4, 4], (0..48).map(|i| (i as f32).sin()).collect()).unwrap();
        let out = adapt_passive(&img, [3, 4, 4]).unwrap();
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn grayscale_replicates_to_rgb() {
        let img = Tensor::new(&[1, 28, 28], (0..784).map(|i| (i % 255) as f32 / 255.0).collect()).unwrap();
        let out = adapt_passive(&img, [3, 32, 32]).unwrap();
        assert_eq!(out.shape(), &[3, 32, 32]);
        let d = out.data();
        assert_eq!(&d[..1024], &d[1024..2048]);
        assert_eq!(&d[..1024], &d[2048..]);
    }

    #[test]
    fn upscaling_constant_stays_constant() {
        let img = Tensor::full(&[2, 5, 7], 0.37f32);
        let out = adapt_passive(&img, [2, 10, 14]).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
    }

    #[test]
    fn extra_channels_truncate_and_two_to_three_fails() {
        let img = Tensor::new(&[4, 2, 2], (0..16).map(|i| i as f32).collect()).unwrap();
        let out = adapt_passive(&img, [3, 2, 2]).unwrap();
        assert_eq!(out.data(), &img.data()[..12]);
        let two = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(adapt_passive(&two, [3, 2, 2]), Err(Error::Config(_))));
    }

    #[test]
    fn bilinear_downscale_averages_pairs() {
        let img = Tensor::new(&[1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = adapt_passive(&img, [1, 1, 2]).unwrap();
        assert_eq!(out.data(), &[0.5, 2.5]);
    }
}
