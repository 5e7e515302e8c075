use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-pad, random crop, random horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub pad: usize,
    /// `(H, W)` of the crop; `None` crops back to the input size.
    pub crop: Option<(usize, usize)>,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            pad: 4,
            crop: None,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn crop_for(&self, h: usize, w: usize) -> (usize, usize) {
        self.crop.unwrap_or((h, w))
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let (ch, cw) = self.crop_for(h, w);
        if ch == 0 || cw == 0 || ch > h + 2 * self.pad || cw > w + 2 * self.pad {
            return Err(Error::Config(format!(
                "augment crop {ch}x{cw} does not fit {h}x{w} padded by {}",
                self.pad
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("augment.flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        Ok(())
    }
}

/// One image's random choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

/// Draws a crop offset uniformly over all valid positions of the padded image
/// and a flip decision. Always consumes the same amount of randomness.
pub fn draw_crop(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut ChaCha8Rng) -> CropDraw {
    let (ch, cw) = cfg.crop_for(h, w);
    let top = rng.gen_range(0..=h + 2 * cfg.pad - ch);
    let left = rng.gen_range(0..=w + 2 * cfg.pad - cw);
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    CropDraw { top, left, flip }
}

/// Applies pad/crop/flip independently to every image of `[B, C, H, W]`.
pub fn augment_batch(batch: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    if !cfg.enabled {
        return Ok(batch.clone());
    }
    let s = batch.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    cfg.validate(h, w)?;
    let (ch, cw) = cfg.crop_for(h, w);
    let pad = cfg.pad as isize;
    let mut out = vec![0.0f32; b * c * ch * cw];
    for i in 0..b {
        let d = draw_crop(cfg, h, w, rng);
        for k in 0..c {
            let src = &batch.data()[(i * c + k) * h * w..(i * c + k + 1) * h * w];
            let dst = &mut out[(i * c + k) * ch * cw..(i * c + k + 1) * ch * cw];
            for y in 0..ch {
                let sy = (d.top + y) as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..cw {
                    let ox = if d.flip { cw - 1 - x } else { x };
                    let sx = (d.left + ox) as isize - pad;
                    if sx >= 0 && sx < w as isize {
                        dst[y * cw + x] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, ch, cw], out)
}

/// Mirrors every image left-to-right.
pub fn hflip(batch: &Tensor<f32>) -> Tensor<f32> {
    let w = batch.shape()[3];
    let mut out = batch.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn batch() -> Tensor<f32> {
        Tensor::new(&[2, 3, 4, 5], (0..120).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn no_pad_no_flip_is_identity() {
        let cfg = AugmentConfig {
            enabled: true,
            pad: 0,
            crop: None,
            flip_prob: 0.0,
        };
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment_batch(&batch(), &cfg, &mut r).unwrap(), batch());
    }

    #[test]
    fn flip_is_an_involution() {
        let b = batch();
        assert_eq!(hflip(&hflip(&b)), b);
        let cfg = AugmentConfig {
            enabled: true,
            pad: 0,
            crop: None,
            flip_prob: 1.0,
        };
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let once = augment_batch(&b, &cfg, &mut r).unwrap();
        assert_eq!(once, hflip(&b));
        assert_eq!(augment_batch(&once, &cfg, &mut r).unwrap(), b);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 81 offsets for pad 4 on 32x32; chi-square over 1e5 draws.
        let cfg = AugmentConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 81];
        let draws = 100_000;
        for _ in 0..draws {
            let d = draw_crop(&cfg, 32, 32, &mut r);
            assert!(d.top <= 8 && d.left <= 8);
            counts[d.top * 9 + d.left] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
        let expected = draws as f64 / 81.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 80 degrees of freedom; 0.999 quantile is about 124.8.
        assert!(chi2 < 124.8, "chi2 {chi2}");
    }

    #[test]
    fn padded_region_is_zero_and_content_shifts() {
        let cfg = AugmentConfig {
            enabled: true,
            pad: 2,
            crop: None,
            flip_prob: 0.0,
        };
        let ones = Tensor::full(&[1, 1, 4, 4], 1.0f32);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let out = augment_batch(&ones, &cfg, &mut r).unwrap();
            let sum: f32 = out.data().iter().sum();
            assert!(sum <= 16.0 && sum >= 4.0);
            assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn same_stream_state_same_output() {
        let cfg = AugmentConfig::default();
        let b = Tensor::new(&[3, 1, 6, 6], (0..108).map(|i| i as f32).collect()).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(augment_batch(&b, &cfg, &mut r1).unwrap(), augment_batch(&b, &cfg, &mut r2).unwrap());
    }

    #[test]
    fn oversized_crop_rejected() {
        let cfg = AugmentConfig {
            crop: Some((20, 20)),
            pad: 1,
            ..AugmentConfig::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(augment_batch(&batch(), &cfg, &mut r).is_err());
    }
}
