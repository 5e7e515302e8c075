//! Datasets, binary loaders, synthetic generators, augmentation and
//! deterministic batch iteration.

mod adapt;
mod augment;
mod cifar;
mod idx;
mod iter;
mod synth;

pub use adapt::{adapt_dataset, adapt_passive};
pub use augment::{augment_batch, draw_crop, hflip, AugmentConfig, CropDraw};
pub use cifar::{load_cifar10_binary, load_cifar10_files, CIFAR_RECORD_LEN};
pub use idx::{load_idx, write_idx, IDX_IMAGES_MAGIC, IDX_IMAGES_RGB_MAGIC, IDX_LABELS_MAGIC};
pub use iter::{BatchIterator, Batch};
pub use synth::{synth_data, synth_pair, SynthData, SynthSpec};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Active,
    Passive,
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and (population) standard deviation of every channel over all
    /// images and pixels; computed in double precision.
    pub fn fit(images: &Tensor<f32>) -> Self {
        let s = images.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0f32; c];
        let mut std = vec![1.0f32; c];
        for ch in 0..c {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for &v in &images.data()[base..base + plane] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let count = (n * plane) as f64;
            let m = sum / count;
            let var = (sq / count - m * m).max(0.0);
            mean[ch] = m as f32;
            std[ch] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, batch: &mut Tensor<f32>) {
        let s = batch.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        for (i, chunk) in batch.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (m, sd) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
    }
}

/// Images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub role: Role,
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(role: Role, images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::dim("dataset images", s, &[0, 0, 0, 0]));
        }
        if s[0] != labels.len() {
            return Err(Error::dim("dataset images/labels", s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "dataset label",
                index: bad,
                len: classes,
            });
        }
        images.ensure_finite("dataset images")?;
        Ok(LabeledDataset {
            role,
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        LabeledDataset {
            role: self.role,
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Raw images and labels for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Per-class stratified subsample of `round(fraction * N)` samples.
///
/// Class quotas use largest remainders so they sum to the total exactly; the
/// chosen samples keep their original relative order.
pub fn take_fraction(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("data fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let hist = ds.class_histogram();
    let total = (fraction * ds.len() as f64).round() as usize;
    let exact: Vec<f64> = hist.iter().map(|&n| n as f64 * total as f64 / ds.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..hist.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let mut missing = total - quota.iter().sum::<usize>();
    for &c in &order {
        if missing == 0 {
            break;
        }
        quota[c] += 1;
        missing -= 1;
    }
    for (c, (&q, &n)) in quota.iter().zip(&hist).enumerate() {
        if n > 0 && q == 0 {
            return Err(Error::Config(format!(
                "data fraction {fraction} leaves class {c} with no samples"
            )));
        }
    }
    let mut r = rng::stream(seed, "data/fraction");
    let mut chosen = Vec::with_capacity(total);
    for (c, &q) in quota.iter().enumerate() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        members.shuffle(&mut r);
        chosen.extend_from_slice(&members[..q]);
    }
    chosen.sort_unstable();
    Ok(ds.subset(&chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(classes: usize, per_class: usize) -> LabeledDataset {
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let images = Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| i as f32 / n as f32).collect()).unwrap();
        LabeledDataset::new(Role::Active, images, labels, classes).unwrap()
    }

    #[test]
    fn fraction_one_is_identity() {
        let ds = balanced(3, 5);
        assert_eq!(take_fraction(&ds, 1.0, 4).unwrap(), ds);
    }

    #[test]
    fn quarter_of_balanced_ten_class_set() {
        let ds = balanced(10, 5000);
        let sub = take_fraction(&ds, 0.25, 1).unwrap();
        assert_eq!(sub.len(), 12_500);
        assert!(sub.class_histogram().iter().all(|&c| c == 1250));
        let eighth = take_fraction(&ds, 0.125, 1).unwrap();
        assert!(eighth.class_histogram().iter().all(|&c| c == 625));
    }

    #[test]
    fn unbalanced_histogram_is_proportional() {
        let labels: Vec<usize> = (0..103).map(|i| if i < 70 { 0 } else if i < 95 { 1 } else { 2 }).collect();
        let images = Tensor::zeros(&[103, 1, 2, 2]);
        let ds = LabeledDataset::new(Role::Active, images, labels, 3).unwrap();
        let sub = take_fraction(&ds, 0.3, 2).unwrap();
        assert_eq!(sub.len(), (0.3f64 * 103.0).round() as usize);
        for (got, n) in sub.class_histogram().iter().zip(ds.class_histogram()) {
            let want = n as f64 * 0.3;
            assert!((*got as f64 - want).abs() <= 1.0, "{got} vs {want}");
        }
        assert_eq!(take_fraction(&ds, 0.3, 2).unwrap(), sub);
    }

    #[test]
    fn fraction_emptying_a_class_is_error() {
        let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let ds = LabeledDataset::new(Role::Active, Tensor::zeros(&[10, 1, 1, 1]), labels, 2).unwrap();
        assert!(take_fraction(&ds, 0.2, 0).is_err());
        assert!(take_fraction(&ds, 0.0, 0).is_err());
        assert!(take_fraction(&ds, 1.5, 0).is_err());
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(LabeledDataset::new(Role::Active, Tensor::zeros(&[2, 1, 1, 1]), vec![0, 2], 2).is_err());
    }

    #[test]
    fn normalization_fit_and_apply() {
        let images = Tensor::new(&[2, 2, 1, 2], vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5]).unwrap();
        let n = Normalization::fit(&images);
        assert_eq!(n.mean, vec![0.5, 0.5]);
        assert_eq!(n.std, vec![0.5, 1.0]);
        let mut b = images.clone();
        n.apply(&mut b);
        assert_eq!(b.data(), &[-1.0, 1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0]);
    }
}
