//! Procedural dataset pair with deliberately unrelated generative processes.
//!
//! Active images are soft Gaussian blobs whose layout and colors depend on
//! the class, jittered per sample and mixed with distractor blobs. Passive
//! images are oriented sinusoidal stripes whose class is the orientation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// `(C, H, W)` shared by both datasets.
    pub image: [usize; 3],
    pub active_classes: usize,
    pub passive_classes: usize,
    pub active_train: usize,
    pub active_test: usize,
    pub passive_count: usize,
    /// Blobs per class prototype.
    pub blobs: usize,
    /// Random distractor blobs added to every active image.
    pub distractors: usize,
    /// Per-sample blob displacement, as a fraction of the image side.
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image: [3, 16, 16],
            active_classes: 10,
            passive_classes: 10,
            active_train: 2000,
            active_test: 2000,
            passive_count: 2000,
            blobs: 3,
            distractors: 2,
            jitter: 0.12,
            noise: 0.15,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image;
        if c == 0 || h < 2 || w < 2 {
            return Err(Error::Config(format!("synthetic image shape {:?} too small", self.image)));
        }
        if self.active_classes < 2 || self.passive_classes < 2 {
            return Err(Error::Config("synthetic datasets need at least 2 classes each".into()));
        }
        if self.active_train == 0 || self.active_test == 0 || self.passive_count == 0 {
            return Err(Error::Config("synthetic sample counts must be positive".into()));
        }
        if self.blobs == 0 || !(self.noise >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config("synthetic blobs must be >= 1, noise and jitter >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: Vec<f64>,
}

impl Blob {
    fn random(r: &mut ChaCha8Rng, channels: usize) -> Self {
        Blob {
            cy: r.gen_range(0.15..0.85),
            cx: r.gen_range(0.15..0.85),
            sigma: r.gen_range(0.07..0.16),
            color: (0..channels).map(|_| r.gen_range(0.0..1.0)).collect(),
        }
    }
}

/// Active train/test splits (sharing class prototypes) and the passive set.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub active_train: LabeledDataset,
    pub active_test: LabeledDataset,
    pub passive: LabeledDataset,
}

pub fn synth_data(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let mut proto_rng = rng::stream(seed, "synth/active/prototypes");
    let prototypes: Vec<Vec<Blob>> = (0..spec.active_classes)
        .map(|_| (0..spec.blobs).map(|_| Blob::random(&mut proto_rng, spec.image[0])).collect())
        .collect();
    let active_train = blobs(spec, &prototypes, spec.active_train, &mut rng::stream(seed, "synth/active/train"))?;
    let active_test = blobs(spec, &prototypes, spec.active_test, &mut rng::stream(seed, "synth/active/test"))?;
    let passive = stripes(spec, &mut rng::stream(seed, "synth/passive"))?;
    Ok(SynthData {
        active_train,
        active_test,
        passive,
    })
}

/// `(active, passive)`: the active training split and the passive set.
pub fn synth_pair(spec: &SynthSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = synth_data(spec, seed)?;
    Ok((d.active_train, d.passive))
}

fn noise(spec: &SynthSpec) -> Normal<f64> {
    Normal::new(0.0, spec.noise).expect("noise validated non-negative")
}

fn blobs(spec: &SynthSpec, prototypes: &[Vec<Blob>], count: usize, r: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let [c, h, w] = spec.image;
    let noise = noise(spec);
    let mut data = Vec::with_capacity(count * c * h * w);
    let mut labels = Vec::with_capacity(count);
    let mut img = vec![0.0f64; c * h * w];
    for i in 0..count {
        let label = i % spec.active_classes;
        let background = r.gen_range(0.2..0.5);
        img.iter_mut().for_each(|v| *v = background);
        let stamp = |b: &Blob, amp: f64, img: &mut [f64]| {
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 + 0.5) / h as f64 - b.cy;
                    let dx = (x as f64 + 0.5) / w as f64 - b.cx;
                    let a = amp * (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp();
                    for k in 0..c {
                        let p = &mut img[(k * h + y) * w + x];
                        *p = *p * (1.0 - a) + b.color[k] * a;
                    }
                }
            }
        };
        for _ in 0..spec.distractors {
            let d = Blob::random(r, c);
            let amp = r.gen_range(0.5..1.0);
            stamp(&d, amp, &mut img);
        }
        for proto in &prototypes[label] {
            let mut b = proto.clone();
            b.cy += r.gen_range(-spec.jitter..=spec.jitter);
            b.cx += r.gen_range(-spec.jitter..=spec.jitter);
            b.sigma *= r.gen_range(0.8..1.25);
            let amp = r.gen_range(0.6..1.0);
            stamp(&b, amp, &mut img);
        }
        data.extend(img.iter().map(|&v| (v + noise.sample(r)).clamp(0.0, 1.0) as f32));
        labels.push(label);
    }
    let images = Tensor::new(&[count, c, h, w], data)?;
    LabeledDataset::new(Role::Active, images, labels, spec.active_classes)
}

fn stripes(spec: &SynthSpec, r: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let [c, h, w] = spec.image;
    let noise = noise(spec);
    let count = spec.passive_count;
    let mut data = Vec::with_capacity(count * c * h * w);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % spec.passive_classes;
        let theta = std::f64::consts::PI * (label as f64 + r.gen_range(-0.2..0.2)) / spec.passive_classes as f64;
        let freq = r.gen_range(2.0..4.0);
        let phase = r.gen_range(0.0..std::f64::consts::TAU);
        // One dark and one light color per channel so the stripes stay visible.
        let mut c1 = Vec::with_capacity(c);
        let mut c2 = Vec::with_capacity(c);
        for _ in 0..c {
            let dark = r.gen_range(0.0..0.35);
            let light = r.gen_range(0.65..1.0);
            let (a, b) = if r.gen_bool(0.5) { (dark, light) } else { (light, dark) };
            c1.push(a);
            c2.push(b);
        }
        let (ct, st) = (theta.cos(), theta.sin());
        let mut img = vec![0.0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 / w as f64) * ct + (y as f64 / h as f64) * st;
                let t = 0.5 + 0.5 * (std::f64::consts::TAU * freq * u + phase).sin();
                for k in 0..c {
                    img[(k * h + y) * w + x] = (c1[k] * (1.0 - t) + c2[k] * t) as f32;
                }
            }
        }
        data.extend(img.iter().map(|&v| (v as f64 + noise.sample(r)).clamp(0.0, 1.0) as f32));
        labels.push(label);
    }
    let images = Tensor::new(&[count, c, h, w], data)?;
    LabeledDataset::new(Role::Passive, images, labels, spec.passive_classes)
}
