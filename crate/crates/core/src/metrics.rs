//! Accuracy evaluation and the overfit gap.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{DualHeadNetwork, StrippedModel};
use crate::tensor::Tensor;

/// Anything that maps a normalized `[B, C, H, W]` batch to logits in eval mode.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Classifier for StrippedModel<f32> {
    fn num_classes(&self) -> usize {
        self.active_spec().classes
    }

    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(batch)
    }
}

impl Classifier for DualHeadNetwork<f32> {
    fn num_classes(&self) -> usize {
        self.active_spec().classes
    }

    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict_active(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub correct: usize,
    pub total: usize,
    pub mean_loss: f64,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy and mean cross-entropy over every sample exactly once,
/// without augmentation.
pub fn evaluate(
    model: &impl Classifier,
    dataset: &LabeledDataset,
    norm: &Normalization,
    batch_size: usize,
) -> Result<EvalResult> {
    if model.num_classes() != dataset.classes {
        return Err(Error::Config(format!(
            "model predicts {} classes but dataset has {}",
            model.num_classes(),
            dataset.classes
        )));
    }
    let batch_size = batch_size.max(1);
    let k = dataset.classes;
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (mut x, labels) = dataset.gather(chunk);
        norm.apply(&mut x);
        let logits = model.logits(&x)?;
        for (row, &label) in logits.data().chunks_exact(k).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            loss_sum += z.ln() + max - row[label] as f64;
        }
    }
    let total = dataset.len();
    Ok(EvalResult {
        top1: correct as f64 / total as f64,
        correct,
        total,
        mean_loss: loss_sum / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub train_acc: f64,
    pub test_acc: f64,
    pub gap: f64,
}

impl GapRecord {
    pub fn new(train_acc: f64, test_acc: f64) -> Self {
        GapRecord {
            train_acc,
            test_acc,
            gap: train_acc - test_acc,
        }
    }
}
