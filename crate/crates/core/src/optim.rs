//! SGD with momentum and weight decay, plus the step learning-rate schedule.
//!
//! A step only ever touches the parameters it is handed. Whatever is left out
//! (the frozen head) keeps its values, its momentum buffer and its lack of
//! weight decay, bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Whether batch-norm gamma/beta are decayed like other parameters.
    pub decay_bn: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_bn: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    config: SgdConfig,
    buffers: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            buffers: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn buffer(&self, id: ParamId) -> Option<&[T]> {
        self.buffers.get(&id).map(Vec::as_slice)
    }

    /// FNV-1a over the momentum buffers of `ids` (absent buffers hash as a
    /// marker byte).
    pub fn buffer_checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for id in ids {
            match self.buffers.get(id) {
                None => eat(0xff),
                Some(buf) => {
                    for v in buf {
                        for b in v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes() {
                            eat(b);
                        }
                    }
                }
            }
        }
        h
    }

    /// For each `p` in `subset`: `g = grad + wd * p; buf = mu * buf + g;
    /// p -= lr * buf`, then clears the gradient. Fails before touching
    /// anything if some parameter in `subset` has no gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, subset: &[ParamId], lr: f64) -> Result<()> {
        if let Some(&missing) = subset.iter().find(|&&id| params.get(id).grad().is_none()) {
            return Err(Error::Usage(format!(
                "sgd step: parameter {} has no gradient",
                params.name(missing)
            )));
        }
        let lr = T::from_f64_lossy(lr);
        let mu = T::from_f64_lossy(self.config.momentum);
        for &id in subset {
            let decay = if !self.config.decay_bn && params.name(id).contains("/bn") {
                T::zero()
            } else {
                T::from_f64_lossy(self.config.weight_decay)
            };
            let p = params.get_mut(id);
            let grad = p.take_grad().expect("checked above");
            let buf = self
                .buffers
                .entry(id)
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((w, b), g) in p.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
                let g = g + decay * *w;
                *b = mu * *b + g;
                *w = *w - lr * *b;
            }
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `initial / factor^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.1,
            factor: 5.0,
            period: 50,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", self.initial)));
        }
        if !(self.factor >= 1.0 && self.factor.is_finite()) {
            return Err(Error::Config(format!("schedule.factor must be >= 1, got {}", self.factor)));
        }
        if self.period == 0 {
            return Err(Error::Config("schedule.period must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.period) as i32;
        self.initial / self.factor.powi(decays)
    }
}
