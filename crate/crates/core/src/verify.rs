//! Finite-difference verification of every differentiable op and of the
//! composed network, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck, gradcheck_eval, BnConfig, BnState, Graph, GradcheckOptions, Mode};
use crate::error::{Error, Result};
use crate::model::{DualHeadNetwork, HeadSpec, TrunkSpec};
use crate::tensor::Tensor;

/// Largest relative error any check may report.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteSize {
    /// Small shapes, sampled coordinates.
    Small,
    /// Larger shapes, every coordinate.
    Full,
}

impl std::str::FromStr for SuiteSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SuiteSize::Small),
            "full" => Ok(SuiteSize::Full),
            other => Err(Error::Config(format!("--spec: expected small or full, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive shape")
}

/// Values bounded away from zero so relu stays off its kink under the
/// finite-difference perturbation.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("positive shape")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

/// Runs one check per op, then the composed network. `fault_scale`
/// corrupts every analytic gradient by that factor.
pub fn gradcheck_suite(size: SuiteSize, fault_scale: Option<f64>) -> Result<Vec<OpCheck>> {
    let full = size == SuiteSize::Full;
    let opts = GradcheckOptions {
        max_coords_per_param: if full { None } else { Some(16) },
        fault_scale,
        ..GradcheckOptions::default()
    };
    let s = |small: usize, big: usize| if full { big } else { small };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut out = Vec::new();

    // linear
    let (b, din, dout) = (s(3, 8), s(4, 12), s(3, 10));
    let params = [
        uniform(&mut rng, &[b, din], -1.0, 1.0),
        uniform(&mut rng, &[din, dout], -1.0, 1.0),
        uniform(&mut rng, &[dout], -1.0, 1.0),
    ];
    let y = labels(&mut rng, b, dout);
    let err = gradcheck(&params, &opts, |g, v| {
        let z = g.linear(v[0], v[1], v[2])?;
        g.softmax_cross_entropy(z, &y)
    })?;
    out.push(OpCheck { op: "linear", max_rel_err: err });

    // conv2d: input, kernel and bias, strided and padded
    let (b, c, hw, k) = (s(2, 3), s(2, 3), s(5, 7), s(3, 4));
    let params = [
        uniform(&mut rng, &[b, c, hw, hw], -1.0, 1.0),
        uniform(&mut rng, &[k, c, 3, 3], -0.5, 0.5),
        uniform(&mut rng, &[k], -0.5, 0.5),
        uniform(&mut rng, &[k, 5], -1.0, 1.0),
    ];
    let y = labels(&mut rng, b, 5);
    let err = gradcheck(&params, &opts, |g, v| {
        let h = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let h = g.global_avg_pool(h)?;
        let zero = g.constant(&[5], vec![0.0; 5])?;
        let z = g.linear(h, v[3], zero)?;
        g.softmax_cross_entropy(z, &y)
    })?;
    out.push(OpCheck { op: "conv2d", max_rel_err: err });

    // relu, through a random projection
    let n = s(24, 96);
    let x = off_kink(&mut rng, &[2, n]);
    let w: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = labels(&mut rng, 2, 3);
    let err = gradcheck(&[x], &opts, |g, v| {
        let r = g.relu(v[0]);
        let wt = g.constant(&[n, 3], w.clone())?;
        let zero = g.constant(&[3], vec![0.0; 3])?;
        let z = g.linear(r, wt, zero)?;
        g.softmax_cross_entropy(z, &y)
    })?;
    out.push(OpCheck { op: "relu", max_rel_err: err });

    // batch_norm in train mode, gradients for input, gamma and beta
    let (b, c, hw) = (s(4, 6), s(3, 4), s(3, 4));
    let params = [
        uniform(&mut rng, &[b, c, hw, hw], -2.0, 3.0),
        uniform(&mut rng, &[c], 0.5, 1.5),
        uniform(&mut rng, &[c], -0.5, 0.5),
        uniform(&mut rng, &[c, 4], -1.0, 1.0),
    ];
    let y = labels(&mut rng, b, 4);
    let err = gradcheck(&params, &opts, |g, v| {
        let mut st = BnState::new(c);
        let h = g.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train, BnConfig::default())?;
        let h = g.global_avg_pool(h)?;
        let zero = g.constant(&[4], vec![0.0; 4])?;
        let z = g.linear(h, v[3], zero)?;
        g.softmax_cross_entropy(z, &y)
    })?;
    out.push(OpCheck { op: "batch_norm", max_rel_err: err });

    // softmax cross-entropy on raw logits
    let (b, k) = (s(4, 16), s(5, 10));
    let logits = uniform(&mut rng, &[b, k], -3.0, 3.0);
    let y = labels(&mut rng, b, k);
    let err = gradcheck(&[logits], &opts, |g, v| g.softmax_cross_entropy(v[0], &y))?;
    out.push(OpCheck { op: "softmax_xent", max_rel_err: err });

    // The real network code. The full check uses the four-block layout of the
    // desk-scale trunk at reduced widths.
    let (input, widths): ([usize; 3], &[usize]) = if full {
        ([3, 8, 8], &[4, 6, 8, 8])
    } else {
        ([2, 6, 6], &[3, 4])
    };
    let trunk = TrunkSpec::with_widths(input, widths);
    let head = HeadSpec {
        hidden: vec![5],
        classes: 4,
    };
    let net = DualHeadNetwork::<f64>::single_head(&trunk, &head, 11)?;
    let b = 4;
    let x = uniform(&mut rng, &[b, input[0], input[1], input[2]], -1.0, 1.0);
    let y = labels(&mut rng, b, 4);
    let names: Vec<String> = net.params().iter().map(|(_, n, _)| n.to_string()).collect();
    let mut params: Vec<Tensor<f64>> = net.params().iter().map(|(_, _, t)| t.clone()).collect();
    // Perturb BN affine parameters away from 1/0 so their gradients are generic.
    for (n, t) in names.iter().zip(params.iter_mut()) {
        if n.contains("/bn") {
            let shift = if n.ends_with("gamma") { 0.5 } else { -0.5 };
            for v in t.data_mut() {
                *v += shift + rng.gen_range(0.0..0.5);
            }
        }
        if n.ends_with("bias") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let err = gradcheck_eval(&params, &opts, |ps, want_grad| {
        let mut n = net.clone();
        for (id, p) in ps.iter().enumerate() {
            *n.params_mut().get_mut(id) = p.clone().with_requires_grad(true);
        }
        let mut g = Graph::new();
        let logits = n.forward_active(&mut g, &x, Mode::Train)?;
        let loss = g.softmax_cross_entropy(logits, &y)?;
        let value = g.scalar(loss);
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        n.params_mut().accumulate(&grads);
        let gs = (0..ps.len())
            .map(|id| {
                let t = n.params().get(id);
                t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect();
        Ok((value, gs))
    })?;
    out.push(OpCheck {
        op: "small_conv_net",
        max_rel_err: err,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes_and_lists_each_op_once() {
        let checks = gradcheck_suite(SuiteSize::Small, None).unwrap();
        let ops: Vec<&str> = checks.iter().map(|c| c.op).collect();
        assert_eq!(
            ops,
            ["linear", "conv2d", "relu", "batch_norm", "softmax_xent", "small_conv_net"]
        );
        for c in &checks {
            assert!(c.passed(), "{} {}", c.op, c.max_rel_err);
        }
    }

    #[test]
    fn injected_fault_fails_every_op() {
        for c in gradcheck_suite(SuiteSize::Small, Some(2.0)).unwrap() {
            assert!(!c.passed(), "{} {}", c.op, c.max_rel_err);
        }
    }
}
