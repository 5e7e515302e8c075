use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Coordinates checked per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. Used to confirm
    /// the check actually catches a wrong gradient.
    pub fault_scale: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            max_coords_per_param: Some(64),
            seed: 0,
            fault_scale: None,
        }
    }
}

/// Compares reverse-mode gradients of a scalar closure against central finite
/// differences and returns the worst relative error
/// `|a - n| / max(|a|, |n|, 1e-12)` over the checked coordinates.
///
/// The closure receives a fresh graph and one leaf per entry of `params` and
/// must return the loss node. It is evaluated twice at the base point first;
/// any bitwise difference is reported as [`Error::NonDeterministic`].
pub fn gradcheck<F>(params: &[Tensor<f64>], opts: &GradcheckOptions, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_eval(params, opts, |ps, want_grad| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| g.leaf(&p.clone().with_requires_grad(want_grad)))
            .collect();
        let loss = loss_fn(&mut g, &vars)?;
        let value = g.scalar(loss);
        let grads = if want_grad {
            let gr = g.backward(loss)?;
            vars.iter()
                .zip(ps)
                .map(|(v, p)| gr.wrt(*v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    })
}

/// Like [`gradcheck`], for losses that manage their own graph. `eval`
/// returns the loss and, when asked, one gradient per parameter.
pub fn gradcheck_eval<F>(params: &[Tensor<f64>], opts: &GradcheckOptions, mut eval: F) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (base, mut analytic) = eval(params, true)?;
    let (again, _) = eval(params, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    if let Some(s) = opts.fault_scale {
        analytic.iter_mut().flatten().for_each(|g| *g *= s);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < p.numel() => {
                let mut c = sample(&mut rng, p.numel(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.numel()).collect(),
        };
        for i in coords {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + opts.eps;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[i] = orig - opts.eps;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
