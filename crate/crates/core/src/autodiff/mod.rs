//! Reverse-mode differentiation over an explicit operation tape.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: each node's inputs were created before it. Parameters
//! enter the graph as leaves bound to a caller-chosen id; [`Graph::backward`]
//! returns gradients for every reachable leaf that requires them, and nothing
//! for leaves the loss does not depend on.

mod gradcheck;
pub mod kernels;

pub use gradcheck::{gradcheck, gradcheck_eval, GradcheckOptions};
pub use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::ChannelLayout;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T: Scalar> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Record<T: Scalar> {
    Leaf {
        binding: Option<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: Mode,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    record: Record<T>,
}

/// Operation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`]: one gradient per reached leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    leaves: Vec<(Var, Option<usize>, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(v, _, _)| *v == var)
            .map(|(_, _, g)| g.as_slice())
    }

    /// Gradients of leaves created through [`Graph::bound_leaf`], keyed by
    /// their binding id.
    pub fn bound(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.leaves
            .iter()
            .filter_map(|(_, b, g)| b.map(|id| (id, g.as_slice())))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, record: Record<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            record,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor into the graph; gradients flow to it iff the tensor
    /// requires them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Record::Leaf { binding: None },
        )
    }

    /// Like [`Graph::leaf`] but tags the node with an id reported back by
    /// [`Gradients::bound`].
    pub fn bound_leaf(&mut self, t: &Tensor<T>, binding: usize) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Record::Leaf {
                binding: Some(binding),
            },
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("linear(input, weight)", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::dim("linear(weight, bias)", ws, bs));
        }
        let (batch, d_in, d_out) = (xs[0], xs[1], ws[1]);
        let out = kernels::linear_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            batch,
            d_in,
            d_out,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(vec![batch, d_out], out, rg, Record::Linear { input, weight, bias }))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim("conv2d(input, kernel)", &xs, &ks));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::dim("conv2d(kernel, bias)", &ks, self.shape(b)));
            }
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, padding)?;
        let (out, cols) = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        // Patches are only needed for the kernel gradient.
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            geom.out_shape().to_vec(),
            out,
            rg,
            Record::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = kernels::relu_forward(self.value(input));
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(shape, out, rg, Record::Relu { input })
    }

    /// Per-channel batch normalization over `[B, C, ...]`.
    ///
    /// Train mode normalizes with biased batch statistics and folds them into
    /// `state`; eval mode normalizes with `state` and leaves it untouched.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("batch_norm(input)", &xs, &[0, 0]));
        }
        let channels = xs[1];
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::dim("batch_norm(input, gamma)", &xs, self.shape(gamma)));
        }
        if state.running_mean.len() != channels || state.running_var.len() != channels {
            return Err(Error::dim(
                "batch_norm(input, running stats)",
                &xs,
                &[state.running_mean.len()],
            ));
        }
        if mode == Mode::Train && xs[0] < 2 {
            return Err(Error::Usage(
                "batch_norm in train mode needs a batch of at least 2".into(),
            ));
        }
        let layout = ChannelLayout {
            batch: xs[0],
            channels,
            spatial: xs[2..].iter().product(),
        };
        let eps = T::from_f64_lossy(cfg.epsilon);
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(self.value(input), layout);
                let m = T::from_f64_lossy(cfg.momentum);
                for c in 0..channels {
                    state.running_mean[c] = (T::one() - m) * state.running_mean[c] + m * mean[c];
                    state.running_var[c] = (T::one() - m) * state.running_var[c] + m * var[c];
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(input);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for c in 0..channels {
            layout.for_each_in_channel(c, |i| {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            });
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            xs,
            out,
            rg,
            Record::BatchNorm {
                input,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                mode,
            },
        ))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("global_avg_pool(input)", &xs, &[0, 0, 0, 0]));
        }
        let plane = xs[2] * xs[3];
        let inv = T::one() / T::from_usize(plane).expect("plane fits scalar");
        let out = self
            .value(input)
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(input);
        Ok(self.push(vec![xs[0], xs[1]], out, rg, Record::GlobalAvgPool { input, plane }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy(logits, labels)", &ls, &[labels.len()]));
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                len: classes,
            });
        }
        let (loss, probs) = kernels::softmax_xent_forward(self.value(logits), labels, classes);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Record::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().copied().sum();
        let rg = self.rg(input);
        self.push(vec![1], vec![s], rg, Record::Sum { input })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).iter().map(|&v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(shape, out, rg, Record::Scale { input, factor })
    }

    /// Back-propagates from a one-element `loss` node.
    ///
    /// Only ancestors of `loss` are visited, each exactly once, in reverse
    /// creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {ls:?}"
            )));
        }
        let mut reachable = vec![false; loss.0 + 1];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reachable[i] && self.nodes[i].requires_grad {
                for v in self.inputs(i) {
                    reachable[v.0] = true;
                }
            }
        }

        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.record {
                Record::Leaf { binding } => leaves.push((Var(i), *binding, dy)),
                Record::Linear { input, weight, bias } => {
                    let xs = self.shape(*input);
                    let (batch, d_in, d_out) = (xs[0], xs[1], node.shape[1]);
                    let (dx, dw, db) = kernels::linear_backward(
                        self.value(*input),
                        self.value(*weight),
                        &dy,
                        batch,
                        d_in,
                        d_out,
                        self.rg(*input),
                    );
                    if let Some(dx) = dx {
                        self.acc(&mut adj, *input, dx);
                    }
                    self.acc(&mut adj, *weight, dw);
                    self.acc(&mut adj, *bias, db);
                }
                Record::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let (dx, dk, db) = kernels::conv2d_backward(
                        cols,
                        self.value(*kernel),
                        &dy,
                        geom,
                        self.rg(*input),
                    );
                    if let Some(dx) = dx {
                        self.acc(&mut adj, *input, dx);
                    }
                    self.acc(&mut adj, *kernel, dk);
                    if let Some(b) = bias {
                        self.acc(&mut adj, *b, db);
                    }
                }
                Record::Relu { input } => {
                    let x = self.value(*input);
                    let dx = dy
                        .iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    self.acc(&mut adj, *input, dx);
                }
                Record::BatchNorm {
                    input,
                    gamma,
                    beta,
                    layout,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let g = self.value(*gamma);
                    let mut dgamma = vec![T::zero(); layout.channels];
                    let mut dbeta = vec![T::zero(); layout.channels];
                    for c in 0..layout.channels {
                        layout.for_each_in_channel(c, |i| {
                            dgamma[c] = dgamma[c] + dy[i] * xhat[i];
                            dbeta[c] = dbeta[c] + dy[i];
                        });
                    }
                    if self.rg(*input) {
                        let mut dx = vec![T::zero(); dy.len()];
                        let m = T::from_usize(layout.count()).expect("count fits scalar");
                        for c in 0..layout.channels {
                            let scale = g[c] * inv_std[c];
                            match mode {
                                Mode::Eval => layout.for_each_in_channel(c, |i| dx[i] = dy[i] * scale),
                                Mode::Train => {
                                    // dxhat = dy * gamma; sums reuse dbeta/dgamma.
                                    let sum_d = dbeta[c];
                                    let sum_dx = dgamma[c];
                                    layout.for_each_in_channel(c, |i| {
                                        dx[i] = scale / m * (m * dy[i] - sum_d - xhat[i] * sum_dx);
                                    });
                                }
                            }
                        }
                        self.acc(&mut adj, *input, dx);
                    }
                    self.acc(&mut adj, *gamma, dgamma);
                    self.acc(&mut adj, *beta, dbeta);
                }
                Record::GlobalAvgPool { input, plane } => {
                    let inv = T::one() / T::from_usize(*plane).expect("plane fits scalar");
                    let mut dx = Vec::with_capacity(dy.len() * plane);
                    for &d in &dy {
                        dx.extend(std::iter::repeat_n(d * inv, *plane));
                    }
                    self.acc(&mut adj, *input, dx);
                }
                Record::SoftmaxXent { logits, labels, probs } => {
                    let classes = self.shape(*logits)[1];
                    let scale = dy[0] / T::from_usize(labels.len()).expect("batch fits scalar");
                    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (row, &label) in dx.chunks_exact_mut(classes).zip(labels) {
                        row[label] = row[label] - scale;
                    }
                    self.acc(&mut adj, *logits, dx);
                }
                Record::Sum { input } => {
                    let n = self.value(*input).len();
                    self.acc(&mut adj, *input, vec![dy[0]; n]);
                }
                Record::Scale { input, factor } => {
                    let dx = dy.iter().map(|&d| d * *factor).collect();
                    self.acc(&mut adj, *input, dx);
                }
            }
        }
        leaves.sort_by_key(|(v, _, _)| v.0);
        Ok(Gradients { leaves })
    }

    fn acc(&self, adj: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(a) => a.iter_mut().zip(&delta).for_each(|(a, &d)| *a = *a + d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].record {
            Record::Leaf { .. } => vec![],
            Record::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Record::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(*bias);
                v
            }
            Record::Relu { input }
            | Record::GlobalAvgPool { input, .. }
            | Record::Sum { input }
            | Record::Scale { input, .. } => vec![*input],
            Record::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Record::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

/// Accumulates graph gradients into tensors, following the `(tensor, var)`
/// pairing used when the leaves were created.
pub fn accumulate_into<T: Scalar>(grads: &Gradients<T>, targets: &mut [(&mut Tensor<T>, Var)]) {
    for (t, v) in targets.iter_mut() {
        if let Some(g) = grads.wrt(*v) {
            t.accumulate_grad(g);
        }
    }
}
