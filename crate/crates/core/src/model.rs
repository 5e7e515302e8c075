//! Dual-head network: a shared convolutional trunk feeding an active head and
//! a passive head, with every parameter assigned to exactly one partition.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnConfig, BnState, ConvGeom, Gradients, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    pub relu: bool,
}

impl ConvBlockSpec {
    pub fn bn_relu(out_channels: usize, stride: usize) -> Self {
        ConvBlockSpec {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
            batch_norm: true,
            relu: true,
        }
    }
}

/// Shared convolutional trunk; always ends in global average pooling, so its
/// output is a flat vector of `last block channels` features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkSpec {
    /// `(C, H, W)` of one input image.
    pub input: [usize; 3],
    pub blocks: Vec<ConvBlockSpec>,
}

impl TrunkSpec {
    /// Four 3x3 conv+BN+ReLU blocks (32, 64, 128, 128 channels), stride 2 on
    /// blocks 2-4.
    pub fn small_conv_net(input: [usize; 3]) -> Self {
        Self::with_widths(input, &[32, 64, 128, 128])
    }

    /// SmallConvNet layout with custom widths: stride 1 on the first block,
    /// stride 2 afterwards.
    pub fn with_widths(input: [usize; 3], widths: &[usize]) -> Self {
        TrunkSpec {
            input,
            blocks: widths
                .iter()
                .enumerate()
                .map(|(i, &w)| ConvBlockSpec::bn_relu(w, if i == 0 { 1 } else { 2 }))
                .collect(),
        }
    }

    /// Checks every block has a positive output extent; returns the spatial
    /// extents after each block.
    pub fn validate(&self) -> Result<Vec<[usize; 3]>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("trunk input extents must be positive, got {:?}", self.input)));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("trunk needs at least one conv block".into()));
        }
        let mut shapes = Vec::with_capacity(self.blocks.len());
        let (mut c, mut h, mut w) = (c, h, w);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(Error::Config(format!("trunk block {i}: out_channels must be positive")));
            }
            let g = ConvGeom::new(1, c, h, w, b.out_channels, b.kernel, b.kernel, b.stride, b.padding)
                .map_err(|e| Error::Config(format!("trunk block {i}: {e}")))?;
            (c, h, w) = (b.out_channels, g.out_h, g.out_w);
            shapes.push([c, h, w]);
        }
        Ok(shapes)
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    /// Closed-form trunk parameter count.
    pub fn param_count(&self) -> usize {
        let mut c = self.input[0];
        let mut total = 0;
        for b in &self.blocks {
            total += b.out_channels * c * b.kernel * b.kernel;
            total += if b.batch_norm { 2 * b.out_channels } else { b.out_channels };
            c = b.out_channels;
        }
        total
    }
}

/// Fully connected classifier head: optional hidden ReLU layers then a
/// linear layer to `classes` logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl HeadSpec {
    pub fn linear(classes: usize) -> Self {
        HeadSpec {
            hidden: Vec::new(),
            classes,
        }
    }

    fn widths(&self, features: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![features];
        dims.extend(&self.hidden);
        dims.push(self.classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Closed-form count: sum over layers of `in * out + out`.
    pub fn param_count(&self, features: usize) -> usize {
        self.widths(features).iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self, role: &str) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("{role} head needs at least 2 classes, got {}", self.classes)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config(format!("{role} head hidden widths must be positive")));
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Partition {
    /// Shared trunk, `W/*`.
    Trunk,
    /// Active head, `MA/*`.
    Active,
    /// Passive head, `MP/*`.
    Passive,
}

impl Partition {
    pub fn prefix(self) -> &'static str {
        match self {
            Partition::Trunk => "W",
            Partition::Active => "MA",
            Partition::Passive => "MP",
        }
    }

    pub fn of_name(name: &str) -> Option<Self> {
        match name.split('/').next()? {
            "W" => Some(Partition::Trunk),
            "MA" => Some(Partition::Active),
            "MP" => Some(Partition::Passive),
            _ => None,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

pub type ParamId = usize;

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: String, tensor: Tensor<T>) -> Result<ParamId> {
        if Partition::of_name(&name).is_none() {
            return Err(Error::Config(format!("parameter {name} has no partition prefix")));
        }
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn partition(&self, id: ParamId) -> Partition {
        Partition::of_name(&self.names[id]).expect("names are validated on insert")
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (i, n.as_str(), t))
    }

    pub fn ids_in(&self, parts: &[Partition]) -> Vec<ParamId> {
        (0..self.len()).filter(|&i| parts.contains(&self.partition(i))).collect()
    }

    /// Adds graph gradients of bound leaves into the matching parameters.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.bound() {
            self.tensors[id].accumulate_grad(g);
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// FNV-1a over the raw bits of every scalar in `parts`, in store order.
    pub fn checksum(&self, parts: &[Partition]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in self.ids_in(parts) {
            for v in self.tensors[id].data() {
                let bits = v.to_f64().unwrap_or(f64::NAN).to_bits();
                for b in bits.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Per-partition parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Census {
    pub trunk: usize,
    pub active: usize,
    pub passive: usize,
}

impl Census {
    pub fn total(&self) -> usize {
        self.trunk + self.active + self.passive
    }

    pub fn of<T: Scalar>(params: &ParamStore<T>) -> Self {
        let mut c = Census::default();
        for (id, _, t) in params.iter() {
            match params.partition(id) {
                Partition::Trunk => c.trunk += t.numel(),
                Partition::Active => c.active += t.numel(),
                Partition::Passive => c.passive += t.numel(),
            }
        }
        c
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: Option<ParamId>,
    bn: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct LinearLayer {
    weight: ParamId,
    bias: ParamId,
}

/// Parameter ids for each layer, resolved by name from a [`ParamStore`].
#[derive(Debug, Clone)]
struct Layout {
    trunk: Vec<ConvLayer>,
    active: Vec<LinearLayer>,
    passive: Option<Vec<LinearLayer>>,
}

fn conv_names(i: usize) -> [String; 4] {
    [
        format!("W/conv{i}/weight"),
        format!("W/conv{i}/bias"),
        format!("W/bn{i}/gamma"),
        format!("W/bn{i}/beta"),
    ]
}

fn fc_names(part: Partition, j: usize) -> [String; 2] {
    [
        format!("{}/fc{j}/weight", part.prefix()),
        format!("{}/fc{j}/bias", part.prefix()),
    ]
}

impl Layout {
    fn resolve<T: Scalar>(
        params: &ParamStore<T>,
        trunk: &TrunkSpec,
        active: &HeadSpec,
        passive: Option<&HeadSpec>,
    ) -> Result<Self> {
        let need = |n: &str| {
            params
                .id(n)
                .ok_or_else(|| Error::Config(format!("missing parameter {n}")))
        };
        let trunk_layers = trunk
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let [w, bias, gamma, beta] = conv_names(i);
                Ok(ConvLayer {
                    weight: need(&w)?,
                    bias: if b.batch_norm { None } else { Some(need(&bias)?) },
                    bn: if b.batch_norm {
                        Some((need(&gamma)?, need(&beta)?))
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = |part: Partition, spec: &HeadSpec| {
            (0..spec.hidden.len() + 1)
                .map(|j| {
                    let [w, b] = fc_names(part, j);
                    Ok(LinearLayer {
                        weight: need(&w)?,
                        bias: need(&b)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Layout {
            trunk: trunk_layers,
            active: head(Partition::Active, active)?,
            passive: passive.map(|p| head(Partition::Passive, p)).transpose()?,
        })
    }
}

fn he_uniform<T: Scalar>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut r = rng::stream(seed, &format!("init/{name}"));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(r.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

fn init_head<T: Scalar>(
    params: &mut ParamStore<T>,
    part: Partition,
    spec: &HeadSpec,
    features: usize,
    seed: u64,
) -> Result<()> {
    for (j, (d_in, d_out)) in spec.widths(features).into_iter().enumerate() {
        let [w, b] = fc_names(part, j);
        let wt = he_uniform(seed, &w, &[d_in, d_out], d_in);
        params.insert(w, wt)?;
        params.insert(b, Tensor::zeros(&[d_out]))?;
    }
    Ok(())
}

/// Trunk, layer layout and BN state shared by the dual network and the
/// stripped model, so both run literally the same forward code.
#[derive(Debug, Clone)]
struct Core<T: Scalar> {
    trunk: TrunkSpec,
    active: HeadSpec,
    passive: Option<HeadSpec>,
    bn_config: BnConfig,
    params: ParamStore<T>,
    bn: Vec<BnState<T>>,
    layout: Layout,
}

impl<T: Scalar> Core<T> {
    fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.bound_leaf(self.params.get(id), id)
    }

    fn input(&self, g: &mut Graph<T>, batch: &Tensor<T>) -> Result<Var> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.trunk.input {
            let mut want = vec![0];
            want.extend(self.trunk.input);
            return Err(Error::dim("network input", s, &want));
        }
        Ok(g.leaf(&batch.clone().with_requires_grad(false)))
    }

    fn features(&mut self, g: &mut Graph<T>, batch: &Tensor<T>, mode: Mode) -> Result<Var> {
        let mut h = self.input(g, batch)?;
        let mut bn_idx = 0;
        for (i, block) in self.trunk.blocks.iter().enumerate() {
            let layer = &self.layout.trunk[i];
            let w = self.bind(g, layer.weight);
            let b = layer.bias.map(|b| self.bind(g, b));
            h = g.conv2d(h, w, b, block.stride, block.padding)?;
            if let Some((gamma, beta)) = layer.bn {
                let gv = self.bind(g, gamma);
                let bv = self.bind(g, beta);
                h = g.batch_norm(h, gv, bv, &mut self.bn[bn_idx], mode, self.bn_config)?;
                bn_idx += 1;
            }
            if block.relu {
                h = g.relu(h);
            }
        }
        g.global_avg_pool(h)
    }

    fn head(&self, g: &mut Graph<T>, features: Var, part: Partition) -> Result<Var> {
        let layers = match part {
            Partition::Active => &self.layout.active,
            Partition::Passive => self
                .layout
                .passive
                .as_ref()
                .ok_or_else(|| Error::Usage("network has no passive head".into()))?,
            Partition::Trunk => return Err(Error::Usage("trunk is not a head".into())),
        };
        let mut h = features;
        for (j, layer) in layers.iter().enumerate() {
            let w = self.bind(g, layer.weight);
            let b = self.bind(g, layer.bias);
            h = g.linear(h, w, b)?;
            if j + 1 < layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    fn forward(&mut self, g: &mut Graph<T>, batch: &Tensor<T>, mode: Mode, part: Partition) -> Result<Var> {
        let f = self.features(g, batch, mode)?;
        self.head(g, f, part)
    }
}

/// Shared trunk plus active head and (optionally) a passive head.
///
/// Built without a passive head it is the plain single-head baseline network.
#[derive(Debug, Clone)]
pub struct DualHeadNetwork<T: Scalar> {
    core: Core<T>,
}

impl<T: Scalar> DualHeadNetwork<T> {
    /// He-uniform conv/linear weights, zero biases, BN gamma 1 / beta 0. Each
    /// tensor draws from its own stream keyed by its name, so adding or
    /// removing the passive head does not perturb any other initial value.
    pub fn build(trunk: &TrunkSpec, active: &HeadSpec, passive: &HeadSpec, init_seed: u64) -> Result<Self> {
        Self::build_inner(trunk, active, Some(passive), init_seed)
    }

    /// Baseline network with the active head only.
    pub fn single_head(trunk: &TrunkSpec, active: &HeadSpec, init_seed: u64) -> Result<Self> {
        Self::build_inner(trunk, active, None, init_seed)
    }

    fn build_inner(trunk: &TrunkSpec, active: &HeadSpec, passive: Option<&HeadSpec>, seed: u64) -> Result<Self> {
        trunk.validate()?;
        active.validate("active")?;
        if let Some(p) = passive {
            p.validate("passive")?;
        }
        let mut params = ParamStore::default();
        let mut bn = Vec::new();
        let mut c = trunk.input[0];
        for (i, b) in trunk.blocks.iter().enumerate() {
            let [w, bias, gamma, beta] = conv_names(i);
            let fan_in = c * b.kernel * b.kernel;
            let wt = he_uniform(seed, &w, &[b.out_channels, c, b.kernel, b.kernel], fan_in);
            params.insert(w, wt)?;
            if b.batch_norm {
                params.insert(gamma, Tensor::full(&[b.out_channels], T::one()))?;
                params.insert(beta, Tensor::zeros(&[b.out_channels]))?;
                bn.push(BnState::new(b.out_channels));
            } else {
                params.insert(bias, Tensor::zeros(&[b.out_channels]))?;
            }
            c = b.out_channels;
        }
        let features = trunk.feature_dim();
        init_head(&mut params, Partition::Active, active, features, seed)?;
        if let Some(p) = passive {
            init_head(&mut params, Partition::Passive, p, features, seed)?;
        }
        let layout = Layout::resolve(&params, trunk, active, passive)?;
        Ok(DualHeadNetwork {
            core: Core {
                trunk: trunk.clone(),
                active: active.clone(),
                passive: passive.cloned(),
                bn_config: BnConfig::default(),
                params,
                bn,
                layout,
            },
        })
    }

    pub fn with_bn_config(mut self, cfg: BnConfig) -> Self {
        self.core.bn_config = cfg;
        self
    }

    pub fn trunk_spec(&self) -> &TrunkSpec {
        &self.core.trunk
    }

    pub fn active_spec(&self) -> &HeadSpec {
        &self.core.active
    }

    pub fn passive_spec(&self) -> Option<&HeadSpec> {
        self.core.passive.as_ref()
    }

    pub fn bn_config(&self) -> BnConfig {
        self.core.bn_config
    }

    pub fn has_passive_head(&self) -> bool {
        self.core.passive.is_some()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.core.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.core.params
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.core.bn
    }

    /// Replaces the running statistics of every BN layer.
    pub fn restore_bn_states(&mut self, states: Vec<BnState<T>>) {
        assert_eq!(states.len(), self.core.bn.len(), "one state per BN layer");
        self.core.bn = states;
    }

    pub fn census(&self) -> Census {
        Census::of(&self.core.params)
    }

    /// Pooled trunk features `W(x)`, shape `[B, F]`.
    pub fn features(&mut self, g: &mut Graph<T>, batch: &Tensor<T>, mode: Mode) -> Result<Var> {
        self.core.features(g, batch, mode)
    }

    /// `M_A(W(x))`; the passive head never enters the graph.
    pub fn forward_active(&mut self, g: &mut Graph<T>, batch: &Tensor<T>, mode: Mode) -> Result<Var> {
        self.core.forward(g, batch, mode, Partition::Active)
    }

    /// `M_P(W(x))`; the active head never enters the graph.
    pub fn forward_passive(&mut self, g: &mut Graph<T>, batch: &Tensor<T>, mode: Mode) -> Result<Var> {
        self.core.forward(g, batch, mode, Partition::Passive)
    }

    /// Eval-mode active logits without touching BN state.
    pub fn predict_active(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut core = self.core.clone();
        let mut g = Graph::new();
        let out = core.forward(&mut g, batch, Mode::Eval, Partition::Active)?;
        Ok(g.to_tensor(out))
    }

    /// Drops every `MP/*` parameter. The result runs the same forward code on
    /// the same trunk and active-head values.
    pub fn strip_passive_head(&self) -> StrippedModel<T> {
        let mut params = ParamStore::default();
        for (id, name, t) in self.core.params.iter() {
            if self.core.params.partition(id) != Partition::Passive {
                let mut t = t.clone();
                t.zero_grad();
                params.insert(name.to_string(), t).expect("names already unique");
            }
        }
        let layout = Layout::resolve(&params, &self.core.trunk, &self.core.active, None)
            .expect("trunk and active layers are all present");
        StrippedModel {
            core: Core {
                trunk: self.core.trunk.clone(),
                active: self.core.active.clone(),
                passive: None,
                bn_config: self.core.bn_config,
                params,
                bn: self.core.bn.clone(),
                layout,
            },
        }
    }
}

/// Final single-head model: trunk plus active head.
#[derive(Debug, Clone)]
pub struct StrippedModel<T: Scalar> {
    core: Core<T>,
}

impl<T: Scalar> StrippedModel<T> {
    /// Reassembles a model from named tensors, e.g. a loaded checkpoint.
    pub fn from_parts(
        trunk: TrunkSpec,
        active: HeadSpec,
        bn_config: BnConfig,
        tensors: BTreeMap<String, Tensor<T>>,
        bn: Vec<BnState<T>>,
    ) -> Result<Self> {
        trunk.validate()?;
        active.validate("active")?;
        // Re-insert in the canonical creation order.
        let reference = DualHeadNetwork::<T>::single_head(&trunk, &active, 0)?;
        let mut params = ParamStore::default();
        let mut tensors = tensors;
        for (_, name, t) in reference.params().iter() {
            let loaded = tensors
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::dim("checkpoint parameter", loaded.shape(), t.shape()));
            }
            params.insert(name.to_string(), loaded)?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        if bn.len() != reference.bn_states().len()
            || bn.iter().zip(reference.bn_states()).any(|(a, b)| a.running_mean.len() != b.running_mean.len())
        {
            return Err(Error::Config("batch-norm state does not match trunk".into()));
        }
        let layout = Layout::resolve(&params, &trunk, &active, None)?;
        Ok(StrippedModel {
            core: Core {
                trunk,
                active,
                passive: None,
                bn_config,
                params,
                bn,
                layout,
            },
        })
    }

    pub fn trunk_spec(&self) -> &TrunkSpec {
        &self.core.trunk
    }

    pub fn active_spec(&self) -> &HeadSpec {
        &self.core.active
    }

    pub fn bn_config(&self) -> BnConfig {
        self.core.bn_config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.core.params
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.core.bn
    }

    pub fn census(&self) -> Census {
        Census::of(&self.core.params)
    }

    pub fn num_classes(&self) -> usize {
        self.core.active.classes
    }

    pub fn forward(&mut self, g: &mut Graph<T>, batch: &Tensor<T>, mode: Mode) -> Result<Var> {
        self.core.forward(g, batch, mode, Partition::Active)
    }

    /// Eval-mode logits; read-only, so a trained model can be shared.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut core = self.core.clone();
        let mut g = Graph::new();
        let out = core.forward(&mut g, batch, Mode::Eval, Partition::Active)?;
        Ok(g.to_tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny_trunk() -> TrunkSpec {
        TrunkSpec::with_widths([3, 8, 8], &[4, 6])
    }

    fn random_batch(seed: u64, b: usize, shape: [usize; 3]) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = b * shape.iter().product::<usize>();
        Tensor::new(&[b, shape[0], shape[1], shape[2]], (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn active_head_count_closed_form() {
        let trunk = TrunkSpec::with_widths([1, 4, 4], &[4]);
        assert_eq!(trunk.feature_dim(), 4);
        let net = DualHeadNetwork::<f32>::build(&trunk, &HeadSpec::linear(3), &HeadSpec::linear(5), 0).unwrap();
        assert_eq!(net.census().active, 15);
        assert_eq!(net.census().passive, 4 * 5 + 5);
    }

    #[test]
    fn census_matches_closed_form_and_enumeration() {
        let trunk = tiny_trunk();
        let active = HeadSpec { hidden: vec![7], classes: 10 };
        let passive = HeadSpec::linear(4);
        let net = DualHeadNetwork::<f32>::build(&trunk, &active, &passive, 1).unwrap();
        let c = net.census();
        assert_eq!(c.trunk, trunk.param_count());
        assert_eq!(c.active, (6 * 7 + 7) + (7 * 10 + 10));
        assert_eq!(c.passive, passive.param_count(6));
        let brute: usize = net.params().iter().map(|(_, _, t)| t.numel()).sum();
        assert_eq!(c.total(), brute);
        let stripped = net.strip_passive_head();
        assert_eq!(c.total() - stripped.census().total(), passive.param_count(6));
        let baseline = DualHeadNetwork::<f32>::single_head(&trunk, &active, 1).unwrap();
        assert_eq!(stripped.census(), baseline.census());
    }

    #[test]
    fn build_is_deterministic_and_partition_independent() {
        let trunk = tiny_trunk();
        let a = DualHeadNetwork::<f32>::build(&trunk, &HeadSpec::linear(3), &HeadSpec::linear(4), 9).unwrap();
        let b = DualHeadNetwork::<f32>::build(&trunk, &HeadSpec::linear(3), &HeadSpec::linear(4), 9).unwrap();
        assert_eq!(a.params(), b.params());
        let single = DualHeadNetwork::<f32>::single_head(&trunk, &HeadSpec::linear(3), 9).unwrap();
        let parts = [Partition::Trunk, Partition::Active];
        assert_eq!(a.params().checksum(&parts), single.params().checksum(&parts));
        let other = DualHeadNetwork::<f32>::build(&trunk, &HeadSpec::linear(3), &HeadSpec::linear(4), 10).unwrap();
        assert_ne!(a.params().checksum(&parts), other.params().checksum(&parts));
    }

    #[test]
    fn infeasible_trunk_is_config_error() {
        let trunk = TrunkSpec {
            input: [3, 2, 2],
            blocks: vec![ConvBlockSpec {
                out_channels: 4,
                kernel: 5,
                stride: 1,
                padding: 0,
                batch_norm: true,
                relu: true,
            }],
        };
        assert!(matches!(
            DualHeadNetwork::<f32>::single_head(&trunk, &HeadSpec::linear(2), 0),
            Err(Error::Config(_))
        ));
        assert!(DualHeadNetwork::<f32>::single_head(&tiny_trunk(), &HeadSpec::linear(1), 0).is_err());
    }

    #[test]
    fn zero_image_logits_equal_bias_path() {
        let mut net = DualHeadNetwork::<f32>::build(&tiny_trunk(), &HeadSpec::linear(3), &HeadSpec::linear(4), 2).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let logits = net.predict_active(&x).unwrap();
        // Zero input and zero biases: each BN sees a constant zero channel, so
        // eval BN outputs beta = 0 everywhere and logits are the head bias.
        assert_eq!(logits.data(), &[0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let v = net.forward_active(&mut g, &x, Mode::Eval).unwrap();
        assert_eq!(g.value(v), &[0.0; 3]);
    }

    #[test]
    fn graph_isolation_of_heads() {
        let mut net = DualHeadNetwork::<f32>::build(&tiny_trunk(), &HeadSpec::linear(3), &HeadSpec::linear(4), 3).unwrap();
        let x = random_batch(1, 4, [3, 8, 8]);
        let mut g = Graph::new();
        let logits = net.forward_active(&mut g, &x, Mode::Train).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0, 1, 2, 0]).unwrap();
        let grads = g.backward(loss).unwrap();
        net.params_mut().accumulate(&grads);
        for (id, _, t) in net.params().iter() {
            let has = t.grad().is_some();
            assert_eq!(has, net.params().partition(id) != Partition::Passive, "{}", net.params().name(id));
        }
        net.params_mut().zero_grads();

        let mut g = Graph::new();
        let logits = net.forward_passive(&mut g, &x, Mode::Train).unwrap();
        assert_eq!(g.shape(logits), &[4, 4]);
        let loss = g.softmax_cross_entropy(logits, &[0, 1, 2, 3]).unwrap();
        let grads = g.backward(loss).unwrap();
        net.params_mut().accumulate(&grads);
        for (id, _, t) in net.params().iter() {
            assert_eq!(t.grad().is_some(), net.params().partition(id) != Partition::Active);
        }
    }

    #[test]
    fn heads_share_trunk_features() {
        let mut net = DualHeadNetwork::<f32>::build(&tiny_trunk(), &HeadSpec::linear(3), &HeadSpec::linear(10), 4).unwrap();
        let x = random_batch(2, 3, [3, 8, 8]);
        let mut g = Graph::new();
        let fa = net.features(&mut g, &x, Mode::Eval).unwrap();
        let a = g.to_tensor(fa);
        let lp = net.forward_passive(&mut g, &x, Mode::Eval).unwrap();
        assert_eq!(g.shape(lp), &[3, 10]);
        let fp = net.features(&mut g, &x, Mode::Eval).unwrap();
        assert_eq!(a, g.to_tensor(fp));
    }

    #[test]
    fn eval_output_independent_of_batch_mates() {
        let mut net = DualHeadNetwork::<f32>::build(&tiny_trunk(), &HeadSpec::linear(3), &HeadSpec::linear(4), 5).unwrap();
        // Move running stats away from their initial values first.
        let mut g = Graph::new();
        net.forward_active(&mut g, &random_batch(9, 8, [3, 8, 8]), Mode::Train).unwrap();
        let batch = random_batch(3, 8, [3, 8, 8]);
        let single = batch.select_rows(&[5]);
        let all = net.predict_active(&batch).unwrap();
        let one = net.predict_active(&single).unwrap();
        for (a, b) in all.data()[15..18].iter().zip(one.data()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn stripped_forward_is_bitwise_identical() {
        let mut net = DualHeadNetwork::<f32>::build(&tiny_trunk(), &HeadSpec::linear(3), &HeadSpec::linear(4), 6).unwrap();
        let mut g = Graph::new();
        net.forward_active(&mut g, &random_batch(4, 8, [3, 8, 8]), Mode::Train).unwrap();
        let mut stripped = net.strip_passive_head();
        assert!(stripped.params().iter().all(|(_, n, _)| !n.starts_with("MP/")));
        for mode in [Mode::Eval, Mode::Train] {
            let x = random_batch(7, 4, [3, 8, 8]);
            let mut g1 = Graph::new();
            let a = net.forward_active(&mut g1, &x, mode).unwrap();
            let mut g2 = Graph::new();
            let b = stripped.forward(&mut g2, &x, mode).unwrap();
            let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(g1.value(a)), bits(g2.value(b)));
        }
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let net = DualHeadNetwork::<f32>::build(&tiny_trunk(), &HeadSpec::linear(3), &HeadSpec::linear(4), 6).unwrap();
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        assert!(matches!(net.predict_active(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_head_has_no_passive_forward() {
        let mut net = DualHeadNetwork::<f32>::single_head(&tiny_trunk(), &HeadSpec::linear(3), 6).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            net.forward_passive(&mut g, &Tensor::zeros(&[2, 3, 8, 8]), Mode::Eval),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn small_conv_net_shape() {
        let t = TrunkSpec::small_conv_net([3, 32, 32]);
        let shapes = t.validate().unwrap();
        assert_eq!(shapes, vec![[32, 32, 32], [64, 16, 16], [128, 8, 8], [128, 4, 4]]);
        assert_eq!(t.feature_dim(), 128);
        assert_eq!(
            t.param_count(),
            (32 * 27 + 64) + (64 * 32 * 9 + 128) + (128 * 64 * 9 + 256) + (128 * 128 * 9 + 256)
        );
    }
}
