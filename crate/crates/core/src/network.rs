//! Layer stacks, classifier heads and head placement.
//!
//! A body is a flat list of [`LayerSpec`]s. Weight-bearing layers (dense and
//! conv) open a new *block*; every non-weight layer that follows belongs to
//! the block of the preceding weight layer. Head `m` is attached at
//! weight-layer index `r_m` (1-based) and reads the output of that block.
//! Layers before the first weight layer (typically a flatten) form a prefix
//! that belongs to no block.
//!
//! All activations carry a leading batch dimension: a body with per-sample
//! input shape `[C, H, W]` consumes `[B, C, H, W]`.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::ScoreMatrix;
use crate::rng::RngState;
use crate::tensor::{gemm, pool_extent, softmax_in_place, ConvGeometry, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Init {
    Gaussian { std: f64 },
    /// Uniform on `±sqrt(3 / fan_in)`.
    #[default]
    Xavier,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default)]
        init: Init,
    },
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
        #[serde(default)]
        init: Init,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            init: Init::Xavier,
        }
    }

    pub fn conv(filters: usize, kernel: usize, padding: Padding) -> Self {
        LayerSpec::Conv {
            filters,
            kernel,
            stride: 1,
            padding,
            init: Init::Xavier,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max-pool",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Replaces the init of a weight-bearing layer.
    pub fn with_init(mut self, new: Init) -> Self {
        if let LayerSpec::Dense { init, .. } | LayerSpec::Conv { init, .. } = &mut self {
            *init = new;
        }
        self
    }
}

/// Learnable tensors of one weight layer. The bias is kept separate from the
/// weight matrix but is penalized and updated like every other weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Param {
    pub fn zeros_like(other: &Param) -> Param {
        Param {
            weight: Tensor::zeros(other.weight.shape()),
            bias: Tensor::zeros(other.bias.shape()),
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    param: Option<usize>,
    conv: Option<ConvGeometry>,
}

/// An instantiated sequential layer list with its parameters.
#[derive(Debug, Clone)]
pub struct Stack {
    layers: Vec<Layer>,
    params: Vec<Param>,
    input_shape: Vec<usize>,
}

fn build_error(owner: &str, index: usize, spec: &LayerSpec, msg: impl Into<String>) -> Error {
    Error::Build {
        layer: format!("{owner} layer {index} ({})", spec.name()),
        msg: msg.into(),
    }
}

fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut RngState) -> Tensor {
    let mut t = Tensor::zeros(shape);
    match init {
        Init::Gaussian { std } => t.data_mut().iter_mut().for_each(|v| *v = rng.normal(0.0, std)),
        Init::Xavier => {
            let a = (3.0 / fan_in as f64).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-a, a));
        }
    }
    t
}

impl Stack {
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], rng: &mut RngState, owner: &str) -> Result<Stack> {
        if specs.is_empty() {
            return Err(Error::Build {
                layer: owner.to_string(),
                msg: "layer list is empty".into(),
            });
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Build {
                layer: owner.to_string(),
                msg: format!("invalid input shape {input_shape:?}"),
            });
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let err = |msg: String| build_error(owner, i, spec, msg);
            let mut conv = None;
            let mut param = None;
            let out_shape = match *spec {
                LayerSpec::Dense { units, init } => {
                    if shape.len() != 1 {
                        return Err(err(format!(
                            "dense needs a flat input, got {shape:?} (insert a flatten layer)"
                        )));
                    }
                    if units == 0 {
                        return Err(err("units must be positive".into()));
                    }
                    if let Init::Gaussian { std } = init {
                        if !(std >= 0.0 && std.is_finite()) {
                            return Err(err("gaussian std must be finite and >= 0".into()));
                        }
                    }
                    let weight = init_tensor(&[units, shape[0]], shape[0], init, rng);
                    param = Some(params.len());
                    params.push(Param {
                        weight,
                        bias: Tensor::zeros(&[units]),
                    });
                    vec![units]
                }
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                    init,
                } => {
                    if shape.len() != 3 {
                        return Err(err(format!("conv needs a [C,H,W] input, got {shape:?}")));
                    }
                    if filters == 0 || kernel == 0 {
                        return Err(err("filters and kernel must be positive".into()));
                    }
                    let kshape = [filters, shape[0], kernel, kernel];
                    let geo = ConvGeometry::new(&shape, &kshape, stride, padding)
                        .map_err(|e| err(e.to_string()))?;
                    let weight = init_tensor(&kshape, shape[0] * kernel * kernel, init, rng);
                    param = Some(params.len());
                    params.push(Param {
                        weight,
                        bias: Tensor::zeros(&[filters]),
                    });
                    conv = Some(geo);
                    geo.output_shape().to_vec()
                }
                LayerSpec::Relu => shape.clone(),
                LayerSpec::MaxPool { size, stride } => {
                    if shape.len() != 3 {
                        return Err(err(format!("max-pool needs a [C,H,W] input, got {shape:?}")));
                    }
                    let (oh, ow) = pool_extent(shape[1], shape[2], size, stride).ok_or_else(|| {
                        err(format!("window {size} stride {stride} does not fit {shape:?}"))
                    })?;
                    vec![shape[0], oh, ow]
                }
                LayerSpec::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(err(format!(
                            "global-avg-pool needs a [C,H,W] input, got {shape:?}"
                        )));
                    }
                    vec![shape[0]]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Softmax => {
                    if shape.len() != 1 {
                        return Err(err(format!("softmax needs a flat input, got {shape:?}")));
                    }
                    shape.clone()
                }
            };
            layers.push(Layer {
                spec: spec.clone(),
                in_shape: shape,
                out_shape: out_shape.clone(),
                param,
                conv,
            });
            shape = out_shape;
        }
        Ok(Stack {
            layers,
            params,
            input_shape: input_shape.to_vec(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.layers.last().expect("stack is nonempty").out_shape
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.layers[i].out_shape
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Layer index owning each entry of [`Stack::params`].
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].param.is_some())
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Runs every layer; returns `[input, out_0, out_1, ...]`.
    pub fn forward(&self, x: Tensor) -> Result<Vec<Tensor>> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "input batch {:?} does not match per-sample shape {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let next = self.layer_forward(layer, acts.last().expect("nonempty"));
            acts.push(next);
        }
        Ok(acts)
    }

    fn layer_forward(&self, layer: &Layer, x: &Tensor) -> Tensor {
        let batch = x.shape()[0];
        let in_len: usize = layer.in_shape.iter().product();
        let out_len: usize = layer.out_shape.iter().product();
        let mut shape = vec![batch];
        shape.extend_from_slice(&layer.out_shape);
        let mut out = Tensor::zeros(&shape);
        let src = x.data();
        let dst = out.data_mut();
        match &layer.spec {
            LayerSpec::Dense { .. } => {
                let p = &self.params[layer.param.expect("dense has params")];
                // out[b, j] = Σ_i x[b, i] W[j, i] + bias[j]
                gemm(
                    batch,
                    in_len,
                    out_len,
                    1.0,
                    src,
                    (in_len, 1),
                    p.weight.data(),
                    (1, in_len),
                    0.0,
                    dst,
                    (out_len, 1),
                );
                for row in dst.chunks_exact_mut(out_len) {
                    for (v, b) in row.iter_mut().zip(p.bias.data()) {
                        *v += b;
                    }
                }
            }
            LayerSpec::Conv { .. } => {
                let p = &self.params[layer.param.expect("conv has params")];
                let geo = layer.conv.expect("conv geometry");
                let plane = geo.out_h * geo.out_w;
                for (xs, ys) in src.chunks_exact(in_len).zip(dst.chunks_exact_mut(out_len)) {
                    geo.forward_into(xs, p.weight.data(), ys);
                    for (f, chunk) in ys.chunks_exact_mut(plane).enumerate() {
                        let b = p.bias.data()[f];
                        chunk.iter_mut().for_each(|v| *v += b);
                    }
                }
            }
            LayerSpec::Relu => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s.max(0.0);
                }
            }
            LayerSpec::MaxPool { size, stride } => {
                let per = |xs: &[f64]| {
                    let t = Tensor::new(layer.in_shape.clone(), xs.to_vec()).expect("shape");
                    crate::tensor::max_pool2d(&t, *size, *stride).expect("validated at build").0
                };
                for (xs, ys) in src.chunks_exact(in_len).zip(dst.chunks_exact_mut(out_len)) {
                    ys.copy_from_slice(per(xs).data());
                }
            }
            LayerSpec::GlobalAvgPool => {
                let plane = layer.in_shape[1] * layer.in_shape[2];
                for (d, ch) in dst.iter_mut().zip(src.chunks_exact(plane)) {
                    *d = ch.iter().sum::<f64>() / plane as f64;
                }
            }
            LayerSpec::Flatten => dst.copy_from_slice(src),
            LayerSpec::Softmax => {
                dst.copy_from_slice(src);
                dst.chunks_exact_mut(out_len).for_each(softmax_in_place);
            }
        }
        out
    }

    /// Backpropagates `grad` (w.r.t. the output of layer `hi - 1`) down to the
    /// input of layer `lo`, accumulating parameter gradients into `grads`.
    /// Returns the gradient w.r.t. `acts[lo]` when `want_input` is set.
    pub(crate) fn backward_range(
        &self,
        acts: &[Tensor],
        lo: usize,
        hi: usize,
        mut grad: Tensor,
        grads: &mut [Param],
        want_input: bool,
    ) -> Option<Tensor> {
        for i in (lo..hi).rev() {
            let need_dx = want_input || i > lo;
            let layer = &self.layers[i];
            let x = &acts[i];
            let y = &acts[i + 1];
            grad = self.layer_backward(layer, x, y, &grad, grads, need_dx)?;
        }
        want_input.then_some(grad)
    }

    fn layer_backward(
        &self,
        layer: &Layer,
        x: &Tensor,
        y: &Tensor,
        dy: &Tensor,
        grads: &mut [Param],
        need_dx: bool,
    ) -> Option<Tensor> {
        let batch = x.shape()[0];
        let in_len: usize = layer.in_shape.iter().product();
        let out_len: usize = layer.out_shape.iter().product();
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let g = dy.data();
        match &layer.spec {
            LayerSpec::Dense { .. } => {
                let pi = layer.param.expect("dense has params");
                let w = &self.params[pi].weight;
                let gp = &mut grads[pi];
                // dW[j, i] += Σ_b dy[b, j] x[b, i]
                gemm(
                    out_len,
                    batch,
                    in_len,
                    1.0,
                    g,
                    (1, out_len),
                    x.data(),
                    (in_len, 1),
                    1.0,
                    gp.weight.data_mut(),
                    (in_len, 1),
                );
                for row in g.chunks_exact(out_len) {
                    for (db, v) in gp.bias.data_mut().iter_mut().zip(row) {
                        *db += v;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        batch,
                        out_len,
                        in_len,
                        1.0,
                        g,
                        (out_len, 1),
                        w.data(),
                        (in_len, 1),
                        0.0,
                        dx.data_mut(),
                        (in_len, 1),
                    );
                }
            }
            LayerSpec::Conv { .. } => {
                let pi = layer.param.expect("conv has params");
                let geo = layer.conv.expect("conv geometry");
                let k = self.params[pi].weight.data();
                let plane = geo.out_h * geo.out_w;
                let gp = &mut grads[pi];
                for b in 0..batch {
                    let xs = &x.data()[b * in_len..(b + 1) * in_len];
                    let gs = &g[b * out_len..(b + 1) * out_len];
                    let dxs = dx
                        .as_mut()
                        .map(|d| &mut d.data_mut()[b * in_len..(b + 1) * in_len]);
                    geo.backward_accumulate(xs, k, gs, dxs, gp.weight.data_mut());
                    for (f, chunk) in gs.chunks_exact(plane).enumerate() {
                        gp.bias.data_mut()[f] += chunk.iter().sum::<f64>();
                    }
                }
            }
            LayerSpec::Relu => {
                if let Some(dx) = dx.as_mut() {
                    for ((d, gv), xv) in dx.data_mut().iter_mut().zip(g).zip(x.data()) {
                        *d = if *xv > 0.0 { *gv } else { 0.0 };
                    }
                }
            }
            LayerSpec::MaxPool { size, stride } => {
                if let Some(dx) = dx.as_mut() {
                    for b in 0..batch {
                        let t = Tensor::new(
                            layer.in_shape.clone(),
                            x.data()[b * in_len..(b + 1) * in_len].to_vec(),
                        )
                        .expect("shape");
                        let (_, arg) = crate::tensor::max_pool2d(&t, *size, *stride).expect("validated");
                        let d = &mut dx.data_mut()[b * in_len..(b + 1) * in_len];
                        for (o, &src) in arg.iter().enumerate() {
                            d[src] += g[b * out_len + o];
                        }
                    }
                }
            }
            LayerSpec::GlobalAvgPool => {
                if let Some(dx) = dx.as_mut() {
                    let plane = layer.in_shape[1] * layer.in_shape[2];
                    for (ch, gv) in dx.data_mut().chunks_exact_mut(plane).zip(g) {
                        ch.fill(gv / plane as f64);
                    }
                }
            }
            LayerSpec::Flatten => {
                if let Some(dx) = dx.as_mut() {
                    dx.data_mut().copy_from_slice(g);
                }
            }
            LayerSpec::Softmax => {
                if let Some(dx) = dx.as_mut() {
                    // dz = p ⊙ (g − ⟨g, p⟩)
                    for ((d, gs), ps) in dx
                        .data_mut()
                        .chunks_exact_mut(out_len)
                        .zip(g.chunks_exact(out_len))
                        .zip(y.data().chunks_exact(out_len))
                    {
                        let dot: f64 = gs.iter().zip(ps).map(|(a, b)| a * b).sum();
                        for ((dv, gv), pv) in d.iter_mut().zip(gs).zip(ps) {
                            *dv = pv * (gv - dot);
                        }
                    }
                }
            }
        }
        dx
    }
}

/// The body: a stack whose weight layers are grouped into blocks.
#[derive(Debug, Clone)]
pub struct Network {
    stack: Stack,
    /// Activation index (into the forward output) of each block's output.
    block_outputs: Vec<usize>,
}

impl Network {
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], rng: &mut RngState) -> Result<Network> {
        let stack = Stack::build(specs, input_shape, rng, "body")?;
        let weighted: Vec<usize> = specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_weighted())
            .map(|(i, _)| i)
            .collect();
        if weighted.is_empty() {
            return Err(Error::Build {
                layer: "body".into(),
                msg: "no weight-bearing (dense/conv) layer".into(),
            });
        }
        let block_outputs = weighted
            .iter()
            .skip(1)
            .copied()
            .chain(std::iter::once(specs.len()))
            .collect();
        Ok(Network {
            stack,
            block_outputs,
        })
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn input_shape(&self) -> &[usize] {
        self.stack.input_shape()
    }

    /// Number of dense/conv layers, `L_w`.
    pub fn weight_layer_count(&self) -> usize {
        self.block_outputs.len()
    }

    /// Activation index holding the output of weight layer `r` (1-based).
    pub fn block_output(&self, r: usize) -> usize {
        self.block_outputs[r - 1]
    }

    /// Per-sample shape of the output of weight layer `r` (1-based).
    pub fn block_output_shape(&self, r: usize) -> &[usize] {
        self.stack.layer_output_shape(self.block_output(r) - 1)
    }

    pub fn params(&self) -> &[Param] {
        self.stack.params()
    }
}

/// Built-in head architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HeadSpec {
    /// Softmax directly on the attach activation, which must already be `K` logits.
    Softmax,
    /// Dense to `K` and softmax.
    Linear {
        #[serde(default)]
        init: Init,
    },
    /// Dense(hidden), ReLU, dense(K), softmax.
    Mlp {
        hidden: usize,
        #[serde(default)]
        init: Init,
    },
    /// 1×1 conv to `K` channels, global average pool, softmax.
    Nin {
        #[serde(default)]
        init: Init,
    },
    /// Arbitrary layers; must end in softmax over `K` classes.
    Layers { layers: Vec<LayerSpec> },
}

impl HeadSpec {
    /// Concrete layers for a head reading an activation of `input_shape`.
    /// Dense heads on spatial inputs get a leading flatten.
    pub fn layer_specs(&self, input_shape: &[usize], classes: usize) -> Vec<LayerSpec> {
        let flatten = (input_shape.len() != 1).then_some(LayerSpec::Flatten);
        match self {
            HeadSpec::Softmax => vec![LayerSpec::Softmax],
            HeadSpec::Linear { init } => flatten
                .into_iter()
                .chain([LayerSpec::dense(classes).with_init(*init), LayerSpec::Softmax])
                .collect(),
            HeadSpec::Mlp { hidden, init } => flatten
                .into_iter()
                .chain([
                    LayerSpec::dense(*hidden).with_init(*init),
                    LayerSpec::Relu,
                    LayerSpec::dense(classes).with_init(*init),
                    LayerSpec::Softmax,
                ])
                .collect(),
            HeadSpec::Nin { init } => vec![
                LayerSpec::conv(classes, 1, Padding::Valid).with_init(*init),
                LayerSpec::GlobalAvgPool,
                LayerSpec::Softmax,
            ],
            HeadSpec::Layers { layers } => layers.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// Weight-layer index `r_m` (1-based) whose block output feeds this head.
    pub attach: usize,
    stack: Stack,
}

impl ClassifierHead {
    pub fn build(
        index: usize,
        attach: usize,
        layers: &[LayerSpec],
        input_shape: &[usize],
        classes: usize,
        rng: &mut RngState,
    ) -> Result<ClassifierHead> {
        let owner = format!("head {}", index + 1);
        if layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::Build {
                layer: owner,
                msg: "head must end in a softmax layer".into(),
            });
        }
        let stack = Stack::build(layers, input_shape, rng, &owner)?;
        if stack.output_shape() != [classes] {
            return Err(Error::Build {
                layer: owner,
                msg: format!(
                    "head outputs {:?} but there are {classes} classes",
                    stack.output_shape()
                ),
            });
        }
        Ok(ClassifierHead { attach, stack })
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn params(&self) -> &[Param] {
        self.stack.params()
    }

    /// Head distribution for a single attach activation `x_rm` (no batch dimension).
    pub fn head_forward(&self, x_rm: &Tensor) -> Result<Vec<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(x_rm.shape());
        let batch = x_rm.clone().reshape(shape)?;
        let acts = self.stack.forward(batch)?;
        Ok(acts.last().expect("nonempty").data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PlacementConfig {
    /// Number of heads `M`.
    pub heads: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Explicit attach points; bypasses the spacing heuristic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
}

impl PlacementConfig {
    pub fn new(heads: usize, gamma: f64) -> Self {
        PlacementConfig {
            heads,
            gamma,
            indices: None,
        }
    }
}

/// Resolves attach points for a body with `weight_layers` dense/conv layers.
pub fn place_heads(weight_layers: usize, cfg: &PlacementConfig) -> Result<Vec<usize>> {
    match &cfg.indices {
        Some(ix) => {
            if ix.len() != cfg.heads {
                return Err(Error::Placement(format!(
                    "{} explicit indices for {} heads",
                    ix.len(),
                    cfg.heads
                )));
            }
            validate_attach(weight_layers, ix)?;
            Ok(ix.clone())
        }
        None => spaced_attach_points(weight_layers, cfg.heads, cfg.gamma),
    }
}

fn default_gamma() -> f64 {
    0.8
}

/// Head attach points: heads sit every `V = ⌈(L_w / M)^γ⌉` weight layers
/// counting down from the top, `r_m = L_w − (M − m)·V`.
pub fn spaced_attach_points(weight_layers: usize, heads: usize, gamma: f64) -> Result<Vec<usize>> {
    if heads == 0 {
        return Err(Error::Placement("need at least one head".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Placement(format!("gamma {gamma} must lie in (0, 1]")));
    }
    if weight_layers == 0 {
        return Err(Error::Placement("network has no weight layers".into()));
    }
    let ratio = weight_layers as f64 / heads as f64;
    // absorb powf rounding just above an exact integer
    let spacing = ((ratio.powf(gamma) - 1e-12).ceil() as usize).max(1);
    let span = (heads - 1) * spacing;
    if span >= weight_layers {
        return Err(Error::Placement(format!(
            "{heads} heads spaced {spacing} apart do not fit in {weight_layers} weight layers; \
             reduce the number of heads or reduce gamma"
        )));
    }
    Ok((1..=heads)
        .map(|m| weight_layers - (heads - m) * spacing)
        .collect())
}

/// Checks an explicit attach list: strictly increasing, within `[1, L_w]`, ending at `L_w`.
pub fn validate_attach(weight_layers: usize, attach: &[usize]) -> Result<()> {
    if attach.is_empty() {
        return Err(Error::Placement("need at least one head".into()));
    }
    if attach[0] < 1 || attach.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Placement(format!(
            "attach points {attach:?} must be strictly increasing and >= 1"
        )));
    }
    if *attach.last().expect("nonempty") != weight_layers {
        return Err(Error::Placement(format!(
            "last attach point must be the top weight layer {weight_layers}, got {attach:?}"
        )));
    }
    Ok(())
}

/// Forward-pass record for one minibatch.
#[derive(Debug, Clone)]
pub struct TapeCache {
    pub(crate) version: u64,
    /// Body activations `X(0..)`, one per layer boundary.
    pub body: Vec<Tensor>,
    /// Head activations; the last entry of each is the head's distribution.
    pub heads: Vec<Vec<Tensor>>,
}

impl TapeCache {
    pub fn batch(&self) -> usize {
        self.body[0].shape()[0]
    }

    pub fn scores(&self, sample: usize) -> ScoreMatrix {
        let classes = self.heads[0].last().expect("nonempty").shape()[1];
        let mut data = Vec::with_capacity(self.heads.len() * classes);
        for h in &self.heads {
            let p = h.last().expect("nonempty").data();
            data.extend_from_slice(&p[sample * classes..(sample + 1) * classes]);
        }
        ScoreMatrix::from_flat_unchecked(self.heads.len(), classes, data)
    }

    pub fn all_scores(&self) -> Vec<ScoreMatrix> {
        (0..self.batch()).map(|b| self.scores(b)).collect()
    }
}

/// Body plus heads.
#[derive(Debug, Clone)]
pub struct Model {
    body: Network,
    heads: Vec<ClassifierHead>,
    classes: usize,
    version: u64,
}

impl Model {
    /// Initializes the body first, then the heads in order, from one stream of `rng`.
    pub fn build(
        body: &[LayerSpec],
        input_shape: &[usize],
        heads: &[HeadSpec],
        attach: &[usize],
        classes: usize,
        rng: &mut RngState,
    ) -> Result<Model> {
        if classes < 2 {
            return Err(Error::Build {
                layer: "model".into(),
                msg: format!("need at least 2 classes, got {classes}"),
            });
        }
        if heads.len() != attach.len() {
            return Err(Error::Build {
                layer: "model".into(),
                msg: format!("{} head specs for {} attach points", heads.len(), attach.len()),
            });
        }
        let net = Network::build(body, input_shape, rng)?;
        validate_attach(net.weight_layer_count(), attach)?;
        let heads = heads
            .iter()
            .zip(attach)
            .enumerate()
            .map(|(i, (spec, &r))| {
                let shape = net.block_output_shape(r);
                ClassifierHead::build(i, r, &spec.layer_specs(shape, classes), shape, classes, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            body: net,
            heads,
            classes,
            version: 0,
        })
    }

    pub fn body(&self) -> &Network {
        &self.body
    }

    pub fn heads(&self) -> &[ClassifierHead] {
        &self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn attach_points(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.attach).collect()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.body.input_shape()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// All learnable tensors: body weight/bias pairs, then each head's.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.body
            .params()
            .iter()
            .chain(self.heads.iter().flat_map(|h| h.params()))
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    /// Mutable view of [`Model::tensors`]; invalidates outstanding caches.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        self.body
            .stack
            .params_mut()
            .iter_mut()
            .chain(self.heads.iter_mut().flat_map(|h| h.stack.params_mut().iter_mut()))
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    /// Names aligned with [`Model::tensors`], e.g. `"head 2 layer 0 bias"`.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let owners = std::iter::once(("body".to_string(), &self.body.stack))
            .chain(self.heads.iter().enumerate().map(|(m, h)| (format!("head {}", m + 1), &h.stack)));
        for (owner, stack) in owners {
            for i in stack.param_layers() {
                names.push(format!("{owner} layer {i} weight"));
                names.push(format!("{owner} layer {i} bias"));
            }
        }
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Forward pass over a batch `[B, ...input_shape]`.
    pub fn forward(&self, x: Tensor) -> Result<TapeCache> {
        let body = self.body.stack.forward(x)?;
        let heads = self
            .heads
            .iter()
            .map(|h| h.stack.forward(body[self.body.block_output(h.attach)].clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TapeCache {
            version: self.version,
            body,
            heads,
        })
    }

    /// Forward pass of one sample: body activations and the `M × K` scores.
    pub fn forward_sample(&self, x: &Tensor) -> Result<(Vec<Tensor>, ScoreMatrix)> {
        if x.shape() != self.input_shape() {
            return Err(Error::Dimension(format!(
                "sample {:?} does not match input shape {:?}",
                x.shape(),
                self.input_shape()
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let cache = self.forward(x.clone().reshape(shape)?)?;
        let scores = cache.scores(0);
        Ok((cache.body, scores))
    }

    /// Scores for every sample of a batch, computed in chunks of `chunk`.
    pub fn predict_scores(&self, x: &Tensor, chunk: usize) -> Result<Vec<ScoreMatrix>> {
        let n = x.shape()[0];
        let per: usize = x.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, x.data()[start * per..end * per].to_vec())?;
            out.extend(self.forward(part)?.all_scores());
        }
        Ok(out)
    }
}
