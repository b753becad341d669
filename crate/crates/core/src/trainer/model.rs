//! Layer stack, forward pass and backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::pruning::Mask;
use crate::scalar::Scalar;
use crate::tensor::{
    crop, dense_conv_fast, dot_plane, scatter_plane, zero_pad, ConvGeometry, DenseTensor4,
    PrecisionMode, Shape4,
};

/// Samples per gradient chunk. Chunks are reduced in index order, which
/// keeps training bitwise reproducible whatever the pool size.
pub const GRAD_CHUNK: usize = 16;

fn one() -> usize {
    1
}

fn ones2() -> [usize; 2] {
    [1, 1]
}

/// One entry of a model description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "ones2")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
    },
    /// Convolution along rows of a `(C, L, 1)` input.
    Conv1d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
    /// Classification head; must be last.
    SoftmaxXent,
}

impl LayerSpec {
    pub fn is_prunable(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Conv1d { .. } | LayerSpec::Dense { .. })
    }
}

/// Weight initialisation scheme. Both draw uniformly from ±sqrt(6/n).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// n = fan_in + fan_out.
    #[default]
    Glorot,
    /// n = fan_in, which keeps activation variance through ReLU stacks.
    He,
}

/// Input shape `(c, h, w)` plus the ordered layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub init: Init,
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Loss attached to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Softmax cross-entropy against integer labels.
    SoftmaxXent,
    /// Mean squared reconstruction error against the input.
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv {
        geometry: ConvGeometry,
        weight: DenseTensor4<T>,
        bias: Vec<T>,
    },
    /// Weight shape `(units, inputs, 1, 1)`.
    Dense {
        weight: DenseTensor4<T>,
        bias: Vec<T>,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn weight(&self) -> Option<&DenseTensor4<T>> {
        match self {
            Layer::Conv { weight, .. } | Layer::Dense { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut DenseTensor4<T>> {
        match self {
            Layer::Conv { weight, .. } | Layer::Dense { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[T]> {
        match self {
            Layer::Conv { bias, .. } | Layer::Dense { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<T>> {
        match self {
            Layer::Conv { bias, .. } | Layer::Dense { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub fn geometry(&self) -> Option<&ConvGeometry> {
        match self {
            Layer::Conv { geometry, .. } => Some(geometry),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv { geometry, .. } if geometry.is_one_dimensional() => "conv1d",
            Layer::Conv { .. } => "conv2d",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
        }
    }
}

/// Per-layer gradients; `None` for layers without parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<Option<ParamGrad<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Grads {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    l.weight().map(|w| ParamGrad {
                        weight: vec![T::zero(); w.data().len()],
                        bias: vec![T::zero(); l.bias().map_or(0, |b| b.len())],
                    })
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += *y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += *y);
            }
        }
    }

    /// Global L2 norm over every weight and bias gradient, in f64.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in self.layers.iter().flatten() {
            for x in g.weight.iter().chain(&g.bias) {
                let v = x.to_f64().unwrap_or(f64::INFINITY);
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for g in self.layers.iter_mut().flatten() {
            g.weight.iter_mut().for_each(|x| *x *= k);
            g.bias.iter_mut().for_each(|x| *x *= k);
        }
    }
}

/// Numeric treatment of activations during inference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferenceOptions<T> {
    pub precision: PrecisionMode,
    /// Per-layer clamp for outputs above the given value (`None` = off).
    pub saturation: Vec<Option<T>>,
}

impl<T: Scalar> InferenceOptions<T> {
    pub fn binary32() -> Self {
        InferenceOptions {
            precision: PrecisionMode::Binary32,
            saturation: Vec::new(),
        }
    }

    fn finish(&self, layer: usize, mut t: DenseTensor4<T>) -> DenseTensor4<T> {
        if let Some(Some(limit)) = self.saturation.get(layer) {
            let limit = *limit;
            for v in t.data_mut() {
                if *v > limit {
                    *v = limit;
                }
            }
        }
        if self.precision == PrecisionMode::Binary16 {
            t = t.with_precision(PrecisionMode::Binary16);
        }
        t
    }
}

/// Activations recorded for backpropagation: `acts[i]` is layer `i`'s input.
struct Trace<T> {
    acts: Vec<DenseTensor4<T>>,
    pool_argmax: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
    pub head: Head,
    /// `(c, h, w)` entering each layer, plus the output shape last.
    pub shapes: Vec<[usize; 3]>,
}

fn init_weights<T: Scalar>(init: Init, rng: &mut ChaCha8Rng, shape: Shape4, fan_in: usize, fan_out: usize) -> DenseTensor4<T> {
    let n = match init {
        Init::Glorot => (fan_in + fan_out) as f64,
        Init::He => fan_in as f64,
    };
    let a = (6.0 / n).sqrt();
    DenseTensor4::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(-a..a)))
}

impl<T: Scalar> Model<T> {
    /// Builds the layer stack with [`Init`] weights and zero biases.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [mut c, mut h, mut w] = spec.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(shape_err!("empty model input {:?}", spec.input));
        }
        let mut layers = Vec::new();
        let mut shapes = vec![[c, h, w]];
        let mut head = Head::Reconstruction;
        for (i, ls) in spec.layers.iter().enumerate() {
            let layer = match *ls {
                LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                    let g = ConvGeometry::new(
                        c,
                        out_channels,
                        (kernel[0], kernel[1]),
                        (h, w),
                        (stride[0], stride[1]),
                        (padding[0], padding[1]),
                    )?;
                    let fan = kernel[0] * kernel[1];
                    let weight = init_weights(spec.init, &mut rng, g.weight_shape(), c * fan, out_channels * fan);
                    (c, h, w) = (out_channels, g.out_h(), g.out_w());
                    Layer::Conv { geometry: g, weight, bias: vec![T::zero(); out_channels] }
                }
                LayerSpec::Conv1d { out_channels, kernel, stride, padding } => {
                    if w != 1 {
                        return Err(shape_err!("conv1d at layer {i} needs (C, L, 1) input, got {c}x{h}x{w}"));
                    }
                    let g = ConvGeometry::new(c, out_channels, (kernel, 1), (h, 1), (stride, 1), (padding, 0))?;
                    let weight = init_weights(spec.init, &mut rng, g.weight_shape(), c * kernel, out_channels * kernel);
                    (c, h) = (out_channels, g.out_h());
                    Layer::Conv { geometry: g, weight, bias: vec![T::zero(); out_channels] }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => {
                    if size == 0 || h < size || w < size {
                        return Err(shape_err!("maxpool {size} does not fit {c}x{h}x{w}"));
                    }
                    (h, w) = (h / size, w / size);
                    Layer::MaxPool { size }
                }
                LayerSpec::Flatten => {
                    (c, h, w) = (c * h * w, 1, 1);
                    Layer::Flatten
                }
                LayerSpec::Dense { units } => {
                    let inputs = c * h * w;
                    if units == 0 {
                        return Err(shape_err!("dense layer {i} has no units"));
                    }
                    let weight = init_weights(spec.init, &mut rng, Shape4::new(units, inputs, 1, 1), inputs, units);
                    (c, h, w) = (units, 1, 1);
                    Layer::Dense { weight, bias: vec![T::zero(); units] }
                }
                LayerSpec::SoftmaxXent => {
                    if i + 1 != spec.layers.len() {
                        return Err(invalid!("softmax_xent must be the last layer"));
                    }
                    head = Head::SoftmaxXent;
                    continue;
                }
            };
            layers.push(layer);
            shapes.push([c, h, w]);
        }
        if head == Head::Reconstruction && shapes.last() != Some(&spec.input) {
            return Err(shape_err!(
                "model without softmax_xent must reconstruct its input: {:?} -> {:?}",
                spec.input,
                shapes.last()
            ));
        }
        Ok(Model { spec: spec.clone(), layers, head, shapes })
    }

    /// Indices of layers carrying weights (the prunable ones).
    pub fn prunable(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].weight().is_some()).collect()
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        let [c, h, w] = self.spec.input;
        Shape4::new(batch, c, h, w)
    }

    pub fn output_len(&self) -> usize {
        let [c, h, w] = *self.shapes.last().expect("shapes never empty");
        c * h * w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight().map_or(0, |w| w.data().len()) + l.bias().map_or(0, |b| b.len()))
            .sum()
    }

    /// Zeroes masked weights of every prunable layer; `masks` follows
    /// [`Model::prunable`] order.
    pub fn apply_masks(&mut self, masks: &[Mask]) -> Result<()> {
        let idx = self.prunable();
        if idx.len() != masks.len() {
            return Err(shape_err!("{} masks for {} prunable layers", masks.len(), idx.len()));
        }
        for (&li, m) in idx.iter().zip(masks) {
            m.apply(self.layers[li].weight_mut().expect("prunable").data_mut())?;
        }
        Ok(())
    }

    /// Stores weights and biases rounded to `precision`.
    pub fn with_precision(mut self, precision: PrecisionMode) -> Self {
        for l in &mut self.layers {
            if let Some(w) = l.weight_mut() {
                *w = w.clone().with_precision(precision);
            }
            if let Some(b) = l.bias_mut() {
                b.iter_mut().for_each(|v| *v = precision.store(*v));
            }
        }
        self
    }

    fn check_input(&self, x: &DenseTensor4<T>) -> Result<()> {
        let s = x.shape();
        if [s.c, s.h, s.w] != self.spec.input {
            return Err(shape_err!("model expects {:?} samples, got {s}", self.spec.input));
        }
        Ok(())
    }

    fn layer_forward(
        &self,
        li: usize,
        x: &DenseTensor4<T>,
        argmax: Option<&mut Vec<u32>>,
    ) -> Result<DenseTensor4<T>> {
        let n = x.shape().n;
        let [oc, oh, ow] = self.shapes[li + 1];
        let os = Shape4::new(n, oc, oh, ow);
        match &self.layers[li] {
            Layer::Conv { geometry, weight, bias } => {
                let mut y = dense_conv_fast(x, weight, geometry)?;
                let plane = oh * ow;
                let p = y.precision();
                for (k, v) in y.data_mut().iter_mut().enumerate() {
                    *v = p.store(*v + bias[(k / plane) % oc]);
                }
                Ok(y)
            }
            Layer::Dense { weight, bias } => {
                let inputs = x.shape().sample_len();
                let p = x.precision().combine(weight.precision());
                let w = weight.data();
                let mut out = Vec::with_capacity(n * oc);
                for b in 0..n {
                    let xs = x.sample(b);
                    for o in 0..oc {
                        let row = &w[o * inputs..(o + 1) * inputs];
                        let mut acc = bias[o];
                        for (&wv, &xv) in row.iter().zip(xs) {
                            acc += wv * xv;
                        }
                        out.push(p.store(acc));
                    }
                }
                DenseTensor4::new(os, out, p)
            }
            Layer::Relu => {
                let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                DenseTensor4::new(os, data, x.precision())
            }
            Layer::MaxPool { size } => {
                let s = x.shape();
                let mut out = Vec::with_capacity(os.len());
                let mut idx = Vec::with_capacity(if argmax.is_some() { os.len() } else { 0 });
                for b in 0..n {
                    for c in 0..oc {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = s.flatten(b, c, y * size, xx * size);
                                for dy in 0..*size {
                                    for dx in 0..*size {
                                        let k = s.flatten(b, c, y * size + dy, xx * size + dx);
                                        if x.data()[k] > x.data()[best] {
                                            best = k;
                                        }
                                    }
                                }
                                out.push(x.data()[best]);
                                idx.push(best as u32);
                            }
                        }
                    }
                }
                if let Some(a) = argmax {
                    *a = idx;
                }
                DenseTensor4::new(os, out, x.precision())
            }
            Layer::Flatten => x.clone().reshape(os),
        }
    }

    fn trace(&self, x: &DenseTensor4<T>) -> Result<Trace<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_argmax = vec![Vec::new(); self.layers.len()];
        acts.push(x.clone());
        for li in 0..self.layers.len() {
            let y = self.layer_forward(li, &acts[li], Some(&mut pool_argmax[li]))?;
            acts.push(y);
        }
        Ok(Trace { acts, pool_argmax })
    }

    /// Network output (logits or reconstruction) in binary32 semantics.
    pub fn forward(&self, x: &DenseTensor4<T>) -> Result<DenseTensor4<T>> {
        self.forward_with(x, &InferenceOptions::binary32(), None)
    }

    /// Forward pass with activation rounding and saturation. When `taps`
    /// is given, it receives each layer's output.
    pub fn forward_with(
        &self,
        x: &DenseTensor4<T>,
        opts: &InferenceOptions<T>,
        mut taps: Option<&mut Vec<DenseTensor4<T>>>,
    ) -> Result<DenseTensor4<T>> {
        self.check_input(x)?;
        let mut a = opts.finish(usize::MAX, x.clone());
        for li in 0..self.layers.len() {
            a = opts.finish(li, self.layer_forward(li, &a, None)?);
            if let Some(t) = taps.as_deref_mut() {
                t.push(a.clone());
            }
        }
        Ok(a)
    }

    /// Per-sample losses and the gradient of their sum w.r.t. the output.
    fn loss_terms(&self, out: &DenseTensor4<T>, x: &DenseTensor4<T>, labels: &[u16]) -> Result<(Vec<T>, Vec<T>)> {
        let n = out.shape().n;
        let m = out.shape().sample_len();
        let mut losses = Vec::with_capacity(n);
        let mut grad = vec![T::zero(); out.data().len()];
        match self.head {
            Head::SoftmaxXent => {
                if labels.len() != n {
                    return Err(shape_err!("{} labels for {n} samples", labels.len()));
                }
                for b in 0..n {
                    let z = out.sample(b);
                    let y = labels[b] as usize;
                    if y >= m {
                        return Err(invalid!("label {y} outside {m} classes"));
                    }
                    let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
                    let sum: T = z.iter().map(|&v| (v - zmax).exp()).sum();
                    losses.push(sum.ln() + zmax - z[y]);
                    let g = &mut grad[b * m..(b + 1) * m];
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk = (z[k] - zmax).exp() / sum;
                    }
                    g[y] -= T::one();
                }
            }
            Head::Reconstruction => {
                let inv = T::one() / T::lit(m as f64);
                let two = T::lit(2.0);
                for b in 0..n {
                    let (yh, xs) = (out.sample(b), x.sample(b));
                    let mut l = T::zero();
                    for (k, (&p, &t)) in yh.iter().zip(xs).enumerate() {
                        let d = p - t;
                        l += d * d;
                        grad[b * m + k] = two * d * inv;
                    }
                    losses.push(l * inv);
                }
            }
        }
        Ok((losses, grad))
    }

    /// Per-sample losses (cross-entropy or mean squared error).
    pub fn sample_losses(&self, x: &DenseTensor4<T>, labels: &[u16]) -> Result<Vec<T>> {
        let out = self.forward(x)?;
        Ok(self.loss_terms(&out, x, labels)?.0)
    }

    /// Mean loss over the batch.
    pub fn loss(&self, x: &DenseTensor4<T>, labels: &[u16]) -> Result<T> {
        let l = self.sample_losses(x, labels)?;
        Ok(l.iter().copied().sum::<T>() / T::lit(l.len().max(1) as f64))
    }

    /// Summed loss and summed gradients over one chunk.
    fn chunk_gradients(&self, x: &DenseTensor4<T>, labels: &[u16]) -> Result<(T, Grads<T>)> {
        let tr = self.trace(x)?;
        let out = tr.acts.last().expect("trace has output");
        let (losses, gout) = self.loss_terms(out, x, labels)?;
        let mut gy = DenseTensor4::from_vec(out.shape(), gout)?;
        let mut grads = Grads::zeros_like(self);
        for li in (0..self.layers.len()).rev() {
            let xin = &tr.acts[li];
            let need_gx = li > 0;
            let gx = match &self.layers[li] {
                Layer::Conv { geometry, weight, .. } => {
                    let pg = grads.layers[li].as_mut().expect("conv has params");
                    conv_backward(xin, weight, geometry, &gy, pg, need_gx)?
                }
                Layer::Dense { weight, .. } => {
                    let pg = grads.layers[li].as_mut().expect("dense has params");
                    let n = xin.shape().n;
                    let inputs = xin.shape().sample_len();
                    let units = weight.shape().n;
                    let w = weight.data();
                    let mut gx = vec![T::zero(); if need_gx { n * inputs } else { 0 }];
                    for b in 0..n {
                        let xs = xin.sample(b);
                        let gys = gy.sample(b);
                        for o in 0..units {
                            let g = gys[o];
                            pg.bias[o] += g;
                            let row = &mut pg.weight[o * inputs..(o + 1) * inputs];
                            for (gw, &xv) in row.iter_mut().zip(xs) {
                                *gw += g * xv;
                            }
                            if need_gx {
                                let wrow = &w[o * inputs..(o + 1) * inputs];
                                for (gxv, &wv) in gx[b * inputs..(b + 1) * inputs].iter_mut().zip(wrow) {
                                    *gxv += g * wv;
                                }
                            }
                        }
                    }
                    need_gx.then(|| DenseTensor4::from_vec(xin.shape(), gx)).transpose()?
                }
                Layer::Relu => {
                    let data = gy
                        .data()
                        .iter()
                        .zip(xin.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    Some(DenseTensor4::from_vec(xin.shape(), data)?)
                }
                Layer::MaxPool { .. } => {
                    let mut data = vec![T::zero(); xin.data().len()];
                    for (&k, &g) in tr.pool_argmax[li].iter().zip(gy.data()) {
                        data[k as usize] += g;
                    }
                    Some(DenseTensor4::from_vec(xin.shape(), data)?)
                }
                Layer::Flatten => Some(gy.clone().reshape(xin.shape())?),
            };
            match gx {
                Some(g) => gy = g,
                None => break,
            }
        }
        Ok((losses.into_iter().sum(), grads))
    }

    /// Mean loss and mean gradients over a batch.
    ///
    /// The batch is cut into [`GRAD_CHUNK`]-sample chunks processed in
    /// parallel; chunk sums are added in chunk order.
    pub fn gradients(&self, x: &DenseTensor4<T>, labels: &[u16]) -> Result<(T, Grads<T>)> {
        self.check_input(x)?;
        let n = x.shape().n;
        if n == 0 {
            return Err(shape_err!("empty batch"));
        }
        let has_labels = self.head == Head::SoftmaxXent;
        let parts: Vec<Result<(T, Grads<T>)>> = (0..n.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|k| {
                let r = k * GRAD_CHUNK..((k + 1) * GRAD_CHUNK).min(n);
                let lab = if has_labels { &labels[r.clone()] } else { &[][..] };
                self.chunk_gradients(&x.slice_batch(r), lab)
            })
            .collect();
        let mut total = T::zero();
        let mut grads = Grads::zeros_like(self);
        for p in parts {
            let (l, g) = p?;
            total += l;
            grads.add_assign(&g);
        }
        let inv = T::one() / T::lit(n as f64);
        grads.scale(inv);
        let loss = total * inv;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {loss}")));
        }
        Ok((loss, grads))
    }

    /// θ ← θ − lr·grad on every parameter, then re-applies `masks` if given.
    pub fn sgd_step(&mut self, grads: &Grads<T>, lr: T, masks: Option<&[Mask]>) -> Result<()> {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let Some(g) = g {
                let w = l.weight_mut().expect("grad implies weight");
                w.data_mut().iter_mut().zip(&g.weight).for_each(|(v, gv)| *v -= lr * *gv);
                let b = l.bias_mut().expect("grad implies bias");
                b.iter_mut().zip(&g.bias).for_each(|(v, gv)| *v -= lr * *gv);
            }
        }
        if let Some(m) = masks {
            self.apply_masks(m)?;
        }
        Ok(())
    }
}

fn conv_backward<T: Scalar>(
    x: &DenseTensor4<T>,
    w: &DenseTensor4<T>,
    g: &ConvGeometry,
    gy: &DenseTensor4<T>,
    pg: &mut ParamGrad<T>,
    need_gx: bool,
) -> Result<Option<DenseTensor4<T>>> {
    let xp = zero_pad(x, g)?;
    let n = x.shape().n;
    let plane = g.out_h() * g.out_w();
    let size = g.padded_sample_size();
    let taps = g.taps();
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let mut gxp = vec![T::zero(); if need_gx { xp.data().len() } else { 0 }];
    for b in 0..n {
        let xs = &xp.data()[b * size..(b + 1) * size];
        for d in 0..g.out_channels {
            let gyp = &gy.data()[(b * g.out_channels + d) * plane..][..plane];
            pg.bias[d] += gyp.iter().copied().sum::<T>();
            for c in 0..g.in_channels {
                for kh in 0..g.filter_h {
                    for kw in 0..g.filter_w {
                        let tap = (c * g.filter_h + kh) * g.filter_w + kw;
                        let base = (c * ph + kh) * pw + kw;
                        pg.weight[d * taps + tap] += dot_plane(gyp, xs, base, g);
                        if need_gx {
                            let wv = w.data()[d * taps + tap];
                            scatter_plane(&mut gxp[b * size..(b + 1) * size], wv, gyp, base, g);
                        }
                    }
                }
            }
        }
    }
    if !need_gx {
        return Ok(None);
    }
    let padded = DenseTensor4::from_vec(g.padded_shape(n), gxp)?;
    Ok(Some(crop(&padded, g.pad_h, g.pad_w, g.in_h, g.in_w)?))
}
