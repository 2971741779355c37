//! Dense multilayer perceptron: parameter layout, a generic forward pass and a
//! hand-written layer-level backward pass for the hot paths (training,
//! per-example gradients, rollout gradients).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::Block;
use crate::math::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply<S: Real>(self, x: S) -> S {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(x.lift(0.0)),
        }
    }

    #[inline]
    fn apply_f64(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Relu => {
                if x >= 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation and the activation value.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Dropout rate used while training; `0` disables it.
    pub dropout: f64,
    /// Adds the input to the output (`d_in == d_out` required).
    pub residual: bool,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            dropout: 0.0,
            residual: false,
        }
    }
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerSlot {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub slots: Vec<LayerSlot>,
    pub n_params: usize,
}

impl Layout {
    pub fn new(d_in: usize, hidden: &[usize], d_out: usize) -> Self {
        let mut sizes = vec![d_in];
        sizes.extend_from_slice(hidden);
        sizes.push(d_out);
        let mut offset = 0;
        let mut slots = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let weight = offset;
            let bias = weight + n_in * n_out;
            offset = bias + n_out;
            slots.push(LayerSlot {
                n_in,
                n_out,
                weight,
                bias,
            });
        }
        Self {
            slots,
            n_params: offset,
        }
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for (l, s) in self.slots.iter().enumerate() {
            out.push(Block::new(format!("layer{l}.weight"), s.weight, s.n_in * s.n_out));
            out.push(Block::new(format!("layer{l}.bias"), s.bias, s.n_out));
        }
        out
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params];
        for s in &self.slots {
            let limit = libm::sqrt(6.0 / (s.n_in + s.n_out) as f64);
            for w in &mut params[s.weight..s.weight + s.n_in * s.n_out] {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.slots[..self.slots.len() - 1].iter().map(|s| s.n_out).collect()
    }

    /// Multiply-adds of one forward pass.
    pub fn forward_flops(&self) -> usize {
        self.slots.iter().map(|s| 2 * s.n_in * s.n_out + s.n_out).sum()
    }
}

/// Keep-masks for every hidden layer (inverted dropout).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<Vec<bool>>,
    pub scale: f64,
}

impl DropoutMask {
    pub fn sample<R: Rng>(widths: &[usize], rate: f64, rng: &mut R) -> Self {
        let mut m = Self {
            keep: widths.iter().map(|&w| vec![true; w]).collect(),
            scale: 1.0,
        };
        m.resample(rate, rng);
        m
    }

    /// Redraws every entry in place: a unit is dropped when a uniform 32-bit
    /// word falls below `rate·2³²`.
    pub fn resample<R: Rng>(&mut self, rate: f64, rng: &mut R) {
        let cut = (rate * 4_294_967_296.0) as u64;
        for layer in &mut self.keep {
            for k in layer.iter_mut() {
                *k = u64::from(rng.next_u32()) >= cut;
            }
        }
        self.scale = 1.0 / (1.0 - rate);
    }
}

/// Buffers reused across [`forward_into`] calls.
#[derive(Clone, Debug, Default)]
pub(crate) struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Plain `f64` forward pass into `out`, summing in the same order as
/// [`forward`]. Dropped units contribute an exact zero.
pub(crate) fn forward_into(
    layout: &Layout,
    activation: Activation,
    residual: bool,
    theta: &[f64],
    x: &[f64],
    mask: Option<&DropoutMask>,
    scratch: &mut Scratch,
    out: &mut Vec<f64>,
) {
    let Scratch { a: input, b: next } = scratch;
    input.clear();
    input.extend_from_slice(x);
    let last = layout.slots.len() - 1;
    for (l, slot) in layout.slots.iter().enumerate() {
        next.clear();
        let dropped_out = match mask {
            Some(m) if l < last => Some(&m.keep[l]),
            _ => None,
        };
        for j in 0..slot.n_out {
            if dropped_out.is_some_and(|k| !k[j]) {
                next.push(0.0);
                continue;
            }
            let row = &theta[slot.weight + j * slot.n_in..slot.weight + (j + 1) * slot.n_in];
            let mut acc = theta[slot.bias + j];
            for (w, a) in row.iter().zip(input.iter()) {
                acc += w * a;
            }
            next.push(acc);
        }
        if l < last {
            match mask {
                Some(m) => {
                    for (v, &k) in next.iter_mut().zip(&m.keep[l]) {
                        *v = activation.apply_f64(*v) * if k { m.scale } else { 0.0 };
                    }
                }
                None => next.iter_mut().for_each(|v| *v = activation.apply_f64(*v)),
            }
        }
        core::mem::swap(input, next);
    }
    out.clear();
    out.extend_from_slice(input);
    if residual {
        for (o, xi) in out.iter_mut().zip(x) {
            *o += xi;
        }
    }
}

/// Generic forward pass (taped or plain).
pub(crate) fn forward<S: Real>(
    layout: &Layout,
    activation: Activation,
    residual: bool,
    theta: &[S],
    x: &[f64],
    mask: Option<&DropoutMask>,
) -> Vec<S> {
    let first = layout.slots[0];
    let mut h: Vec<S> = (0..first.n_out)
        .map(|j| {
            let row = first.weight + j * first.n_in;
            let mut acc = theta[first.bias + j];
            for (i, &xi) in x.iter().enumerate() {
                acc = acc + theta[row + i] * xi;
            }
            acc
        })
        .collect();
    for (l, slot) in layout.slots.iter().enumerate().skip(1) {
        let prev_mask = mask.map(|m| &m.keep[l - 1]);
        let scale = mask.map_or(1.0, |m| m.scale);
        let act: Vec<Option<S>> = h
            .iter()
            .enumerate()
            .map(|(i, &v)| match prev_mask {
                Some(keep) if !keep[i] => None,
                Some(_) => Some(activation.apply(v) * scale),
                None => Some(activation.apply(v)),
            })
            .collect();
        h = (0..slot.n_out)
            .map(|j| {
                let row = slot.weight + j * slot.n_in;
                let mut acc = theta[slot.bias + j];
                for (i, a) in act.iter().enumerate() {
                    if let Some(a) = a {
                        acc = acc + theta[row + i] * *a;
                    }
                }
                acc
            })
            .collect();
    }
    if residual {
        for (o, &xi) in h.iter_mut().zip(x) {
            *o = *o + xi;
        }
    }
    h
}

/// Forward pass whose input also lives on the scalar type (rollouts feed
/// predicted states back in).
pub(crate) fn forward_lifted<S: Real>(
    layout: &Layout,
    activation: Activation,
    residual: bool,
    theta: &[S],
    x: &[S],
) -> Vec<S> {
    let mut input: Vec<S> = x.to_vec();
    for (l, slot) in layout.slots.iter().enumerate() {
        if l > 0 {
            input = input.into_iter().map(|v| activation.apply(v)).collect();
        }
        input = (0..slot.n_out)
            .map(|j| {
                let row = slot.weight + j * slot.n_in;
                let mut acc = theta[slot.bias + j];
                for (i, a) in input.iter().enumerate() {
                    acc = acc + theta[row + i] * *a;
                }
                acc
            })
            .collect();
    }
    if residual {
        for (o, xi) in input.iter_mut().zip(x) {
            *o = *o + *xi;
        }
    }
    input
}

/// Cached activations of one plain forward pass.
#[derive(Clone, Debug)]
pub(crate) struct Trace {
    /// Pre-activations of every layer (the last is the raw output).
    pub pre: Vec<Vec<f64>>,
    /// Post-activation (after dropout) inputs to every layer; `post[0]` is `x`.
    pub post: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub(crate) fn forward_trace(
    layout: &Layout,
    activation: Activation,
    residual: bool,
    theta: &[f64],
    x: &[f64],
    mask: Option<&DropoutMask>,
) -> Trace {
    let n_layers = layout.slots.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers);
    post.push(x.to_vec());
    for (l, slot) in layout.slots.iter().enumerate() {
        let input = &post[l];
        // Same summation order as `forward`, so both agree bit for bit.
        let mut z = theta[slot.bias..slot.bias + slot.n_out].to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            let row = &theta[slot.weight + j * slot.n_in..slot.weight + (j + 1) * slot.n_in];
            for (w, a) in row.iter().zip(input) {
                *zj += w * a;
            }
        }
        if l + 1 < n_layers {
            let a: Vec<f64> = match mask {
                Some(m) => z
                    .iter()
                    .zip(&m.keep[l])
                    .map(|(&v, &k)| if k { activation.apply_f64(v) * m.scale } else { 0.0 })
                    .collect(),
                None => z.iter().map(|&v| activation.apply_f64(v)).collect(),
            };
            post.push(a);
        }
        pre.push(z);
    }
    let mut output = pre[n_layers - 1].clone();
    if residual {
        for (o, xi) in output.iter_mut().zip(x) {
            *o += xi;
        }
    }
    Trace { pre, post, output }
}

/// Accumulates `g_outᵀ ∂output/∂θ` into `grad` and returns `g_outᵀ ∂output/∂x`.
pub(crate) fn backward(
    layout: &Layout,
    activation: Activation,
    residual: bool,
    theta: &[f64],
    trace: &Trace,
    mask: Option<&DropoutMask>,
    g_out: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let n_layers = layout.slots.len();
    let mut g = g_out.to_vec();
    for l in (0..n_layers).rev() {
        let slot = layout.slots[l];
        let input = &trace.post[l];
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            grad[slot.bias + j] += gj;
            let row = slot.weight + j * slot.n_in;
            for (i, a) in input.iter().enumerate() {
                grad[row + i] += gj * a;
            }
        }
        let mut g_in = vec![0.0; slot.n_in];
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            let row = &theta[slot.weight + j * slot.n_in..slot.weight + (j + 1) * slot.n_in];
            for (gi, w) in g_in.iter_mut().zip(row) {
                *gi += gj * w;
            }
        }
        if l > 0 {
            let pre = &trace.pre[l - 1];
            for (i, gi) in g_in.iter_mut().enumerate() {
                let (keep, scale) = match mask {
                    Some(m) => (m.keep[l - 1][i], m.scale),
                    None => (true, 1.0),
                };
                if !keep {
                    *gi = 0.0;
                    continue;
                }
                let post = trace.post[l][i] / scale;
                *gi *= scale * activation.derivative(pre[i], post);
            }
        }
        g = g_in;
    }
    if residual {
        for (gi, go) in g.iter_mut().zip(g_out) {
            *gi += go;
        }
    }
    g
}
