use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::arch::{ConvLayout, DenseLayout, Layout, NetArch};
use crate::rng;
use crate::{Error, Result};

/// Supervision for one training example.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Mutually exclusive class index (softmax cross-entropy).
    Class(usize),
    /// Target distribution over the outputs (softmax cross-entropy).
    Soft(Vec<f64>),
    /// Independent per-output targets in `[0, 1]`; entries with `mask == false`
    /// are unsupervised and never read.
    Multi { values: Vec<f64>, mask: Vec<bool> },
}

impl Target {
    /// Converts `{+1, -1, 0}` labels; unspecified entries get `fill` and are masked out.
    pub fn from_signed(labels: &[i8], fill: f64) -> Target {
        Target::Multi {
            values: labels
                .iter()
                .map(|&l| match l {
                    1 => 1.0,
                    -1 => 0.0,
                    _ => fill,
                })
                .collect(),
            mask: labels.iter().map(|&l| l != 0).collect(),
        }
    }

    pub fn supervised_entries(&self) -> usize {
        match self {
            Target::Class(_) | Target::Soft(_) => 1,
            Target::Multi { mask, .. } => mask.iter().filter(|m| **m).count(),
        }
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Trainable dual-stream network with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNetwork {
    arch: NetArch,
    layout: Layout,
    params: Vec<f64>,
    seed: u64,
}

impl EmbedNetwork {
    /// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(arch: &NetArch, seed: u64) -> Result<Self> {
        let layout = arch.layout()?;
        let mut params = vec![0.0; layout.total];
        let mut rng = rng::stream(seed, rng::tags::PATCH_INIT);
        let conv = layout
            .patch
            .iter()
            .chain(&layout.context)
            .map(|l| (l.weights.clone(), l.in_channels * l.kernel * l.kernel));
        let dense = layout.head.iter().map(|l| (l.weights.clone(), l.inputs));
        for (range, fan_in) in conv.chain(dense) {
            let limit = libm::sqrt(6.0 / fan_in as f64);
            for p in &mut params[range] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(EmbedNetwork {
            arch: arch.clone(),
            layout,
            params,
            seed,
        })
    }

    pub fn from_parts(arch: NetArch, params: Vec<f64>, seed: u64) -> Result<Self> {
        let layout = arch.layout()?;
        if params.len() != layout.total {
            return Err(Error::shape(format!(
                "architecture needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::State("network parameters must be finite".into()));
        }
        Ok(EmbedNetwork {
            arch,
            layout,
            params,
            seed,
        })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn check_inputs(&self, patch: &[f64], context: &[f64]) -> Result<()> {
        if patch.len() != self.arch.patch_input_len() {
            return Err(Error::shape(format!(
                "patch input has {} values, expected {}",
                patch.len(),
                self.arch.patch_input_len()
            )));
        }
        if context.len() != self.arch.context_input_len() {
            return Err(Error::shape(format!(
                "context input has {} values, expected {}",
                context.len(),
                self.arch.context_input_len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, patch: &[f64], context: &[f64]) -> Result<Forward> {
        self.check_inputs(patch, context)?;
        let ctx = self.context_features(context);
        Ok(self.forward_with_context(patch, &ctx))
    }

    /// Flattened output of the context stream; reusable for every patch of one box.
    pub(crate) fn context_features(&self, context: &[f64]) -> Vec<f64> {
        stream_forward(&self.params, &self.layout.context, context, None)
    }

    pub(crate) fn forward_with_context(&self, patch: &[f64], context_features: &[f64]) -> Forward {
        let mut concat = stream_forward(&self.params, &self.layout.patch, patch, None);
        concat.extend_from_slice(context_features);
        let mut acts = head_forward(&self.params, &self.layout.head, concat);
        let logits = acts.pop().expect("head has an output layer");
        Forward {
            logits,
            embedding: acts.swap_remove(self.arch.embed_layer + 1),
        }
    }

    /// Loss of one example and its gradient with respect to all parameters.
    pub fn loss_and_gradient(&self, patch: &[f64], context: &[f64], target: &Target) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(patch, context)?;
        self.check_target(target)?;
        let mut grad = vec![0.0; self.params.len()];
        let mut ctx_cache = Vec::new();
        let ctx = stream_forward(&self.params, &self.layout.context, context, Some(&mut ctx_cache));
        let (loss, dctx) = self.example_backward(patch, &ctx, target, &mut grad);
        stream_backward(&self.params, &self.layout.context, &ctx_cache, dctx, &mut grad);
        Ok((loss, grad))
    }

    pub fn loss(&self, patch: &[f64], context: &[f64], target: &Target) -> Result<f64> {
        self.check_inputs(patch, context)?;
        self.check_target(target)?;
        let out = self.forward(patch, context)?;
        Ok(loss_and_dlogits(&out.logits, target).0)
    }

    pub(crate) fn check_target(&self, target: &Target) -> Result<()> {
        match target {
            Target::Class(c) if *c < self.arch.outputs => Ok(()),
            Target::Soft(q)
                if q.len() == self.arch.outputs
                    && q.iter().all(|v| *v >= 0.0)
                    && libm::fabs(q.iter().sum::<f64>() - 1.0) < 1e-9 =>
            {
                Ok(())
            }
            Target::Multi { values, mask } if values.len() == self.arch.outputs && mask.len() == self.arch.outputs => {
                Ok(())
            }
            _ => Err(Error::shape(format!(
                "target does not match the {} network outputs",
                self.arch.outputs
            ))),
        }
    }

    /// Forward and backward through the patch stream and head for one
    /// example, given precomputed context features. Accumulates into `grad`
    /// and returns the loss and the gradient w.r.t. the context features.
    pub(crate) fn example_backward(
        &self,
        patch: &[f64],
        context_features: &[f64],
        target: &Target,
        grad: &mut [f64],
    ) -> (f64, Vec<f64>) {
        let mut patch_cache = Vec::new();
        let mut concat = stream_forward(&self.params, &self.layout.patch, patch, Some(&mut patch_cache));
        let split = concat.len();
        concat.extend_from_slice(context_features);
        let acts = head_forward(&self.params, &self.layout.head, concat);
        let (loss, dlogits) = loss_and_dlogits(acts.last().expect("output layer"), target);
        let mut dconcat = head_backward(&self.params, &self.layout.head, &acts, dlogits, grad);
        let dctx = dconcat.split_off(split);
        stream_backward(&self.params, &self.layout.patch, &patch_cache, dconcat, grad);
        (loss, dctx)
    }

    pub(crate) fn context_forward_cached(&self, context: &[f64], cache: &mut Vec<ConvCache>) -> Vec<f64> {
        stream_forward(&self.params, &self.layout.context, context, Some(cache))
    }

    pub(crate) fn context_backward(&self, cache: &[ConvCache], dctx: Vec<f64>, grad: &mut [f64]) {
        stream_backward(&self.params, &self.layout.context, cache, dctx, grad);
    }
}

pub(crate) fn loss_and_dlogits(logits: &[f64], target: &Target) -> (f64, Vec<f64>) {
    match target {
        Target::Class(y) => {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - m)).collect();
            let sum: f64 = exps.iter().sum();
            let lse = m + libm::log(sum);
            let mut d: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            d[*y] -= 1.0;
            (lse - logits[*y], d)
        }
        Target::Soft(q) => {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - m)).collect();
            let sum: f64 = exps.iter().sum();
            let lse = m + libm::log(sum);
            let loss = q.iter().zip(logits).map(|(t, z)| t * (lse - z)).sum();
            let d = exps.iter().zip(q).map(|(e, t)| e / sum - t).collect();
            (loss, d)
        }
        Target::Multi { values, mask } => {
            let mut loss = 0.0;
            let mut d = vec![0.0; logits.len()];
            for k in 0..logits.len() {
                if !mask[k] {
                    continue;
                }
                let z = logits[k];
                let t = values[k];
                let softplus = z.max(0.0) + libm::log1p(libm::exp(-z.abs()));
                loss += softplus - t * z;
                d[k] = sigmoid(z) - t;
            }
            (loss, d)
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct ConvCache {
    input: Vec<f64>,
    /// Post-ReLU convolution output.
    act: Vec<f64>,
    /// For pooled layers, the index into `act` selected by each output cell.
    argmax: Vec<u32>,
}

fn stream_forward(params: &[f64], layers: &[ConvLayout], input: &[f64], mut cache: Option<&mut Vec<ConvCache>>) -> Vec<f64> {
    let mut x = input.to_vec();
    for l in layers {
        let mut act = conv_forward(params, l, &x);
        for v in &mut act {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let (out, argmax) = if l.pool {
            max_pool(&act, l.out_channels, l.conv_side, l.out_side)
        } else {
            (act.clone(), Vec::new())
        };
        if let Some(c) = cache.as_deref_mut() {
            c.push(ConvCache { input: x, act, argmax });
        }
        x = out;
    }
    x
}

fn conv_forward(params: &[f64], l: &ConvLayout, input: &[f64]) -> Vec<f64> {
    let (cs, is, k, st) = (l.conv_side, l.in_side, l.kernel, l.stride);
    let w = &params[l.weights.clone()];
    let b = &params[l.bias.clone()];
    let mut z = vec![0.0; l.conv_len()];
    for o in 0..l.out_channels {
        let zo = &mut z[o * cs * cs..(o + 1) * cs * cs];
        zo.fill(b[o]);
        for c in 0..l.in_channels {
            let plane = &input[c * is * is..(c + 1) * is * is];
            for u in 0..k {
                for v in 0..k {
                    let wv = w[((o * l.in_channels + c) * k + u) * k + v];
                    for i in 0..cs {
                        let src = (i * st + u) * is + v;
                        let row = &mut zo[i * cs..(i + 1) * cs];
                        if st == 1 {
                            for (zj, xj) in row.iter_mut().zip(&plane[src..src + cs]) {
                                *zj += wv * xj;
                            }
                        } else {
                            for (j, zj) in row.iter_mut().enumerate() {
                                *zj += wv * plane[src + j * st];
                            }
                        }
                    }
                }
            }
        }
    }
    z
}

fn max_pool(act: &[f64], channels: usize, side: usize, out_side: usize) -> (Vec<f64>, Vec<u32>) {
    let mut out = Vec::with_capacity(channels * out_side * out_side);
    let mut idx = Vec::with_capacity(out.capacity());
    for c in 0..channels {
        for i in 0..out_side {
            for j in 0..out_side {
                let mut best = (c * side + 2 * i) * side + 2 * j;
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (c * side + 2 * i + a) * side + 2 * j + b;
                    if act[cand] > act[best] {
                        best = cand;
                    }
                }
                out.push(act[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

fn stream_backward(params: &[f64], layers: &[ConvLayout], caches: &[ConvCache], dout: Vec<f64>, grad: &mut [f64]) {
    let mut d = dout;
    for (li, (l, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let mut dz = if l.pool {
            let mut full = vec![0.0; l.conv_len()];
            for (g, &i) in d.iter().zip(&cache.argmax) {
                full[i as usize] += g;
            }
            full
        } else {
            d
        };
        for (g, a) in dz.iter_mut().zip(&cache.act) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        d = conv_backward(params, l, &cache.input, &dz, grad, li > 0);
    }
}

fn conv_backward(params: &[f64], l: &ConvLayout, input: &[f64], dz: &[f64], grad: &mut [f64], need_input: bool) -> Vec<f64> {
    let (cs, is, k, st) = (l.conv_side, l.in_side, l.kernel, l.stride);
    let mut din = if need_input { vec![0.0; input.len()] } else { Vec::new() };
    for o in 0..l.out_channels {
        let dzo = &dz[o * cs * cs..(o + 1) * cs * cs];
        grad[l.bias.start + o] += dzo.iter().sum::<f64>();
        for c in 0..l.in_channels {
            let plane = c * is * is;
            for u in 0..k {
                for v in 0..k {
                    let wi = ((o * l.in_channels + c) * k + u) * k + v;
                    let wv = params[l.weights.start + wi];
                    let mut acc = 0.0;
                    for i in 0..cs {
                        let src = plane + (i * st + u) * is + v;
                        let drow = &dzo[i * cs..(i + 1) * cs];
                        if st == 1 {
                            acc += drow.iter().zip(&input[src..src + cs]).map(|(g, x)| g * x).sum::<f64>();
                            if need_input {
                                for (dx, g) in din[src..src + cs].iter_mut().zip(drow) {
                                    *dx += wv * g;
                                }
                            }
                        } else {
                            for (j, g) in drow.iter().enumerate() {
                                acc += g * input[src + j * st];
                                if need_input {
                                    din[src + j * st] += wv * g;
                                }
                            }
                        }
                    }
                    grad[l.weights.start + wi] += acc;
                }
            }
        }
    }
    din
}

/// Returns `[input, hidden activations..., logits]`.
fn head_forward(params: &[f64], layers: &[DenseLayout], input: Vec<f64>) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input);
    let last = layers.len() - 1;
    for (li, l) in layers.iter().enumerate() {
        let x = acts.last().expect("input pushed");
        let w = &params[l.weights.clone()];
        let mut out: Vec<f64> = params[l.bias.clone()].to_vec();
        for (o, y) in out.iter_mut().enumerate() {
            let row = &w[o * l.inputs..(o + 1) * l.inputs];
            *y += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if li != last && *y < 0.0 {
                *y = 0.0;
            }
        }
        acts.push(out);
    }
    acts
}

fn head_backward(params: &[f64], layers: &[DenseLayout], acts: &[Vec<f64>], dlogits: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
    let mut d = dlogits;
    for (li, l) in layers.iter().enumerate().rev() {
        if li != layers.len() - 1 {
            for (g, a) in d.iter_mut().zip(&acts[li + 1]) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let x = &acts[li];
        let mut dx = vec![0.0; l.inputs];
        for (o, &g) in d.iter().enumerate() {
            grad[l.bias.start + o] += g;
            if g == 0.0 {
                continue;
            }
            let wrow = &params[l.weights.start + o * l.inputs..l.weights.start + (o + 1) * l.inputs];
            let grow = &mut grad[l.weights.start + o * l.inputs..l.weights.start + (o + 1) * l.inputs];
            for ((gw, xi), (dxi, wi)) in grow.iter_mut().zip(x).zip(dx.iter_mut().zip(wrow)) {
                *gw += g * xi;
                *dxi += g * wi;
            }
        }
        d = dx;
    }
    d
}
