//! Mini-batch SGD training with batch-statistics batch norm.
//!
//! The forward/backward path is generic over [`Real`]; production training
//! runs in `f32`, gradient checks run the same code in `f64`.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::float_engine::{
    activate, conv2d_raw, dense_raw, depthwise_raw, evaluate, global_avg_pool_raw, ConvGeom, ConvPlan, Real,
};
use crate::model::{ActivationKind, Graph, LayerSpec};
use crate::tensor::Shape;

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LOSS: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            weight_decay: 1e-4,
            seed: 0,
            bn_momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.batch_size > train_len {
            return Err(Error::InvalidArgument(format!(
                "batch_size {} must lie in 1..={train_len}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weights,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamSlot {
    pub layer: usize,
    pub role: ParamRole,
}

/// Every trainable tensor of a graph, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub slots: Vec<ParamSlot>,
    pub values: Vec<Vec<T>>,
    by_layer: Vec<[Option<usize>; 2]>,
}

impl<T: Real> Params<T> {
    pub fn from_graph(g: &Graph) -> Self {
        let mut p = Params {
            slots: Vec::new(),
            values: Vec::new(),
            by_layer: vec![[None, None]; g.layers.len()],
        };
        let cast = |v: &[f32]| v.iter().map(|&x| T::of32(x)).collect::<Vec<T>>();
        for (i, layer) in g.layers.iter().enumerate() {
            let pair: [(ParamRole, Option<&[f32]>); 2] = match layer {
                LayerSpec::Conv2d(c) => [
                    (ParamRole::Weights, Some(&c.weights)),
                    (ParamRole::Bias, c.bias.as_deref()),
                ],
                LayerSpec::DepthwiseConv2d(d) => [
                    (ParamRole::Weights, Some(&d.weights)),
                    (ParamRole::Bias, d.bias.as_deref()),
                ],
                LayerSpec::BatchNorm(bn) => [
                    (ParamRole::Gamma, Some(&bn.gamma)),
                    (ParamRole::Beta, Some(&bn.beta)),
                ],
                LayerSpec::Dense(d) => [
                    (ParamRole::Weights, Some(&d.weights)),
                    (ParamRole::Bias, Some(&d.bias)),
                ],
                _ => continue,
            };
            for (k, (role, values)) in pair.into_iter().enumerate() {
                if let Some(v) = values {
                    p.by_layer[i][k] = Some(p.values.len());
                    p.slots.push(ParamSlot { layer: i, role });
                    p.values.push(cast(v));
                }
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            slots: self.slots.clone(),
            values: self.values.iter().map(|v| vec![T::zero(); v.len()]).collect(),
            by_layer: self.by_layer.clone(),
        }
    }

    /// Primary tensor (weights or gamma) and secondary tensor (bias or beta)
    /// of one layer.
    fn layer(&self, i: usize) -> (Option<&[T]>, Option<&[T]>) {
        let [a, b] = self.by_layer[i];
        (
            a.map(|k| self.values[k].as_slice()),
            b.map(|k| self.values[k].as_slice()),
        )
    }

    pub fn index_of(&self, slot: ParamSlot) -> Option<usize> {
        self.slots.iter().position(|s| *s == slot)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Copies the values back into `g` (which must have the same structure).
    pub fn write_into(&self, g: &mut Graph) {
        let cast = |v: &[T]| v.iter().map(|x| x.to64() as f32).collect::<Vec<f32>>();
        for (slot, values) in self.slots.iter().zip(&self.values) {
            let v = cast(values);
            match (&mut g.layers[slot.layer], slot.role) {
                (LayerSpec::Conv2d(c), ParamRole::Weights) => c.weights = v,
                (LayerSpec::Conv2d(c), ParamRole::Bias) => c.bias = Some(v),
                (LayerSpec::DepthwiseConv2d(d), ParamRole::Weights) => d.weights = v,
                (LayerSpec::DepthwiseConv2d(d), ParamRole::Bias) => d.bias = Some(v),
                (LayerSpec::BatchNorm(bn), ParamRole::Gamma) => bn.gamma = v,
                (LayerSpec::BatchNorm(bn), ParamRole::Beta) => bn.beta = v,
                (LayerSpec::Dense(d), ParamRole::Weights) => d.weights = v,
                (LayerSpec::Dense(d), ParamRole::Bias) => d.bias = v,
                _ => unreachable!("slot does not match layer kind"),
            }
        }
    }
}

/// He-style initialization: conv/dense weights ~ N(0, 2/fan_in), biases 0,
/// batch norms at identity.
pub fn init_weights(g: &Graph, seed: u64) -> Result<Graph> {
    let mut out = g.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut he = |w: &mut Vec<f32>, fan_in: usize| -> Result<()> {
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Invariant(format!("init distribution: {e}")))?;
            w.iter_mut().for_each(|v| *v = normal.sample(&mut rng) as f32);
            Ok(())
        };
        match layer {
            LayerSpec::Conv2d(c) => {
                he(&mut c.weights, c.kh * c.kw * c.in_ch)?;
                if let Some(b) = c.bias.as_mut() {
                    b.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            LayerSpec::DepthwiseConv2d(d) => {
                he(&mut d.weights, d.kh * d.kw)?;
                if let Some(b) = d.bias.as_mut() {
                    b.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            LayerSpec::BatchNorm(bn) => {
                *bn = crate::model::BatchNorm::identity(bn.channels(), bn.epsilon);
            }
            LayerSpec::Dense(d) => {
                he(&mut d.weights, d.in_features)?;
                d.bias.iter_mut().for_each(|v| *v = 0.0);
            }
            _ => {}
        }
    }
    Ok(out)
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Per-layer intermediate values kept for the backward pass.
pub struct Tape<T> {
    shapes: Vec<Shape>,
    inputs: Vec<Vec<T>>,
    bn: Vec<Option<BnCache<T>>>,
    probs: Vec<T>,
    classes: usize,
}

impl<T: Real> Tape<T> {
    /// Input of layer `i` during the recorded forward pass.
    pub fn layer_input(&self, i: usize) -> &[T] {
        &self.inputs[i]
    }

    pub fn layer_input_shape(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn probabilities(&self) -> &[T] {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Gradients of one batch plus the batch-norm statistics it observed.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub params: Params<T>,
    /// `(layer, batch mean, unbiased batch variance)` per batch norm.
    pub batch_stats: Vec<(usize, Vec<T>, Vec<T>)>,
}

fn geom_of(layer: &LayerSpec) -> Option<ConvGeom> {
    match layer {
        LayerSpec::Conv2d(c) => Some(ConvGeom {
            kh: c.kh,
            kw: c.kw,
            stride: c.stride,
            padding: c.padding,
            in_ch: c.in_ch,
            out_ch: c.out_ch,
        }),
        LayerSpec::DepthwiseConv2d(d) => Some(ConvGeom {
            kh: d.kh,
            kw: d.kw,
            stride: d.stride,
            padding: d.padding,
            in_ch: d.channels,
            out_ch: d.channels,
        }),
        _ => None,
    }
}

fn bn_train_forward<T: Real>(x: &[T], c: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, BnCache<T>) {
    let m = x.len() / c;
    let mf = T::of(m as f64);
    let mut mean = vec![T::zero(); c];
    for (i, &v) in x.iter().enumerate() {
        mean[i % c] = mean[i % c] + v;
    }
    mean.iter_mut().for_each(|v| *v = *v / mf);
    let mut var = vec![T::zero(); c];
    for (i, &v) in x.iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] = var[i % c] + d * d;
    }
    var.iter_mut().for_each(|v| *v = *v / mf);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xhat: Vec<T> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c])
        .collect();
    let y = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| gamma[i % c] * v + beta[i % c])
        .collect();
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Training-mode forward pass: batch norms use batch statistics. Returns the
/// mean cross-entropy of the final softmax against `labels`.
pub fn forward_train<T: Real>(
    g: &Graph,
    p: &Params<T>,
    images: &[T],
    shape: Shape,
    labels: &[usize],
) -> Result<(T, Tape<T>)> {
    if !matches!(g.layers.last(), Some(LayerSpec::Softmax)) {
        return Err(Error::Shape("training requires a final softmax layer".into()));
    }
    if images.len() != shape.len() || labels.len() != shape.n() {
        return Err(Error::Shape(format!(
            "batch of {} values / {} labels does not match {shape}",
            images.len(),
            labels.len()
        )));
    }
    let shapes = g.infer_shapes_from(shape)?;
    let mut tape = Tape {
        shapes: Vec::with_capacity(g.layers.len()),
        inputs: Vec::with_capacity(g.layers.len()),
        bn: Vec::with_capacity(g.layers.len()),
        probs: Vec::new(),
        classes: 0,
    };
    let mut cur = images.to_vec();
    let mut cur_shape = shape;
    let last = g.layers.len() - 1;
    for (i, layer) in g.layers[..last].iter().enumerate() {
        let (a, b) = p.layer(i);
        let mut cache = None;
        let next = match layer {
            LayerSpec::Conv2d(_) | LayerSpec::DepthwiseConv2d(_) => {
                let geom = geom_of(layer).expect("conv layer");
                let plan = geom.plan(cur_shape)?;
                let w = a.expect("conv weights");
                if matches!(layer, LayerSpec::Conv2d(_)) {
                    conv2d_raw(&cur, &plan, &geom, w, b)
                } else {
                    depthwise_raw(&cur, &plan, &geom, w, b)
                }
            }
            LayerSpec::BatchNorm(bn) => {
                let (y, c) = bn_train_forward(
                    &cur,
                    cur_shape.c(),
                    a.expect("gamma"),
                    b.expect("beta"),
                    T::of32(bn.epsilon),
                );
                cache = Some(c);
                y
            }
            LayerSpec::Activation(kind) => cur.iter().map(|&v| activate(*kind, v)).collect(),
            LayerSpec::GlobalAvgPool => global_avg_pool_raw(&cur, cur_shape),
            LayerSpec::Dense(d) => dense_raw(
                &cur,
                cur_shape.n(),
                d.in_features,
                d.out_features,
                a.expect("dense weights"),
                b.expect("dense bias"),
            ),
            LayerSpec::Softmax => {
                return Err(Error::layer(i, "softmax is only supported as the final layer"))
            }
        };
        tape.shapes.push(cur_shape);
        tape.inputs.push(std::mem::replace(&mut cur, next));
        tape.bn.push(cache);
        cur_shape = shapes[i];
    }

    let classes = cur_shape.item_len();
    let n = shape.n();
    let mut loss = T::zero();
    let mut probs = Vec::with_capacity(cur.len());
    for (row, &label) in cur.chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss = loss + (lse - row[label]);
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    tape.probs = probs;
    tape.classes = classes;
    Ok((loss / T::of(n as f64), tape))
}

fn conv_backward<T: Real>(
    x: &[T],
    plan: &ConvPlan,
    geom: &ConvGeom,
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ins, outs) = (plan.input, plan.output);
    let (cin, cout) = (geom.in_ch, geom.out_ch);
    let mut dx = vec![T::zero(); if need_dx { ins.len() } else { 0 }];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cout];
    for n in 0..outs.n() {
        for oy in 0..outs.h() {
            for ox in 0..outs.w() {
                let obase = ((n * outs.h() + oy) * outs.w() + ox) * cout;
                let g = &dy[obase..obase + cout];
                for (d, &v) in db.iter_mut().zip(g) {
                    *d = *d + v;
                }
                for ky in 0..geom.kh {
                    let Some(iy) = ConvGeom::source(oy, ky, geom.stride, plan.pad_top, ins.h()) else {
                        continue;
                    };
                    for kx in 0..geom.kw {
                        let Some(ix) = ConvGeom::source(ox, kx, geom.stride, plan.pad_left, ins.w()) else {
                            continue;
                        };
                        let xbase = ((n * ins.h() + iy) * ins.w() + ix) * cin;
                        let wbase = (ky * geom.kw + kx) * cin * cout;
                        for ic in 0..cin {
                            let xv = x[xbase + ic];
                            let r = wbase + ic * cout..wbase + (ic + 1) * cout;
                            let mut acc = T::zero();
                            for ((dwv, &wv), &gv) in dw[r.clone()].iter_mut().zip(&w[r]).zip(g) {
                                *dwv = *dwv + xv * gv;
                                acc = acc + wv * gv;
                            }
                            if need_dx {
                                dx[xbase + ic] = dx[xbase + ic] + acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn depthwise_backward<T: Real>(
    x: &[T],
    plan: &ConvPlan,
    geom: &ConvGeom,
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ins, outs) = (plan.input, plan.output);
    let ch = geom.in_ch;
    let mut dx = vec![T::zero(); if need_dx { ins.len() } else { 0 }];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); ch];
    for n in 0..outs.n() {
        for oy in 0..outs.h() {
            for ox in 0..outs.w() {
                let obase = ((n * outs.h() + oy) * outs.w() + ox) * ch;
                let g = &dy[obase..obase + ch];
                for (d, &v) in db.iter_mut().zip(g) {
                    *d = *d + v;
                }
                for ky in 0..geom.kh {
                    let Some(iy) = ConvGeom::source(oy, ky, geom.stride, plan.pad_top, ins.h()) else {
                        continue;
                    };
                    for kx in 0..geom.kw {
                        let Some(ix) = ConvGeom::source(ox, kx, geom.stride, plan.pad_left, ins.w()) else {
                            continue;
                        };
                        let xbase = ((n * ins.h() + iy) * ins.w() + ix) * ch;
                        let wbase = (ky * geom.kw + kx) * ch;
                        for c in 0..ch {
                            dw[wbase + c] = dw[wbase + c] + x[xbase + c] * g[c];
                            if need_dx {
                                dx[xbase + c] = dx[xbase + c] + w[wbase + c] * g[c];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Upstream gradient gate of an activation at pre-activation value `x`.
#[inline]
pub fn activation_gate<T: Real>(kind: ActivationKind, x: T) -> bool {
    match kind {
        ActivationKind::Relu => x > T::zero(),
        ActivationKind::Relu6 => x > T::zero() && x < T::of(6.0),
    }
}

/// Gradients of the loss computed by [`forward_train`].
pub fn backward<T: Real>(g: &Graph, p: &Params<T>, tape: &Tape<T>, labels: &[usize]) -> Grads<T> {
    let n = labels.len();
    let inv_n = T::one() / T::of(n as f64);
    let classes = tape.classes;
    let mut dy: Vec<T> = tape
        .probs
        .iter()
        .enumerate()
        .map(|(i, &pv)| {
            let hit = if labels[i / classes] == i % classes {
                T::one()
            } else {
                T::zero()
            };
            (pv - hit) * inv_n
        })
        .collect();

    let mut grads = p.zeros_like();
    let mut batch_stats = Vec::new();
    let last = g.layers.len() - 1;
    for i in (0..last).rev() {
        let x = &tape.inputs[i];
        let xs = tape.shapes[i];
        let need_dx = i > 0;
        let [ia, ib] = p.by_layer[i];
        let (a, _) = p.layer(i);
        let dx = match &g.layers[i] {
            layer @ (LayerSpec::Conv2d(_) | LayerSpec::DepthwiseConv2d(_)) => {
                let geom = geom_of(layer).expect("conv layer");
                let plan = geom.plan(xs).expect("shape checked in forward");
                let w = a.expect("conv weights");
                let (dx, dw, db) = if matches!(layer, LayerSpec::Conv2d(_)) {
                    conv_backward(x, &plan, &geom, w, &dy, need_dx)
                } else {
                    depthwise_backward(x, &plan, &geom, w, &dy, need_dx)
                };
                grads.values[ia.expect("weights slot")] = dw;
                if let Some(k) = ib {
                    grads.values[k] = db;
                }
                dx
            }
            LayerSpec::BatchNorm(_) => {
                let cache = tape.bn[i].as_ref().expect("bn cache");
                let c = xs.c();
                let m = x.len() / c;
                let gamma = a.expect("gamma");
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (j, (&gv, &xh)) in dy.iter().zip(&cache.xhat).enumerate() {
                    dgamma[j % c] = dgamma[j % c] + gv * xh;
                    dbeta[j % c] = dbeta[j % c] + gv;
                }
                let mf = T::of(m as f64);
                let dx = dy
                    .iter()
                    .zip(&cache.xhat)
                    .enumerate()
                    .map(|(j, (&gv, &xh))| {
                        let k = j % c;
                        gamma[k] * cache.inv_std[k] / mf * (mf * gv - dbeta[k] - xh * dgamma[k])
                    })
                    .collect();
                let unbiased = if m > 1 {
                    let s = mf / T::of((m - 1) as f64);
                    cache.var.iter().map(|&v| v * s).collect()
                } else {
                    cache.var.clone()
                };
                batch_stats.push((i, cache.mean.clone(), unbiased));
                grads.values[ia.expect("gamma slot")] = dgamma;
                grads.values[ib.expect("beta slot")] = dbeta;
                dx
            }
            LayerSpec::Activation(kind) => x
                .iter()
                .zip(&dy)
                .map(|(&xv, &gv)| if activation_gate(*kind, xv) { gv } else { T::zero() })
                .collect(),
            LayerSpec::GlobalAvgPool => {
                let (hw, c) = (xs.h() * xs.w(), xs.c());
                let scale = T::one() / T::of(hw as f64);
                (0..x.len())
                    .map(|j| {
                        let nn = j / (hw * c);
                        dy[nn * c + j % c] * scale
                    })
                    .collect()
            }
            LayerSpec::Dense(d) => {
                let w = a.expect("dense weights");
                let (fin, fout) = (d.in_features, d.out_features);
                let mut dw = vec![T::zero(); w.len()];
                let mut db = vec![T::zero(); fout];
                let mut dx = vec![T::zero(); x.len()];
                for s in 0..xs.n() {
                    let g = &dy[s * fout..(s + 1) * fout];
                    for (d, &v) in db.iter_mut().zip(g) {
                        *d = *d + v;
                    }
                    for k in 0..fin {
                        let xv = x[s * fin + k];
                        let r = k * fout..(k + 1) * fout;
                        let mut acc = T::zero();
                        for ((dwv, &wv), &gv) in dw[r.clone()].iter_mut().zip(&w[r]).zip(g) {
                            *dwv = *dwv + xv * gv;
                            acc = acc + wv * gv;
                        }
                        dx[s * fin + k] = acc;
                    }
                }
                grads.values[ia.expect("weights slot")] = dw;
                grads.values[ib.expect("bias slot")] = db;
                dx
            }
            LayerSpec::Softmax => unreachable!("softmax only as final layer"),
        };
        dy = dx;
    }
    batch_stats.reverse();
    Grads {
        params: grads,
        batch_stats,
    }
}

/// One forward and backward pass over a batch.
pub fn loss_and_grads<T: Real>(
    g: &Graph,
    p: &Params<T>,
    images: &[T],
    shape: Shape,
    labels: &[usize],
) -> Result<(T, Grads<T>)> {
    let (loss, tape) = forward_train(g, p, images, shape, labels)?;
    Ok((loss, backward(g, p, &tape, labels)))
}

/// Moving batch-norm statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingStats {
    pub layer: usize,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Params<f32>,
    pub velocity: Vec<Vec<f32>>,
    pub moving: Vec<MovingStats>,
    pub epoch: usize,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(g: &Graph, shuffle_seed: u64) -> Self {
        let params = Params::from_graph(g);
        let velocity = params.values.iter().map(|v| vec![0.0; v.len()]).collect();
        let moving = g
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                LayerSpec::BatchNorm(bn) => Some(MovingStats {
                    layer: i,
                    mean: bn.mean.clone(),
                    variance: bn.variance.clone(),
                }),
                _ => None,
            })
            .collect();
        Self {
            params,
            velocity,
            moving,
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(shuffle_seed),
        }
    }

    /// `g` with the current weights and moving statistics.
    pub fn inference_graph(&self, g: &Graph) -> Graph {
        let mut out = g.clone();
        self.params.write_into(&mut out);
        for m in &self.moving {
            if let LayerSpec::BatchNorm(bn) = &mut out.layers[m.layer] {
                bn.mean = m.mean.clone();
                bn.variance = m.variance.clone();
            }
        }
        out
    }
}

/// Momentum SGD with weight decay:
/// `v = momentum * v + grad + decay * w; w -= lr * v`. Decay applies to
/// conv and dense weights only.
pub fn sgd_step(state: &mut TrainState, grads: &Grads<f32>, cfg: &TrainConfig) {
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    for (k, slot) in state.params.slots.iter().enumerate() {
        let decay = if slot.role == ParamRole::Weights { wd } else { 0.0 };
        let w = &mut state.params.values[k];
        let v = &mut state.velocity[k];
        for ((wv, vv), &gv) in w.iter_mut().zip(v.iter_mut()).zip(&grads.params.values[k]) {
            let nv = mu * *vv as f64 + gv as f64 + decay * *wv as f64;
            *vv = nv as f32;
            *wv = (*wv as f64 - lr * nv) as f32;
        }
    }
    let m = cfg.bn_momentum;
    for (layer, mean, var) in &grads.batch_stats {
        if let Some(ms) = state.moving.iter_mut().find(|s| s.layer == *layer) {
            for (a, &b) in ms.mean.iter_mut().zip(mean) {
                *a = (m * *a as f64 + (1.0 - m) * b as f64) as f32;
            }
            for (a, &b) in ms.variance.iter_mut().zip(var) {
                *a = (m * *a as f64 + (1.0 - m) * b as f64) as f32;
            }
        }
    }
    state.step += 1;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
}

/// Gathers a batch of images into one contiguous buffer.
fn gather(data: &Dataset, idx: &[usize]) -> (Vec<f32>, Vec<usize>, Shape) {
    let item = data.images.shape().item_len();
    let mut x = Vec::with_capacity(idx.len() * item);
    for &i in idx {
        x.extend_from_slice(data.image_data(i));
    }
    let labels = idx.iter().map(|&i| data.labels[i]).collect();
    (x, labels, data.images.shape().with_batch(idx.len()))
}

/// Runs one epoch; returns the mean batch loss.
pub fn train_epoch(g: &Graph, state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for idx in order.chunks_exact(cfg.batch_size) {
        let (x, labels, shape) = gather(data, idx);
        let (loss, grads) = loss_and_grads(g, &state.params, &x, shape, &labels)?;
        let loss = loss as f64;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                epoch: state.epoch,
                step: state.step,
                loss,
            });
        }
        sgd_step(state, &grads, cfg);
        total += loss;
        batches += 1;
    }
    state.epoch += 1;
    Ok(total / batches.max(1) as f64)
}

/// Trains `g` (already initialized) and returns the inference-ready graph
/// with moving batch-norm statistics, plus one record per epoch.
pub fn train(
    g: &Graph,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Graph, Vec<EpochRecord>)> {
    cfg.validate(data.len())?;
    let mut state = TrainState::new(g, cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let loss = train_epoch(g, &mut state, data, cfg)?;
        let val_acc = match val {
            Some(v) => Some(evaluate(&state.inference_graph(g), v, Exec::Sequential)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch: state.epoch,
            loss,
            val_acc,
        });
    }
    if cfg.epochs == 0 {
        return Ok((g.clone(), history));
    }
    let mut out = state.inference_graph(g);
    out.notes.push(format!(
        "trained {} epochs, lr {}, batch {}, seed {}",
        cfg.epochs, cfg.learning_rate, cfg.batch_size, cfg.seed
    ));
    Ok((out, history))
}

/// Writes the per-epoch history as CSV (`epoch,loss,val_acc`).
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "epoch,loss,val_acc").expect("write to Vec");
    for r in history {
        let acc = r.val_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        writeln!(buf, "{},{:.6},{}", r.epoch, r.loss, acc).expect("write to Vec");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
