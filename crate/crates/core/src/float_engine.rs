//! Reference floating-point forward pass.
//!
//! Kernels are generic over [`Real`] so the trainer can reuse them in double
//! precision. Accumulation order is fixed: output pixels row-major, then
//! kernel position, then input channel.

use num_traits::Float;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{conv_output_dim, ActivationKind, Graph, LayerSpec, Padding};
use crate::tensor::{Shape, TensorF32};

pub trait Real: Float + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn of32(v: f32) -> Self;
    fn to64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn of32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn of32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to64(self) -> f64 {
        self
    }
}

/// Spatial geometry shared by standard and depthwise convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_ch: usize,
    pub out_ch: usize,
}

/// Output shape plus the top and left padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvPlan {
    pub input: Shape,
    pub output: Shape,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn plan(&self, input: Shape) -> Result<ConvPlan> {
        if input.c() != self.in_ch {
            return Err(Error::Shape(format!(
                "convolution expects {} channels, input is {input}",
                self.in_ch
            )));
        }
        let (oh, pt) = conv_output_dim(input.h(), self.kh, self.stride, self.padding)
            .ok_or_else(|| Error::Shape(format!("invalid stride/padding for {input}")))?;
        let (ow, pl) = conv_output_dim(input.w(), self.kw, self.stride, self.padding)
            .ok_or_else(|| Error::Shape(format!("invalid stride/padding for {input}")))?;
        Ok(ConvPlan {
            input,
            output: Shape([input.n(), oh, ow, self.out_ch]),
            pad_top: pt,
            pad_left: pl,
        })
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    pub fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < extent).then_some(p)
    }
}

pub fn conv2d_raw<T: Real>(x: &[T], plan: &ConvPlan, geom: &ConvGeom, w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ins, outs) = (plan.input, plan.output);
    let (cin, cout) = (geom.in_ch, geom.out_ch);
    let mut out = vec![T::zero(); outs.len()];
    let mut acc = vec![T::zero(); cout];
    for n in 0..outs.n() {
        for oy in 0..outs.h() {
            for ox in 0..outs.w() {
                acc.iter_mut().for_each(|a| *a = T::zero());
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
                            let wrow = &w[wbase + ic * cout..wbase + (ic + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a = *a + xv * wv;
                            }
                        }
                    }
                }
                let obase = ((n * outs.h() + oy) * outs.w() + ox) * cout;
                for oc in 0..cout {
                    let b = bias.map_or(T::zero(), |b| b[oc]);
                    out[obase + oc] = acc[oc] + b;
                }
            }
        }
    }
    out
}

pub fn depthwise_raw<T: Real>(
    x: &[T],
    plan: &ConvPlan,
    geom: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ins, outs) = (plan.input, plan.output);
    let ch = geom.in_ch;
    let mut out = vec![T::zero(); outs.len()];
    for n in 0..outs.n() {
        for oy in 0..outs.h() {
            for ox in 0..outs.w() {
                let obase = ((n * outs.h() + oy) * outs.w() + ox) * ch;
                let acc = &mut out[obase..obase + ch];
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
                            acc[c] = acc[c] + x[xbase + c] * w[wbase + c];
                        }
                    }
                }
                if let Some(b) = bias {
                    for c in 0..ch {
                        acc[c] = acc[c] + b[c];
                    }
                }
            }
        }
    }
    out
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, channel-last.
pub fn batchnorm_raw<T: Real>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Vec<T> {
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % channels;
            gamma[c] * (v - mean[c]) * inv[c] + beta[c]
        })
        .collect()
}

#[inline]
pub fn activate<T: Real>(kind: ActivationKind, v: T) -> T {
    let z = v.max(T::zero());
    match kind {
        ActivationKind::Relu => z,
        ActivationKind::Relu6 => z.min(T::of(6.0)),
    }
}

pub fn global_avg_pool_raw<T: Real>(x: &[T], s: Shape) -> Vec<T> {
    let (hw, c) = (s.h() * s.w(), s.c());
    let scale = T::one() / T::of(hw as f64);
    let mut out = vec![T::zero(); s.n() * c];
    for n in 0..s.n() {
        for p in 0..hw {
            let base = (n * hw + p) * c;
            for ch in 0..c {
                out[n * c + ch] = out[n * c + ch] + x[base + ch];
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * scale);
    out
}

pub fn dense_raw<T: Real>(x: &[T], n: usize, fin: usize, fout: usize, w: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); n * fout];
    for i in 0..n {
        let row = &mut out[i * fout..(i + 1) * fout];
        for k in 0..fin {
            let xv = x[i * fin + k];
            for (o, &wv) in row.iter_mut().zip(&w[k * fout..(k + 1) * fout]) {
                *o = *o + xv * wv;
            }
        }
        for (o, &bv) in row.iter_mut().zip(b) {
            *o = *o + bv;
        }
    }
    out
}

pub fn softmax_raw<T: Real>(x: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

fn wrap(shape: Shape, data: Vec<f32>) -> TensorF32 {
    TensorF32::new(shape, data).expect("kernel produced a consistent buffer")
}

pub fn conv2d(
    input: &TensorF32,
    weights: &[f32],
    bias: Option<&[f32]>,
    geom: &ConvGeom,
) -> Result<TensorF32> {
    let plan = geom.plan(input.shape())?;
    if weights.len() != geom.kh * geom.kw * geom.in_ch * geom.out_ch {
        return Err(Error::Shape("conv weight length mismatch".into()));
    }
    if bias.is_some_and(|b| b.len() != geom.out_ch) {
        return Err(Error::Shape("conv bias length mismatch".into()));
    }
    Ok(wrap(
        plan.output,
        conv2d_raw(input.data(), &plan, geom, weights, bias),
    ))
}

pub fn depthwise_conv2d(
    input: &TensorF32,
    weights: &[f32],
    bias: Option<&[f32]>,
    geom: &ConvGeom,
) -> Result<TensorF32> {
    if geom.in_ch != geom.out_ch {
        return Err(Error::Shape("depthwise conv must preserve channels".into()));
    }
    let plan = geom.plan(input.shape())?;
    if weights.len() != geom.kh * geom.kw * geom.in_ch {
        return Err(Error::Shape("depthwise weight length mismatch".into()));
    }
    if bias.is_some_and(|b| b.len() != geom.in_ch) {
        return Err(Error::Shape("depthwise bias length mismatch".into()));
    }
    Ok(wrap(
        plan.output,
        depthwise_raw(input.data(), &plan, geom, weights, bias),
    ))
}

pub fn batchnorm_inference(
    input: &TensorF32,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<TensorF32> {
    let c = input.shape().c();
    if [gamma.len(), beta.len(), mean.len(), var.len()]
        .iter()
        .any(|&l| l != c)
    {
        return Err(Error::Shape("batch-norm parameter length mismatch".into()));
    }
    if var.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("negative variance".into()));
    }
    Ok(wrap(
        input.shape(),
        batchnorm_raw(input.data(), c, gamma, beta, mean, var, eps),
    ))
}

pub fn relu(input: &TensorF32) -> TensorF32 {
    activation(input, ActivationKind::Relu)
}

pub fn relu6(input: &TensorF32) -> TensorF32 {
    activation(input, ActivationKind::Relu6)
}

pub fn activation(input: &TensorF32, kind: ActivationKind) -> TensorF32 {
    wrap(
        input.shape(),
        input.data().iter().map(|&v| activate(kind, v)).collect(),
    )
}

pub fn global_avg_pool(input: &TensorF32) -> TensorF32 {
    let s = input.shape();
    wrap(Shape([s.n(), 1, 1, s.c()]), global_avg_pool_raw(input.data(), s))
}

pub fn dense(input: &TensorF32, weights: &[f32], bias: &[f32], out_features: usize) -> Result<TensorF32> {
    let s = input.shape();
    let fin = s.item_len();
    if weights.len() != fin * out_features || bias.len() != out_features {
        return Err(Error::Shape("dense parameter length mismatch".into()));
    }
    Ok(wrap(
        Shape([s.n(), 1, 1, out_features]),
        dense_raw(input.data(), s.n(), fin, out_features, weights, bias),
    ))
}

pub fn softmax(input: &TensorF32) -> TensorF32 {
    let s = input.shape();
    wrap(s, softmax_raw(input.data(), s.item_len()))
}

/// Applies one graph layer.
pub fn apply_layer(layer: &LayerSpec, x: &TensorF32) -> Result<TensorF32> {
    match layer {
        LayerSpec::Conv2d(c) => conv2d(
            x,
            &c.weights,
            c.bias.as_deref(),
            &ConvGeom {
                kh: c.kh,
                kw: c.kw,
                stride: c.stride,
                padding: c.padding,
                in_ch: c.in_ch,
                out_ch: c.out_ch,
            },
        ),
        LayerSpec::DepthwiseConv2d(d) => depthwise_conv2d(
            x,
            &d.weights,
            d.bias.as_deref(),
            &ConvGeom {
                kh: d.kh,
                kw: d.kw,
                stride: d.stride,
                padding: d.padding,
                in_ch: d.channels,
                out_ch: d.channels,
            },
        ),
        LayerSpec::BatchNorm(bn) => {
            batchnorm_inference(x, &bn.gamma, &bn.beta, &bn.mean, &bn.variance, bn.epsilon)
        }
        LayerSpec::Activation(kind) => Ok(activation(x, *kind)),
        LayerSpec::GlobalAvgPool => Ok(global_avg_pool(x)),
        LayerSpec::Dense(d) => dense(x, &d.weights, &d.bias, d.out_features),
        LayerSpec::Softmax => Ok(softmax(x)),
    }
}

/// Every layer output of one forward pass, indexed by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub input: TensorF32,
    pub outputs: Vec<TensorF32>,
}

fn check_input(g: &Graph, input: &TensorF32) -> Result<()> {
    let (a, b) = (input.shape(), g.input_shape);
    if (a.h(), a.w(), a.c()) != (b.h(), b.w(), b.c()) || a.n() == 0 {
        return Err(Error::Shape(format!("input {a} does not match graph input {b}")));
    }
    Ok(())
}

/// Runs the graph; returns the final output and optionally every
/// intermediate tensor.
pub fn forward(g: &Graph, input: &TensorF32, trace: bool) -> Result<(TensorF32, Option<ActivationTrace>)> {
    check_input(g, input)?;
    let mut outputs = Vec::new();
    let mut cur = input.clone();
    for layer in &g.layers {
        let next = apply_layer(layer, &cur)?;
        if trace {
            outputs.push(next.clone());
        }
        cur = next;
    }
    let trace = trace.then(|| ActivationTrace {
        input: input.clone(),
        outputs,
    });
    Ok((cur, trace))
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 prediction for every image, evaluated one image at a time.
pub fn predict(g: &Graph, data: &Dataset, exec: Exec) -> Result<Vec<usize>> {
    exec.try_map(data.len(), |i| {
        let (out, _) = forward(g, &data.image(i), false)?;
        Ok(argmax(out.data()))
    })
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate(g: &Graph, data: &Dataset, exec: Exec) -> Result<f64> {
    Ok(accuracy(&predict(g, data, exec)?, &data.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_baseline_mini, ArchSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: [usize; 4], data: Vec<f32>) -> TensorF32 {
        TensorF32::new(Shape(shape), data).unwrap()
    }

    fn geom(k: usize, stride: usize, padding: Padding, cin: usize, cout: usize) -> ConvGeom {
        ConvGeom {
            kh: k,
            kw: k,
            stride,
            padding,
            in_ch: cin,
            out_ch: cout,
        }
    }

    #[test]
    fn identity_pointwise() {
        let x = t([1, 3, 3, 2], (0..18).map(|v| v as f32 * 0.5 - 2.0).collect());
        let w = vec![1.0, 0.0, 0.0, 1.0];
        let y = conv2d(&x, &w, None, &geom(1, 1, Padding::Same, 2, 2)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_computed_valid_conv() {
        let x = t([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let w = vec![1.0, 0.0, 0.0, 1.0];
        let y = conv2d(&x, &w, None, &geom(2, 1, Padding::Valid, 1, 1)).unwrap();
        assert_eq!(y.shape(), Shape([1, 1, 1, 1]));
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = t([1, 4, 4, 1], vec![3.0; 16]);
        let y = conv2d(
            &x,
            &[0.0; 9 * 2],
            Some(&[0.5, -1.0]),
            &geom(3, 2, Padding::Same, 1, 2),
        )
        .unwrap();
        assert_eq!(y.shape(), Shape([1, 2, 2, 2]));
        for px in y.data().chunks(2) {
            assert_eq!(px, &[0.5, -1.0]);
        }
    }

    #[test]
    fn depthwise_scales_channels() {
        let x = t([1, 2, 2, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        let y = depthwise_conv2d(&x, &[2.0, -1.0], None, &geom(1, 1, Padding::Same, 2, 2)).unwrap();
        assert_eq!(y.data(), &[2.0, -1.0, 4.0, -2.0, 6.0, -3.0, 8.0, -4.0]);
    }

    #[test]
    fn single_channel_depthwise_equals_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = t(
            [1, 5, 5, 1],
            (0..25).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let w: Vec<f32> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = geom(3, 2, Padding::Same, 1, 1);
        let a = depthwise_conv2d(&x, &w, Some(&[0.25]), &g).unwrap();
        let b = conv2d(&x, &w, Some(&[0.25]), &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 4;
        let g = geom(3, 1, Padding::Same, c, c);
        let w: Vec<f32> = (0..9 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..100 {
            let data: Vec<f32> = (0..36 * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = t([1, 6, 6, c], data.clone());
            let mut perturbed = data;
            for (i, v) in perturbed.iter_mut().enumerate() {
                if i % c == 0 {
                    *v += rng.random_range(-5.0..5.0);
                }
            }
            let y0 = depthwise_conv2d(&x, &w, None, &g).unwrap();
            let y1 = depthwise_conv2d(&t([1, 6, 6, c], perturbed), &w, None, &g).unwrap();
            for (i, (a, b)) in y0.data().iter().zip(y1.data()).enumerate() {
                if i % c != 0 {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn batchnorm_cases() {
        let x = t([1, 1, 2, 1], vec![1.0, -3.0]);
        let y = batchnorm_inference(&x, &[1.0], &[0.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(y, x);

        let x = t([1, 1, 1, 1], vec![1.0]);
        let y = batchnorm_inference(&x, &[1.0], &[0.0], &[0.0], &[1e-8], 1e-3).unwrap();
        let expected = 1.0 / (0.00100001f64).sqrt();
        assert!((y.data()[0] as f64 - expected).abs() < 1e-3);
        assert!((y.data()[0] - 31.62).abs() < 0.01);

        let x = t([1, 2, 2, 1], vec![0.7; 4]);
        let y = batchnorm_inference(&x, &[3.0], &[-0.25], &[0.7], &[2.0], 1e-3).unwrap();
        assert!(y.data().iter().all(|&v| v == -0.25));

        assert!(batchnorm_inference(&x, &[1.0], &[0.0], &[0.0], &[-1.0], 1e-3).is_err());
    }

    #[test]
    fn activations() {
        let x = t([1, 1, 1, 4], vec![-1.0, 7.0, 0.0, 3.5]);
        assert_eq!(relu(&x).data(), &[0.0, 7.0, 0.0, 3.5]);
        assert_eq!(relu6(&x).data(), &[0.0, 6.0, 0.0, 3.5]);
    }

    #[test]
    fn pool_dense_softmax() {
        let x = t([1, 2, 2, 3], vec![1.5; 12]);
        assert_eq!(global_avg_pool(&x).data(), &[1.5, 1.5, 1.5]);

        let x = t([1, 1, 1, 3], vec![1.0, -2.0, 0.5]);
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(dense(&x, &eye, &[0.0; 3], 3).unwrap(), x);

        let s = softmax(&t([2, 1, 1, 4], vec![3.0; 8]));
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let s = softmax(&t([1, 1, 1, 3], vec![1000.0, 0.0, -1000.0]));
        assert!(s.is_finite());
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let mut g = build_baseline_mini(&ArchSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in &mut g.layers {
            match l {
                LayerSpec::Conv2d(c) => c
                    .weights
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-0.5..0.5)),
                LayerSpec::DepthwiseConv2d(d) => d
                    .weights
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-0.5..0.5)),
                LayerSpec::Dense(d) => d
                    .weights
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-0.5..0.5)),
                _ => {}
            }
        }
        let x = t(
            [3, 16, 16, 1],
            (0..768).map(|_| rng.random_range(0.0..1.0)).collect(),
        );
        let (a, trace) = forward(&g, &x, true).unwrap();
        let (b, _) = forward(&g, &x, false).unwrap();
        assert_eq!(a, b);
        for row in a.data().chunks(8) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let trace = trace.unwrap();
        let shapes = g.infer_shapes_from(x.shape()).unwrap();
        assert_eq!(trace.outputs.len(), g.layers.len());
        for (o, s) in trace.outputs.iter().zip(shapes) {
            assert_eq!(o.shape(), s);
        }
        assert!(forward(&g, &t([1, 8, 8, 1], vec![0.0; 64]), false).is_err());
    }

    #[test]
    fn empty_block_graph_runs() {
        let spec = ArchSpec {
            blocks: vec![],
            ..ArchSpec::default()
        };
        let g = build_baseline_mini(&spec).unwrap();
        let (out, _) = forward(&g, &t([1, 16, 16, 1], vec![0.5; 256]), false).unwrap();
        assert_eq!(out.shape(), Shape([1, 1, 1, 8]));
    }
}
