//! Graph rewrites: batch-norm folding, the quantization-friendly block
//! rewrite, and dead-channel injection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationKind, BatchNorm, Graph, LayerSpec};

/// Variance written into the batch norm of an injected dead channel.
pub const DEAD_CHANNEL_VARIANCE: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldedLayer {
    /// Index of the batch norm in the input graph.
    pub bn_index: usize,
    /// Index of the convolution it was folded into, in the output graph.
    pub conv_index: usize,
    pub alpha: Vec<f32>,
    pub shift: Vec<f32>,
    pub alpha_max: f32,
    pub alpha_min: f32,
    pub alpha_median: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub layers: Vec<FoldedLayer>,
}

pub fn median(values: &[f32]) -> f32 {
    if values.is_empty() {
        return f32::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        ((v[m - 1] as f64 + v[m] as f64) / 2.0) as f32
    }
}

fn fold_into(
    weights: &mut [f32],
    bias: &mut Option<Vec<f32>>,
    out_ch: usize,
    bn: &BatchNorm,
) -> (Vec<f32>, Vec<f32>) {
    let alpha = bn.alpha();
    // Output channel is the fastest-varying weight axis for both conv kinds.
    for (i, w) in weights.iter_mut().enumerate() {
        *w = (*w as f64 * alpha[i % out_ch] as f64) as f32;
    }
    let old = bias.take().unwrap_or_else(|| vec![0.0; out_ch]);
    let shift: Vec<f32> = (0..out_ch)
        .map(|c| {
            let a = alpha[c] as f64;
            (bn.beta[c] as f64 - a * bn.mean[c] as f64 + a * old[c] as f64) as f32
        })
        .collect();
    *bias = Some(shift.clone());
    (alpha, shift)
}

/// Folds every inference-mode batch norm into the convolution before it.
pub fn fold_batchnorm(g: &Graph) -> Result<(Graph, FoldReport)> {
    g.infer_shapes()?;
    let mut layers: Vec<LayerSpec> = Vec::with_capacity(g.layers.len());
    let mut report = FoldReport::default();
    for (i, layer) in g.layers.iter().enumerate() {
        let LayerSpec::BatchNorm(bn) = layer else {
            layers.push(layer.clone());
            continue;
        };
        let conv_index = layers.len().wrapping_sub(1);
        let (alpha, shift) = match layers.last_mut() {
            Some(LayerSpec::Conv2d(c)) => fold_into(&mut c.weights, &mut c.bias, c.out_ch, bn),
            Some(LayerSpec::DepthwiseConv2d(d)) => fold_into(&mut d.weights, &mut d.bias, d.channels, bn),
            _ => {
                return Err(Error::layer(
                    i,
                    "batch norm does not directly follow a convolution",
                ))
            }
        };
        report.layers.push(FoldedLayer {
            bn_index: i,
            conv_index,
            alpha_max: alpha.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            alpha_min: alpha.iter().copied().fold(f32::INFINITY, f32::min),
            alpha_median: median(&alpha),
            alpha,
            shift,
        });
    }
    let mut out = Graph { layers, ..g.clone() };
    out.notes
        .push("batch norms folded into preceding convolutions".into());
    out.infer_shapes()?;
    Ok((out, report))
}

fn is_pointwise(l: &LayerSpec) -> bool {
    matches!(l, LayerSpec::Conv2d(c) if c.kh == 1 && c.kw == 1 && c.stride == 1)
}

/// Rewrites conventional separable blocks into the friendly form:
/// the BN and ReLU6 between depthwise and pointwise go away, the depthwise
/// gains a zero bias, and the pointwise activation becomes ReLU.
///
/// Blocks already in friendly form are kept, so the rewrite is idempotent.
pub fn make_friendly(g: &Graph) -> Result<Graph> {
    use LayerSpec::*;
    let relu6 = |l: &LayerSpec| matches!(l, Activation(ActivationKind::Relu6));
    let relu = |l: &LayerSpec| matches!(l, Activation(ActivationKind::Relu));
    let bn = |l: &LayerSpec| matches!(l, BatchNorm(_));

    let src = &g.layers;
    let mut out = Vec::with_capacity(src.len());
    let mut i = 0;
    while i < src.len() {
        let DepthwiseConv2d(dw) = &src[i] else {
            out.push(src[i].clone());
            i += 1;
            continue;
        };
        let at = |k: usize| src.get(i + k);
        let baseline = at(1).is_some_and(bn)
            && at(2).is_some_and(relu6)
            && at(3).is_some_and(is_pointwise)
            && at(4).is_some_and(bn)
            && at(5).is_some_and(relu6);
        let friendly = at(1).is_some_and(is_pointwise) && at(2).is_some_and(bn) && at(3).is_some_and(relu);
        if baseline {
            let mut dw = dw.clone();
            dw.bias.get_or_insert_with(|| vec![0.0; dw.channels]);
            out.push(DepthwiseConv2d(dw));
            out.push(src[i + 3].clone());
            out.push(src[i + 4].clone());
            out.push(Activation(ActivationKind::Relu));
            i += 6;
        } else if friendly && dw.bias.is_some() {
            out.extend_from_slice(&src[i..i + 4]);
            i += 4;
        } else {
            return Err(Error::layer(i, "unrecognized separable block structure"));
        }
    }
    let mut name = g.name.clone();
    if !name.ends_with("-friendly") && !name.starts_with("friendly") {
        name.push_str("-friendly");
    }
    let mut notes = g.notes.clone();
    notes.push("rewritten into quantization-friendly separable blocks".into());
    let out = Graph {
        name,
        notes,
        layers: out,
        ..g.clone()
    };
    out.infer_shapes()?;
    Ok(out)
}

/// Turns `channels` of depthwise layer `layer` into near-dead channels.
///
/// The following batch norm gets mean 0 and variance 1e-8 for those channels
/// while gamma and beta stay as trained, so each channel's scale becomes
/// `gamma / sqrt(1e-8 + eps)`. To keep the float function unchanged the
/// channel's producer upstream is scaled down by
/// `s = sqrt(1e-8 + eps) / sqrt(var + eps)` and the depthwise layer gains the
/// bias `-s * mean`: the channel now carries a tiny-variance signal that the
/// inflated scale restores. Depthwise weights are left as trained.
///
/// The rewrite is exact when the path from the producer is linear or ReLU; a
/// ReLU6 on that path differs only where its input exceeded 6.
pub fn inject_dead_channels(g: &Graph, layer: usize, channels: &[usize]) -> Result<Graph> {
    g.infer_shapes()?;
    let ch = match g.layers.get(layer) {
        Some(LayerSpec::DepthwiseConv2d(d)) => d.channels,
        _ => return Err(Error::layer(layer, "not a depthwise convolution")),
    };
    let Some(LayerSpec::BatchNorm(bn)) = g.layers.get(layer + 1) else {
        return Err(Error::layer(
            layer,
            "depthwise convolution is not followed by batch norm",
        ));
    };
    if let Some(&c) = channels.iter().find(|&&c| c >= ch) {
        return Err(Error::layer(
            layer,
            format!("channel {c} out of range for {ch} channels"),
        ));
    }
    let mut out = g.clone();
    if channels.is_empty() {
        return Ok(out);
    }

    let eps = bn.epsilon as f64;
    let scale: Vec<(usize, f64, f64)> = channels
        .iter()
        .map(|&c| {
            let s = (DEAD_CHANNEL_VARIANCE as f64 + eps).sqrt() / (bn.variance[c] as f64 + eps).sqrt();
            (c, s, bn.mean[c] as f64)
        })
        .collect();
    let producer = (0..layer)
        .rev()
        .find(|&k| !matches!(out.layers[k], LayerSpec::Activation(_)))
        .ok_or_else(|| Error::layer(layer, "dead channels need an upstream producer"))?;
    let scale_channel = |w: &mut [f32], b: Option<&mut Vec<f32>>, n: usize, c: usize, s: f64| {
        for v in w.iter_mut().skip(c).step_by(n) {
            *v = (*v as f64 * s) as f32;
        }
        if let Some(b) = b {
            b[c] = (b[c] as f64 * s) as f32;
        }
    };
    for &(c, s, _) in &scale {
        match &mut out.layers[producer] {
            LayerSpec::BatchNorm(p) => {
                p.gamma[c] = (p.gamma[c] as f64 * s) as f32;
                p.beta[c] = (p.beta[c] as f64 * s) as f32;
            }
            LayerSpec::Conv2d(p) => {
                let n = p.out_ch;
                scale_channel(&mut p.weights, p.bias.as_mut(), n, c, s);
            }
            LayerSpec::DepthwiseConv2d(p) => {
                let n = p.channels;
                scale_channel(&mut p.weights, p.bias.as_mut(), n, c, s);
            }
            _ => {
                return Err(Error::layer(
                    producer,
                    "cannot rescale channels produced by this layer kind",
                ))
            }
        }
    }
    if let LayerSpec::DepthwiseConv2d(dw) = &mut out.layers[layer] {
        let bias = dw.bias.get_or_insert_with(|| vec![0.0; ch]);
        for &(c, s, mean) in &scale {
            bias[c] = (bias[c] as f64 * s - s * mean) as f32;
        }
    }
    if let LayerSpec::BatchNorm(bn) = &mut out.layers[layer + 1] {
        for &c in channels {
            bn.mean[c] = 0.0;
            bn.variance[c] = DEAD_CHANNEL_VARIANCE;
        }
    }
    let list: Vec<String> = channels.iter().map(|c| c.to_string()).collect();
    out.notes.push(format!(
        "dead channels [{}] injected at depthwise layer {layer}",
        list.join(",")
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::float_engine::{apply_layer, forward};
    use crate::model::{build_baseline_mini, build_friendly_mini, ArchSpec, Conv2d, Padding};
    use crate::tensor::{Shape, TensorF32};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomized(mut g: Graph, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut Vec<f32>, lo: f32, hi: f32| {
            v.iter_mut().for_each(|x| *x = rng.random_range(lo..hi));
        };
        for l in &mut g.layers {
            match l {
                LayerSpec::Conv2d(c) => {
                    fill(&mut c.weights, -0.6, 0.6);
                    if let Some(b) = c.bias.as_mut() {
                        fill(b, -0.2, 0.2);
                    }
                }
                LayerSpec::DepthwiseConv2d(d) => {
                    fill(&mut d.weights, -0.6, 0.6);
                    if let Some(b) = d.bias.as_mut() {
                        fill(b, -0.2, 0.2);
                    }
                }
                LayerSpec::BatchNorm(bn) => {
                    fill(&mut bn.gamma, 0.5, 1.5);
                    fill(&mut bn.beta, -0.3, 0.3);
                    fill(&mut bn.mean, -0.5, 0.5);
                    fill(&mut bn.variance, 0.2, 2.0);
                }
                LayerSpec::Dense(d) => {
                    fill(&mut d.weights, -0.5, 0.5);
                    fill(&mut d.bias, -0.1, 0.1);
                }
                _ => {}
            }
        }
        g
    }

    fn single_conv_bn(w: f32, b: f32, bn: BatchNorm) -> Graph {
        Graph {
            name: "tiny".into(),
            seed: 0,
            notes: vec![],
            input_shape: Shape([1, 1, 1, 1]),
            layers: vec![
                LayerSpec::Conv2d(Conv2d {
                    kh: 1,
                    kw: 1,
                    stride: 1,
                    padding: Padding::Same,
                    in_ch: 1,
                    out_ch: 1,
                    weights: vec![w],
                    bias: Some(vec![b]),
                }),
                LayerSpec::BatchNorm(bn),
                LayerSpec::Softmax,
            ],
        }
    }

    #[test]
    fn identity_bn_folds_to_nothing() {
        let bn = BatchNorm {
            gamma: vec![1.0],
            beta: vec![0.0],
            mean: vec![0.0],
            variance: vec![1.0],
            epsilon: f32::MIN_POSITIVE,
        };
        let (f, report) = fold_batchnorm(&single_conv_bn(0.75, 0.25, bn)).unwrap();
        assert_eq!(f.layers.len(), 2);
        match &f.layers[0] {
            LayerSpec::Conv2d(c) => {
                assert_eq!(c.weights, vec![0.75]);
                assert_eq!(c.bias, Some(vec![0.25]));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(report.layers[0].alpha, vec![1.0]);
    }

    #[test]
    fn hand_evaluated_fold() {
        // alpha = 2 / sqrt(3 + 1) = 1; w' = 1; b' = 0.5 - 1 * 1 + 1 * 0 = -0.5
        let bn = BatchNorm {
            gamma: vec![2.0],
            beta: vec![0.5],
            mean: vec![1.0],
            variance: vec![3.0],
            epsilon: 1.0,
        };
        let (f, report) = fold_batchnorm(&single_conv_bn(1.0, 0.0, bn)).unwrap();
        match &f.layers[0] {
            LayerSpec::Conv2d(c) => {
                assert_eq!(c.weights, vec![1.0]);
                assert_eq!(c.bias, Some(vec![-0.5]));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(report.layers[0].alpha, vec![1.0]);
        assert_eq!(report.layers[0].shift, vec![-0.5]);
    }

    #[test]
    fn fold_preserves_float_semantics() {
        let g = randomized(build_baseline_mini(&ArchSpec::default()).unwrap(), 4);
        let (f, report) = fold_batchnorm(&g).unwrap();
        assert_eq!(report.layers.len(), 6);
        assert_eq!(f.count_kind(|l| matches!(l, LayerSpec::BatchNorm(_))), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = TensorF32::new(
                Shape([1, 16, 16, 1]),
                (0..256).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap();
            // compare pre-softmax values: drop the softmax from both graphs
            let strip = |g: &Graph| Graph {
                layers: g.layers[..g.layers.len() - 1].to_vec(),
                ..g.clone()
            };
            let (a, _) = forward(&strip(&g), &x, false).unwrap();
            let (b, _) = forward(&strip(&f), &x, false).unwrap();
            let scale = a.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-3);
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() / scale < 1e-4, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn fold_rejects_bn_after_activation() {
        let mut g = build_baseline_mini(&ArchSpec::default()).unwrap();
        g.layers.swap(2, 3);
        assert!(matches!(fold_batchnorm(&g), Err(Error::Layer { layer: 3, .. })));
    }

    #[test]
    fn make_friendly_matches_constructor() {
        let spec = ArchSpec::default();
        let base = build_baseline_mini(&spec).unwrap();
        let f = make_friendly(&base).unwrap();
        assert!(f.same_structure(&build_friendly_mini(&spec).unwrap()));
        assert_eq!(f.layers.len(), base.layers.len() - 2 * spec.blocks.len());
        assert_eq!(
            f.count_kind(|l| matches!(l, LayerSpec::Activation(ActivationKind::Relu6))),
            0
        );
        let again = make_friendly(&f).unwrap();
        assert_eq!(again.layers, f.layers);
        assert_eq!(again.input_shape, base.input_shape);
        assert_eq!(
            again.infer_shapes().unwrap().last(),
            base.infer_shapes().unwrap().last()
        );
    }

    #[test]
    fn make_friendly_copies_weights() {
        let base = randomized(build_baseline_mini(&ArchSpec::default()).unwrap(), 2);
        let f = make_friendly(&base).unwrap();
        assert_eq!(f.layers[0], base.layers[0]);
        match (&f.layers[1], &base.layers[1]) {
            (LayerSpec::DepthwiseConv2d(a), LayerSpec::DepthwiseConv2d(b)) => {
                assert_eq!(a.weights, b.weights);
                assert_eq!(a.bias, Some(vec![0.0; a.channels]));
            }
            _ => panic!(),
        }
        assert_eq!(f.layers[2], base.layers[4]);
    }

    #[test]
    fn make_friendly_rejects_unknown_blocks() {
        let mut g2 = build_baseline_mini(&ArchSpec::default()).unwrap();
        g2.layers[3] = LayerSpec::Activation(ActivationKind::Relu);
        assert!(make_friendly(&g2).is_err());
    }

    #[test]
    fn injection_produces_large_alpha() {
        let g = randomized(build_baseline_mini(&ArchSpec::default()).unwrap(), 1);
        let inj = inject_dead_channels(&g, 1, &[0, 3]).unwrap();
        let LayerSpec::BatchNorm(bn) = &inj.layers[2] else {
            panic!()
        };
        let LayerSpec::BatchNorm(orig) = &g.layers[2] else {
            panic!()
        };
        let alpha = bn.alpha();
        for c in [0, 3] {
            let expected = orig.gamma[c] as f64 / (1e-8f64 + 1e-3f32 as f64).sqrt();
            assert!((alpha[c] as f64 - expected).abs() < 1e-3 * expected);
            assert_eq!(bn.gamma[c], orig.gamma[c]);
            assert_eq!(bn.beta[c], orig.beta[c]);
        }
        // unit gamma gives exactly the 31.62 regime
        let mut unit = g.clone();
        if let LayerSpec::BatchNorm(bn) = &mut unit.layers[2] {
            bn.gamma.iter_mut().for_each(|v| *v = 1.0);
        }
        let inj = inject_dead_channels(&unit, 1, &[5]).unwrap();
        let LayerSpec::BatchNorm(bn) = &inj.layers[2] else {
            panic!()
        };
        assert!((bn.alpha()[5] - 31.62).abs() < 0.01);
    }

    #[test]
    fn injection_shrinks_the_channel_and_keeps_the_function() {
        let g = randomized(build_baseline_mini(&ArchSpec::default()).unwrap(), 8);
        let dead = [1, 6];
        let inj = inject_dead_channels(&g, 1, &dead).unwrap();
        let x = TensorF32::new(
            Shape([1, 16, 16, 1]),
            (0..256).map(|i| (i % 7) as f32 / 7.0).collect(),
        )
        .unwrap();
        let stem_a = apply_layer(&g.layers[0], &x).unwrap();
        let stem_b = apply_layer(&inj.layers[0], &x).unwrap();
        let dw_a = apply_layer(&g.layers[1], &stem_a).unwrap();
        let dw_b = apply_layer(&inj.layers[1], &stem_b).unwrap();
        let LayerSpec::BatchNorm(bn) = &g.layers[2] else {
            panic!()
        };
        for (i, (a, b)) in dw_a.data().iter().zip(dw_b.data()).enumerate() {
            let c = i % 8;
            if dead.contains(&c) {
                let s = (1e-8f64 + 1e-3).sqrt() / (bn.variance[c] as f64 + 1e-3).sqrt();
                let want = s * (*a as f64 - bn.mean[c] as f64);
                assert!((*b as f64 - want).abs() < 1e-5, "{b} vs {want}");
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let bn_a = apply_layer(&g.layers[2], &dw_a).unwrap();
        let bn_b = apply_layer(&inj.layers[2], &dw_b).unwrap();
        for (a, b) in bn_a.data().iter().zip(bn_b.data()) {
            assert!((a - b).abs() < 1e-4 * a.abs().max(1.0), "{a} vs {b}");
        }
        let (a, _) = forward(&g, &x, false).unwrap();
        let (b, _) = forward(&inj, &x, false).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn healthy_channels_ignore_injection_downstream() {
        let g = randomized(build_baseline_mini(&ArchSpec::default()).unwrap(), 4);
        let dead = [2, 5];
        // later block: the producer is a batch norm behind a ReLU6
        let inj = inject_dead_channels(&g, 7, &dead).unwrap();
        let zero_rows = |mut g: Graph| {
            if let LayerSpec::Conv2d(pw) = &mut g.layers[10] {
                let oc = pw.out_ch;
                for &c in &dead {
                    pw.weights[c * oc..(c + 1) * oc].iter_mut().for_each(|w| *w = 0.0);
                }
            }
            g
        };
        let x = TensorF32::new(
            Shape([1, 16, 16, 1]),
            (0..256).map(|i| (i % 5) as f32 / 5.0).collect(),
        )
        .unwrap();
        let (a, _) = forward(&zero_rows(g.clone()), &x, false).unwrap();
        let (b, _) = forward(&zero_rows(inj.clone()), &x, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            inj.notes.last().unwrap(),
            "dead channels [2,5] injected at depthwise layer 7"
        );
    }

    #[test]
    fn injection_errors_and_identity() {
        let g = build_baseline_mini(&ArchSpec::default()).unwrap();
        assert_eq!(inject_dead_channels(&g, 1, &[]).unwrap(), g);
        assert!(inject_dead_channels(&g, 1, &[8]).is_err());
        assert!(inject_dead_channels(&g, 0, &[0]).is_err());
        let f = build_friendly_mini(&ArchSpec::default()).unwrap();
        assert!(inject_dead_channels(&f, 1, &[0]).is_err());
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
