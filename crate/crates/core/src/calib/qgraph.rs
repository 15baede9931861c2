//! Fully quantized graphs: construction from calibration statistics and
//! serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::search::greedy_search_qparams;
use super::stats::{CalibrationRecord, TensorId, TensorStats};
use crate::error::{Error, Result};
use crate::model::io::{
    parse_params, read_artifact, tensor, BlobInfo, BlobReader, BlobWriter, LayerEntry, Manifest,
    FORMAT_VERSION,
};
use crate::model::{ActivationKind, Conv2d, Dense, DepthwiseConv2d, Graph, LayerSpec, Padding};
use crate::tensor::{dequantize_value, quantize_value, round_half_away, QuantParams, Shape};

/// Largest accumulator magnitude allowed by construction.
pub const ACCUMULATOR_LIMIT: i64 = 1 << 31;

/// Standard or depthwise convolution over u8 codes.
#[derive(Clone, Debug, PartialEq)]
pub struct QConv {
    pub depthwise: bool,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_ch: usize,
    pub out_ch: usize,
    pub weights: Vec<u8>,
    pub weight_q: QuantParams,
    pub bias: Vec<i32>,
    /// Always `input_q.delta * weight_q.delta`.
    pub bias_scale: f64,
    pub input_q: QuantParams,
    pub output_q: QuantParams,
    /// Activation clamp fused into the output.
    pub activation: Option<ActivationKind>,
}

impl QConv {
    /// Products summed into one accumulator.
    pub fn taps(&self) -> usize {
        if self.depthwise {
            self.kh * self.kw
        } else {
            self.kh * self.kw * self.in_ch
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QDense {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<u8>,
    pub weight_q: QuantParams,
    pub bias: Vec<i32>,
    pub bias_scale: f64,
    pub input_q: QuantParams,
    pub output_q: QuantParams,
    pub activation: Option<ActivationKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QOp {
    Conv(QConv),
    Dense(QDense),
    /// Standalone activation; input and output share `q`.
    Activation {
        kind: ActivationKind,
        q: QuantParams,
    },
    GlobalAvgPool {
        input_q: QuantParams,
        output_q: QuantParams,
    },
    /// Evaluated in float on dequantized logits.
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QLayer {
    /// Index of the float layer whose output this layer produces.
    pub float_index: usize,
    pub op: QOp,
}

impl QLayer {
    /// Parameters of the tensor this layer emits, if it emits codes.
    pub fn output_q(&self) -> Option<QuantParams> {
        match &self.op {
            QOp::Conv(c) => Some(c.output_q),
            QOp::Dense(d) => Some(d.output_q),
            QOp::Activation { q, .. } => Some(*q),
            QOp::GlobalAvgPool { output_q, .. } => Some(*output_q),
            QOp::Softmax => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGraph {
    pub name: String,
    pub seed: u64,
    pub notes: Vec<String>,
    pub input_shape: Shape,
    pub input_q: QuantParams,
    pub layers: Vec<QLayer>,
}

fn quantize_bias(layer: usize, bias: Option<&[f32]>, n: usize, scale: f64) -> Result<Vec<i32>> {
    let Some(b) = bias else {
        return Ok(vec![0; n]);
    };
    b.iter()
        .map(|&v| {
            let q = round_half_away(v as f64 / scale);
            i32::try_from(q)
                .map_err(|_| Error::layer(layer, format!("bias {v} overflows i32 at scale {scale:e}")))
        })
        .collect()
}

fn check_accumulator(layer: usize, taps: usize, bias: &[i32]) -> Result<()> {
    let worst = taps as i64 * 255 * 255 + bias.iter().map(|&b| (b as i64).abs()).max().unwrap_or(0);
    if worst >= ACCUMULATOR_LIMIT {
        return Err(Error::layer(
            layer,
            format!("accumulator bound {worst} reaches 2^31 ({taps} taps)"),
        ));
    }
    Ok(())
}

fn search(rec: &CalibrationRecord, id: TensorId) -> Result<(QuantParams, &TensorStats)> {
    let s = rec.get(id)?;
    Ok((greedy_search_qparams(s)?, s))
}

/// Quantizes a batch-norm-free float graph with parameters searched over the
/// calibration statistics. A conv or dense layer directly followed by an
/// activation is fused with it.
pub fn build_quantized_graph(g: &Graph, rec: &CalibrationRecord) -> Result<QuantizedGraph> {
    g.infer_shapes()?;
    let (input_q, _) = search(rec, TensorId::Input)?;
    let mut cur_q = input_q;
    let mut layers = Vec::new();
    let mut i = 0;
    while i < g.layers.len() {
        let fused = match g.layers.get(i + 1) {
            Some(LayerSpec::Activation(kind)) if g.layers[i].has_weights() => Some(*kind),
            _ => None,
        };
        let out_index = if fused.is_some() { i + 1 } else { i };
        let op = match &g.layers[i] {
            LayerSpec::Conv2d(_) | LayerSpec::DepthwiseConv2d(_) | LayerSpec::Dense(_) => {
                let w = g.layers[i].weights().expect("weighted layer");
                let (weight_q, _) = search(rec, TensorId::Weights(i))?;
                let (output_q, _) = search(rec, TensorId::Output(out_index))?;
                let codes: Vec<u8> = w.iter().map(|&v| quantize_value(v, weight_q)).collect();
                let bias_scale = cur_q.delta * weight_q.delta;
                match &g.layers[i] {
                    LayerSpec::Conv2d(c) => {
                        let bias = quantize_bias(i, c.bias.as_deref(), c.out_ch, bias_scale)?;
                        let q = QConv {
                            depthwise: false,
                            kh: c.kh,
                            kw: c.kw,
                            stride: c.stride,
                            padding: c.padding,
                            in_ch: c.in_ch,
                            out_ch: c.out_ch,
                            weights: codes,
                            weight_q,
                            bias,
                            bias_scale,
                            input_q: cur_q,
                            output_q,
                            activation: fused,
                        };
                        check_accumulator(i, q.taps(), &q.bias)?;
                        QOp::Conv(q)
                    }
                    LayerSpec::DepthwiseConv2d(d) => {
                        let bias = quantize_bias(i, d.bias.as_deref(), d.channels, bias_scale)?;
                        let q = QConv {
                            depthwise: true,
                            kh: d.kh,
                            kw: d.kw,
                            stride: d.stride,
                            padding: d.padding,
                            in_ch: d.channels,
                            out_ch: d.channels,
                            weights: codes,
                            weight_q,
                            bias,
                            bias_scale,
                            input_q: cur_q,
                            output_q,
                            activation: fused,
                        };
                        check_accumulator(i, q.taps(), &q.bias)?;
                        QOp::Conv(q)
                    }
                    LayerSpec::Dense(d) => {
                        let bias = quantize_bias(i, Some(&d.bias), d.out_features, bias_scale)?;
                        check_accumulator(i, d.in_features, &bias)?;
                        QOp::Dense(QDense {
                            in_features: d.in_features,
                            out_features: d.out_features,
                            weights: codes,
                            weight_q,
                            bias,
                            bias_scale,
                            input_q: cur_q,
                            output_q,
                            activation: fused,
                        })
                    }
                    _ => unreachable!(),
                }
            }
            LayerSpec::Activation(kind) => QOp::Activation {
                kind: *kind,
                q: cur_q,
            },
            LayerSpec::GlobalAvgPool => QOp::GlobalAvgPool {
                input_q: cur_q,
                output_q: search(rec, TensorId::Output(i))?.0,
            },
            LayerSpec::Softmax => {
                if i + 1 != g.layers.len() {
                    return Err(Error::layer(i, "softmax is only supported as the final layer"));
                }
                QOp::Softmax
            }
            LayerSpec::BatchNorm(_) => {
                return Err(Error::layer(i, "fold batch norms before quantizing"));
            }
        };
        let layer = QLayer {
            float_index: out_index,
            op,
        };
        if let Some(q) = layer.output_q() {
            cur_q = q;
        }
        layers.push(layer);
        i = out_index + 1;
    }
    let mut notes = g.notes.clone();
    notes.push("quantized per tensor with greedy clip search".into());
    Ok(QuantizedGraph {
        name: g.name.clone(),
        seed: g.seed,
        notes,
        input_shape: g.input_shape,
        input_q,
        layers,
    })
}

fn dequantize_all(codes: &[u8], q: QuantParams) -> Vec<f32> {
    codes.iter().map(|&c| dequantize_value(c, q)).collect()
}

fn dequantize_bias(bias: &[i32], scale: f64) -> Vec<f32> {
    bias.iter().map(|&b| (b as f64 * scale) as f32).collect()
}

impl QuantizedGraph {
    /// Float graph carrying the dequantized weights and biases, with fused
    /// activations split back out. Layer indices match the source graph.
    pub fn dequantized_graph(&self) -> Graph {
        let mut layers = Vec::new();
        for l in &self.layers {
            let act = match &l.op {
                QOp::Conv(c) => {
                    let weights = dequantize_all(&c.weights, c.weight_q);
                    let bias = Some(dequantize_bias(&c.bias, c.bias_scale));
                    layers.push(if c.depthwise {
                        LayerSpec::DepthwiseConv2d(DepthwiseConv2d {
                            kh: c.kh,
                            kw: c.kw,
                            stride: c.stride,
                            padding: c.padding,
                            channels: c.in_ch,
                            weights,
                            bias,
                        })
                    } else {
                        LayerSpec::Conv2d(Conv2d {
                            kh: c.kh,
                            kw: c.kw,
                            stride: c.stride,
                            padding: c.padding,
                            in_ch: c.in_ch,
                            out_ch: c.out_ch,
                            weights,
                            bias,
                        })
                    });
                    c.activation
                }
                QOp::Dense(d) => {
                    layers.push(LayerSpec::Dense(Dense {
                        in_features: d.in_features,
                        out_features: d.out_features,
                        weights: dequantize_all(&d.weights, d.weight_q),
                        bias: dequantize_bias(&d.bias, d.bias_scale),
                    }));
                    d.activation
                }
                QOp::Activation { kind, .. } => Some(*kind),
                QOp::GlobalAvgPool { .. } => {
                    layers.push(LayerSpec::GlobalAvgPool);
                    None
                }
                QOp::Softmax => {
                    layers.push(LayerSpec::Softmax);
                    None
                }
            };
            if let Some(kind) = act {
                layers.push(LayerSpec::Activation(kind));
            }
        }
        Graph {
            name: format!("{}-dequantized", self.name),
            seed: self.seed,
            notes: self.notes.clone(),
            input_shape: self.input_shape,
            layers,
        }
    }

    /// Checks the structural invariants every engine relies on.
    pub fn validate(&self) -> Result<()> {
        for (k, l) in self.layers.iter().enumerate() {
            let (bias_scale, input_q, weight_q) = match &l.op {
                QOp::Conv(c) => {
                    check_accumulator(l.float_index, c.taps(), &c.bias)?;
                    (c.bias_scale, c.input_q, c.weight_q)
                }
                QOp::Dense(d) => {
                    check_accumulator(l.float_index, d.in_features, &d.bias)?;
                    (d.bias_scale, d.input_q, d.weight_q)
                }
                QOp::Softmax if k + 1 != self.layers.len() => {
                    return Err(Error::layer(l.float_index, "softmax must be the final layer"));
                }
                _ => continue,
            };
            if bias_scale != input_q.delta * weight_q.delta {
                return Err(Error::Invariant(format!(
                    "layer {}: bias scale {bias_scale:e} differs from input step times weight step",
                    l.float_index
                )));
            }
        }
        self.dequantized_graph().infer_shapes()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct QConvParams {
    float_index: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
    in_ch: usize,
    out_ch: usize,
    input_qparams: QuantParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<ActivationKind>,
}

#[derive(Serialize, Deserialize)]
struct QDenseParams {
    float_index: usize,
    in_features: usize,
    out_features: usize,
    input_qparams: QuantParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<ActivationKind>,
}

#[derive(Serialize, Deserialize)]
struct QIndexParams {
    float_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_qparams: Option<QuantParams>,
}

fn to_map<T: Serialize>(p: &T) -> serde_json::Map<String, serde_json::Value> {
    crate::model::io::params(p)
}

fn q_entry(l: &QLayer, blob: &mut BlobWriter) -> LayerEntry {
    let mut e = LayerEntry {
        kind: String::new(),
        params: serde_json::Map::new(),
        tensors: vec![],
        output_qparams: l.output_q(),
    };
    match &l.op {
        QOp::Conv(c) => {
            e.kind = if c.depthwise { "depthwise_conv2d" } else { "conv2d" }.into();
            e.params = to_map(&QConvParams {
                float_index: l.float_index,
                kh: c.kh,
                kw: c.kw,
                stride: c.stride,
                padding: c.padding,
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                input_qparams: c.input_q,
                activation: c.activation,
            });
            let mut w = blob.u8s("weights", &c.weights);
            w.qparams = Some(c.weight_q);
            let mut b = blob.i32s("bias", &c.bias);
            b.scale = Some(c.bias_scale);
            e.tensors = vec![w, b];
        }
        QOp::Dense(d) => {
            e.kind = "dense".into();
            e.params = to_map(&QDenseParams {
                float_index: l.float_index,
                in_features: d.in_features,
                out_features: d.out_features,
                input_qparams: d.input_q,
                activation: d.activation,
            });
            let mut w = blob.u8s("weights", &d.weights);
            w.qparams = Some(d.weight_q);
            let mut b = blob.i32s("bias", &d.bias);
            b.scale = Some(d.bias_scale);
            e.tensors = vec![w, b];
        }
        QOp::Activation { kind, .. } => {
            e.kind = LayerSpec::Activation(*kind).kind_name().into();
            e.params = to_map(&QIndexParams {
                float_index: l.float_index,
                input_qparams: None,
            });
        }
        QOp::GlobalAvgPool { input_q, .. } => {
            e.kind = "global_avg_pool".into();
            e.params = to_map(&QIndexParams {
                float_index: l.float_index,
                input_qparams: Some(*input_q),
            });
        }
        QOp::Softmax => {
            e.kind = "softmax".into();
            e.params = to_map(&QIndexParams {
                float_index: l.float_index,
                input_qparams: None,
            });
        }
    }
    e
}

/// Writes `<path>.json` and `<path>.bin` for a quantized graph.
pub fn save_quantized(qg: &QuantizedGraph, path: &Path) -> Result<()> {
    let mut blob = BlobWriter::default();
    let layers = qg.layers.iter().map(|l| q_entry(l, &mut blob)).collect();
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        graph_kind: "quantized".into(),
        name: qg.name.clone(),
        seed: qg.seed,
        notes: qg.notes.clone(),
        input_shape: qg.input_shape,
        input_qparams: Some(qg.input_q),
        extra: None,
        layers,
        blob: BlobInfo {
            file: String::new(),
            bytes: 0,
        },
    };
    blob.finish(path, &mut manifest)
}

fn parse_q_layer(path: &Path, e: &LayerEntry, blob: &BlobReader) -> Result<QLayer> {
    let out_q = || {
        e.output_qparams
            .ok_or_else(|| Error::format(path, format!("`{}` layer lacks output qparams", e.kind)))
    };
    let weights = |e: &LayerEntry| -> Result<(Vec<u8>, QuantParams, Vec<i32>, f64)> {
        let w = tensor(path, e, "weights")?;
        let b = tensor(path, e, "bias")?;
        let wq = w
            .qparams
            .ok_or_else(|| Error::format(path, "weight tensor lacks qparams"))?;
        let scale = b
            .scale
            .ok_or_else(|| Error::format(path, "bias tensor lacks scale"))?;
        Ok((blob.u8s(w)?, wq, blob.i32s(b)?, scale))
    };
    Ok(match e.kind.as_str() {
        "conv2d" | "depthwise_conv2d" => {
            let p: QConvParams = parse_params(path, e)?;
            let (w, wq, b, scale) = weights(e)?;
            QLayer {
                float_index: p.float_index,
                op: QOp::Conv(QConv {
                    depthwise: e.kind == "depthwise_conv2d",
                    kh: p.kh,
                    kw: p.kw,
                    stride: p.stride,
                    padding: p.padding,
                    in_ch: p.in_ch,
                    out_ch: p.out_ch,
                    weights: w,
                    weight_q: wq,
                    bias: b,
                    bias_scale: scale,
                    input_q: p.input_qparams,
                    output_q: out_q()?,
                    activation: p.activation,
                }),
            }
        }
        "dense" => {
            let p: QDenseParams = parse_params(path, e)?;
            let (w, wq, b, scale) = weights(e)?;
            QLayer {
                float_index: p.float_index,
                op: QOp::Dense(QDense {
                    in_features: p.in_features,
                    out_features: p.out_features,
                    weights: w,
                    weight_q: wq,
                    bias: b,
                    bias_scale: scale,
                    input_q: p.input_qparams,
                    output_q: out_q()?,
                    activation: p.activation,
                }),
            }
        }
        "relu" | "relu6" => {
            let p: QIndexParams = parse_params(path, e)?;
            let kind = if e.kind == "relu" {
                ActivationKind::Relu
            } else {
                ActivationKind::Relu6
            };
            QLayer {
                float_index: p.float_index,
                op: QOp::Activation { kind, q: out_q()? },
            }
        }
        "global_avg_pool" => {
            let p: QIndexParams = parse_params(path, e)?;
            QLayer {
                float_index: p.float_index,
                op: QOp::GlobalAvgPool {
                    input_q: p
                        .input_qparams
                        .ok_or_else(|| Error::format(path, "pool lacks input qparams"))?,
                    output_q: out_q()?,
                },
            }
        }
        "softmax" => {
            let p: QIndexParams = parse_params(path, e)?;
            QLayer {
                float_index: p.float_index,
                op: QOp::Softmax,
            }
        }
        other => {
            return Err(Error::UnknownLayerKind {
                kind: other.to_string(),
                format_version: FORMAT_VERSION,
            })
        }
    })
}

pub fn load_quantized(path: &Path) -> Result<QuantizedGraph> {
    let (manifest, blob) = read_artifact(path, "quantized")?;
    let (json_path, _) = crate::model::io::artifact_paths(path);
    let layers = manifest
        .layers
        .iter()
        .map(|e| parse_q_layer(&json_path, e, &blob))
        .collect::<Result<Vec<_>>>()?;
    let qg = QuantizedGraph {
        name: manifest.name,
        seed: manifest.seed,
        notes: manifest.notes,
        input_shape: manifest.input_shape,
        input_q: manifest
            .input_qparams
            .ok_or_else(|| Error::format(&json_path, "missing input qparams"))?,
        layers,
    };
    qg.validate()?;
    Ok(qg)
}
