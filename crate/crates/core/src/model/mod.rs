//! Sequential graph IR for separable-convolution networks.
//!
//! Weight layouts are fixed: standard convolutions store `[kh, kw, in, out]`,
//! depthwise convolutions `[kh, kw, channels, 1]`, dense layers `[in, out]`.

mod arch;
pub mod io;

pub use arch::{build_baseline_mini, build_friendly_mini, ArchSpec, BlockSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Default batch-norm epsilon.
pub const DEFAULT_BN_EPSILON: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Relu6,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_ch: usize,
    pub out_ch: usize,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Conv2d {
    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, ic: usize, oc: usize) -> usize {
        ((ky * self.kw + kx) * self.in_ch + ic) * self.out_ch + oc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv2d {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub channels: usize,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl DepthwiseConv2d {
    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, c: usize) -> usize {
        (ky * self.kw + kx) * self.channels + c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel scale `gamma / sqrt(variance + epsilon)`.
    ///
    /// This is the single definition used by folding and by diagnostics.
    pub fn alpha(&self) -> Vec<f32> {
        self.gamma
            .iter()
            .zip(&self.variance)
            .map(|(&g, &v)| (g as f64 / (v as f64 + self.epsilon as f64).sqrt()) as f32)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d(Conv2d),
    DepthwiseConv2d(DepthwiseConv2d),
    BatchNorm(BatchNorm),
    Activation(ActivationKind),
    GlobalAvgPool,
    Dense(Dense),
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::DepthwiseConv2d(_) => "depthwise_conv2d",
            LayerSpec::BatchNorm(_) => "batch_norm",
            LayerSpec::Activation(ActivationKind::Relu) => "relu",
            LayerSpec::Activation(ActivationKind::Relu6) => "relu6",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// True for layers carrying a quantizable weight tensor.
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d(_) | LayerSpec::DepthwiseConv2d(_) | LayerSpec::Dense(_)
        )
    }

    pub fn weights(&self) -> Option<&[f32]> {
        match self {
            LayerSpec::Conv2d(c) => Some(&c.weights),
            LayerSpec::DepthwiseConv2d(d) => Some(&d.weights),
            LayerSpec::Dense(d) => Some(&d.weights),
            _ => None,
        }
    }
}

/// A sequential network with its input shape and provenance metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub name: String,
    pub seed: u64,
    pub notes: Vec<String>,
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

/// Output size and leading padding of one spatial axis.
pub fn conv_output_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

fn check_finite(layer: usize, what: &str, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::layer(layer, format!("non-finite {what}")))
    }
}

fn check_len(layer: usize, what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::layer(
            layer,
            format!("{what} has {got} values, expected {want}"),
        ))
    }
}

/// Output shape of a single layer.
pub fn layer_output_shape(index: usize, layer: &LayerSpec, input: Shape) -> Result<Shape> {
    let [n, h, w, c] = input.0;
    match layer {
        LayerSpec::Conv2d(conv) => {
            if conv.in_ch != c {
                return Err(Error::layer(
                    index,
                    format!("conv expects {} input channels, got {c}", conv.in_ch),
                ));
            }
            check_len(
                index,
                "weights",
                conv.weights.len(),
                conv.kh * conv.kw * conv.in_ch * conv.out_ch,
            )?;
            check_finite(index, "weights", &conv.weights)?;
            if let Some(b) = &conv.bias {
                check_len(index, "bias", b.len(), conv.out_ch)?;
                check_finite(index, "bias", b)?;
            }
            let (oh, _) = conv_output_dim(h, conv.kh, conv.stride, conv.padding)
                .ok_or_else(|| Error::layer(index, "invalid stride/padding for input height"))?;
            let (ow, _) = conv_output_dim(w, conv.kw, conv.stride, conv.padding)
                .ok_or_else(|| Error::layer(index, "invalid stride/padding for input width"))?;
            Shape::new(n, oh, ow, conv.out_ch).map_err(|e| Error::layer(index, e.to_string()))
        }
        LayerSpec::DepthwiseConv2d(dw) => {
            if dw.channels != c {
                return Err(Error::layer(
                    index,
                    format!("depthwise conv expects {} channels, got {c}", dw.channels),
                ));
            }
            check_len(index, "weights", dw.weights.len(), dw.kh * dw.kw * dw.channels)?;
            check_finite(index, "weights", &dw.weights)?;
            if let Some(b) = &dw.bias {
                check_len(index, "bias", b.len(), dw.channels)?;
                check_finite(index, "bias", b)?;
            }
            let (oh, _) = conv_output_dim(h, dw.kh, dw.stride, dw.padding)
                .ok_or_else(|| Error::layer(index, "invalid stride/padding for input height"))?;
            let (ow, _) = conv_output_dim(w, dw.kw, dw.stride, dw.padding)
                .ok_or_else(|| Error::layer(index, "invalid stride/padding for input width"))?;
            Shape::new(n, oh, ow, c).map_err(|e| Error::layer(index, e.to_string()))
        }
        LayerSpec::BatchNorm(bn) => {
            for (what, arr) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("mean", &bn.mean),
                ("variance", &bn.variance),
            ] {
                check_len(index, what, arr.len(), c)?;
                check_finite(index, what, arr)?;
            }
            if bn.variance.iter().any(|&v| v < 0.0) {
                return Err(Error::layer(index, "negative variance"));
            }
            if !(bn.epsilon > 0.0 && bn.epsilon.is_finite()) {
                return Err(Error::layer(index, "epsilon must be positive"));
            }
            Ok(input)
        }
        LayerSpec::Activation(_) | LayerSpec::Softmax => Ok(input),
        LayerSpec::GlobalAvgPool => Ok(Shape([n, 1, 1, c])),
        LayerSpec::Dense(d) => {
            let features = h * w * c;
            if d.in_features != features {
                return Err(Error::layer(
                    index,
                    format!("dense expects {} inputs, got {features}", d.in_features),
                ));
            }
            check_len(index, "weights", d.weights.len(), d.in_features * d.out_features)?;
            check_len(index, "bias", d.bias.len(), d.out_features)?;
            check_finite(index, "weights", &d.weights)?;
            check_finite(index, "bias", &d.bias)?;
            Shape::new(n, 1, 1, d.out_features).map_err(|e| Error::layer(index, e.to_string()))
        }
    }
}

impl Graph {
    /// Output shape of every layer, for the graph's declared input shape.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        self.infer_shapes_from(self.input_shape)
    }

    pub fn infer_shapes_from(&self, input: Shape) -> Result<Vec<Shape>> {
        if input.is_empty() {
            return Err(Error::Shape(format!("zero-sized input {input}")));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer_output_shape(i, layer, cur)?;
            shapes.push(cur);
        }
        match shapes.last() {
            Some(s) if s.as_rank2().is_some() => Ok(shapes),
            Some(s) => Err(Error::Shape(format!(
                "final layer produces {s}, expected a (batch, classes) tensor"
            ))),
            None => Err(Error::Shape("graph has no layers".into())),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        Ok(shapes.last().map(|s| s.c()).unwrap_or(0))
    }

    pub fn count_kind(&self, pred: impl Fn(&LayerSpec) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(l)).count()
    }

    /// Compares structure and hyperparameters, ignoring weight values.
    pub fn same_structure(&self, other: &Graph) -> bool {
        self.input_shape == other.input_shape
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| structure_eq(a, b))
    }
}

fn structure_eq(a: &LayerSpec, b: &LayerSpec) -> bool {
    match (a, b) {
        (LayerSpec::Conv2d(x), LayerSpec::Conv2d(y)) => {
            (
                x.kh,
                x.kw,
                x.stride,
                x.padding,
                x.in_ch,
                x.out_ch,
                x.bias.is_some(),
            ) == (
                y.kh,
                y.kw,
                y.stride,
                y.padding,
                y.in_ch,
                y.out_ch,
                y.bias.is_some(),
            )
        }
        (LayerSpec::DepthwiseConv2d(x), LayerSpec::DepthwiseConv2d(y)) => {
            (x.kh, x.kw, x.stride, x.padding, x.channels, x.bias.is_some())
                == (y.kh, y.kw, y.stride, y.padding, y.channels, y.bias.is_some())
        }
        (LayerSpec::BatchNorm(x), LayerSpec::BatchNorm(y)) => {
            x.channels() == y.channels() && x.epsilon == y.epsilon
        }
        (LayerSpec::Dense(x), LayerSpec::Dense(y)) => {
            (x.in_features, x.out_features) == (y.in_features, y.out_features)
        }
        (LayerSpec::Activation(x), LayerSpec::Activation(y)) => x == y,
        (LayerSpec::GlobalAvgPool, LayerSpec::GlobalAvgPool) => true,
        (LayerSpec::Softmax, LayerSpec::Softmax) => true,
        _ => false,
    }
}
