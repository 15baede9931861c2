use serde::{Deserialize, Serialize};

use super::{
    ActivationKind, BatchNorm, Conv2d, Dense, DepthwiseConv2d, Graph, LayerSpec, Padding, DEFAULT_BN_EPSILON,
};
use crate::error::{Error, Result};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Shape of a mini separable-convolution network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub classes: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
    pub bn_epsilon: f32,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            input_size: 16,
            input_channels: 1,
            classes: 8,
            stem_channels: 8,
            stem_stride: 2,
            blocks: vec![
                BlockSpec {
                    channels: 16,
                    stride: 1,
                },
                BlockSpec {
                    channels: 16,
                    stride: 2,
                },
                BlockSpec {
                    channels: 32,
                    stride: 1,
                },
            ],
            bn_epsilon: DEFAULT_BN_EPSILON,
        }
    }
}

impl ArchSpec {
    fn validate(&self) -> Result<()> {
        let widths = [
            ("input size", self.input_size),
            ("input channels", self.input_channels),
            ("classes", self.classes),
            ("stem channels", self.stem_channels),
            ("stem stride", self.stem_stride),
        ];
        for (what, v) in widths {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{what} must be non-zero")));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.stride == 0 {
                return Err(Error::InvalidArgument(format!(
                    "block {i} has zero width or stride"
                )));
            }
        }
        if self.bn_epsilon.is_nan() || self.bn_epsilon <= 0.0 {
            return Err(Error::InvalidArgument("bn epsilon must be positive".into()));
        }
        Ok(())
    }

    fn stem(&self) -> LayerSpec {
        let (k, cin, cout) = (3, self.input_channels, self.stem_channels);
        LayerSpec::Conv2d(Conv2d {
            kh: k,
            kw: k,
            stride: self.stem_stride,
            padding: Padding::Same,
            in_ch: cin,
            out_ch: cout,
            weights: vec![0.0; k * k * cin * cout],
            bias: Some(vec![0.0; cout]),
        })
    }

    fn head(&self, channels: usize) -> [LayerSpec; 3] {
        [
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense(Dense {
                in_features: channels,
                out_features: self.classes,
                weights: vec![0.0; channels * self.classes],
                bias: vec![0.0; self.classes],
            }),
            LayerSpec::Softmax,
        ]
    }

    fn input_shape(&self) -> Shape {
        Shape([1, self.input_size, self.input_size, self.input_channels])
    }
}

fn depthwise(channels: usize, stride: usize, bias: bool) -> LayerSpec {
    LayerSpec::DepthwiseConv2d(DepthwiseConv2d {
        kh: 3,
        kw: 3,
        stride,
        padding: Padding::Same,
        channels,
        weights: vec![0.0; 9 * channels],
        bias: bias.then(|| vec![0.0; channels]),
    })
}

fn pointwise(cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::Conv2d(Conv2d {
        kh: 1,
        kw: 1,
        stride: 1,
        padding: Padding::Same,
        in_ch: cin,
        out_ch: cout,
        weights: vec![0.0; cin * cout],
        bias: None,
    })
}

fn build(spec: &ArchSpec, name: &str, block: impl Fn(usize, &BlockSpec) -> Vec<LayerSpec>) -> Result<Graph> {
    spec.validate()?;
    let mut layers = vec![spec.stem()];
    let mut ch = spec.stem_channels;
    for b in &spec.blocks {
        layers.extend(block(ch, b));
        ch = b.channels;
    }
    layers.extend(spec.head(ch));
    let g = Graph {
        name: name.to_string(),
        seed: 0,
        notes: vec![format!("built by {name} constructor; weights are placeholders")],
        input_shape: spec.input_shape(),
        layers,
    };
    g.infer_shapes()?;
    Ok(g)
}

/// Conventional separable blocks: DW, BN, ReLU6, PW, BN, ReLU6.
pub fn build_baseline_mini(spec: &ArchSpec) -> Result<Graph> {
    let eps = spec.bn_epsilon;
    build(spec, "baseline-mini", |cin, b| {
        vec![
            depthwise(cin, b.stride, false),
            LayerSpec::BatchNorm(BatchNorm::identity(cin, eps)),
            LayerSpec::Activation(ActivationKind::Relu6),
            pointwise(cin, b.channels),
            LayerSpec::BatchNorm(BatchNorm::identity(b.channels, eps)),
            LayerSpec::Activation(ActivationKind::Relu6),
        ]
    })
}

/// Quantization-friendly blocks: DW (with bias), PW, BN, ReLU.
pub fn build_friendly_mini(spec: &ArchSpec) -> Result<Graph> {
    let eps = spec.bn_epsilon;
    build(spec, "friendly-mini", |cin, b| {
        vec![
            depthwise(cin, b.stride, true),
            pointwise(cin, b.channels),
            LayerSpec::BatchNorm(BatchNorm::identity(b.channels, eps)),
            LayerSpec::Activation(ActivationKind::Relu),
        ]
    })
}
