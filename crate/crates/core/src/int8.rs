//! Fixed-point inference over [`QuantizedGraph`].
//!
//! Activations and weights are u8 codes; products are accumulated in i32 and
//! rescaled to the output code space by a requantization multiplier.

use serde::{Deserialize, Serialize};

use crate::calib::{QConv, QDense, QOp, QuantizedGraph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::float_engine::{argmax, softmax_raw, ConvGeom};
use crate::model::ActivationKind;
use crate::tensor::{
    dequantize_value, quantize_tensor, quantize_value, round_half_away, QuantParams, Shape, TensorF32,
    TensorU8,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequantMode {
    #[default]
    FloatMultiplier,
    FixedMultiplier,
}

impl std::str::FromStr for RequantMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" | "float_multiplier" => Ok(Self::FloatMultiplier),
            "fixed" | "fixed_multiplier" => Ok(Self::FixedMultiplier),
            other => Err(Error::InvalidArgument(format!("unknown requant mode `{other}`"))),
        }
    }
}

/// `real ≈ multiplier * 2^-(31 + right_shift)` with the multiplier
/// normalized into `[2^30, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedMultiplier {
    pub multiplier: i32,
    pub right_shift: i32,
}

impl FixedMultiplier {
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "requant multiplier {m} must be positive"
            )));
        }
        // m = f * 2^e with f in [0.5, 1)
        let mut e = m.log2().floor() as i32 + 1;
        let mut f = m / 2f64.powi(e);
        while f >= 1.0 {
            f /= 2.0;
            e += 1;
        }
        while f < 0.5 {
            f *= 2.0;
            e -= 1;
        }
        let mut q = round_half_away(f * (1u64 << 31) as f64);
        if q == 1i64 << 31 {
            q /= 2;
            e += 1;
        }
        Ok(Self {
            multiplier: q as i32,
            right_shift: -e,
        })
    }

    /// Rounds `acc * multiplier / 2^(31 + right_shift)` half away from zero.
    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        let p = acc as i128 * self.multiplier as i128;
        let shift = 31 + self.right_shift;
        if shift <= 0 {
            return (p << (-shift).min(64)) as i64;
        }
        if shift >= 126 {
            return 0;
        }
        let half = 1i128 << (shift - 1);
        let mag = (p.abs() + half) >> shift;
        (if p < 0 { -mag } else { mag }) as i64
    }
}

/// One output scale, ready to apply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Requantizer {
    Float(f64),
    Fixed(FixedMultiplier),
}

impl Requantizer {
    pub fn new(multiplier: f64, mode: RequantMode) -> Result<Self> {
        Ok(match mode {
            RequantMode::FloatMultiplier => Requantizer::Float(multiplier),
            RequantMode::FixedMultiplier => Requantizer::Fixed(FixedMultiplier::from_real(multiplier)?),
        })
    }

    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        match self {
            Requantizer::Float(m) => round_half_away(acc as f64 * m),
            Requantizer::Fixed(f) => f.apply(acc),
        }
    }
}

/// Code range an activation clamp allows under `q`.
pub fn activation_bounds(kind: Option<ActivationKind>, q: QuantParams) -> (u8, u8) {
    match kind {
        None => (0, 255),
        Some(ActivationKind::Relu) => (q.zero_point, 255),
        Some(ActivationKind::Relu6) => (q.zero_point, quantize_value(6.0, q)),
    }
}

#[inline]
fn emit(acc: i32, rq: &Requantizer, zp: u8, bounds: (u8, u8)) -> u8 {
    let v = rq.apply(acc as i64) + zp as i64;
    v.clamp(bounds.0 as i64, bounds.1 as i64) as u8
}

pub fn qrelu(input: &TensorU8) -> TensorU8 {
    qactivation(input, ActivationKind::Relu)
}

pub fn qrelu6(input: &TensorU8) -> TensorU8 {
    qactivation(input, ActivationKind::Relu6)
}

pub fn qactivation(input: &TensorU8, kind: ActivationKind) -> TensorU8 {
    let q = input.qparams();
    let (lo, hi) = activation_bounds(Some(kind), q);
    let data = input.data().iter().map(|&v| v.clamp(lo, hi)).collect();
    TensorU8::new(input.shape(), data, q).expect("same shape")
}

fn geom(c: &QConv) -> ConvGeom {
    ConvGeom {
        kh: c.kh,
        kw: c.kw,
        stride: c.stride,
        padding: c.padding,
        in_ch: c.in_ch,
        out_ch: c.out_ch,
    }
}

fn check_q(what: &str, got: QuantParams, want: QuantParams) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!(
            "{what} input carries {got:?}, layer expects {want:?}"
        )));
    }
    Ok(())
}

/// Standard or depthwise convolution. Padded taps hold the input zero point
/// and therefore contribute nothing.
pub fn qconv2d(input: &TensorU8, c: &QConv, mode: RequantMode) -> Result<TensorU8> {
    check_q("convolution", input.qparams(), c.input_q)?;
    let g = geom(c);
    let plan = g.plan(input.shape())?;
    let (ins, outs) = (plan.input, plan.output);
    let rq = Requantizer::new(c.input_q.delta * c.weight_q.delta / c.output_q.delta, mode)?;
    let bounds = activation_bounds(c.activation, c.output_q);
    let zin = c.input_q.zero_point as i32;
    let wq: Vec<i32> = c
        .weights
        .iter()
        .map(|&w| w as i32 - c.weight_q.zero_point as i32)
        .collect();
    let x = input.data();
    let cout = c.out_ch;
    let mut out = vec![0u8; outs.len()];
    let mut acc = vec![0i32; cout];
    for n in 0..outs.n() {
        for oy in 0..outs.h() {
            for ox in 0..outs.w() {
                acc.copy_from_slice(&c.bias);
                for ky in 0..c.kh {
                    let Some(iy) = ConvGeom::source(oy, ky, c.stride, plan.pad_top, ins.h()) else {
                        continue;
                    };
                    for kx in 0..c.kw {
                        let Some(ix) = ConvGeom::source(ox, kx, c.stride, plan.pad_left, ins.w()) else {
                            continue;
                        };
                        let xbase = ((n * ins.h() + iy) * ins.w() + ix) * c.in_ch;
                        if c.depthwise {
                            let wbase = (ky * c.kw + kx) * cout;
                            for ch in 0..cout {
                                acc[ch] += (x[xbase + ch] as i32 - zin) * wq[wbase + ch];
                            }
                        } else {
                            let wbase = (ky * c.kw + kx) * c.in_ch * cout;
                            for ic in 0..c.in_ch {
                                let xv = x[xbase + ic] as i32 - zin;
                                if xv == 0 {
                                    continue;
                                }
                                let row = &wq[wbase + ic * cout..wbase + (ic + 1) * cout];
                                for (a, &w) in acc.iter_mut().zip(row) {
                                    *a += xv * w;
                                }
                            }
                        }
                    }
                }
                let obase = ((n * outs.h() + oy) * outs.w() + ox) * cout;
                for (o, &a) in out[obase..obase + cout].iter_mut().zip(&acc) {
                    *o = emit(a, &rq, c.output_q.zero_point, bounds);
                }
            }
        }
    }
    TensorU8::new(outs, out, c.output_q)
}

pub fn qdense(input: &TensorU8, d: &QDense, mode: RequantMode) -> Result<TensorU8> {
    check_q("dense", input.qparams(), d.input_q)?;
    let s = input.shape();
    if s.item_len() != d.in_features {
        return Err(Error::Shape(format!(
            "dense expects {} features, input is {s}",
            d.in_features
        )));
    }
    let rq = Requantizer::new(d.input_q.delta * d.weight_q.delta / d.output_q.delta, mode)?;
    let bounds = activation_bounds(d.activation, d.output_q);
    let zin = d.input_q.zero_point as i32;
    let zw = d.weight_q.zero_point as i32;
    let fout = d.out_features;
    let mut out = Vec::with_capacity(s.n() * fout);
    for row in input.data().chunks_exact(d.in_features) {
        let mut acc = d.bias.clone();
        for (k, &xv) in row.iter().enumerate() {
            let xv = xv as i32 - zin;
            for (a, &w) in acc.iter_mut().zip(&d.weights[k * fout..(k + 1) * fout]) {
                *a += xv * (w as i32 - zw);
            }
        }
        out.extend(acc.iter().map(|&a| emit(a, &rq, d.output_q.zero_point, bounds)));
    }
    TensorU8::new(Shape([s.n(), 1, 1, fout]), out, d.output_q)
}

/// Spatial mean: i32 sum of centered codes, requantized by
/// `input_step / (pixels * output_step)`.
pub fn qglobal_avg_pool(input: &TensorU8, output_q: QuantParams, mode: RequantMode) -> Result<TensorU8> {
    let s = input.shape();
    let (hw, c) = (s.h() * s.w(), s.c());
    let q = input.qparams();
    let rq = Requantizer::new(q.delta / (hw as f64 * output_q.delta), mode)?;
    let zin = q.zero_point as i32;
    let mut out = Vec::with_capacity(s.n() * c);
    for n in 0..s.n() {
        let mut acc = vec![0i32; c];
        for p in 0..hw {
            let base = (n * hw + p) * c;
            for (a, &v) in acc.iter_mut().zip(&input.data()[base..base + c]) {
                *a += v as i32 - zin;
            }
        }
        out.extend(acc.iter().map(|&a| emit(a, &rq, output_q.zero_point, (0, 255))));
    }
    TensorU8::new(Shape([s.n(), 1, 1, c]), out, output_q)
}

/// Output of one quantized forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantForward {
    /// Dequantized logits (input of the float softmax).
    pub logits: TensorF32,
    pub probabilities: TensorF32,
    /// Top-1 class per batch item.
    pub labels: Vec<usize>,
    /// `(float layer index, codes)` for every code-producing layer.
    pub trace: Option<Vec<(usize, TensorU8)>>,
}

/// Runs the quantized graph; the input is quantized at the boundary.
pub fn forward_quantized(
    qg: &QuantizedGraph,
    input: &TensorF32,
    mode: RequantMode,
    trace: bool,
) -> Result<QuantForward> {
    let (a, b) = (input.shape(), qg.input_shape);
    if (a.h(), a.w(), a.c()) != (b.h(), b.w(), b.c()) {
        return Err(Error::Shape(format!("input {a} does not match graph input {b}")));
    }
    let mut cur = quantize_tensor(input, qg.input_q);
    let mut steps = trace.then(Vec::new);
    let mut softmax = false;
    for l in &qg.layers {
        let next = match &l.op {
            QOp::Conv(c) => qconv2d(&cur, c, mode)?,
            QOp::Dense(d) => qdense(&cur, d, mode)?,
            QOp::Activation { kind, q } => {
                check_q("activation", cur.qparams(), *q)?;
                qactivation(&cur, *kind)
            }
            QOp::GlobalAvgPool { input_q, output_q } => {
                check_q("pool", cur.qparams(), *input_q)?;
                qglobal_avg_pool(&cur, *output_q, mode)?
            }
            QOp::Softmax => {
                softmax = true;
                continue;
            }
        };
        if let Some(t) = steps.as_mut() {
            t.push((l.float_index, next.clone()));
        }
        cur = next;
    }
    let shape = cur.shape();
    let q = cur.qparams();
    let logits: Vec<f32> = cur.data().iter().map(|&v| dequantize_value(v, q)).collect();
    let classes = shape.item_len();
    let labels = logits.chunks_exact(classes).map(argmax).collect();
    let probs = if softmax {
        softmax_raw(&logits, classes)
    } else {
        logits.clone()
    };
    Ok(QuantForward {
        logits: TensorF32::new(shape, logits)?,
        probabilities: TensorF32::new(shape, probs)?,
        labels,
        trace: steps,
    })
}

/// Top-1 prediction per image, one image at a time.
pub fn predict_quantized(
    qg: &QuantizedGraph,
    data: &Dataset,
    mode: RequantMode,
    exec: Exec,
) -> Result<Vec<usize>> {
    exec.try_map(data.len(), |i| {
        Ok(forward_quantized(qg, &data.image(i), mode, false)?.labels[0])
    })
}

pub fn evaluate_quantized(qg: &QuantizedGraph, data: &Dataset, mode: RequantMode, exec: Exec) -> Result<f64> {
    let p = predict_quantized(qg, data, mode, exec)?;
    Ok(crate::float_engine::accuracy(&p, &data.labels))
}
