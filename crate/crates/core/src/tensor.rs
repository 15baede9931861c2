//! Dense NHWC tensors and the affine 8-bit quantization primitives.
//!
//! A real value `x` maps to the code `clamp(round(x / delta) + zero_point, 0, 255)`
//! and a code `v` maps back to `delta * (v - zero_point)`. Rounding is
//! half-away-from-zero everywhere in the crate.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Four dimensions: (batch, height, width, channels).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    /// Builds a shape, rejecting zero-sized dimensions.
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        let s = Shape([n, h, w, c]);
        if s.0.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {s}")));
        }
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn h(&self) -> usize {
        self.0[1]
    }
    pub fn w(&self) -> usize {
        self.0[2]
    }
    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.h() * self.w() * self.c()
    }

    /// `(batch, features)` view for tensors with unit spatial extent.
    pub fn as_rank2(&self) -> Option<(usize, usize)> {
        (self.h() == 1 && self.w() == 1).then_some((self.n(), self.c()))
    }

    pub fn with_batch(&self, n: usize) -> Shape {
        Shape([n, self.h(), self.w(), self.c()])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "({n}, {h}, {w}, {c})")
    }
}

/// Float activations in NHWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorF32 {
    shape: Shape,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Copy of batch item `i` as a batch-1 tensor.
    pub fn item(&self, i: usize) -> TensorF32 {
        let len = self.shape.item_len();
        TensorF32 {
            shape: self.shape.with_batch(1),
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Minimum and maximum element.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Step size and zero point of an affine 8-bit mapping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub delta: f64,
    pub zero_point: u8,
}

impl QuantParams {
    pub fn new(delta: f64, zero_point: u8) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "quantization step must be positive and finite, got {delta}"
            )));
        }
        Ok(Self { delta, zero_point })
    }

    pub fn quantize(&self, x: f32) -> u8 {
        quantize_value(x, *self)
    }

    pub fn dequantize(&self, v: u8) -> f32 {
        dequantize_value(v, *self)
    }

    /// Smallest and largest representable reals.
    pub fn representable_range(&self) -> (f64, f64) {
        let zp = self.zero_point as f64;
        (self.delta * (0.0 - zp), self.delta * (255.0 - zp))
    }
}

/// 8-bit activations with their quantization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorU8 {
    shape: Shape,
    data: Vec<u8>,
    qparams: QuantParams,
}

impl TensorU8 {
    pub fn new(shape: Shape, data: Vec<u8>, qparams: QuantParams) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data, qparams })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn qparams(&self) -> QuantParams {
        self.qparams
    }
}

/// Rounds half away from zero.
///
/// `v - trunc(v)` is exact for every finite double below 2^52, so the
/// comparison against one half is exact as well.
#[inline]
pub fn round_half_away(v: f64) -> i64 {
    let t = v as i64;
    let frac = v - t as f64;
    if frac >= 0.5 {
        t + 1
    } else if frac <= -0.5 {
        t - 1
    } else {
        t
    }
}

#[inline]
fn quantize_f64(x: f64, q: QuantParams) -> u8 {
    let scaled = x / q.delta;
    // Saturate before the integer cast so huge ratios cannot wrap.
    if scaled >= 512.0 {
        return 255;
    }
    if scaled <= -512.0 {
        return 0;
    }
    (round_half_away(scaled) + q.zero_point as i64).clamp(0, 255) as u8
}

pub fn quantize_value(x: f32, q: QuantParams) -> u8 {
    quantize_f64(x as f64, q)
}

pub fn dequantize_value(v: u8, q: QuantParams) -> f32 {
    dequantize_f64(v, q) as f32
}

#[inline]
pub fn dequantize_f64(v: u8, q: QuantParams) -> f64 {
    q.delta * (v as f64 - q.zero_point as f64)
}

/// Quantize-dequantize round trip in double precision.
#[inline]
pub fn fake_quant_f64(x: f64, q: QuantParams) -> f64 {
    dequantize_f64(quantize_f64(x, q), q)
}

/// Parameters covering `[min, max]` widened to include zero.
pub fn choose_qparams_from_range(min: f64, max: f64) -> Result<QuantParams> {
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::NonFinite(format!("range [{min}, {max}]")));
    }
    if min > max {
        return Err(Error::InvalidArgument(format!(
            "range minimum {min} exceeds maximum {max}"
        )));
    }
    let lo = min.min(0.0);
    let hi = max.max(0.0);
    if hi == lo {
        return Ok(QuantParams {
            delta: 1.0,
            zero_point: 0,
        });
    }
    let delta = (hi - lo) / 255.0;
    // -lo / delta written without the intermediate step so that ranges such
    // as [-1, 1] land exactly on 127.5.
    let zp = round_half_away(-lo * 255.0 / (hi - lo)).clamp(0, 255) as u8;
    Ok(QuantParams {
        delta,
        zero_point: zp,
    })
}

pub fn quantize_tensor(t: &TensorF32, q: QuantParams) -> TensorU8 {
    TensorU8 {
        shape: t.shape(),
        data: t.data().iter().map(|&x| quantize_value(x, q)).collect(),
        qparams: q,
    }
}

pub fn dequantize_tensor(t: &TensorU8) -> TensorF32 {
    let q = t.qparams();
    TensorF32 {
        shape: t.shape(),
        data: t.data().iter().map(|&v| dequantize_value(v, q)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qp(delta: f64, zp: u8) -> QuantParams {
        QuantParams::new(delta, zp).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(5.3, qp(1.0, 0)), 5);
        assert_eq!(quantize_value(-64.0, qp(0.5, 128)), 0);
        assert_eq!(quantize_value(10000.0, qp(1.0, 0)), 255);
        assert_eq!(quantize_value(f32::MAX, qp(1e-9, 0)), 255);
        assert_eq!(quantize_value(f32::MIN, qp(1e-9, 200)), 0);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_value(0, qp(0.5, 128)), -64.0);
        for &d in &[0.001, 0.3, 7.0] {
            assert_eq!(dequantize_value(77, qp(d, 77)), 0.0);
        }
        assert_eq!(dequantize_value(255, qp(6.0 / 255.0, 0)), 6.0);
    }

    #[test]
    fn choose_qparams_examples() {
        let q = choose_qparams_from_range(0.0, 6.0).unwrap();
        assert_eq!(q.delta, 6.0 / 255.0);
        assert_eq!(q.zero_point, 0);

        let q = choose_qparams_from_range(-1.0, 1.0).unwrap();
        assert_eq!(q.delta, 2.0 / 255.0);
        assert_eq!(q.zero_point, 128);

        let q = choose_qparams_from_range(0.0, 0.0).unwrap();
        assert_eq!((q.delta, q.zero_point), (1.0, 0));

        // widening to zero
        let q = choose_qparams_from_range(2.0, 4.0).unwrap();
        assert_eq!((q.delta, q.zero_point), (4.0 / 255.0, 0));
        let q = choose_qparams_from_range(-4.0, -2.0).unwrap();
        assert_eq!((q.delta, q.zero_point), (4.0 / 255.0, 255));
    }

    #[test]
    fn choose_qparams_rejects_bad_ranges() {
        assert!(matches!(
            choose_qparams_from_range(f64::NAN, 1.0),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            choose_qparams_from_range(0.0, f64::INFINITY),
            Err(Error::NonFinite(_))
        ));
        assert!(choose_qparams_from_range(1.0, -1.0).is_err());
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(-1.0, 0).is_err());
    }

    #[test]
    fn zero_tensor_maps_to_zero_point() {
        let shape = Shape::new(1, 3, 3, 2).unwrap();
        let t = TensorF32::zeros(shape);
        let q = qp(0.07, 91);
        let u = quantize_tensor(&t, q);
        assert!(u.data().iter().all(|&v| v == 91));
    }

    #[test]
    fn grid_values_round_trip_exactly() {
        let q = choose_qparams_from_range(-1.3, 2.9).unwrap();
        let data: Vec<f32> = (0..=255u8).map(|v| dequantize_value(v, q)).collect();
        let shape = Shape::new(1, 1, 16, 16).unwrap();
        let t = TensorF32::new(shape, data).unwrap();
        let back = dequantize_tensor(&quantize_tensor(&t, q));
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn error_bounded_by_half_step_on_1e5_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = choose_qparams_from_range(-3.0, 5.0).unwrap();
        let (lo, hi) = q.representable_range();
        let data: Vec<f32> = (0..100_000)
            .map(|_| rng.random_range(lo as f32..hi as f32))
            .collect();
        let shape = Shape::new(1, 100, 100, 10).unwrap();
        let t = TensorF32::new(shape, data).unwrap();
        let back = dequantize_tensor(&quantize_tensor(&t, q));
        let worst = t
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max);
        // one f32 ulp of slack for the final narrowing
        assert!(worst <= q.delta / 2.0 + 1e-6, "worst {worst}");
    }

    #[test]
    fn shape_rejects_zero_dims() {
        assert!(Shape::new(1, 0, 2, 2).is_err());
        assert!(TensorF32::new(Shape([1, 2, 2, 1]), vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn round_half_away_matches_std(v in -1e12f64..1e12) {
            prop_assert_eq!(round_half_away(v), v.round() as i64);
        }

        #[test]
        fn round_half_away_on_halves(k in -100_000i64..100_000) {
            let v = k as f64 + 0.5;
            prop_assert_eq!(round_half_away(v), v.round() as i64);
        }

        #[test]
        fn quantize_is_monotone(a in -50.0f32..50.0, b in -50.0f32..50.0,
                                lo in -20.0f64..0.0, hi in 0.0f64..20.0) {
            prop_assume!(hi > lo);
            let q = choose_qparams_from_range(lo, hi).unwrap();
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_value(x, q) <= quantize_value(y, q));
        }

        #[test]
        fn zero_is_exactly_representable(lo in -1e3f64..1e3, span in 0.0f64..1e3) {
            let q = choose_qparams_from_range(lo, lo + span).unwrap();
            prop_assert_eq!(dequantize_value(quantize_value(0.0, q), q), 0.0);
        }
    }
}
