//! Per-tensor calibration statistics and their binary file format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::float_engine::forward;
use crate::model::{Graph, LayerSpec};

/// Histogram resolution of every tensor.
pub const HIST_BINS: usize = 2048;

const STATS_MAGIC: &[u8; 4] = b"QFST";
pub const STATS_VERSION: u32 = 1;

/// Identifies a quantizable tensor of a float graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TensorId {
    Input,
    /// Output of layer `i`.
    Output(usize),
    /// Weight tensor of layer `i`.
    Weights(usize),
}

impl std::fmt::Display for TensorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TensorId::Input => write!(f, "input"),
            TensorId::Output(i) => write!(f, "output[{i}]"),
            TensorId::Weights(i) => write!(f, "weights[{i}]"),
        }
    }
}

/// Exact extremes of a value stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeStats {
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

impl Default for RangeStats {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            count: 0,
        }
    }
}

impl RangeStats {
    pub fn of(values: &[f32]) -> Self {
        let mut r = Self::default();
        r.add(values);
        r
    }

    pub fn add(&mut self, values: &[f32]) {
        for &v in values {
            let v = v as f64;
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += values.len() as u64;
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            count: self.count + other.count,
        }
    }
}

/// Extremes plus a fixed-resolution histogram over `[min, max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorStats {
    pub min: f64,
    pub max: f64,
    pub histogram: Vec<u64>,
    pub count: u64,
}

impl TensorStats {
    /// Empty histogram over a known range.
    pub fn with_range(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::NonFinite(format!("range [{min}, {max}]")));
        }
        if min > max {
            return Err(Error::InvalidArgument(format!("min {min} exceeds max {max}")));
        }
        Ok(Self {
            min,
            max,
            histogram: vec![0; HIST_BINS],
            count: 0,
        })
    }

    /// Two-pass statistics of a slice.
    pub fn from_values(values: &[f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no values to summarize".into()));
        }
        let r = RangeStats::of(values);
        let mut s = Self::with_range(r.min, r.max)?;
        s.add(values);
        Ok(s)
    }

    #[inline]
    pub fn bin_of(&self, v: f64) -> usize {
        if self.max <= self.min {
            return 0;
        }
        let t = (v - self.min) / (self.max - self.min) * HIST_BINS as f64;
        if t <= 0.0 {
            0
        } else {
            (t as usize).min(HIST_BINS - 1)
        }
    }

    /// Adds values; anything outside `[min, max]` lands in the edge bins.
    pub fn add(&mut self, values: &[f32]) {
        for &v in values {
            let b = self.bin_of(v as f64);
            self.histogram[b] += 1;
        }
        self.count += values.len() as u64;
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / HIST_BINS as f64
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        self.min + (b as f64 + 0.5) * self.bin_width()
    }

    /// Sums two histograms over the same range.
    pub fn merge(mut self, other: &TensorStats) -> Result<Self> {
        if self.min != other.min || self.max != other.max {
            return Err(Error::InvalidArgument(format!(
                "cannot merge histograms over [{}, {}] and [{}, {}]",
                self.min, self.max, other.min, other.max
            )));
        }
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
        self.count += other.count;
        Ok(self)
    }

    pub fn is_degenerate(&self) -> bool {
        self.count == 0 || self.max <= self.min
    }
}

/// Statistics for every quantizable tensor of a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationRecord {
    pub entries: BTreeMap<TensorId, TensorStats>,
}

impl CalibrationRecord {
    pub fn get(&self, id: TensorId) -> Result<&TensorStats> {
        self.entries
            .get(&id)
            .ok_or_else(|| Error::MissingStats(id.to_string()))
    }

    /// Merges records whose tensors share ranges.
    pub fn merge(mut self, other: &CalibrationRecord) -> Result<Self> {
        for (id, s) in &other.entries {
            let merged = match self.entries.remove(id) {
                Some(mine) => mine.merge(s)?,
                None => s.clone(),
            };
            self.entries.insert(*id, merged);
        }
        Ok(self)
    }
}

/// Activation tensors recorded for `g`: the input and every layer output
/// except the final softmax.
pub fn activation_ids(g: &Graph) -> Vec<TensorId> {
    let mut ids = vec![TensorId::Input];
    ids.extend(
        g.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !matches!(l, LayerSpec::Softmax))
            .map(|(i, _)| TensorId::Output(i)),
    );
    ids
}

fn traced(g: &Graph, data: &Dataset, i: usize) -> Result<Vec<(TensorId, Vec<f32>)>> {
    let (_, trace) = forward(g, &data.image(i), true)?;
    let trace = trace.expect("trace requested");
    let mut out = vec![(TensorId::Input, trace.input.into_data())];
    for (k, t) in trace.outputs.into_iter().enumerate() {
        if !matches!(g.layers[k], LayerSpec::Softmax) {
            out.push((TensorId::Output(k), t.into_data()));
        }
    }
    Ok(out)
}

type Partial<T> = Result<BTreeMap<TensorId, T>>;

/// Runs the calibration images through `g` in two passes: exact extremes
/// first, then histograms over those extremes. Weight tensors are summarized
/// from their values.
pub fn collect_stats(g: &Graph, calib: &Dataset, exec: Exec) -> Result<CalibrationRecord> {
    if calib.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    g.infer_shapes()?;

    let ranges: BTreeMap<TensorId, RangeStats> = exec.map_reduce(
        calib.len(),
        || Ok(BTreeMap::new()),
        |i| -> Partial<RangeStats> {
            Ok(traced(g, calib, i)?
                .into_iter()
                .map(|(id, v)| (id, RangeStats::of(&v)))
                .collect())
        },
        |a: Partial<RangeStats>, b: Partial<RangeStats>| {
            let (mut a, b) = (a?, b?);
            for (id, r) in b {
                let e = a.entry(id).or_default();
                *e = e.merge(r);
            }
            Ok(a)
        },
    )?;
    for (id, r) in &ranges {
        if !(r.min.is_finite() && r.max.is_finite()) {
            return Err(Error::NonFinite(format!("calibration values of {id}")));
        }
    }

    let empty = || -> Partial<TensorStats> {
        ranges
            .iter()
            .map(|(id, r)| Ok((*id, TensorStats::with_range(r.min, r.max)?)))
            .collect()
    };
    let hists = exec.map_reduce(
        calib.len(),
        empty,
        |i| -> Partial<TensorStats> {
            let mut m = empty()?;
            for (id, v) in traced(g, calib, i)? {
                m.get_mut(&id).expect("tensor seen in first pass").add(&v);
            }
            Ok(m)
        },
        |a: Partial<TensorStats>, b: Partial<TensorStats>| {
            let (mut a, b) = (a?, b?);
            for (id, s) in b {
                let mine = a.remove(&id).expect("same tensor set");
                a.insert(id, mine.merge(&s)?);
            }
            Ok(a)
        },
    )?;

    let mut rec = CalibrationRecord { entries: hists };
    for (i, layer) in g.layers.iter().enumerate() {
        if let Some(w) = layer.weights() {
            rec.entries
                .insert(TensorId::Weights(i), TensorStats::from_values(w)?);
        }
    }
    Ok(rec)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Versioned binary encoding; sparse histograms, trailing CRC32.
pub fn encode_stats(rec: &CalibrationRecord) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STATS_MAGIC);
    put_u32(&mut buf, STATS_VERSION);
    put_u32(&mut buf, HIST_BINS as u32);
    put_u32(&mut buf, rec.entries.len() as u32);
    for (id, s) in &rec.entries {
        let (tag, index) = match id {
            TensorId::Input => (0u8, 0u32),
            TensorId::Output(i) => (1, *i as u32),
            TensorId::Weights(i) => (2, *i as u32),
        };
        buf.push(tag);
        put_u32(&mut buf, index);
        buf.extend_from_slice(&s.min.to_le_bytes());
        buf.extend_from_slice(&s.max.to_le_bytes());
        buf.extend_from_slice(&s.count.to_le_bytes());
        let nz: Vec<(usize, u64)> = s
            .histogram
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(b, &c)| (b, c))
            .collect();
        put_u32(&mut buf, nz.len() as u32);
        for (b, c) in nz {
            put_u32(&mut buf, b as u32);
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::format(self.path, "statistics file truncated"))?;
        self.pos += N;
        Ok(s.try_into().expect("slice of length N"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn decode_stats(bytes: &[u8], path: &Path) -> Result<CalibrationRecord> {
    if bytes.len() < 20 || &bytes[..4] != STATS_MAGIC {
        return Err(Error::format(path, "not a calibration statistics file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut c = Cursor {
        bytes: body,
        pos: 4,
        path,
    };
    let version = c.u32()?;
    if version != STATS_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: STATS_VERSION,
        });
    }
    let bins = c.u32()? as usize;
    if bins != HIST_BINS {
        return Err(Error::format(
            path,
            format!("{bins} histogram bins, expected {HIST_BINS}"),
        ));
    }
    let n = c.u32()?;
    let mut rec = CalibrationRecord::default();
    for _ in 0..n {
        let [tag] = c.take::<1>()?;
        let index = c.u32()? as usize;
        let id = match tag {
            0 => TensorId::Input,
            1 => TensorId::Output(index),
            2 => TensorId::Weights(index),
            t => return Err(Error::format(path, format!("unknown tensor tag {t}"))),
        };
        let (min, max, count) = (c.f64()?, c.f64()?, c.u64()?);
        let mut s = TensorStats::with_range(min, max).map_err(|e| Error::format(path, e.to_string()))?;
        s.count = count;
        for _ in 0..c.u32()? {
            let b = c.u32()? as usize;
            let v = c.u64()?;
            *s.histogram
                .get_mut(b)
                .ok_or_else(|| Error::format(path, format!("bin {b} out of range")))? = v;
        }
        if s.histogram.iter().sum::<u64>() != s.count {
            return Err(Error::format(
                path,
                format!("histogram of {id} does not sum to its count"),
            ));
        }
        rec.entries.insert(id, s);
    }
    if c.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after statistics"));
    }
    Ok(rec)
}

pub fn save_stats(rec: &CalibrationRecord, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_stats(rec)).map_err(|e| Error::io(path, e))
}

pub fn load_stats(path: &Path) -> Result<CalibrationRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stats(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenSpec};
    use crate::model::{build_baseline_mini, ArchSpec};
    use crate::train::init_weights;
    use crate::transforms::fold_batchnorm;
    use proptest::prelude::*;

    fn setup() -> (Graph, Dataset) {
        let g = init_weights(&build_baseline_mini(&ArchSpec::default()).unwrap(), 3).unwrap();
        let spec = GenSpec {
            train: 64,
            val: 8,
            holdout: 8,
            ..GenSpec::default()
        };
        (g, generate(&spec).unwrap().0)
    }

    #[test]
    fn single_image_matches_trace_extremes() {
        let (g, data) = setup();
        let one = data.subset(&[0]).unwrap();
        let rec = collect_stats(&g, &one, Exec::Sequential).unwrap();
        let (_, trace) = forward(&g, &one.image(0), true).unwrap();
        let trace = trace.unwrap();
        for (k, t) in trace.outputs.iter().enumerate().take(g.layers.len() - 1) {
            let s = rec.get(TensorId::Output(k)).unwrap();
            let (lo, hi) = t.min_max();
            assert_eq!((s.min, s.max), (lo as f64, hi as f64));
            assert_eq!(s.count, t.data().len() as u64);
            assert_eq!(s.histogram.iter().sum::<u64>(), s.count);
        }
        assert!(rec.get(TensorId::Output(g.layers.len() - 1)).is_err());
        assert!(rec.get(TensorId::Weights(1)).is_ok());
    }

    #[test]
    fn relu6_outputs_are_bounded() {
        let (g, data) = setup();
        let rec = collect_stats(&g, &data.per_class(1).unwrap(), Exec::Sequential).unwrap();
        for (i, l) in g.layers.iter().enumerate() {
            if matches!(l, LayerSpec::Activation(crate::model::ActivationKind::Relu6)) {
                let s = rec.get(TensorId::Output(i)).unwrap();
                assert!(s.min >= 0.0 && s.max <= 6.0);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let (g, data) = setup();
        let (f, _) = fold_batchnorm(&g).unwrap();
        let calib = data.per_class(2).unwrap();
        assert_eq!(
            collect_stats(&f, &calib, Exec::Sequential).unwrap(),
            collect_stats(&f, &calib, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn empty_calibration_set_is_rejected() {
        let (g, data) = setup();
        let none = Dataset {
            images: data.images.item(0),
            labels: vec![],
            classes: data.classes,
            split: data.split,
        };
        assert!(matches!(
            collect_stats(&g, &none, Exec::Sequential),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let (g, data) = setup();
        let rec = collect_stats(&g, &data.per_class(1).unwrap(), Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        save_stats(&rec, &p).unwrap();
        assert_eq!(load_stats(&p).unwrap(), rec);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[30] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_stats(&p), Err(Error::Checksum { .. })));
        std::fs::write(&p, &bytes[..10]).unwrap();
        assert!(load_stats(&p).is_err());
    }

    fn stats_over(values: &[f32], lo: f64, hi: f64) -> TensorStats {
        let mut s = TensorStats::with_range(lo, hi).unwrap();
        s.add(values);
        s
    }

    proptest! {
        #[test]
        fn merge_of_parts_equals_union(
            a in prop::collection::vec(-5.0f32..5.0, 1..200),
            b in prop::collection::vec(-5.0f32..5.0, 1..200),
        ) {
            let (ra, rb) = (RangeStats::of(&a), RangeStats::of(&b));
            let all: Vec<f32> = a.iter().chain(&b).copied().collect();
            let ru = RangeStats::of(&all);
            prop_assert_eq!(ra.merge(rb), ru);
            prop_assert_eq!(rb.merge(ra), ru);
            let ha = stats_over(&a, ru.min, ru.max);
            let hb = stats_over(&b, ru.min, ru.max);
            let hu = stats_over(&all, ru.min, ru.max);
            prop_assert_eq!(ha.clone().merge(&hb).unwrap(), hu.clone());
            prop_assert_eq!(hb.merge(&ha).unwrap(), hu);
        }
    }

    #[test]
    fn bins_cover_edges() {
        let s = TensorStats::from_values(&[0.0, 1.0, 0.5]).unwrap();
        assert_eq!(s.histogram[0], 1);
        assert_eq!(s.histogram[HIST_BINS - 1], 1);
        assert_eq!(s.histogram[HIST_BINS / 2], 1);
        assert!((s.bin_center(0) - 0.5 / HIST_BINS as f64).abs() < 1e-15);
    }
}
