//! Root-cause tooling for quantization loss: per-channel batch-norm scales,
//! per-channel weight SQNR, and per-layer float-versus-int8 degradation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::QuantizedGraph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::float_engine::{accuracy, argmax, forward};
use crate::int8::{forward_quantized, RequantMode};
use crate::model::{Graph, LayerSpec};
use crate::tensor::dequantize_f64;
use crate::transforms::median;

/// Channels whose scale exceeds this multiple of the layer median are flagged.
pub const DEFAULT_FLAG_RATIO: f64 = 10.0;
/// Layers whose output SQNR falls below this are reported as degraded.
pub const DEFAULT_SQNR_THRESHOLD_DB: f64 = 10.0;
pub const REPORT_VERSION: u32 = 1;

/// Batch-norm scales of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaReport {
    pub layer: usize,
    pub alpha: Vec<f32>,
    /// Median of `|alpha|`.
    pub median: f32,
    pub flagged: Vec<usize>,
}

/// Scales of every batch norm in `g`, flagged at [`DEFAULT_FLAG_RATIO`].
pub fn bn_alpha(g: &Graph) -> Vec<AlphaReport> {
    bn_alpha_with_ratio(g, DEFAULT_FLAG_RATIO)
}

/// Flags channels with `|alpha| > ratio * median(|alpha|)`.
pub fn bn_alpha_with_ratio(g: &Graph, ratio: f64) -> Vec<AlphaReport> {
    g.layers
        .iter()
        .enumerate()
        .filter_map(|(layer, l)| match l {
            LayerSpec::BatchNorm(bn) => Some((layer, bn.alpha())),
            _ => None,
        })
        .map(|(layer, alpha)| {
            let mags: Vec<f32> = alpha.iter().map(|a| a.abs()).collect();
            let median = median(&mags);
            let limit = ratio * median as f64;
            let flagged = mags
                .iter()
                .enumerate()
                .filter(|(_, &a)| a as f64 > limit)
                .map(|(c, _)| c)
                .collect();
            AlphaReport {
                layer,
                alpha,
                median,
                flagged,
            }
        })
        .collect()
}

/// Signal-to-quantization-noise ratio with its two non-finite cases tagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "db", rename_all = "snake_case")]
pub enum Sqnr {
    Db(f64),
    /// No error at all.
    Exact,
    /// No signal to compare against.
    ZeroSignal,
}

impl Sqnr {
    pub fn from_powers(signal: f64, noise: f64) -> Self {
        if signal == 0.0 {
            Sqnr::ZeroSignal
        } else if noise == 0.0 {
            Sqnr::Exact
        } else {
            Sqnr::Db(10.0 * (signal / noise).log10())
        }
    }

    pub fn of(reference: &[f64], approx: &[f64]) -> Self {
        let (s, n) = powers(reference, approx);
        Self::from_powers(s, n)
    }

    /// Decibels, with `Exact` as +inf and `ZeroSignal` as NaN.
    pub fn db(&self) -> f64 {
        match self {
            Sqnr::Db(v) => *v,
            Sqnr::Exact => f64::INFINITY,
            Sqnr::ZeroSignal => f64::NAN,
        }
    }

    pub fn is_below(&self, threshold_db: f64) -> bool {
        matches!(self, Sqnr::Db(v) if *v < threshold_db)
    }
}

fn powers(reference: &[f64], approx: &[f64]) -> (f64, f64) {
    reference
        .iter()
        .zip(approx)
        .fold((0.0, 0.0), |(s, n), (&x, &y)| (s + x * x, n + (x - y) * (x - y)))
}

/// Per-channel SQNR of a weight tensor whose channel is the fastest axis.
pub fn weight_channel_sqnr(float_w: &[f32], quant_w: &[f32], channels: usize) -> Result<Vec<Sqnr>> {
    if float_w.len() != quant_w.len() || channels == 0 || !float_w.len().is_multiple_of(channels) {
        return Err(Error::Shape(format!(
            "weights of length {} and {} do not split into {channels} channels",
            float_w.len(),
            quant_w.len()
        )));
    }
    let mut acc = vec![(0.0f64, 0.0f64); channels];
    for (i, (&x, &y)) in float_w.iter().zip(quant_w).enumerate() {
        let (x, y) = (x as f64, y as f64);
        let a = &mut acc[i % channels];
        a.0 += x * x;
        a.1 += (x - y) * (x - y);
    }
    Ok(acc.into_iter().map(|(s, n)| Sqnr::from_powers(s, n)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSqnr {
    pub layer: usize,
    pub kind: String,
    pub sqnr: Sqnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSqnr {
    pub layer: usize,
    pub kind: String,
    pub channels: Vec<Sqnr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub probe_images: usize,
    pub threshold_db: f64,
    pub layers: Vec<LayerSqnr>,
    pub weights: Vec<WeightSqnr>,
    /// First layer whose output SQNR is below the threshold.
    pub first_degraded: Option<usize>,
    pub float_top1: f64,
    pub int8_top1: f64,
    /// Fraction of probe images where both engines pick the same class.
    pub top1_agreement: f64,
}

/// Per-channel SQNR of every weight tensor of `qg` against the float graph.
pub fn weight_degradation(g_float: &Graph, qg: &QuantizedGraph) -> Result<Vec<WeightSqnr>> {
    check_alignment(g_float, qg)?;
    let dq = qg.dequantized_graph();
    let mut out = Vec::new();
    for (i, (a, b)) in g_float.layers.iter().zip(&dq.layers).enumerate() {
        let (Some(fw), Some(qw)) = (a.weights(), b.weights()) else {
            continue;
        };
        let channels = match a {
            LayerSpec::Conv2d(c) => c.out_ch,
            LayerSpec::DepthwiseConv2d(d) => d.channels,
            LayerSpec::Dense(d) => d.out_features,
            _ => unreachable!("weighted layer"),
        };
        out.push(WeightSqnr {
            layer: i,
            kind: a.kind_name().to_string(),
            channels: weight_channel_sqnr(fw, qw, channels)?,
        });
    }
    Ok(out)
}

fn check_alignment(g: &Graph, qg: &QuantizedGraph) -> Result<()> {
    let dq = qg.dequantized_graph();
    let same = g.layers.len() == dq.layers.len()
        && g.layers
            .iter()
            .zip(&dq.layers)
            .all(|(a, b)| a.kind_name() == b.kind_name());
    if !same {
        return Err(Error::InvalidArgument(
            "float graph does not match the quantized graph layer for layer (fold batch norms first)".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
struct Accum {
    /// `(signal, noise)` per float layer index.
    layers: Vec<(f64, f64)>,
    float_pred: Vec<(usize, usize)>,
    int8_pred: Vec<(usize, usize)>,
}

impl Accum {
    fn merge(mut self, other: Accum) -> Accum {
        if self.layers.is_empty() {
            self.layers = other.layers;
        } else {
            for (a, b) in self.layers.iter_mut().zip(&other.layers) {
                a.0 += b.0;
                a.1 += b.1;
            }
        }
        self.float_pred.extend(other.float_pred);
        self.int8_pred.extend(other.int8_pred);
        self
    }
}

/// Runs both engines with traces over `probe` and compares every layer output
/// the int8 engine produces.
pub fn layer_degradation(
    g_float: &Graph,
    qg: &QuantizedGraph,
    probe: &Dataset,
    mode: RequantMode,
    threshold_db: f64,
    exec: Exec,
) -> Result<DegradationReport> {
    check_alignment(g_float, qg)?;
    if probe.is_empty() {
        return Err(Error::InvalidArgument("probe set is empty".into()));
    }
    let n_layers = g_float.layers.len();
    let one = |i: usize| -> Result<Accum> {
        let x = probe.image(i);
        let (out, trace) = forward(g_float, &x, true)?;
        let trace = trace.expect("trace requested");
        let q = forward_quantized(qg, &x, mode, true)?;
        let mut layers = vec![(0.0, 0.0); n_layers];
        for (idx, codes) in q.trace.expect("trace requested") {
            let qp = codes.qparams();
            let reference: Vec<f64> = trace.outputs[idx].data().iter().map(|&v| v as f64).collect();
            let approx: Vec<f64> = codes.data().iter().map(|&v| dequantize_f64(v, qp)).collect();
            layers[idx] = powers(&reference, &approx);
        }
        Ok(Accum {
            layers,
            float_pred: vec![(i, argmax(out.data()))],
            int8_pred: vec![(i, q.labels[0])],
        })
    };
    // per-image partials summed in index order keep the result independent of threading
    let acc = exec
        .try_map(probe.len(), one)?
        .into_iter()
        .fold(Accum::default(), Accum::merge);

    let mut produced = vec![false; n_layers];
    for l in &qg.layers {
        if l.output_q().is_some() {
            produced[l.float_index] = true;
        }
    }
    let layers: Vec<LayerSqnr> = (0..n_layers)
        .filter(|&i| produced[i])
        .map(|i| LayerSqnr {
            layer: i,
            kind: g_float.layers[i].kind_name().to_string(),
            sqnr: Sqnr::from_powers(acc.layers[i].0, acc.layers[i].1),
        })
        .collect();
    let first_degraded = layers
        .iter()
        .find(|l| l.sqnr.is_below(threshold_db))
        .map(|l| l.layer);
    let sorted = |mut v: Vec<(usize, usize)>| {
        v.sort_unstable();
        v.into_iter().map(|(_, p)| p).collect::<Vec<_>>()
    };
    let (fp, qp) = (sorted(acc.float_pred), sorted(acc.int8_pred));
    let agree = fp.iter().zip(&qp).filter(|(a, b)| a == b).count();
    Ok(DegradationReport {
        probe_images: probe.len(),
        threshold_db,
        layers,
        weights: weight_degradation(g_float, qg)?,
        first_degraded,
        float_top1: accuracy(&fp, &probe.labels),
        int8_top1: accuracy(&qp, &probe.labels),
        top1_agreement: agree as f64 / probe.len() as f64,
    })
}

/// Versioned JSON document written by the `diagnose` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub version: u32,
    pub model: String,
    pub flag_ratio: f64,
    pub alpha: Vec<AlphaReport>,
    pub degradation: Option<DegradationReport>,
}

impl DiagnosticsReport {
    pub fn new(model: &str, alpha: Vec<AlphaReport>, degradation: Option<DegradationReport>) -> Self {
        Self {
            version: REPORT_VERSION,
            model: model.to_string(),
            flag_ratio: DEFAULT_FLAG_RATIO,
            alpha,
            degradation,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == REPORT_VERSION as u64 => {
                serde_json::from_value(value).map_err(|e| Error::json(path, e))
            }
            Some(v) => Err(Error::Version {
                path: path.to_path_buf(),
                found: v as u32,
                expected: REPORT_VERSION,
            }),
            None => Err(Error::format(path, "missing report version")),
        }
    }
}

pub const ALPHA_CSV_HEADER: [&str; 2] = ["channel_index", "alpha"];
pub const SQNR_CSV_HEADER: [&str; 2] = ["layer", "sqnr_db"];

/// Writes `channel_index,alpha` rows.
pub fn write_alpha_csv(report: &AlphaReport, path: &Path) -> Result<()> {
    let rows = report
        .alpha
        .iter()
        .enumerate()
        .map(|(c, a)| [c.to_string(), a.to_string()]);
    write_pairs(path, ALPHA_CSV_HEADER, rows)
}

pub fn read_alpha_csv(path: &Path) -> Result<Vec<(usize, f32)>> {
    read_pairs(path, ALPHA_CSV_HEADER)
}

/// Writes `layer,sqnr_db` rows; exact layers read `inf`, zero-signal layers `NaN`.
pub fn write_sqnr_csv(report: &DegradationReport, path: &Path) -> Result<()> {
    let rows = report
        .layers
        .iter()
        .map(|l| [l.layer.to_string(), l.sqnr.db().to_string()]);
    write_pairs(path, SQNR_CSV_HEADER, rows)
}

pub fn read_sqnr_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    read_pairs(path, SQNR_CSV_HEADER)
}

fn write_pairs(path: &Path, header: [&str; 2], rows: impl Iterator<Item = [String; 2]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::csv(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_pairs<V: std::str::FromStr>(path: &Path, header: [&str; 2]) -> Result<Vec<(usize, V)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    if r.headers().map_err(|e| Error::csv(path, e))?.iter().ne(header) {
        return Err(Error::format(
            path,
            format!("expected header {}", header.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let parse_err = || Error::format(path, format!("bad row {:?}", rec.iter().collect::<Vec<_>>()));
        let k = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let v = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        out.push((k, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_baseline_mini, ArchSpec, BatchNorm};
    use crate::transforms::inject_dead_channels;

    fn with_bn(gamma: Vec<f32>, variance: Vec<f32>) -> Graph {
        let mut g = build_baseline_mini(&ArchSpec::default()).unwrap();
        g.layers[2] = LayerSpec::BatchNorm(BatchNorm {
            beta: vec![0.0; gamma.len()],
            mean: vec![0.0; gamma.len()],
            gamma,
            variance,
            epsilon: 1e-3,
        });
        g
    }

    #[test]
    fn uniform_bn_flags_nothing() {
        let g = build_baseline_mini(&ArchSpec::default()).unwrap();
        let reports = bn_alpha(&g);
        assert_eq!(reports.len(), 6);
        assert!(reports.iter().all(|r| r.flagged.is_empty()));
        let expected = (1.0 / (1.0f64 + 1e-3f32 as f64).sqrt()) as f32;
        assert!(reports[0].alpha.iter().all(|&a| a == expected));
    }

    #[test]
    fn injected_channel_is_flagged() {
        let g = build_baseline_mini(&ArchSpec::default()).unwrap();
        let inj = inject_dead_channels(&g, 1, &[5]).unwrap();
        let r = &bn_alpha(&inj)[0];
        assert_eq!(r.layer, 2);
        assert!((r.alpha[5] - 31.62).abs() < 0.01);
        assert!((r.median - 1.0).abs() < 1e-3);
        assert_eq!(r.flagged, vec![5]);
        assert!(bn_alpha_with_ratio(&inj, f64::INFINITY)
            .iter()
            .all(|r| r.flagged.is_empty()));
    }

    #[test]
    fn alpha_matches_folding_bit_for_bit() {
        let g = with_bn(
            vec![0.3, 1.7, 0.9, 2.0, 0.1, 1.1, 0.5, 1.0],
            vec![0.5, 1e-8, 2.0, 0.01, 3.0, 0.2, 1.0, 1e-4],
        );
        let (_, fold) = crate::transforms::fold_batchnorm(&g).unwrap();
        assert_eq!(bn_alpha(&g)[0].alpha, fold.layers[0].alpha);
    }

    #[test]
    fn no_batch_norms_gives_empty_list() {
        let g = build_baseline_mini(&ArchSpec::default()).unwrap();
        let (f, _) = crate::transforms::fold_batchnorm(&g).unwrap();
        assert!(bn_alpha(&f).is_empty());
    }

    #[test]
    fn sqnr_tags() {
        let w = [0.5f32, -0.25, 0.0, 1.0, 0.0, 0.0];
        let s = weight_channel_sqnr(&w, &w, 3).unwrap();
        assert_eq!(s, vec![Sqnr::Exact, Sqnr::Exact, Sqnr::ZeroSignal]);
        let noisy = [0.5f32, -0.25, 0.1, 0.9, 0.0, 0.0];
        let s = weight_channel_sqnr(&w, &noisy, 3).unwrap();
        // channel 0: signal 0.25 + 1.0, noise 0.01
        assert!((s[0].db() - 10.0 * (1.25f64 / 0.01).log10()).abs() < 1e-5);
        assert_eq!(s[1], Sqnr::Exact);
        assert_eq!(s[2], Sqnr::ZeroSignal);
        assert!(weight_channel_sqnr(&w, &w, 4).is_err());
        assert!(Sqnr::Db(3.0).is_below(10.0));
        assert!(!Sqnr::Exact.is_below(10.0));
        assert!(!Sqnr::ZeroSignal.is_below(10.0));
    }

    #[test]
    fn sqnr_serializes_with_tags() {
        let v = vec![Sqnr::Db(12.5), Sqnr::Exact, Sqnr::ZeroSignal];
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(
            text,
            r#"[{"kind":"db","db":12.5},{"kind":"exact"},{"kind":"zero_signal"}]"#
        );
        assert_eq!(serde_json::from_str::<Vec<Sqnr>>(&text).unwrap(), v);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = with_bn(
            vec![0.3, 1.7, 0.9, 2.0, 0.1, 1.1, 0.5, 1.0],
            vec![0.5, 1e-8, 2.0, 0.01, 3.0, 0.2, 1.0, 1e-4],
        );
        let r = &bn_alpha(&g)[0];
        let p = dir.path().join("alpha.csv");
        write_alpha_csv(r, &p).unwrap();
        assert!(fs::read_to_string(&p)
            .unwrap()
            .starts_with("channel_index,alpha\n"));
        let back = read_alpha_csv(&p).unwrap();
        assert_eq!(back.iter().map(|p| p.1).collect::<Vec<_>>(), r.alpha);

        let report = DegradationReport {
            probe_images: 1,
            threshold_db: 10.0,
            layers: vec![
                LayerSqnr {
                    layer: 0,
                    kind: "conv2d".into(),
                    sqnr: Sqnr::Db(31.25),
                },
                LayerSqnr {
                    layer: 3,
                    kind: "relu6".into(),
                    sqnr: Sqnr::Exact,
                },
            ],
            weights: vec![],
            first_degraded: None,
            float_top1: 1.0,
            int8_top1: 1.0,
            top1_agreement: 1.0,
        };
        let p = dir.path().join("sqnr.csv");
        write_sqnr_csv(&report, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "layer,sqnr_db\n0,31.25\n3,inf\n");
        assert_eq!(read_sqnr_csv(&p).unwrap(), vec![(0, 31.25), (3, f64::INFINITY)]);
        fs::write(&p, "layer,db\n0,1\n").unwrap();
        assert!(read_sqnr_csv(&p).is_err());
    }
}
