//! End-to-end run: data, both networks, the injected pathology, folding,
//! calibration, quantization, evaluation, diagnostics and benchmarking.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{compute_score, measure_latency, Engine, ScoreReport};
use crate::calib::{build_quantized_graph, collect_stats, save_quantized, save_stats, QuantizedGraph};
use crate::config::PipelineConfig;
use crate::data::{generate, save_splits, Dataset};
use crate::diagnostics::{
    bn_alpha, layer_degradation, write_alpha_csv, write_sqnr_csv, AlphaReport, DiagnosticsReport,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::float_engine::evaluate;
use crate::int8::evaluate_quantized;
use crate::model::io::save_graph;
use crate::model::{build_baseline_mini, build_friendly_mini, Graph, LayerSpec};
use crate::train::{init_weights, train, write_history_csv};
use crate::transforms::{fold_batchnorm, inject_dead_channels};

pub const SUMMARY_VERSION: u32 = 1;
/// Largest accepted float-to-int8 drop of the friendly network, in points.
pub const FRIENDLY_TOLERANCE_POINTS: f64 = 2.0;
/// Smallest drop that counts as a collapse of the injected baseline.
pub const COLLAPSE_POINTS: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPair {
    pub float: f64,
    pub int8: f64,
}

impl AccuracyPair {
    /// `float - int8` in percentage points.
    pub fn drop_points(&self) -> f64 {
        100.0 * (self.float - self.int8)
    }
}

/// Validation top-1 of each network before and after quantization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub baseline: AccuracyPair,
    pub baseline_injected: AccuracyPair,
    pub friendly: AccuracyPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendChecks {
    pub friendly_drop_points: f64,
    pub friendly_int8_holds: bool,
    pub injected_drop_points: f64,
    pub injected_int8_collapses: bool,
    pub float_gap_points: f64,
    pub friendly_float_matches_baseline: bool,
}

impl TrendChecks {
    pub fn from_table(t: &AccuracyTable) -> Self {
        let friendly_drop = t.friendly.drop_points();
        let injected_drop = 100.0 * (t.baseline.float - t.baseline_injected.int8);
        let gap = 100.0 * (t.friendly.float - t.baseline.float);
        Self {
            friendly_drop_points: friendly_drop,
            friendly_int8_holds: friendly_drop.abs() <= FRIENDLY_TOLERANCE_POINTS,
            injected_drop_points: injected_drop,
            injected_int8_collapses: injected_drop >= COLLAPSE_POINTS,
            float_gap_points: gap,
            friendly_float_matches_baseline: gap.abs() <= FRIENDLY_TOLERANCE_POINTS,
        }
    }
}

/// Facts about the injected depthwise layer after folding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionFacts {
    pub layer: usize,
    pub channels: Vec<usize>,
    pub alpha: AlphaReport,
    /// Largest folded weight magnitude of the injected channels over that of
    /// the healthy ones.
    pub weight_domination: f64,
    pub first_degraded_layer: Option<usize>,
}

/// Latency-dependent results; excluded from reproducibility comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSection {
    pub float: ScoreReport,
    pub int8: ScoreReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub config: PipelineConfig,
    pub accuracy: AccuracyTable,
    pub checks: TrendChecks,
    pub injection: InjectionFacts,
    /// Artifact paths relative to the output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub timing: TimingSection,
}

impl Summary {
    /// JSON text without the latency-dependent section.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("summary is plain data");
        v.as_object_mut().expect("object").remove("timing");
        serde_json::to_string_pretty(&v).expect("value")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Largest `|w|` over `selected` channels divided by the largest over the
/// rest, for a weight tensor whose channel is the fastest axis.
pub fn channel_domination(weights: &[f32], channels: usize, selected: &[usize]) -> f64 {
    let (mut inj, mut healthy) = (0.0f64, 0.0f64);
    for (i, &w) in weights.iter().enumerate() {
        let m = (w as f64).abs();
        if selected.contains(&(i % channels)) {
            inj = inj.max(m);
        } else {
            healthy = healthy.max(m);
        }
    }
    inj / healthy
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    artifacts: BTreeMap<String, PathBuf>,
    progress: &'a mut dyn FnMut(&str),
    exec: Exec,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        (self.progress)(name);
        f(self).map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        })
    }

    fn path(&mut self, key: &str, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.artifacts.insert(key.to_string(), PathBuf::from(rel));
        Ok(p)
    }

    fn train_net(&mut self, name: &str, g: Graph, data: &Dataset) -> Result<Graph> {
        let g = init_weights(&g, self.cfg.init_seed())?;
        let (g, history) = train(&g, data, None, &self.cfg.train_config())?;
        let p = self.path(&format!("{name}_history"), &format!("history/{name}.csv"))?;
        write_history_csv(&p, &history)?;
        let p = self.path(&format!("{name}_model"), &format!("models/{name}"))?;
        save_graph(&g, &p)?;
        Ok(g)
    }

    fn quantize(&mut self, name: &str, folded: &Graph, calib: &Dataset) -> Result<QuantizedGraph> {
        let stats = collect_stats(folded, calib, self.exec)?;
        let p = self.path(&format!("{name}_stats"), &format!("stats/{name}.bin"))?;
        save_stats(&stats, &p)?;
        let qg = build_quantized_graph(folded, &stats)?;
        qg.validate()?;
        let p = self.path(&format!("{name}_quantized"), &format!("models/{name}-int8"))?;
        save_quantized(&qg, &p)?;
        Ok(qg)
    }

    fn pair(&self, folded: &Graph, qg: &QuantizedGraph, val: &Dataset) -> Result<AccuracyPair> {
        Ok(AccuracyPair {
            float: evaluate(folded, val, self.exec)?,
            int8: evaluate_quantized(qg, val, self.cfg.quantize.mode, self.exec)?,
        })
    }
}

/// Runs every stage under `cfg.out_dir` and writes `summary.json` there.
/// `progress` receives each stage name as it starts.
pub fn run_pipeline(cfg: &PipelineConfig, progress: &mut dyn FnMut(&str)) -> Result<Summary> {
    cfg.validate()?;
    let mut run = Run {
        cfg,
        out: cfg.out_dir.clone(),
        artifacts: BTreeMap::new(),
        progress,
        exec: Exec::default(),
    };
    let (train_set, val, holdout) = run.stage("gen-data", |r| {
        let splits = generate(&r.cfg.gen_spec())?;
        let dir = r.path("data", "data")?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_splits(&dir, [&splits.0, &splits.1, &splits.2])?;
        Ok(splits)
    })?;
    let arch = cfg.arch_spec();
    let baseline = run.stage("train-baseline", |r| {
        r.train_net("baseline", build_baseline_mini(&arch)?, &train_set)
    })?;
    let friendly = run.stage("train-friendly", |r| {
        r.train_net("friendly", build_friendly_mini(&arch)?, &train_set)
    })?;
    let (layer, channels) = (cfg.inject.layer, cfg.inject.channels.clone());
    let injected = run.stage("inject-dead", |r| {
        let g = inject_dead_channels(&baseline, layer, &channels)?;
        save_graph(&g, &r.path("injected_model", "models/baseline-injected")?)?;
        Ok(g)
    })?;
    let folded = run.stage("fold-bn", |r| {
        let mut out = Vec::new();
        for (name, g) in [
            ("baseline", &baseline),
            ("baseline-injected", &injected),
            ("friendly", &friendly),
        ] {
            let (f, _) = fold_batchnorm(g)?;
            save_graph(
                &f,
                &r.path(&format!("{name}_folded"), &format!("models/{name}-folded"))?,
            )?;
            out.push(f);
        }
        Ok(out)
    })?;
    let [base_f, inj_f, fr_f] = <[Graph; 3]>::try_from(folded).expect("three graphs");
    let calib = train_set.per_class(cfg.calibrate.per_class)?;
    let quantized = run.stage("calibrate-quantize", |r| {
        Ok([
            r.quantize("baseline", &base_f, &calib)?,
            r.quantize("baseline-injected", &inj_f, &calib)?,
            r.quantize("friendly", &fr_f, &calib)?,
        ])
    })?;
    let [base_q, inj_q, fr_q] = &quantized;
    let accuracy = run.stage("eval", |r| {
        Ok(AccuracyTable {
            baseline: r.pair(&base_f, base_q, &val)?,
            baseline_injected: r.pair(&inj_f, inj_q, &val)?,
            friendly: r.pair(&fr_f, fr_q, &val)?,
        })
    })?;
    let injection = run.stage("diagnose", |r| {
        let probe = val.per_class(cfg.diagnose.probe_per_class)?;
        let alpha = bn_alpha(&injected);
        let bn_alpha_report = alpha
            .iter()
            .find(|a| a.layer == layer + 1)
            .cloned()
            .ok_or_else(|| Error::layer(layer + 1, "no batch norm after the injected layer"))?;
        write_alpha_csv(
            &bn_alpha_report,
            &r.path("injected_alpha_csv", "diagnostics/alpha-injected.csv")?,
        )?;
        let mut first_degraded = None;
        for (name, g, qg, alpha) in [
            ("baseline-injected", &inj_f, inj_q, alpha.clone()),
            ("friendly", &fr_f, fr_q, bn_alpha(&friendly)),
        ] {
            let deg = layer_degradation(
                g,
                qg,
                &probe,
                cfg.quantize.mode,
                cfg.diagnose.threshold_db,
                r.exec,
            )?;
            write_sqnr_csv(
                &deg,
                &r.path(
                    &format!("{name}_sqnr_csv"),
                    &format!("diagnostics/sqnr-{name}.csv"),
                )?,
            )?;
            if name == "baseline-injected" {
                first_degraded = deg.first_degraded;
            }
            let report = DiagnosticsReport::new(name, alpha, Some(deg));
            report.save(&r.path(&format!("{name}_report"), &format!("diagnostics/{name}.json"))?)?;
        }
        let domination = match &inj_f.layers[layer] {
            LayerSpec::DepthwiseConv2d(d) => channel_domination(&d.weights, d.channels, &channels),
            _ => return Err(Error::layer(layer, "not a depthwise convolution after folding")),
        };
        Ok(InjectionFacts {
            layer,
            channels: channels.clone(),
            alpha: bn_alpha_report,
            weight_domination: domination,
            first_degraded_layer: first_degraded,
        })
    })?;
    let timing = run.stage("bench-score", |r| {
        let mut score = |name: &str, engine: Engine<'_>| -> Result<ScoreReport> {
            let log = measure_latency(engine, &holdout, cfg.bench.warmup)?;
            log.save(&r.path(&format!("{name}_runlog"), &format!("bench/{name}.csv"))?)?;
            let s = compute_score(&log, cfg.bench.budget_ms)?;
            s.save(&r.path(&format!("{name}_score"), &format!("bench/{name}-score.json"))?)?;
            Ok(s)
        };
        Ok(TimingSection {
            float: score("friendly-float", Engine::Float(&fr_f))?,
            int8: score("friendly-int8", Engine::Int8(fr_q, cfg.quantize.mode))?,
        })
    })?;
    let summary = Summary {
        version: SUMMARY_VERSION,
        config: cfg.clone(),
        checks: TrendChecks::from_table(&accuracy),
        accuracy,
        injection,
        artifacts: BTreeMap::new(),
        timing,
    };
    run.stage("summary", |r| {
        let p = r.path("summary", "summary.json")?;
        let summary = Summary {
            artifacts: r.artifacts.clone(),
            ..summary
        };
        summary.save(&p)?;
        Ok(summary)
    })
}
