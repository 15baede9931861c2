//! Per-image latency measurement and wall-time scoring.
//!
//! Timing only ever enters through a [`RunLog`]; [`compute_score`] is a pure
//! function of the log so scores can be replayed from a saved CSV.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calib::QuantizedGraph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::float_engine::{argmax, forward};
use crate::int8::{forward_quantized, RequantMode};
use crate::model::Graph;
use crate::tensor::TensorF32;

pub const DEFAULT_BUDGET_MS: f64 = 30.0;
pub const DEFAULT_WARMUP: usize = 10;
pub const RUN_LOG_HEADER: &str = "index,latency_ms,predicted,truth";
/// Environment note recorded in every measured log.
pub const TIMING_NOTE: &str = "single thread, batch 1, inference only (image loading excluded)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineTag {
    Float,
    Int8,
}

impl fmt::Display for EngineTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineTag::Float => "float",
            EngineTag::Int8 => "int8",
        })
    }
}

impl FromStr for EngineTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(EngineTag::Float),
            "int8" => Ok(EngineTag::Int8),
            other => Err(Error::InvalidArgument(format!("unknown engine `{other}`"))),
        }
    }
}

/// A model ready for batch-1 inference.
#[derive(Clone, Copy, Debug)]
pub enum Engine<'a> {
    Float(&'a Graph),
    Int8(&'a QuantizedGraph, RequantMode),
}

impl Engine<'_> {
    pub fn tag(&self) -> EngineTag {
        match self {
            Engine::Float(_) => EngineTag::Float,
            Engine::Int8(..) => EngineTag::Int8,
        }
    }

    pub fn classify(&self, image: &TensorF32) -> Result<usize> {
        match self {
            Engine::Float(g) => Ok(argmax(forward(g, image, false)?.0.data())),
            Engine::Int8(qg, mode) => Ok(forward_quantized(qg, image, *mode, false)?.labels[0]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub index: usize,
    pub latency_ms: f64,
    pub predicted: usize,
    pub truth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub engine: EngineTag,
    pub note: String,
    pub entries: Vec<RunEntry>,
}

impl RunLog {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(e.latency_ms.is_finite() && e.latency_ms > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "entry {} has latency {} ms; latencies must be positive",
                    e.index, e.latency_ms
                )));
            }
        }
        Ok(())
    }

    /// CSV with `# engine=` and `# note=` comment lines ahead of the header.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# engine={}\n# note={}\n{RUN_LOG_HEADER}\n",
            self.engine, self.note
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.index, e.latency_ms, e.predicted, e.truth
            ));
        }
        s
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut engine = None;
        let mut note = String::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix('#') {
                let (k, v) = meta.trim_start().split_once('=').unwrap_or((meta.trim(), ""));
                match k {
                    "engine" => engine = Some(v.parse::<EngineTag>()?),
                    "note" => note = v.to_string(),
                    _ => {}
                }
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let header = r.headers().map_err(|e| Error::csv(path, e))?;
        if header.iter().collect::<Vec<_>>().join(",") != RUN_LOG_HEADER {
            return Err(Error::format(path, format!("expected header {RUN_LOG_HEADER}")));
        }
        let mut entries = Vec::new();
        for rec in r.deserialize::<RunEntry>() {
            entries.push(rec.map_err(|e| Error::csv(path, e))?);
        }
        let log = RunLog {
            engine: engine.ok_or_else(|| Error::format(path, "missing `# engine=` line"))?,
            note,
            entries,
        };
        log.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }
}

/// Times every image of `data` in order, one at a time, after `warmup`
/// untimed runs.
pub fn measure_latency(engine: Engine<'_>, data: &Dataset, warmup: usize) -> Result<RunLog> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot benchmark an empty dataset".into()));
    }
    for i in 0..warmup {
        engine.classify(&data.image(i % data.len()))?;
    }
    let mut entries = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let image = data.image(i);
        let start = Instant::now();
        let predicted = engine.classify(&image)?;
        let elapsed = start.elapsed().as_nanos().max(1) as f64 / 1e6;
        entries.push(RunEntry {
            index: i,
            latency_ms: elapsed,
            predicted,
            truth: data.labels[i],
        });
    }
    Ok(RunLog {
        engine: engine.tag(),
        note: TIMING_NOTE.to_string(),
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub num_classified: usize,
    pub correct_classified: usize,
    pub test_metric: f64,
    pub accuracy_on_classified: f64,
    /// Test metric per millisecond of `max(total inference, wall)`.
    pub accuracy_per_time: f64,
    pub avg_latency_ms: f64,
    pub total_inference_ms: f64,
    pub budget_ms_per_image: f64,
    pub wall_time_ms: f64,
}

impl ScoreReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Scores a log: images count only while the running latency total stays
/// within `budget * N`.
pub fn compute_score(log: &RunLog, budget_ms_per_image: f64) -> Result<ScoreReport> {
    if log.entries.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty run log".into()));
    }
    if !(budget_ms_per_image.is_finite() && budget_ms_per_image > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "budget must be positive, got {budget_ms_per_image}"
        )));
    }
    log.validate()?;
    let n = log.entries.len();
    let wall = budget_ms_per_image * n as f64;
    // relative slack absorbs rounding in the running sum
    let limit = wall * (1.0 + 1e-12);
    let mut elapsed = 0.0;
    let mut classified = 0;
    let mut correct = 0;
    for e in &log.entries {
        if elapsed + e.latency_ms > limit {
            break;
        }
        elapsed += e.latency_ms;
        classified += 1;
        correct += usize::from(e.predicted == e.truth);
    }
    let total: f64 = log.entries.iter().map(|e| e.latency_ms).sum();
    let test_metric = correct as f64 / n as f64;
    Ok(ScoreReport {
        n,
        num_classified: classified,
        correct_classified: correct,
        test_metric,
        accuracy_on_classified: if classified == 0 {
            0.0
        } else {
            correct as f64 / classified as f64
        },
        accuracy_per_time: test_metric / total.max(wall),
        avg_latency_ms: total / n as f64,
        total_inference_ms: total,
        budget_ms_per_image,
        wall_time_ms: wall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn log_of(latencies: &[f64], correct: &[bool]) -> RunLog {
        RunLog {
            engine: EngineTag::Float,
            note: "test".into(),
            entries: latencies
                .iter()
                .zip(correct)
                .enumerate()
                .map(|(i, (&l, &ok))| RunEntry {
                    index: i,
                    latency_ms: l,
                    predicted: if ok { 1 } else { 0 },
                    truth: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn slow_runs_lose_the_tail() {
        let correct: Vec<bool> = (0..11).map(|i| i % 3 != 0).collect();
        let s = compute_score(&log_of(&[60.0; 11], &correct), 30.0).unwrap();
        assert_eq!(s.num_classified, 5);
        // first five: indices 1, 2, 4 correct
        assert_eq!(s.correct_classified, 3);
        assert_eq!(s.test_metric, 3.0 / 11.0);
        assert_eq!(s.accuracy_on_classified, 3.0 / 5.0);
        assert_eq!(s.accuracy_per_time, (3.0 / 11.0) / 660.0);
    }

    #[test]
    fn fast_runs_are_plain_accuracy() {
        let s = compute_score(&log_of(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, true]), 30.0).unwrap();
        assert_eq!(s.num_classified, 4);
        assert_eq!(s.test_metric, 0.75);
        assert_eq!(s.accuracy_per_time, 0.75 / 120.0);
        assert_eq!(s.avg_latency_ms, 2.5);
    }

    #[test]
    fn rejects_bad_logs() {
        assert!(compute_score(&log_of(&[], &[]), 30.0).is_err());
        assert!(compute_score(&log_of(&[0.0], &[true]), 30.0).is_err());
        assert!(compute_score(&log_of(&[1.0], &[true]), 0.0).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let log = log_of(&[0.1, 1.0 / 3.0, 27.123456789], &[true, false, true]);
        let text = log.to_csv();
        assert!(text.contains("\nindex,latency_ms,predicted,truth\n"));
        let back = RunLog::parse_csv(&text, Path::new("mem")).unwrap();
        assert_eq!(back, log);
        let bad = text.replace("index,", "idx,");
        assert!(RunLog::parse_csv(&bad, Path::new("mem")).is_err());
        let negative = text.replace("0.1,", "-0.1,");
        assert!(RunLog::parse_csv(&negative, Path::new("mem")).is_err());
    }

    proptest! {
        #[test]
        fn score_invariants(
            rows in prop::collection::vec((0.01f64..100.0, any::<bool>()), 1..200),
            budget in 1.0f64..60.0,
        ) {
            let (lat, ok): (Vec<f64>, Vec<bool>) = rows.into_iter().unzip();
            let s = compute_score(&log_of(&lat, &ok), budget).unwrap();
            prop_assert!(s.num_classified <= s.n);
            prop_assert!(0.0 <= s.test_metric);
            prop_assert!(s.test_metric <= s.accuracy_on_classified + 1e-15);
            prop_assert!(s.accuracy_on_classified <= 1.0);
            let rebuilt = s.accuracy_on_classified * s.num_classified as f64 / s.n as f64;
            prop_assert!((rebuilt - s.test_metric).abs() <= 1e-15);
            if lat.iter().all(|&l| l <= budget) {
                prop_assert_eq!(s.num_classified, s.n);
            }
        }
    }
}
