//! Fixture builders shared by the integration targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use qfsep::bench::{EngineTag, RunEntry, RunLog};
use qfsep::calib::{build_quantized_graph, collect_stats, CalibrationRecord, QuantizedGraph};
use qfsep::data::{generate, Dataset, GenSpec};
use qfsep::diagnostics::{bn_alpha, layer_degradation, AlphaReport, DegradationReport};
use qfsep::int8::RequantMode;
use qfsep::model::{build_baseline_mini, ArchSpec, BlockSpec, Graph, LayerSpec};
use qfsep::train::init_weights;
use qfsep::transforms::{fold_batchnorm, inject_dead_channels};
use qfsep::Exec;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn tiny_spec() -> ArchSpec {
    ArchSpec {
        input_size: 8,
        input_channels: 1,
        classes: 4,
        stem_channels: 4,
        stem_stride: 2,
        blocks: vec![BlockSpec {
            channels: 6,
            stride: 1,
        }],
        bn_epsilon: 1e-3,
    }
}

pub fn tiny_data() -> (Dataset, Dataset, Dataset) {
    generate(&GenSpec {
        seed: 11,
        classes: 4,
        image_size: 8,
        train: 16,
        val: 8,
        holdout: 4,
        noise: 0.1,
    })
    .expect("tiny data")
}

/// Untrained baseline with fixed, non-trivial batch-norm statistics.
pub fn tiny_model() -> Graph {
    let mut g = init_weights(&build_baseline_mini(&tiny_spec()).unwrap(), 7).unwrap();
    let mut k = 0.0f32;
    for layer in &mut g.layers {
        if let LayerSpec::BatchNorm(bn) = layer {
            for c in 0..bn.channels() {
                k += 1.0;
                bn.gamma[c] = 0.75 + 0.0625 * (k % 5.0);
                bn.beta[c] = 0.125 * (k % 3.0) - 0.125;
                bn.mean[c] = 0.03125 * (k % 7.0);
                bn.variance[c] = 0.5 + 0.25 * (k % 4.0);
            }
        }
    }
    g
}

pub fn tiny_injected() -> Graph {
    inject_dead_channels(&tiny_model(), 1, &[3]).unwrap()
}

pub fn tiny_stats() -> (Graph, CalibrationRecord) {
    let (folded, _) = fold_batchnorm(&tiny_model()).unwrap();
    let calib = tiny_data().0.per_class(2).unwrap();
    let rec = collect_stats(&folded, &calib, Exec::Sequential).unwrap();
    (folded, rec)
}

pub fn tiny_quantized() -> QuantizedGraph {
    let (folded, rec) = tiny_stats();
    build_quantized_graph(&folded, &rec).unwrap()
}

/// Alpha report of the batch norm after the injected depthwise layer.
pub fn tiny_injected_alpha() -> AlphaReport {
    bn_alpha(&tiny_injected())
        .into_iter()
        .find(|a| a.layer == 2)
        .expect("batch norm after layer 1")
}

pub fn tiny_degradation() -> DegradationReport {
    let (folded, _) = tiny_stats();
    let probe = tiny_data().1;
    layer_degradation(
        &folded,
        &tiny_quantized(),
        &probe,
        RequantMode::FixedMultiplier,
        10.0,
        Exec::Sequential,
    )
    .unwrap()
}

pub fn tiny_run_log() -> RunLog {
    RunLog {
        engine: EngineTag::Int8,
        note: "fixture".into(),
        entries: (0..6)
            .map(|i| RunEntry {
                index: i,
                latency_ms: 12.5 + 10.25 * i as f64,
                predicted: i % 3,
                truth: i % 2,
            })
            .collect(),
    }
}
