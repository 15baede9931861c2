//! Calibration statistics, clip search, and quantized-graph construction.

mod qgraph;
mod search;
mod stats;

pub use qgraph::{
    build_quantized_graph, load_quantized, save_quantized, QConv, QDense, QLayer, QOp, QuantizedGraph,
    ACCUMULATOR_LIMIT,
};
pub use search::{
    brute_force_qparams, brute_force_search, greedy_search, greedy_search_qparams, loss_for_clip, ClipLoss,
    SearchResult, CLIP_STEPS,
};
pub use stats::{
    activation_ids, collect_stats, decode_stats, encode_stats, load_stats, save_stats, CalibrationRecord,
    RangeStats, TensorId, TensorStats, HIST_BINS, STATS_VERSION,
};
