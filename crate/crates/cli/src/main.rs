//! `qfsep` command-line harness.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qfsep::bench::{compute_score, measure_latency, Engine, EngineTag, RunLog};
use qfsep::calib::{
    build_quantized_graph, collect_stats, load_quantized, load_stats, save_quantized, save_stats,
};
use qfsep::config::PipelineConfig;
use qfsep::data::{generate, load_split, save_splits, GenSpec, Split};
use qfsep::diagnostics::{bn_alpha, layer_degradation, write_alpha_csv, write_sqnr_csv, DiagnosticsReport};
use qfsep::float_engine::evaluate;
use qfsep::int8::{evaluate_quantized, RequantMode};
use qfsep::model::io::{load_graph, save_graph};
use qfsep::model::{build_baseline_mini, build_friendly_mini, ArchSpec};
use qfsep::pipeline::run_pipeline;
use qfsep::train::{init_weights, train, write_history_csv, TrainConfig};
use qfsep::transforms::{fold_batchnorm, inject_dead_channels, make_friendly};
use qfsep::{Error, Exec, Result};

/// Environment variable naming the default output root of `pipeline`.
const OUT_ROOT_ENV: &str = "QFSEP_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "qfsep",
    version,
    about = "Quantization-friendly separable convolution toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural train/val/holdout splits.
    GenData(GenDataArgs),
    /// Initialize and train a mini network.
    Train(TrainArgs),
    /// Rewrite a float model.
    Transform(TransformArgs),
    /// Collect calibration statistics of a folded model.
    Calibrate(CalibrateArgs),
    /// Build the 8-bit model from a folded model and its statistics.
    Quantize(QuantizeArgs),
    /// Top-1 accuracy of a float or quantized model.
    Eval(EvalArgs),
    /// Batch-norm scale and float-versus-int8 degradation reports.
    Diagnose(DiagnoseArgs),
    /// Per-image latency run log.
    Bench(BenchArgs),
    /// Wall-time score of a run log.
    Score(ScoreArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    val: usize,
    #[arg(long, default_value_t = 1000)]
    holdout: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Baseline,
    Friendly,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    arch: Arch,
    /// Dataset directory from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Model path (writes `<out>.json` and `<out>.bin`).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformOp {
    FoldBn,
    MakeFriendly,
    InjectDead,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    op: TransformOp,
    /// Comma-separated channels for `inject-dead`.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<usize>,
    /// Depthwise layer index for `inject-dead`.
    #[arg(long, default_value_t = 1)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    per_class: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Float,
    Fixed,
}

impl From<Mode> for RequantMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Float => RequantMode::FloatMultiplier,
            Mode::Fixed => RequantMode::FixedMultiplier,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Holdout,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Holdout => Split::Holdout,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Treat the model as a quantized artifact.
    #[arg(long)]
    quantized: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "float")]
    mode: Mode,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Float model before folding.
    #[arg(long)]
    model: PathBuf,
    /// Quantized model built from the folded float model.
    #[arg(long, requires = "data")]
    quantized: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    probe_per_class: usize,
    #[arg(long, value_enum, default_value = "float")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
    /// Directory for the plot-ready CSV files.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_engine)]
    engine: EngineTag,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "holdout")]
    split: SplitArg,
    #[arg(long, default_value_t = qfsep::bench::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, value_enum, default_value = "float")]
    mode: Mode,
    #[arg(long)]
    log: PathBuf,
}

fn parse_engine(s: &str) -> std::result::Result<EngineTag, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = qfsep::bench::DEFAULT_BUDGET_MS)]
    budget_ms: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Configuration file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn arch_for(data: &qfsep::data::Dataset) -> ArchSpec {
    ArchSpec {
        input_size: data.images.shape().h(),
        input_channels: data.images.shape().c(),
        classes: data.classes,
        ..ArchSpec::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let spec = GenSpec {
                seed: a.seed,
                classes: a.classes,
                image_size: a.size,
                train: a.train,
                val: a.val,
                holdout: a.holdout,
                noise: a.noise,
            };
            let (t, v, h) = generate(&spec)?;
            fs::create_dir_all(&a.out).map_err(|e| Error::Io {
                path: a.out.clone(),
                source: e,
            })?;
            save_splits(&a.out, [&t, &v, &h])?;
        }
        Command::Train(a) => {
            let data = load_split(&a.data, Split::Train)?;
            let val = load_split(&a.data, Split::Val).ok();
            let spec = arch_for(&data);
            let g = match a.arch {
                Arch::Baseline => build_baseline_mini(&spec)?,
                Arch::Friendly => build_friendly_mini(&spec)?,
            };
            let cfg = TrainConfig {
                learning_rate: a.lr,
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: qfsep::seed::derive(a.seed, "shuffle"),
                ..TrainConfig::default()
            };
            let g = init_weights(&g, qfsep::seed::derive(a.seed, "init"))?;
            let (g, history) = train(&g, &data, val.as_ref(), &cfg)?;
            save_graph(&g, &a.out)?;
            if let Some(p) = a.history {
                write_history_csv(&p, &history)?;
            }
        }
        Command::Transform(a) => {
            let g = load_graph(&a.model)?;
            let out = match a.op {
                TransformOp::FoldBn => fold_batchnorm(&g)?.0,
                TransformOp::MakeFriendly => make_friendly(&g)?,
                TransformOp::InjectDead => inject_dead_channels(&g, a.layer, &a.channels)?,
            };
            save_graph(&out, &a.out)?;
        }
        Command::Calibrate(a) => {
            let g = load_graph(&a.model)?;
            let calib = load_split(&a.data, Split::Train)?.per_class(a.per_class)?;
            save_stats(&collect_stats(&g, &calib, Exec::default())?, &a.out)?;
        }
        Command::Quantize(a) => {
            let g = load_graph(&a.model)?;
            let qg = build_quantized_graph(&g, &load_stats(&a.stats)?)?;
            qg.validate()?;
            save_quantized(&qg, &a.out)?;
        }
        Command::Eval(a) => {
            let data = load_split(&a.data, a.split.into())?;
            let acc = if a.quantized {
                evaluate_quantized(&load_quantized(&a.model)?, &data, a.mode.into(), Exec::default())?
            } else {
                evaluate(&load_graph(&a.model)?, &data, Exec::default())?
            };
            print_json(&serde_json::json!({ "images": data.len(), "top1": acc }));
        }
        Command::Diagnose(a) => diagnose(a)?,
        Command::Bench(a) => {
            let data = load_split(&a.data, a.split.into())?;
            let log = match a.engine {
                EngineTag::Float => measure_latency(Engine::Float(&load_graph(&a.model)?), &data, a.warmup)?,
                EngineTag::Int8 => {
                    let qg = load_quantized(&a.model)?;
                    measure_latency(Engine::Int8(&qg, a.mode.into()), &data, a.warmup)?
                }
            };
            log.save(&a.log)?;
        }
        Command::Score(a) => {
            let report = compute_score(&RunLog::load(&a.log)?, a.budget_ms)?;
            match a.out {
                Some(p) => report.save(&p)?,
                None => print_json(&serde_json::to_value(&report).expect("report")),
            }
        }
        Command::Pipeline(a) => {
            let cfg = pipeline_config(&a, std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))?;
            let summary = run_pipeline(&cfg, &mut |stage| eprintln!("[qfsep] {stage}"))?;
            print_json(&serde_json::json!({
                "summary": cfg.out_dir.join("summary.json"),
                "accuracy": summary.accuracy,
                "checks": summary.checks,
            }));
        }
    }
    Ok(())
}

/// Defaults, then the output-root variable, then the file, then flags.
fn pipeline_config(a: &PipelineArgs, out_root: Option<PathBuf>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(root) = out_root {
        cfg.out_dir = root;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.merge_text(&text, path)?;
    }
    for s in &a.sets {
        cfg.set(s)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let g = load_graph(&a.model)?;
    let alpha = bn_alpha(&g);
    let degradation = match (&a.quantized, &a.data) {
        (Some(q), Some(d)) => {
            let qg = load_quantized(q)?;
            let probe = load_split(d, Split::Val)?.per_class(a.probe_per_class)?;
            let (folded, _) = fold_batchnorm(&g)?;
            Some(layer_degradation(
                &folded,
                &qg,
                &probe,
                a.mode.into(),
                qfsep::diagnostics::DEFAULT_SQNR_THRESHOLD_DB,
                Exec::default(),
            )?)
        }
        _ => None,
    };
    if let Some(dir) = &a.csv {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for r in &alpha {
            write_alpha_csv(r, &dir.join(format!("alpha-layer{}.csv", r.layer)))?;
        }
        if let Some(d) = &degradation {
            write_sqnr_csv(d, &dir.join("sqnr.csv"))?;
        }
    }
    let name = a
        .model
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    DiagnosticsReport::new(&name, alpha, degradation).save(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(config: Option<PathBuf>, sets: &[&str], seed: Option<u64>, out: Option<&str>) -> PipelineArgs {
        PipelineArgs {
            config,
            sets: sets.iter().map(|s| s.to_string()).collect(),
            seed,
            out: out.map(PathBuf::from),
        }
    }

    #[test]
    fn precedence_is_defaults_env_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "seed = 5\n[train]\nepochs = 4\n").unwrap();
        let root = Some(dir.path().join("root"));

        let c = pipeline_config(&args(None, &[], None, None), root.clone()).unwrap();
        assert_eq!(c.out_dir, dir.path().join("root"));
        assert_eq!(c.seed, PipelineConfig::default().seed);

        let c = pipeline_config(&args(Some(file.clone()), &[], None, None), root.clone()).unwrap();
        assert_eq!((c.seed, c.train.epochs), (5, 4));
        assert_eq!(c.out_dir, dir.path().join("root"));

        let c = pipeline_config(&args(Some(file), &["train.epochs=9"], Some(6), Some("x")), root).unwrap();
        assert_eq!((c.seed, c.train.epochs), (6, 9));
        assert_eq!(c.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn missing_config_is_an_error() {
        let e = pipeline_config(
            &args(Some(PathBuf::from("/nonexistent/c.toml")), &[], None, None),
            None,
        );
        assert_eq!(e.unwrap_err().exit_code(), 2);
        let e = pipeline_config(&args(None, &["bogus=1"], None, None), None);
        assert_eq!(e.unwrap_err().exit_code(), 1);
    }
}
