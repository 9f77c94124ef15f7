//! Subcommand implementations.

use crate::manifest::{resolve_seed, sibling_manifest, RunTimer};
use anyhow::{bail, Context, Result};
use clap::Args;
use powq_core::model::{
    evaluate, load_bundle, load_model, make_blobs, save_bundle, save_model, train_fixture,
    Dataset, FixtureSpec, QuantPolicy,
};
use powq_core::optim::{optimize_model, BetaSchedule, Mode, OptConfig};
use powq_core::quant::{fake_quantize, generate_levels, LevelFormat, QuantConfig};
use powq_core::search::{powerquant_datafree, SearchConfig};
use powq_core::tensor::Granularity;
use serde::Serialize;
use serde_json::json;
use std::io::Write;
use std::path::PathBuf;

fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().context("bad hidden layer size"))
        .collect()
}

fn parse_level_format(s: &str) -> Result<LevelFormat> {
    if s == "uniform" {
        return Ok(LevelFormat::Uniform);
    }
    if s == "log2" {
        return Ok(LevelFormat::Log2);
    }
    if s == "fp4-e2m1" {
        return Ok(LevelFormat::Fp4E2m1);
    }
    if let Some(a) = s.strip_prefix("power:") {
        return Ok(LevelFormat::Power(a.parse().context("bad power exponent")?));
    }
    bail!("unknown level format {s:?} (expected uniform, power:A, log2, fp4-e2m1)")
}

#[derive(Args, Serialize)]
pub struct FixtureArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Training samples (the calibration split is its first 1024 rows)
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    dims: usize,
    /// Hidden layer sizes, comma separated
    #[arg(long, default_value = "32,16")]
    hidden: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Pairwise class-mean separation in noise standard deviations
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 2048)]
    test_samples: usize,
}

pub fn run_fixture(args: FixtureArgs) -> Result<String> {
    let timer = RunTimer::start();
    let seed = resolve_seed(args.seed);
    let hidden = parse_hidden(&args.hidden)?;
    std::fs::create_dir_all(&args.out)?;

    let total = args.samples + args.test_samples;
    let all = make_blobs(args.classes, total, args.dims, args.separation, seed)?;
    let (train, test) = all.split(args.samples)?;
    let calib_n = 1024.min(train.len() - 1).max(1);
    let (calib, _) = train.split(calib_n)?;

    let spec = FixtureSpec {
        name: format!("fixture-seed{seed}"),
        input_dim: args.dims,
        hidden,
        num_classes: args.classes,
    };
    let model = train_fixture(&spec, &train, args.epochs, seed)?;
    let train_acc = evaluate(&model, &train, None)?;
    let test_acc = evaluate(&model, &test, None)?;

    let model_path = args.out.join("model.json");
    save_model(&model, &model_path)?;
    let train_path = args.out.join("train.csv");
    let calib_path = args.out.join("calib.csv");
    let test_path = args.out.join("test.csv");
    train.to_csv(&train_path)?;
    calib.to_csv(&calib_path)?;
    test.to_csv(&test_path)?;

    let outputs = vec![
        model_path.clone(),
        args.out.join("model.bin"),
        train_path,
        calib_path,
        test_path,
    ];
    timer.write_manifest("fixture", &args, seed, &outputs, &args.out.join("manifest.json"))?;
    Ok(format!(
        "fixture: {} layers to {} (train acc {train_acc:.3}, test acc {test_acc:.3})",
        model.num_layers(),
        args.out.display()
    ))
}

#[derive(Args, Serialize)]
pub struct SearchArgs {
    /// Model manifest path
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    /// Reconstruction-error norm order (1 or 2)
    #[arg(long, default_value_t = 2)]
    p: u8,
    /// Output bundle directory
    #[arg(long)]
    out: PathBuf,
    /// Optional calibration CSV; freezes activation scales into the bundle
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run_search(args: SearchArgs) -> Result<String> {
    let timer = RunTimer::start();
    let seed = resolve_seed(args.seed);
    let model = load_model(&args.model)?;
    let cfg = SearchConfig {
        bits: args.bits,
        norm: args.p,
        ..SearchConfig::default()
    };
    let (mut quantized, result) = powerquant_datafree(&model, &cfg)?;
    if let Some(calib_path) = &args.calib {
        let calib = Dataset::from_csv(calib_path)?;
        quantized.calibrate(calib.features())?;
    }

    std::fs::create_dir_all(&args.out)?;
    let mut outputs = save_bundle(&quantized, &args.out)?;
    let trace_path = args.out.join("trace.json");
    std::fs::write(&trace_path, serde_json::to_vec_pretty(&result.trace)?)?;
    outputs.push(trace_path);
    timer.write_manifest("search", &args, seed, &outputs, &args.out.join("manifest.json"))?;
    Ok(format!(
        "search: a*={:.4} error={:.6} ({} evaluations) -> {}",
        result.a,
        result.error,
        result.evaluations,
        args.out.display()
    ))
}

#[derive(Args, Serialize)]
pub struct OptimizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration CSV (its first --calib-samples rows are used)
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 4)]
    wbits: u8,
    #[arg(long, default_value_t = 4)]
    abits: u8,
    /// What to learn: w, a, wa, or adaround (baseline)
    #[arg(long, default_value = "wa")]
    mode: String,
    /// Soft-quantization steepness schedule: adaround, const:C or power:C
    #[arg(long, default_value = "const:20")]
    scheduler: String,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Initial power exponent for every layer
    #[arg(long, default_value_t = 0.5)]
    init_a: f64,
    #[arg(long, default_value_t = 1024)]
    calib_samples: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

pub fn run_optimize(args: OptimizeArgs) -> Result<String> {
    let timer = RunTimer::start();
    let seed = resolve_seed(args.seed);
    let model = load_model(&args.model)?;
    let calib = Dataset::from_csv(&args.calib)?;
    let mode = Mode::parse(&args.mode)?;
    let schedule = BetaSchedule::parse(&args.scheduler)?;
    let policy = QuantPolicy::power(model.num_layers(), args.wbits, args.abits, args.init_a, true)?;
    let cfg = OptConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        calib_samples: args.calib_samples,
        mode,
        dsq_schedule: schedule,
        seed,
        ..OptConfig::default()
    };
    let (quantized, reports) = optimize_model(&model, &policy, calib.features(), &cfg)?;

    std::fs::create_dir_all(&args.out)?;
    let mut outputs = save_bundle(&quantized, &args.out)?;
    let report_path = args.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&reports)?)?;
    outputs.push(report_path);
    timer.write_manifest("optimize", &args, seed, &outputs, &args.out.join("manifest.json"))?;

    let total_secs: f64 = reports.iter().map(|r| r.seconds).sum();
    let worst_ratio = reports
        .iter()
        .map(|r| {
            if r.initial_loss > 0.0 {
                r.final_loss / r.initial_loss
            } else {
                1.0
            }
        })
        .fold(0.0f64, f64::max);
    Ok(format!(
        "optimize: {} layers, mode {}, scheduler {}, worst loss ratio {:.3}, {:.1}s -> {}",
        reports.len(),
        mode.as_str(),
        schedule,
        worst_ratio,
        total_secs,
        args.out.display()
    ))
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Quantized bundle directory; full-precision evaluation when absent
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// Output JSON path
    #[arg(long)]
    out: PathBuf,
    /// Optional calibration CSV to freeze missing activation scales
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run_eval(args: EvalArgs) -> Result<String> {
    let timer = RunTimer::start();
    let seed = resolve_seed(args.seed);
    let model = load_model(&args.model)?;
    let data = Dataset::from_csv(&args.data)?;

    let (accuracy, policy_desc) = match &args.bundle {
        None => (evaluate(&model, &data, None)?, "fp32".to_string()),
        Some(dir) => {
            let mut qm = load_bundle(dir, &model)?;
            if !qm.is_calibrated() {
                if let Some(calib_path) = &args.calib {
                    let calib = Dataset::from_csv(calib_path)?;
                    qm.calibrate(calib.features())?;
                }
            }
            let desc = qm
                .layers
                .iter()
                .zip(&qm.act)
                .map(|(l, a)| format!("W{}A{}(a={:.3})", l.weight.bits(), a.bits, l.weight.exponent()))
                .collect::<Vec<_>>()
                .join(",");
            (qm.evaluate(&data)?, desc)
        }
    };

    let payload = json!({
        "accuracy": accuracy,
        "num_samples": data.len(),
        "policy": policy_desc,
    });
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, serde_json::to_vec_pretty(&payload)?)?;
    let outputs = vec![args.out.clone()];
    timer.write_manifest("eval", &args, seed, &outputs, &sibling_manifest(&args.out))?;
    Ok(format!(
        "eval: accuracy {accuracy:.4} on {} samples ({policy_desc})",
        data.len()
    ))
}

#[derive(Args, Serialize)]
pub struct LevelsArgs {
    /// uniform, power:A, log2 or fp4-e2m1
    #[arg(long)]
    format: String,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    /// Output CSV path (one level per row)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run_levels(args: LevelsArgs) -> Result<String> {
    let timer = RunTimer::start();
    let seed = resolve_seed(args.seed);
    let format = parse_level_format(&args.format)?;
    let levels = generate_levels(format, args.bits)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    for v in &levels {
        writeln!(f, "{v}")?;
    }
    f.flush()?;
    drop(f);
    let outputs = vec![args.out.clone()];
    timer.write_manifest("levels", &args, seed, &outputs, &sibling_manifest(&args.out))?;
    Ok(format!(
        "levels: {} {} levels at {} bits -> {}",
        levels.len(),
        format,
        args.bits,
        args.out.display()
    ))
}

#[derive(Args, Serialize)]
pub struct ErrorHistArgs {
    #[arg(long)]
    model: PathBuf,
    /// Power exponent of the quantizer
    #[arg(long, default_value_t = 0.5)]
    a: f64,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    /// Output CSV path: layer,index,weight,error per row
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run_error_hist(args: ErrorHistArgs) -> Result<String> {
    let timer = RunTimer::start();
    let seed = resolve_seed(args.seed);
    let model = load_model(&args.model)?;
    let cfg = QuantConfig::new(args.bits, args.a, Granularity::PerTensor)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    let mut rows = 0usize;
    for (l, layer) in model.layers.iter().enumerate() {
        let fq = fake_quantize(&layer.weights, &cfg)?;
        for (i, (&w, &q)) in layer.weights.data().iter().zip(fq.data()).enumerate() {
            writeln!(f, "{l},{i},{w},{}", w - q)?;
            rows += 1;
        }
    }
    f.flush()?;
    drop(f);
    let outputs = vec![args.out.clone()];
    timer.write_manifest("error-hist", &args, seed, &outputs, &sibling_manifest(&args.out))?;
    Ok(format!(
        "error-hist: {rows} weights at {} bits, a={} -> {}",
        args.bits,
        args.a,
        args.out.display()
    ))
}
