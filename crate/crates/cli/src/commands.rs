use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{ArgGroup, Args, ValueEnum};
use serde::Serialize;

use pmrn::analyzer::{self, MacsMode, Resolution};
use pmrn::data::{self, DegradationSpec, Image};
use pmrn::gradcheck::{self, GradCheckOptions, GradCheckReport};
use pmrn::metrics::format_db;
use pmrn::nn::InitSpec;
use pmrn::trainer::{self, Checkpoint, Dataset, EvalPair, EvalRecord, Trainer, DESK_INIT_GAIN};
use pmrn::weights;
use pmrn::{MultiScale, ParamStore, PmrnConfig, PmrnModel};

use crate::config::{
    sidecar_for_file, AnalysisOptions, ConfigFile, DegradationArg, MetricOptions, ModelArgs, RunConfig, TrainArgs,
    SIDECAR_NAME,
};
use crate::Failure;

fn validation(msg: impl Into<String>) -> anyhow::Error {
    Failure::Validation(msg.into()).into()
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn resolve_model(defaults: PmrnConfig, file: &ConfigFile, flags: &ModelArgs) -> anyhow::Result<PmrnConfig> {
    let cfg = flags.apply(file.model.apply(defaults));
    cfg.validate()?;
    Ok(cfg)
}

/// PNG and PPM files in `dir`, sorted by name.
fn list_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(validation(format!("no PNG/PPM images in {}", dir.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads the architecture from a weights file, applies config-file and flag
/// overrides, and loads the weights against that architecture. Any override
/// that disagrees with the file is reported as a mismatch.
fn load_model(path: &Path, file: &ConfigFile, flags: &ModelArgs) -> anyhow::Result<(PmrnModel, ParamStore)> {
    let container = weights::read_container(path)?;
    let stored: PmrnConfig = serde_json::from_value(container.config)
        .map_err(|e| validation(format!("{}: unreadable model config: {e}", path.display())))?;
    let expected = flags.apply(file.model.apply(stored));
    let mut template = ParamStore::new();
    let model = PmrnModel::new(expected, &mut template)?;
    let store = weights::load_weights_checked(path, &expected, &template)?;
    Ok((model, store))
}

// ---------------------------------------------------------------- analyze

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output resolution the MACs are evaluated for
    #[arg(long, value_name = "WxH")]
    resolution: Option<String>,
    /// Also count bias, activation, residual and gating element operations
    #[arg(long)]
    macs_include_elementwise: bool,
    /// Print one row per convolution
    #[arg(long)]
    per_layer: bool,
    /// Compare the combinations and large-kernels variants of this config
    #[arg(long)]
    compare: bool,
    /// Fail with exit code 2 unless a total matches: params=N, macs=N[G],
    /// ensemble-macs=N[G] or rf=N
    #[arg(long, value_name = "KEY=VALUE")]
    expect: Vec<String>,
    /// Relative tolerance for MACs expectations
    #[arg(long, default_value_t = 0.005)]
    expect_tolerance: f64,
    /// Directory for report.txt, layers.csv and report.json
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_count(v: &str) -> Option<u64> {
    let v = v.replace([',', '_'], "");
    if let Some(g) = v.strip_suffix(['G', 'g']) {
        let x: f64 = g.parse().ok()?;
        return (x >= 0.0).then(|| (x * 1e9).round() as u64);
    }
    if let Some(k) = v.strip_suffix(['K', 'k']) {
        let x: f64 = k.parse().ok()?;
        return (x >= 0.0).then(|| (x * 1e3).round() as u64);
    }
    v.parse().ok()
}

fn check_expectations(args: &AnalyzeArgs, report: &analyzer::AnalysisReport) -> anyhow::Result<()> {
    let mut failures = Vec::new();
    for e in &args.expect {
        let (key, value) = e
            .split_once('=')
            .ok_or_else(|| usage(format!("--expect takes KEY=VALUE, got `{e}`")))?;
        let want = parse_count(value).ok_or_else(|| usage(format!("--expect {key}: cannot parse `{value}`")))?;
        let (got, exact) = match key {
            "params" => (report.total_params, true),
            "rf" => (report.model_receptive_field, true),
            "macs" => (report.total_macs, false),
            "ensemble-macs" => (report.ensemble_macs, false),
            _ => return Err(usage(format!("--expect: unknown key `{key}`"))),
        };
        let ok = if exact {
            got == want
        } else {
            (got as f64 - want as f64).abs() <= args.expect_tolerance * want as f64
        };
        if ok {
            log::info!("expectation {key}={value} met ({got})");
        } else {
            failures.push(format!("{key}: expected {value}, got {}", analyzer::format_count(got)));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(validation(format!("expectation failed: {}", failures.join("; "))))
    }
}

pub fn analyze(args: &AnalyzeArgs, file: &ConfigFile) -> anyhow::Result<()> {
    let cfg = resolve_model(PmrnConfig::default(), file, &args.model)?;
    let res_text = args
        .resolution
        .clone()
        .or_else(|| file.analysis.resolution.clone())
        .unwrap_or_else(|| "1280x720".into());
    let res = Resolution::parse(&res_text).ok_or_else(|| usage(format!("invalid resolution `{res_text}`")))?;
    let include = args.macs_include_elementwise || file.analysis.include_elementwise.unwrap_or(false);
    let mode = if include {
        MacsMode::IncludeElementwise
    } else {
        MacsMode::ConvOnly
    };
    let mut rc = RunConfig::new("analyze", 0, cfg);
    rc.analysis = Some(AnalysisOptions {
        resolution: res_text,
        include_elementwise: include,
    });
    if let Some(out) = &args.out {
        rc.path("out", out);
        create_dir(out)?;
    }
    rc.record(args.out.as_ref().map(|o| o.join(SIDECAR_NAME)).as_deref())?;

    let report = analyzer::analyze(&cfg, res, mode)?;
    let mut text = analyzer::render_table(&report, args.per_layer);
    let mut json = serde_json::to_value(&report)?;
    if args.compare {
        let a = PmrnConfig {
            multiscale: MultiScale::Combinations,
            ..cfg
        };
        let b = PmrnConfig {
            multiscale: MultiScale::LargeKernels,
            ..cfg
        };
        let cmp = analyzer::compare_variants(&a, &b, res, mode)?;
        text.push('\n');
        text.push_str(&analyzer::render_comparison(&cmp));
        json = serde_json::to_value(&cmp)?;
    }
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(&out.join("report.txt"), &text)?;
        write_text(&out.join("layers.csv"), &analyzer::render_csv(&report))?;
        write_text(&out.join("report.json"), &serde_json::to_string_pretty(&json)?)?;
    }
    check_expectations(args, &report)
}

// ---------------------------------------------------------------- train

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum SyntheticKind {
    /// Dense grey strokes with hard edges
    LineArt,
    /// Colourful shapes, stripes and gradients
    Scene,
}

#[derive(Args, Debug)]
pub struct TrainCmdArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Start from the desk-scale preset (c=16, K=2, S=9, x2, 200 steps)
    #[arg(long)]
    desk: bool,
    /// Directory of HR training images
    #[arg(long, conflicts_with = "synthetic")]
    hr_dir: Option<PathBuf>,
    /// Train on N generated images instead of a directory
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Generator used for synthetic training and held-out images
    #[arg(long, value_enum, default_value = "line-art")]
    synthetic_kind: SyntheticKind,
    /// Side length of generated images
    #[arg(long, default_value_t = 96)]
    synthetic_size: usize,
    /// Directory of held-out HR images
    #[arg(long, conflicts_with = "val_synthetic")]
    val_dir: Option<PathBuf>,
    /// Hold out N generated images
    #[arg(long, value_name = "N")]
    val_synthetic: Option<usize>,
    /// How LR inputs are produced from HR images
    #[arg(long, value_enum)]
    degradation: Option<DegradationArg>,
    /// Weight initialization gain
    #[arg(long)]
    init_gain: Option<f64>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Receives checkpoint.pmrn, weights.pmrn, history.csv and the run config
    #[arg(long)]
    out_dir: PathBuf,
}

/// Seed offset separating generated validation images from training images.
const VAL_SEED_OFFSET: u64 = 1000;

fn generate(kind: SyntheticKind, size: usize, seed: u64) -> Image {
    match kind {
        SyntheticKind::LineArt => pmrn::synthetic::line_art(size, size, seed),
        SyntheticKind::Scene => pmrn::synthetic::scene(size, size, seed),
    }
}

fn read_images(dir: &Path) -> anyhow::Result<Vec<(String, Image)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| Ok((stem(&p), data::read_image(&p)?)))
        .collect()
}

pub fn train(args: &TrainCmdArgs, file: &ConfigFile, seed: u64) -> anyhow::Result<()> {
    let (model_defaults, train_defaults, gain_default) = if args.desk {
        (PmrnConfig::desk(), trainer::TrainConfig::desk(), DESK_INIT_GAIN)
    } else {
        (PmrnConfig::default(), trainer::TrainConfig::default(), 1.0)
    };
    let mut tcfg = args.train.apply(file.train.apply(train_defaults));
    tcfg.seed = seed;
    tcfg.validate()?;
    let gain = args.init_gain.unwrap_or(gain_default);

    let mut trainer_state = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if !args.model.is_empty() || !file.model.is_empty() {
                let wanted = args.model.apply(file.model.apply(ckpt.model_config));
                if let Some(diff) = weights::config_difference(
                    &serde_json::to_value(ckpt.model_config)?,
                    &serde_json::to_value(wanted)?,
                ) {
                    return Err(validation(format!("checkpoint {} mismatch: {diff}", path.display())));
                }
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            if let Some(units) = args.train.total_units {
                t.config.total_units = units;
            }
            t
        }
        None => {
            let cfg = resolve_model(model_defaults, file, &args.model)?;
            let init = InitSpec {
                gain,
                ..InitSpec::with_seed(seed)
            };
            let (model, params) = PmrnModel::initialized(cfg, &init)?;
            Trainer::new(model, params, tcfg)?
        }
    };
    let cfg = trainer_state.model.config;
    let degradation = args
        .degradation
        .or(file.metrics.degradation)
        .unwrap_or(DegradationArg::Bi);
    let spec = DegradationSpec {
        kind: degradation.into(),
        scale: cfg.upscale,
    };
    spec.validate()?;

    let synthetic = match (&args.hr_dir, args.synthetic) {
        (Some(_), _) => None,
        (None, Some(n)) => Some(n),
        (None, None) if args.desk => Some(8),
        (None, None) => return Err(usage("train needs --hr-dir or --synthetic N")),
    };
    let train_images: Vec<Image> = match (&args.hr_dir, synthetic) {
        (Some(dir), _) => read_images(dir)?.into_iter().map(|(_, i)| i).collect(),
        (None, Some(n)) => (0..n as u64)
            .map(|i| generate(args.synthetic_kind, args.synthetic_size, seed + i))
            .collect(),
        (None, None) => unreachable!(),
    };
    let val_images: Vec<(String, Image)> = match (&args.val_dir, args.val_synthetic) {
        (Some(dir), _) => read_images(dir)?,
        (None, n) => {
            let n = n.unwrap_or(if args.desk { 2 } else { 0 });
            (0..n as u64)
                .map(|j| {
                    let s = seed + VAL_SEED_OFFSET + j;
                    (format!("val{j}"), generate(args.synthetic_kind, args.synthetic_size, s))
                })
                .collect()
        }
    };
    let dataset = Dataset::from_images(&train_images, &spec)?;
    let val = val_images
        .iter()
        .map(|(name, img)| EvalPair::new(name.clone(), img, &spec))
        .collect::<pmrn::Result<Vec<_>>>()?;

    create_dir(&args.out_dir)?;
    let mut rc = RunConfig::new("train", seed, cfg);
    rc.train = Some(trainer_state.config.clone());
    rc.metrics = Some(MetricOptions {
        degradation,
        shave: cfg.upscale,
        ensemble: false,
    });
    rc.path("out_dir", &args.out_dir);
    if let Some(d) = &args.hr_dir {
        rc.path("hr_dir", d);
    }
    if let Some(d) = &args.val_dir {
        rc.path("val_dir", d);
    }
    if let Some(r) = &args.resume {
        rc.path("resume", r);
    }
    rc.record(Some(&args.out_dir.join(SIDECAR_NAME)))?;

    let ckpt_path = args.out_dir.join("checkpoint.pmrn");
    trainer_state.run(&dataset, &val, Some(&ckpt_path))?;
    weights::save_weights(&trainer_state.params, &cfg, &args.out_dir.join("weights.pmrn"))?;
    write_text(
        &args.out_dir.join("history.csv"),
        &trainer::history_csv(&trainer_state.history),
    )?;
    if let Some(last) = trainer_state.history.last() {
        println!("final unit {} train_loss {:.6}", last.unit, last.train_loss);
        if let Some(p) = last.val_psnr {
            let bicubic = trainer::mean_psnr(&trainer::evaluate_bicubic(&val, cfg.upscale)?);
            println!("held-out PSNR {} dB (bicubic {} dB)", format_db(p), format_db(bicubic));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- sr

#[derive(Args, Debug)]
pub struct SrArgs {
    /// Optional architecture flags; they must agree with the weights file
    #[command(flatten)]
    model: ModelArgs,
    /// Weights file written by `train`
    #[arg(long)]
    weights: PathBuf,
    /// LR input images (PNG or PPM)
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Receives `<stem>_x<r>.png` for each input
    #[arg(long)]
    out_dir: PathBuf,
    /// Average over the eight flips/rotations of each input
    #[arg(long)]
    ensemble: bool,
}

pub fn sr(args: &SrArgs, file: &ConfigFile, seed: u64) -> anyhow::Result<()> {
    let (model, store) = load_model(&args.weights, file, &args.model)?;
    let ensemble = args.ensemble || file.metrics.ensemble.unwrap_or(false);
    let r = model.config.upscale;
    create_dir(&args.out_dir)?;
    let mut rc = RunConfig::new("sr", seed, model.config);
    rc.metrics = Some(MetricOptions {
        degradation: DegradationArg::Bi,
        shave: r,
        ensemble,
    });
    rc.path("weights", &args.weights).path("out_dir", &args.out_dir);
    rc.record(Some(&args.out_dir.join(SIDECAR_NAME)))?;
    for input in &args.inputs {
        let lr = data::read_image(input)?;
        let out = trainer::super_resolve(&model, &store, &lr, ensemble)?;
        let path = args.out_dir.join(format!("{}_x{r}.png", stem(input)));
        data::write_image(&path, &out)?;
        println!("{} -> {} ({}x{})", input.display(), path.display(), out.width, out.height);
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Baseline {
    /// The HR image itself (sanity check)
    Identity,
    /// Bicubic upscaling of the degraded input
    Bicubic,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["weights", "baseline"])))]
pub struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory of HR reference images
    #[arg(long)]
    hr_dir: PathBuf,
    /// Score a trained model
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Score a non-learned upscaler instead of a model
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// How LR inputs are produced from HR images
    #[arg(long, value_enum)]
    degradation: Option<DegradationArg>,
    /// Average over the eight flips/rotations of each input
    #[arg(long)]
    ensemble: bool,
    /// CSV destination; printed to stdout either way
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("image,psnr,ssim\n");
    for r in records {
        let _ = writeln!(s, "{},{},{:.4}", r.name, format_db(r.psnr), r.ssim);
    }
    let n = records.len().max(1) as f64;
    let psnr = records.iter().map(|r| r.psnr).sum::<f64>() / n;
    let ssim = records.iter().map(|r| r.ssim).sum::<f64>() / n;
    let _ = writeln!(s, "mean,{},{:.4}", format_db(psnr), ssim);
    s
}

pub fn eval(args: &EvalArgs, file: &ConfigFile, seed: u64) -> anyhow::Result<()> {
    let loaded = match &args.weights {
        Some(w) => Some(load_model(w, file, &args.model)?),
        None => None,
    };
    let cfg = match &loaded {
        Some((m, _)) => m.config,
        None => resolve_model(PmrnConfig::default(), file, &args.model)?,
    };
    let r = cfg.upscale;
    let degradation = args
        .degradation
        .or(file.metrics.degradation)
        .unwrap_or(DegradationArg::Bi);
    let spec = DegradationSpec {
        kind: degradation.into(),
        scale: r,
    };
    spec.validate()?;
    let ensemble = args.ensemble || file.metrics.ensemble.unwrap_or(false);

    let mut rc = RunConfig::new("eval", seed, cfg);
    rc.metrics = Some(MetricOptions {
        degradation,
        shave: r,
        ensemble,
    });
    rc.path("hr_dir", &args.hr_dir);
    if let Some(w) = &args.weights {
        rc.path("weights", w);
    }
    if let Some(o) = &args.out {
        rc.path("out", o);
    }
    rc.record(args.out.as_deref().map(sidecar_for_file).as_deref())?;

    let mut records = Vec::new();
    for (name, hr) in read_images(&args.hr_dir)? {
        let pair = EvalPair::new(name, &hr, &spec)?;
        let pred = match (&loaded, args.baseline) {
            (Some((model, store)), _) => trainer::super_resolve(model, store, &pair.lr, ensemble)?,
            (None, Some(Baseline::Bicubic)) => data::bicubic_upscale(&pair.lr, r)?,
            (None, Some(Baseline::Identity)) => pair.hr.clone(),
            (None, None) => unreachable!("clap requires a source"),
        };
        records.push(trainer::score(&pair.name, &pred, &pair.hr, r)?);
    }
    let csv = eval_csv(&records);
    print!("{csv}");
    if let Some(out) = &args.out {
        write_text(out, &csv)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Side length of the random input image
    #[arg(long, default_value_t = 8)]
    size: usize,
    /// Central-difference step
    #[arg(long)]
    epsilon: Option<f64>,
    /// Largest accepted relative error
    #[arg(long)]
    tolerance: Option<f64>,
    /// Coordinates sampled per parameter tensor
    #[arg(long)]
    samples: Option<usize>,
    /// Check only the full model, not the individual ops
    #[arg(long)]
    model_only: bool,
    /// JSON report destination
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradcheckOutput {
    ops: Vec<(String, GradCheckReport)>,
    model: GradCheckReport,
    passed: bool,
}

pub fn gradcheck(args: &GradcheckArgs, file: &ConfigFile, seed: u64) -> anyhow::Result<()> {
    let defaults = PmrnConfig {
        max_scale: 5,
        blocks: 1,
        channels: 4,
        upscale: 2,
        ..PmrnConfig::default()
    };
    let cfg = resolve_model(defaults, file, &args.model)?;
    let base = GradCheckOptions::default();
    let opts = GradCheckOptions {
        epsilon: args.epsilon.unwrap_or(base.epsilon),
        tolerance: args.tolerance.unwrap_or(base.tolerance),
        samples_per_param: args.samples.unwrap_or(base.samples_per_param),
        seed,
    };
    let mut rc = RunConfig::new("gradcheck", seed, cfg);
    if let Some(o) = &args.out {
        rc.path("out", o);
    }
    rc.record(args.out.as_deref().map(sidecar_for_file).as_deref())?;

    let ops = if args.model_only {
        Vec::new()
    } else {
        gradcheck::check_ops(&opts)?
    };
    let model = gradcheck::check_model(&cfg, args.size, &opts)?;
    for (name, r) in &ops {
        println!("{:<24} max rel err {:.3e}  {}", name, r.max_rel_error, verdict(r.passed));
    }
    println!(
        "{:<24} max rel err {:.3e}  {}  ({} tensors)",
        "model",
        model.max_rel_error,
        verdict(model.passed),
        model.params.len()
    );
    let passed = model.passed && ops.iter().all(|(_, r)| r.passed);
    if let Some(out) = &args.out {
        let report = GradcheckOutput { ops, model, passed };
        write_text(out, &serde_json::to_string_pretty(&report)?)?;
    }
    if passed {
        Ok(())
    } else {
        Err(validation(format!("gradient check exceeded tolerance {:e}", opts.tolerance)))
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

// ---------------------------------------------------------------- dump-features

/// The architecture always comes from the weights file here: `--scale`
/// selects a feature scale, not the upscale factor.
#[derive(Args, Debug)]
pub struct DumpArgs {
    /// Weights file written by `train`
    #[arg(long)]
    weights: PathBuf,
    /// LR input image
    #[arg(long)]
    input: PathBuf,
    /// Receives one grey PNG per feature map
    #[arg(long)]
    out_dir: PathBuf,
    /// Only this block (1-based)
    #[arg(long)]
    block: Option<usize>,
    /// Only this scale (3, 5, ..., S)
    #[arg(long)]
    scale: Option<usize>,
}

/// Channel mean of a `(1, c, h, w)` map, min-max normalized to 8 bits.
pub fn feature_image(t: &pmrn::Tensor) -> (usize, usize, Vec<u8>) {
    let s = t.shape();
    let plane = s.h * s.w;
    let mean: Vec<f32> = (0..plane)
        .map(|i| (0..s.c).map(|c| t.data()[c * plane + i]).sum::<f32>() / s.c as f32)
        .collect();
    let lo = mean.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = mean.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let pixels = mean
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    (s.w, s.h, pixels)
}

pub fn dump_features(args: &DumpArgs, file: &ConfigFile, seed: u64) -> anyhow::Result<()> {
    let (model, store) = load_model(&args.weights, file, &ModelArgs::default())?;
    let cfg = model.config;
    if let Some(k) = args.block {
        if k == 0 || k > cfg.blocks {
            return Err(validation(format!("--block {k} out of range 1..={}", cfg.blocks)));
        }
    }
    if let Some(s) = args.scale {
        if s < 3 || s % 2 == 0 || s > cfg.max_scale {
            return Err(validation(format!(
                "--scale {s} is not one of 3, 5, ..., {}",
                cfg.max_scale
            )));
        }
    }
    create_dir(&args.out_dir)?;
    let mut rc = RunConfig::new("dump-features", seed, cfg);
    rc.path("weights", &args.weights)
        .path("input", &args.input)
        .path("out_dir", &args.out_dir);
    rc.record(Some(&args.out_dir.join(SIDECAR_NAME)))?;

    let lr = data::read_image(&args.input)?;
    let (_, traces) = model.trace(&store, &lr.to_float().to_tensor())?;
    let mut written = 0;
    for (i, trace) in traces.iter().enumerate() {
        let k = i + 1;
        if args.block.is_some_and(|b| b != k) {
            continue;
        }
        let mut maps: Vec<(String, &pmrn::Tensor)> = cfg
            .scales()
            .zip(&trace.scales)
            .filter(|(s, _)| args.scale.is_none_or(|want| want == *s))
            .map(|(s, t)| (format!("block{k}_scale{s}"), t))
            .collect();
        if args.scale.is_none() {
            if let Some(g) = &trace.gamma {
                maps.push((format!("block{k}_gamma"), g));
            }
            if let Some(b) = &trace.beta {
                maps.push((format!("block{k}_beta"), b));
            }
        }
        for (name, t) in maps {
            let (w, h, pixels) = feature_image(t);
            data::write_gray_png(&args.out_dir.join(format!("{name}.png")), w, h, pixels)?;
            written += 1;
        }
    }
    println!("wrote {written} feature maps to {}", args.out_dir.display());
    Ok(())
}
