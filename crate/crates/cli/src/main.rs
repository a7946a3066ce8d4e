//! `ccnet`: synthesize and import data, train and evaluate the cascade,
//! correct single images, and run the self checks.
//!
//! Exit codes: 0 success, 2 usage or data error, 3 numeric fault.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use ccnet_core::color::{correct, reprocess_for_display};
use ccnet_core::dataio::{
    import_ppm_dir, kfold_split, read_ccraw, synth_mondrian, write_ppm, Manifest, MondrianConfig,
};
use ccnet_core::evaluation::{
    compute_stats, evaluate, report_json, Baseline, Estimator, ModelEstimator, ModelInputOptions,
};
use ccnet_core::network::{param_counts, ParamCounts};
use ccnet_core::tensor::gradcheck::{layer_suite, GradCheckOptions};
use ccnet_core::tensor::read_checkpoint;
use ccnet_core::training::{cascade_gradcheck, train, Regime};
use ccnet_core::{BackboneScale, CascadeModel, HeadKind, Illuminant, ModelConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "ccnet", version, about = "Cascaded color constancy: data tools, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic Mondrian scenes (CCRAW) and a manifest.
    Synth(SynthArgs),
    /// Convert a directory of 8-bit sRGB PPMs into unprocessed training data.
    Import(ImportArgs),
    /// Train the cascade under one of the training regimes.
    Train(TrainArgs),
    /// Score a model or a classic estimator with cross-validation folds.
    Eval(EvalArgs),
    /// Estimate the illuminant of one image and write the corrected result.
    Correct(CorrectArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts at toy and paper scale.
    Params(ParamsArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Patches per side.
    #[arg(long, default_value_t = 4)]
    grid: usize,
    /// Chromatic reflectance bias.
    #[arg(long, default_value_t = 0.0)]
    bias: f64,
    /// Probability that a scene contains a gray patch.
    #[arg(long, default_value_t = 0.0)]
    achromatic: f64,
    /// Scene side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "synthetic")]
    sensor: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ImportArgs {
    /// Directory of binary (P6) PPM files.
    #[arg(long)]
    ppm_dir: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// uip, saf, single (single-sensor SIE) or finetune.
    #[arg(long)]
    regime: Option<String>,
    /// Flat JSON config with dotted keys (`train.epochs`, `aug.output_size`, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest file or the directory containing `manifest.json`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to start from; required by finetune.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train on this fold's training split and validate on its test split.
    #[arg(long)]
    fold: Option<usize>,
    /// Any config key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Model,
    Grayworld,
    Whitepatch,
    Sog,
    Grayedge,
}

#[derive(clap::Args)]
struct EstimatorArgs {
    #[arg(long, value_enum, default_value = "model")]
    method: Method,
    /// Model checkpoint (method `model`).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// 99th percentile instead of the maximum for white patch.
    #[arg(long)]
    robust: bool,
    /// Minkowski norm for shades of gray and gray edge.
    #[arg(long, default_value_t = 6.0)]
    p: f64,
    /// Gaussian smoothing for gray edge.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Halve the image before inference (method `model`).
    #[arg(long)]
    half_res: bool,
    /// Resize the model input to this square side (method `model`).
    #[arg(long)]
    input_size: Option<usize>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Manifest file or the directory containing `manifest.json`.
    #[arg(long)]
    data: PathBuf,
    /// Number of folds; the manifest's fold count when unset.
    #[arg(long)]
    folds: Option<usize>,
    /// Score a single fold instead of the union of all folds.
    #[arg(long)]
    fold: Option<usize>,
    /// Seed of the fold split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct CorrectArgs {
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Use this illuminant (`r,g,b`) instead of estimating one.
    #[arg(long, value_name = "R,G,B")]
    oracle_label: Option<String>,
    /// Input CCRAW image.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output PPM.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// Stages of the end-to-end cascade check.
    #[arg(long, default_value_t = 2)]
    stages: usize,
    #[arg(long, default_value_t = 21)]
    seed: u64,
    /// Probed elements per parameter tensor in the cascade check.
    #[arg(long, default_value_t = 8)]
    probes: usize,
}

#[derive(clap::Args)]
struct ParamsArgs {
    #[arg(long, default_value_t = 3)]
    stages: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Import(a) => cmd_import(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Correct(a) => cmd_correct(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Params(a) => cmd_params(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| c.downcast_ref::<ccnet_core::Error>().is_some_and(ccnet_core::Error::is_numeric_fault));
            ExitCode::from(if numeric { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = MondrianConfig {
        n_scenes: a.scenes,
        grid: a.grid,
        bias: a.bias,
        achromatic_prob: a.achromatic,
        size: a.size,
        sensor_id: a.sensor,
        seed: a.seed,
    };
    let m = synth_mondrian(&cfg, &a.out)?;
    println!("wrote {} scenes ({}x{}, grid {}, bias {}) to {}", m.records.len(), a.size, a.size, a.grid, a.bias, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_import(a: ImportArgs) -> Result<ExitCode> {
    let m = import_ppm_dir(&a.ppm_dir, &a.out)?;
    println!("imported {} images from {} to {}", m.records.len(), a.ppm_dir.display(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut overrides = Vec::new();
    if let Some(r) = &a.regime {
        overrides.push(("train.regime".to_string(), serde_json::to_value(Regime::parse(r)?)?));
    }
    let path_value = |p: &PathBuf| Value::String(p.display().to_string());
    for (key, v) in [("paths.data", &a.data), ("paths.init", &a.init), ("paths.out", &a.out)] {
        if let Some(p) = v {
            overrides.push((key.to_string(), path_value(p)));
        }
    }
    if let Some(v) = a.epochs {
        overrides.push(("train.epochs".into(), v.into()));
    }
    if let Some(v) = a.seed {
        overrides.push(("train.seed".into(), v.into()));
    }
    if let Some(v) = a.lr {
        overrides.push(("train.lr".into(), v.into()));
    }
    if let Some(v) = a.batch_size {
        overrides.push(("train.batch_size".into(), v.into()));
    }
    if let Some(v) = a.fold {
        overrides.push(("data.fold".into(), v.into()));
    }
    for s in &a.set {
        overrides.push(config::parse_override(s)?);
    }
    let (cfg, flat) = config::resolve(a.config.as_deref(), &overrides)?;
    let data = cfg.paths.data.as_deref().ok_or_else(|| anyhow!("no data path (--data or paths.data)"))?;
    let out = cfg.paths.out.as_deref().ok_or_else(|| anyhow!("no output directory (--out or paths.out)"))?;
    if cfg.train.regime == Regime::Finetune && cfg.paths.init.is_none() {
        bail!("finetune needs an initial checkpoint (--init or paths.init)");
    }

    let manifest = Manifest::load(data)?;
    let (train_idx, val_idx) = match cfg.data.fold {
        Some(f) => {
            let folds = kfold_split(manifest.records.len(), manifest.fold_count, cfg.data.fold_seed)?;
            let fold = folds.get(f).ok_or_else(|| anyhow!("fold {f} out of range (fold_count {})", folds.len()))?;
            (fold.train.clone(), Some(fold.test.clone()))
        }
        None => ((0..manifest.records.len()).collect(), None),
    };
    let train_set = manifest.load_samples(Some(&train_idx))?;
    let val_set = val_idx.map(|v| manifest.load_samples(Some(&v))).transpose()?;

    let mut model = CascadeModel::new(cfg.model.clone())?;
    if let Some(init) = &cfg.paths.init {
        model.load_params(read_checkpoint(init)?)?;
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    config::write_resolved(&flat, &out.join("config.json"))?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let epochs = cfg.train.epochs;
    let report = train(&mut model, &train_set, val_set.as_deref(), &cfg.train, &cfg.aug, &mut |rec| {
        let line = serde_json::to_string(rec)?;
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| ccnet_core::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        match rec.val_mean_deg {
            Some(v) => eprintln!("epoch {}/{epochs}: loss {:.4}° val {:.4}° lr {:e}", rec.epoch, rec.loss_deg, v, rec.lr),
            None => eprintln!("epoch {}/{epochs}: loss {:.4}° lr {:e}", rec.epoch, rec.loss_deg, rec.lr),
        }
        Ok(())
    })?;
    let ckpt = out.join("model.cckp");
    model.save(&ckpt)?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "trained {:?} for {} epochs on {} samples: final loss {:.4}°{}; checkpoint {}",
        cfg.train.regime,
        report.epochs.len(),
        train_set.len(),
        last.loss_deg,
        last.val_mean_deg.map(|v| format!(", validation {v:.4}°")).unwrap_or_default(),
        ckpt.display()
    );
    if report.clipped_values > 0 || report.conf_fallbacks > 0 {
        println!("clipped values: {}; confidence fallbacks: {}", report.clipped_values, report.conf_fallbacks);
    }
    Ok(ExitCode::SUCCESS)
}

fn make_estimator(a: &EstimatorArgs) -> Result<Box<dyn Estimator>> {
    Ok(match a.method {
        Method::Model => {
            let path = a.ckpt.as_deref().ok_or_else(|| anyhow!("method `model` needs --ckpt"))?;
            let model = CascadeModel::load(path)?;
            Box::new(ModelEstimator { model, input: ModelInputOptions { half_resolution: a.half_res, input_size: a.input_size } })
        }
        Method::Grayworld => Box::new(Baseline::GrayWorld),
        Method::Whitepatch => Box::new(Baseline::WhitePatch { robust: a.robust }),
        Method::Sog => Box::new(Baseline::ShadesOfGray { p: a.p }),
        Method::Grayedge => Box::new(Baseline::GrayEdge1 { p: a.p, sigma: a.sigma }),
    })
}

fn summary(r: &ccnet_core::evaluation::MetricsReport) -> String {
    format!(
        "n {} mean {:.4}° median {:.4}° trimean {:.4}° best25 {:.4}° worst25 {:.4}°",
        r.n, r.mean, r.median, r.trimean, r.best25, r.worst25
    )
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let estimator = make_estimator(&a.estimator)?;
    let mut manifest = Manifest::load(&a.data)?;
    if let Some(k) = a.folds {
        manifest.fold_count = k;
    }
    let method = estimator.name();
    let doc = match a.fold {
        Some(f) => {
            let r = evaluate(estimator.as_ref(), &manifest, Some(f), a.seed)?;
            println!("{method} fold {f}: {}", summary(&r));
            report_json(&method, &manifest.name, Some(f), &r)
        }
        None => {
            let mut per_image = Vec::new();
            let mut folds = Vec::new();
            for f in 0..manifest.fold_count {
                let r = evaluate(estimator.as_ref(), &manifest, Some(f), a.seed)?;
                println!("{method} fold {f}: {}", summary(&r));
                let mut entry = report_json(&method, &manifest.name, Some(f), &r);
                entry.as_object_mut().expect("object").remove("per_image");
                folds.push(entry);
                per_image.extend(r.per_image);
            }
            let errors: Vec<f64> = per_image.iter().map(|(_, e)| *e).collect();
            let mut all = compute_stats(&errors)?;
            all.per_image = per_image;
            println!("{method} all folds: {}", summary(&all));
            let mut doc = report_json(&method, &manifest.name, None, &all);
            doc.as_object_mut().expect("object").insert("folds".into(), Value::Array(folds));
            doc
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", a.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn parse_rgb(s: &str) -> Result<Illuminant> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>().with_context(|| format!("bad illuminant component `{c}`")))
        .collect::<Result<_>>()?;
    let rgb: [f64; 3] = v.try_into().map_err(|_| anyhow!("illuminant needs three components, got `{s}`"))?;
    Ok(Illuminant::new(rgb)?)
}

fn cmd_correct(a: CorrectArgs) -> Result<ExitCode> {
    let image = read_ccraw(&a.input)?;
    let ell = match &a.oracle_label {
        Some(s) => parse_rgb(s)?,
        None => {
            let est = make_estimator(&a.estimator)?.estimate(&image)?;
            Illuminant::new(est).context("estimate has a non-positive component")?
        }
    };
    let display = reprocess_for_display(&correct(&image, &ell)?);
    write_ppm(&a.out, &display)?;
    let [r, g, b] = ell.rgb();
    println!("illuminant {r:.6},{g:.6},{b:.6}; wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    const LAYER_TOL: f64 = 1e-4;
    const END_TO_END_TOL: f64 = 1e-3;
    let mut ok = true;
    let mut worst = 0.0f64;
    for (name, r) in layer_suite(GradCheckOptions::default())? {
        println!("{name:<16} max rel err {:.3e} ({} probes)", r.max_rel_err, r.probes);
        worst = worst.max(r.max_rel_err);
    }
    ok &= worst < LAYER_TOL;
    let opts = GradCheckOptions { step: 1e-6, max_probes: a.probes, ..Default::default() };
    let r = cascade_gradcheck(a.stages, a.seed, opts)?;
    println!("cascade M={} + multi-stage loss: max rel err {:.3e} ({} probes)", a.stages, r.max_rel_err, r.probes);
    ok &= r.max_rel_err < END_TO_END_TOL;
    println!("layers max rel err {worst:.3e} (tolerance {LAYER_TOL:e}); end to end {:.3e} (tolerance {END_TO_END_TOL:e})", r.max_rel_err);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_NUMERIC) })
}

fn print_counts(label: &str, c: &ParamCounts) {
    println!(
        "{label:<22} backbone {:>9}  head {:>9}  isam/stage {:>7}  isam {:>8}  total {:>9}",
        c.backbone, c.head, c.isam_per_stage, c.isam_total, c.total
    );
}

fn cmd_params(a: ParamsArgs) -> Result<ExitCode> {
    for scale in [BackboneScale::Toy, BackboneScale::Paper] {
        for head in [HeadKind::Lightweight, HeadKind::Fc4Baseline] {
            let cfg = ModelConfig { scale, head, stages: a.stages, ..Default::default() };
            cfg.validate()?;
            print_counts(&format!("{scale:?}/{head:?} M={}", a.stages), &param_counts(&cfg));
        }
        let one = param_counts(&ModelConfig { scale, stages: 1, ..Default::default() });
        let many = param_counts(&ModelConfig { scale, stages: a.stages, ..Default::default() });
        let holds = many.total == one.total + (a.stages - 1) * one.isam_per_stage;
        println!(
            "{scale:?} sharing: M={} total {} = M=1 total {} + {} x ISAM set {} : {}",
            a.stages,
            many.total,
            one.total,
            a.stages - 1,
            one.isam_per_stage,
            if holds { "holds" } else { "VIOLATED" }
        );
    }
    let light = param_counts(&ModelConfig { scale: BackboneScale::Paper, ..Default::default() });
    let fc4 = param_counts(&ModelConfig { scale: BackboneScale::Paper, head: HeadKind::Fc4Baseline, ..Default::default() });
    println!("paper scale head ratio lightweight/FC4: {} / {} = {:.4}", light.head, fc4.head, light.head as f64 / fc4.head as f64);
    Ok(ExitCode::SUCCESS)
}
