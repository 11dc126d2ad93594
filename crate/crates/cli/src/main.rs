use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma};
use nerveseg::config::RunConfig;
use nerveseg::data::{load_dataset, make_folds, SamplePair, SynthConfig};
use nerveseg::metrics::{binarize, render_overlay, MetricsSummary, PixelConfusion};
use nerveseg::training::{
    benchmark, cross_validate, evaluate, predict_probs, train_fold, CvSummary, TrainedModel, SUMMARY_METRICS,
};
use nerveseg::{Architecture, ModelConfig};

#[derive(Parser)]
#[command(name = "nerveseg", version, about = "Paired-modality nerve segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset in the standard layout.
    Synth(SynthArgs),
    /// Train one cross-validation fold.
    Train(TrainArgs),
    /// Train every fold and summarize mean ± std.
    Crossval(RunArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(CheckpointArgs),
    /// Write predicted masks and over/under-segmentation overlays.
    Predict(CheckpointArgs),
    /// Parameter counts and inference latency per architecture.
    Benchmark(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(64..))]
    size: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    empty_fraction: f64,
    #[arg(long, default_value_t = 2)]
    distractors: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` entries applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root; overrides `data_dir` from the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "output-dir", alias = "output_dir", default_value = "out")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fold used for validation.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "output-dir", alias = "output_dir", default_value = "out")]
    output_dir: PathBuf,
    /// Optional configuration; its architecture must match the checkpoint.
    #[command(flatten)]
    config: ConfigArgs,
    /// Overrides the threshold recorded in the checkpoint.
    #[arg(long)]
    dice_threshold: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated architectures, or `all`.
    #[arg(long, default_value = "all")]
    architectures: String,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(2..))]
    runs: u64,
    #[arg(long = "output-dir", alias = "output_dir", default_value = "out")]
    output_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Crossval(a) => cmd_crossval(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n: a.n as usize,
        size: a.size as usize,
        seed: a.seed,
        empty_fraction: a.empty_fraction,
        distractors: a.distractors,
    };
    let pairs = nerveseg::data::synth_generate(&a.out, &cfg)?;
    println!("wrote {} samples to {}", pairs.len(), a.out.display());
    Ok(())
}

fn load_pairs(data: &Path) -> Result<Vec<SamplePair>> {
    if !data.is_dir() {
        bail!("dataset directory {} does not exist", data.display());
    }
    let ds = load_dataset(data)?;
    for (id, why) in &ds.report.skipped {
        log::warn!("skipped {id}: {why}");
    }
    if ds.pairs.is_empty() {
        bail!("no complete samples found under {}", data.display());
    }
    Ok(ds.pairs)
}

fn resolve_data(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data_dir.clone())
        .context("no dataset given: pass --data or set data_dir in the configuration")
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

const HEADERS: [&str; 7] = [
    "Accuracy",
    "Sensitivity",
    "Specificity",
    "Precision",
    "Balanced Accuracy",
    "F2",
    "Dice",
];

fn summary_row(s: &MetricsSummary) -> Vec<String> {
    vec![
        fmt_metric(Some(s.accuracy)),
        fmt_metric(s.sensitivity),
        fmt_metric(s.specificity),
        fmt_metric(s.precision),
        fmt_metric(s.balanced_accuracy),
        fmt_metric(Some(s.mean_f2)),
        fmt_metric(Some(s.mean_dice)),
    ]
}

fn render_table(headers: &[&str], rows: &[(String, Vec<String>)]) -> String {
    let mut widths: Vec<usize> = std::iter::once("Model".len())
        .chain(headers.iter().map(|h| h.len()))
        .collect();
    for (name, cells) in rows {
        widths[0] = widths[0].max(name.chars().count());
        for (i, c) in cells.iter().enumerate() {
            widths[i + 1] = widths[i + 1].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(std::iter::once("Model").chain(headers.iter().copied()).collect());
    out.push('\n');
    for (name, cells) in rows {
        out.push_str(&line(
            std::iter::once(name.as_str()).chain(cells.iter().map(|s| s.as_str())).collect(),
        ));
        out.push('\n');
    }
    out
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.run.config.load()?;
    let data = resolve_data(&cfg, &a.run.data)?;
    let pairs = load_pairs(&data)?;
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let folds = make_folds(&ids, cfg.train.folds, cfg.train.seed)?;
    let fold = folds
        .get(a.fold)
        .with_context(|| format!("fold {} out of range (0..{})", a.fold, folds.len()))?;
    let out = &a.run.output_dir;
    let run_dir = out.join("runs").join(format!("fold_{}", fold.fold_id));
    let record = train_fold(&cfg.model, &cfg.train, fold, &pairs, &run_dir)?;
    let reports = out.join("reports");
    create_dir(&reports)?;
    record
        .best_validation
        .write_per_image_csv(&reports.join("per_image.csv"))?;
    record.best_validation.write_summary_json(&reports.join("summary.json"))?;
    let row = (
        cfg.model.architecture.display_name().to_string(),
        summary_row(&record.best_validation.summary),
    );
    print!("{}", render_table(&HEADERS, &[row]));
    println!(
        "best epoch {} of {}; checkpoint {}",
        record.best_epoch,
        record.epochs.len(),
        record.best_checkpoint.display()
    );
    Ok(())
}

fn cv_row(s: &CvSummary) -> Vec<String> {
    SUMMARY_METRICS
        .iter()
        .map(|m| s.get(m).map(|v| v.to_string()).unwrap_or_else(|| "undefined".into()))
        .collect()
}

fn cmd_crossval(a: RunArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let data = resolve_data(&cfg, &a.data)?;
    let pairs = load_pairs(&data)?;
    let out = &a.output_dir;
    let cv = cross_validate(&cfg.model, &cfg.train, &pairs, &out.join("runs"))?;
    let reports = out.join("reports");
    create_dir(&reports)?;
    write_text(&reports.join("summary.json"), &serde_json::to_string_pretty(&cv.summary)?)?;
    let table = render_table(
        &HEADERS,
        &[(cfg.model.architecture.display_name().to_string(), cv_row(&cv.summary))],
    );
    write_text(&reports.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn load_checked(a: &CheckpointArgs) -> Result<TrainedModel> {
    let trained = TrainedModel::load(&a.checkpoint)?;
    if a.config.config.is_some() || !a.config.overrides.is_empty() {
        let cfg = a.config.load()?;
        let (want, have) = (cfg.model.architecture, trained.model.architecture());
        if want != have {
            bail!(
                "configuration names architecture {want} but checkpoint {} holds {have}",
                a.checkpoint.display()
            );
        }
    }
    Ok(trained)
}

fn cmd_eval(a: CheckpointArgs) -> Result<()> {
    let trained = load_checked(&a)?;
    let pairs = load_pairs(&a.data)?;
    let samples = trained.prepare(&pairs)?;
    let thr = a.dice_threshold.unwrap_or(trained.state.dice_threshold);
    let report = evaluate(&trained.model, &samples, trained.state.modality, thr, None)?;
    let reports = a.output_dir.join("reports");
    create_dir(&reports)?;
    report.write_per_image_csv(&reports.join("per_image.csv"))?;
    report.write_summary_json(&reports.join("summary.json"))?;
    let row = (
        trained.model.architecture().display_name().to_string(),
        summary_row(&report.summary),
    );
    print!("{}", render_table(&HEADERS, &[row]));
    println!("{} images evaluated", report.records.len());
    Ok(())
}

fn cmd_predict(a: CheckpointArgs) -> Result<()> {
    let trained = load_checked(&a)?;
    let pairs = load_pairs(&a.data)?;
    let samples = trained.prepare(&pairs)?;
    let probs = predict_probs(&trained.model, &samples, trained.state.modality, 8)?;
    let thr = a.dice_threshold.unwrap_or(trained.state.dice_threshold);
    let root = a.output_dir.join("predictions");
    let (mask_dir, overlay_dir) = (root.join("masks"), root.join("overlays"));
    create_dir(&mask_dir)?;
    create_dir(&overlay_dir)?;
    let s = trained.model.config().image_size as u32;
    for ((pair, sample), p) in pairs.iter().zip(&samples).zip(&probs) {
        let pred = binarize(p);
        let truth: Vec<u8> = sample.mask.iter().map(|&v| u8::from(v > 0.5)).collect();
        let mut mask = GrayImage::new(s, s);
        for (px, &v) in mask.pixels_mut().zip(&pred) {
            *px = Luma([if v > 0 { 255 } else { 0 }]);
        }
        let mask_path = mask_dir.join(format!("{}.png", pair.id));
        mask.save(&mask_path)
            .with_context(|| format!("cannot write {}", mask_path.display()))?;
        let base = imageops::resize(&pair.jet, s, s, FilterType::Triangle);
        let overlay = render_overlay(&base, &pred, &truth)?;
        let overlay_path = overlay_dir.join(format!("{}.png", pair.id));
        overlay
            .save(&overlay_path)
            .with_context(|| format!("cannot write {}", overlay_path.display()))?;
        let c = PixelConfusion::from_masks(&pred, &truth)?;
        let outcome = nerveseg::metrics::detection_classify(pair.has_nerve, c.dice(), thr);
        let sidecar = serde_json::json!({
            "id": pair.id,
            "architecture": trained.model.architecture(),
            "has_nerve": pair.has_nerve,
            "predicted_pixels": c.true_pos + c.false_pos,
            "truth_pixels": c.true_pos + c.false_neg,
            "dice": c.dice(),
            "f2": c.f2(),
            "dice_threshold": thr,
            "outcome": outcome.as_str(),
        });
        write_text(
            &root.join(format!("{}.json", pair.id)),
            &serde_json::to_string_pretty(&sidecar)?,
        )?;
    }
    println!("wrote predictions for {} images to {}", pairs.len(), root.display());
    Ok(())
}

fn parse_architectures(list: &str) -> Result<Vec<Architecture>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(Architecture::ALL.to_vec());
    }
    list.split(',')
        .map(|s| s.trim().parse::<Architecture>().map_err(anyhow::Error::from))
        .collect()
}

fn cmd_benchmark(a: BenchArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let cfgs: Vec<ModelConfig> = parse_architectures(&a.architectures)?
        .into_iter()
        .map(|architecture| ModelConfig {
            architecture,
            ..cfg.model.clone()
        })
        .collect();
    let rows = benchmark(&cfgs, a.warmup, a.runs as usize)?;
    let mut table = format!(
        "{:<16}  {:>22}  {:>12}\n",
        "Model", "Inference Time (ms)", "Parameters"
    );
    for r in &rows {
        table.push_str(&format!(
            "{:<16}  {:>22}  {:>12}\n",
            r.architecture.display_name(),
            format!("{:.2} ± {:.2}", r.mean_ms, r.std_ms),
            r.parameters
        ));
    }
    let reports = a.output_dir.join("reports");
    create_dir(&reports)?;
    write_text(&reports.join("benchmark.txt"), &table)?;
    write_text(&reports.join("benchmark.json"), &serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(())
}
