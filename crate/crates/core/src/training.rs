//! SGD training with a multi-step learning-rate schedule, k-fold
//! cross-validation and the inference benchmark.
//!
//! A fold run prepares data in this order: resize and scale every sample,
//! compute normalization statistics and the positive weight from the
//! training ids only, materialize the augmented variants of the training
//! samples (in [0, 1] space), then standardize everything with the training
//! statistics.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, make_folds, resize_and_scale, sample_seed, AugmentConfig, FoldSplit, Modality, NormalizationStats,
    PreparedSample, SamplePair,
};
use crate::error::{Error, Result};
use crate::losses::{positive_weight, total_loss, EdgeNorm, LossBreakdown, SobelBank};
use crate::metrics::{aggregate, binarize, DetectionRecord, MetricsReport, MetricsSummary};
use crate::models::{load_checkpoint, save_checkpoint, Architecture, Model, ModelConfig, ModelInput};
use crate::nn::Mode;

/// Validation quantity used to pick the best checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    F2,
    Dice,
}

impl Selection {
    pub fn score(self, s: &MetricsSummary) -> f64 {
        match self {
            Selection::F2 => s.mean_f2,
            Selection::Dice => s.mean_dice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Fractions of `epochs` at which the rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<f64>,
    pub lr_factor: f64,
    /// 0 gives plain SGD.
    pub momentum: f64,
    pub seed: u64,
    pub dice_threshold: f64,
    pub selection: Selection,
    pub folds: usize,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub edge_norm: EdgeNorm,
    /// Input stream of single-modality networks.
    pub modality: Modality,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 8,
            lr_initial: 0.03,
            lr_milestones: vec![0.25, 0.75],
            lr_factor: 1.0 / 3.0,
            momentum: 0.9,
            seed: 0,
            dice_threshold: 0.5,
            selection: Selection::F2,
            folds: 5,
            augment: true,
            augmentation: AugmentConfig::default(),
            edge_norm: EdgeNorm::PixelAbs,
            modality: Modality::Jet,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            errs.push(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if self.lr_milestones.iter().any(|&m| !(m > 0.0 && m < 1.0))
            || self.lr_milestones.windows(2).any(|w| w[0] >= w[1])
        {
            errs.push(format!(
                "lr_milestones must be strictly increasing in (0, 1), got {:?}",
                self.lr_milestones
            ));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            errs.push(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.dice_threshold) {
            errs.push(format!("dice_threshold must lie in [0, 1], got {}", self.dice_threshold));
        }
        if self.folds < 2 {
            errs.push(format!("folds must be at least 2, got {}", self.folds));
        }
        let a = &self.augmentation;
        if !(0.0..1.0).contains(&a.brightness) || !(0.0..1.0).contains(&a.contrast) || !(a.noise_sigma >= 0.0) {
            errs.push("augmentation ranges must lie in [0, 1) and noise sigma must be >= 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Epochs at which the rate drops, `floor(fraction · epochs)`.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.lr_milestones
            .iter()
            .map(|f| (f * self.epochs as f64).floor() as usize)
            .collect()
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestone_epochs().iter().filter(|&&m| epoch >= m).count();
    cfg.lr_initial * cfg.lr_factor.powi(passed as i32)
}

/// SGD with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − lr v`.
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: vec![None; model.params().params().len()],
        }
    }

    /// Back-propagates `loss` and applies one update to every parameter.
    pub fn step(&mut self, model: &Model, loss: &Tensor, lr: f64) -> Result<()> {
        let grads = loss.backward()?;
        for ((_, var), vel) in model.params().params().iter().zip(&mut self.velocity) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients may carry an op graph; keep optimizer state detached.
            let g = g.detach();
            let v = match vel.take() {
                Some(prev) if self.momentum > 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            let next = (var.as_tensor().detach() - (&v * lr)?)?;
            var.set(&next)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// A mini-batch as tensors: images `(B, 3, S, S)`, target `(B, 1, S, S)`.
pub struct Batch {
    pub jet: Tensor,
    pub rgb: Tensor,
    pub target: Tensor,
}

impl Batch {
    pub fn new(samples: &[&PreparedSample], dtype: DType) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid("empty batch"));
        };
        let (b, s) = (samples.len(), first.size);
        if samples.iter().any(|x| x.size != s) {
            return Err(Error::shape("batch samples differ in size"));
        }
        let cat = |f: fn(&PreparedSample) -> &Vec<f32>, c: usize| -> Result<Tensor> {
            let v: Vec<f32> = samples.iter().flat_map(|x| f(x).iter().copied()).collect();
            Ok(Tensor::from_vec(v, (b, c, s, s), &Device::Cpu)?.to_dtype(dtype)?)
        };
        Ok(Self {
            jet: cat(|x| &x.jet, 3)?,
            rgb: cat(|x| &x.rgb, 3)?,
            target: cat(|x| &x.mask, 1)?,
        })
    }

    pub fn input(&self, arch: Architecture, modality: Modality) -> ModelInput<'_> {
        if arch.is_dual() {
            ModelInput::Pair {
                jet: &self.jet,
                rgb: &self.rgb,
            }
        } else {
            match modality {
                Modality::Jet => ModelInput::Single(&self.jet),
                Modality::Rgb => ModelInput::Single(&self.rgb),
            }
        }
    }
}

/// Everything one optimisation step needs besides the batch.
pub struct StepContext<'a> {
    pub w_p: f64,
    pub bank: &'a SobelBank,
    pub edge_norm: EdgeNorm,
    pub modality: Modality,
}

/// Forward in training mode, loss, backward and update. Returns the loss of
/// the batch before the update.
pub fn train_step(
    model: &Model,
    opt: &mut Sgd,
    batch: &Batch,
    ctx: &StepContext,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let logits = model.forward(batch.input(model.architecture(), ctx.modality), &mut Mode::Train(rng))?;
    let (loss, parts) = total_loss(&logits, &batch.target, ctx.w_p, ctx.bank, ctx.edge_norm)?;
    opt.step(model, &loss, lr)?;
    Ok(parts)
}

/// Eval-mode foreground probabilities, one `S·S` map per sample.
pub fn predict_probs(
    model: &Model,
    samples: &[PreparedSample],
    modality: Modality,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let batch = Batch::new(&refs, model.dtype())?;
        let logits = model.forward(batch.input(model.architecture(), modality), &mut Mode::Eval)?;
        let probs = crate::nn::sigmoid(&logits)?.to_dtype(DType::F32)?;
        for i in 0..chunk.len() {
            out.push(probs.get(i)?.flatten_all()?.to_vec1::<f32>()?);
        }
    }
    Ok(out)
}

/// Per-image records and summary of a model over prepared samples.
pub fn evaluate(
    model: &Model,
    samples: &[PreparedSample],
    modality: Modality,
    dice_threshold: f64,
    fold_id: Option<usize>,
) -> Result<MetricsReport> {
    let probs = predict_probs(model, samples, modality, 8)?;
    let records = samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| {
            let truth: Vec<u8> = s.mask.iter().map(|&v| u8::from(v > 0.5)).collect();
            DetectionRecord::from_masks(s.id.clone(), s.has_nerve, &binarize(p), &truth, dice_threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(records, dice_threshold, model.architecture().key(), fold_id)
}

/// What a checkpoint needs besides weights to reproduce its preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub fold_id: usize,
    pub epoch: usize,
    pub w_p: f64,
    pub stats: NormalizationStats,
    pub modality: Modality,
    pub dice_threshold: f64,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
}

/// A checkpointed model with its recorded preprocessing.
pub struct TrainedModel {
    pub model: Model,
    pub state: TrainingState,
}

impl TrainedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let (model, state) = load_checkpoint(path)?;
        let state: TrainingState = serde_json::from_value(state)
            .map_err(|e| Error::Checkpoint(format!("{}: bad training state: {e}", path.display())))?;
        Ok(Self { model, state })
    }

    /// Resize, scale and standardize raw pairs the way training did.
    pub fn prepare(&self, pairs: &[SamplePair]) -> Result<Vec<PreparedSample>> {
        pairs
            .iter()
            .map(|p| {
                let mut s = resize_and_scale(p, self.model.config().image_size)?;
                self.state.stats.standardize(&mut s);
                Ok(s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub validation: MetricsSummary,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold_id: usize,
    pub architecture: Architecture,
    pub w_p: f64,
    pub train_ids: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation report of the checkpointed epoch.
    pub best_validation: MetricsReport,
    pub best_checkpoint: PathBuf,
    pub total_seconds: f64,
}

fn split(pairs: &[SamplePair], fold: &FoldSplit) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    let by_id: HashMap<&str, &SamplePair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let pick = |ids: &[String]| {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|p| (*p).clone())
                    .ok_or_else(|| Error::invalid(format!("fold {} names unknown id {id}", fold.fold_id)))
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok((pick(&fold.train)?, pick(&fold.validation)?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct RunLog {
    file: fs::File,
    path: PathBuf,
}

impl RunLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn line(&mut self, msg: &str) -> Result<()> {
        log::info!("{msg}");
        writeln!(self.file, "{msg}").map_err(|e| Error::io(&self.path, e))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Trains one fold and writes its run directory:
/// `config.json`, `metrics.csv`, `best.safetensors`, `run.log`, `record.json`.
pub fn train_fold(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    fold: &FoldSplit,
    pairs: &[SamplePair],
    run_dir: &Path,
) -> Result<RunRecord> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let started = Instant::now();
    let (train_pairs, val_pairs) = split(pairs, fold)?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::invalid(format!("fold {} has an empty split", fold.fold_id)));
    }
    let size = model_cfg.image_size;
    let train_scaled = train_pairs
        .iter()
        .map(|p| resize_and_scale(p, size))
        .collect::<Result<Vec<_>>>()?;
    let w_p = positive_weight(train_scaled.iter().map(|s| &s.mask))?;
    let stats = NormalizationStats::compute(&train_scaled)?;

    let mut train_set = Vec::with_capacity(train_scaled.len() * 5);
    for s in &train_scaled {
        train_set.push(s.clone());
        if train_cfg.augment {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(train_cfg.seed, &s.id));
            train_set.extend(
                augment(s, &mut rng, &train_cfg.augmentation)
                    .into_iter()
                    .map(|a| a.sample),
            );
        }
    }
    for s in &mut train_set {
        stats.standardize(s);
    }
    let val_set = val_pairs
        .iter()
        .map(|p| {
            let mut s = resize_and_scale(p, size)?;
            stats.standardize(&mut s);
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write_json(
        &run_dir.join("config.json"),
        &serde_json::json!({ "model": model_cfg, "train": train_cfg, "fold": fold }),
    )?;
    let mut log = RunLog::create(run_dir.join("run.log"))?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    metrics.write_record([
        "epoch",
        "lr",
        "train_bce",
        "train_edge",
        "train_total",
        "val_accuracy",
        "val_sensitivity",
        "val_specificity",
        "val_precision",
        "val_balanced_accuracy",
        "val_mean_f2",
        "val_mean_dice",
        "seconds",
    ])?;
    log.line(&format!(
        "fold {} {}: {} train samples ({} after augmentation), {} validation, w_p = {w_p:.6}",
        fold.fold_id,
        model_cfg.architecture,
        train_scaled.len(),
        train_set.len(),
        val_set.len()
    ))?;

    let model = Model::new(model_cfg, DType::F32)?;
    let mut opt = Sgd::new(&model, train_cfg.momentum);
    let bank = SobelBank::standard();
    let ctx = StepContext {
        w_p,
        bank: &bank,
        edge_norm: train_cfg.edge_norm,
        modality: train_cfg.modality,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x7472_6169_6e00 ^ fold.fold_id as u64);
    let best_path = run_dir.join("best.safetensors");
    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(usize, f64, MetricsReport)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..train_cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, train_cfg);
        order.shuffle(&mut rng);
        let (mut bce, mut edge, mut seen) = (0.0, 0.0, 0usize);
        for idx in order.chunks(train_cfg.batch_size) {
            let refs: Vec<&PreparedSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::new(&refs, model.dtype())?;
            let parts = train_step(&model, &mut opt, &batch, &ctx, lr, &mut rng)?;
            bce += parts.bce * refs.len() as f64;
            edge += parts.edge * refs.len() as f64;
            seen += refs.len();
        }
        let train = LossBreakdown::new(bce / seen as f64, edge / seen as f64);
        let report = evaluate(&model, &val_set, train_cfg.modality, train_cfg.dice_threshold, Some(fold.fold_id))?;
        let score = train_cfg.selection.score(&report.summary);
        if best.as_ref().map_or(true, |(_, b, _)| score > *b) {
            let state = TrainingState {
                fold_id: fold.fold_id,
                epoch,
                w_p,
                stats,
                modality: train_cfg.modality,
                dice_threshold: train_cfg.dice_threshold,
                train_ids: fold.train.clone(),
                validation_ids: fold.validation.clone(),
            };
            save_checkpoint(&best_path, &model, &serde_json::to_value(&state)?)?;
            best = Some((epoch, score, report.clone()));
        }
        let seconds = t0.elapsed().as_secs_f64();
        let s = &report.summary;
        metrics.write_record([
            epoch.to_string(),
            format!("{lr:.8}"),
            format!("{:.6}", train.bce),
            format!("{:.6}", train.edge),
            format!("{:.6}", train.total),
            format!("{:.6}", s.accuracy),
            fmt_opt(s.sensitivity),
            fmt_opt(s.specificity),
            fmt_opt(s.precision),
            fmt_opt(s.balanced_accuracy),
            format!("{:.6}", s.mean_f2),
            format!("{:.6}", s.mean_dice),
            format!("{seconds:.3}"),
        ])?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        log.line(&format!(
            "epoch {epoch}: lr {lr:.6} loss {:.5} (bce {:.5}, edge {:.5}) val dice {:.4} f2 {:.4} [{seconds:.1}s]",
            train.total, train.bce, train.edge, s.mean_dice, s.mean_f2
        ))?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train,
            validation: report.summary,
            seconds,
        });
    }
    let (best_epoch, _, best_validation) = best.expect("at least one epoch ran");
    log.line(&format!("best epoch {best_epoch}"))?;
    let record = RunRecord {
        fold_id: fold.fold_id,
        architecture: model_cfg.architecture,
        w_p,
        train_ids: fold.train.clone(),
        epochs,
        best_epoch,
        best_validation,
        best_checkpoint: best_path,
        total_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&run_dir.join("record.json"), &record)?;
    Ok(record)
}

/// Mean and sample standard deviation (n − 1 denominator) over folds.
/// Folds where a metric is undefined are left out of that metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// `None` with fewer than two defined values.
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Some(Self { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.4} ± {:.4}", self.mean, s),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}

/// Columns of the cross-validation summary, in presentation order.
pub const SUMMARY_METRICS: [&str; 7] = [
    "accuracy",
    "sensitivity",
    "specificity",
    "precision",
    "balanced_accuracy",
    "f2",
    "dice",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub architecture: Architecture,
    pub folds: usize,
    /// Keyed by [`SUMMARY_METRICS`]; a metric undefined in every fold is
    /// `None`.
    pub metrics: Vec<(String, Option<MeanStd>)>,
}

impl CvSummary {
    pub fn from_summaries(architecture: Architecture, summaries: &[&MetricsSummary]) -> Self {
        let pick = |name: &str, s: &MetricsSummary| -> Option<f64> {
            match name {
                "accuracy" => Some(s.accuracy),
                "sensitivity" => s.sensitivity,
                "specificity" => s.specificity,
                "precision" => s.precision,
                "balanced_accuracy" => s.balanced_accuracy,
                "f2" => Some(s.mean_f2),
                "dice" => Some(s.mean_dice),
                _ => unreachable!(),
            }
        };
        let metrics = SUMMARY_METRICS
            .iter()
            .map(|&m| {
                let vals: Vec<f64> = summaries.iter().filter_map(|s| pick(m, s)).collect();
                (m.to_string(), MeanStd::of(&vals))
            })
            .collect();
        Self {
            architecture,
            folds: summaries.len(),
            metrics,
        }
    }

    pub fn get(&self, metric: &str) -> Option<MeanStd> {
        self.metrics.iter().find(|(m, _)| m == metric).and_then(|(_, v)| *v)
    }

    /// Header and one row, tab-separated.
    pub fn table(&self) -> String {
        let mut out = String::from("Model");
        for m in SUMMARY_METRICS {
            out.push('\t');
            out.push_str(m);
        }
        out.push('\n');
        out.push_str(self.architecture.display_name());
        for (_, v) in &self.metrics {
            out.push('\t');
            out.push_str(&v.map(|v| v.to_string()).unwrap_or_else(|| "undefined".into()));
        }
        out.push('\n');
        out
    }
}

pub struct CrossValidation {
    pub folds: Vec<FoldSplit>,
    pub runs: Vec<RunRecord>,
    pub summary: CvSummary,
}

/// One run per fold under `out_dir/fold_{k}`, summarized over the best
/// epoch of each fold. Writes `out_dir/summary.json`.
pub fn cross_validate(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    pairs: &[SamplePair],
    out_dir: &Path,
) -> Result<CrossValidation> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if pairs.len() < train_cfg.folds {
        return Err(Error::invalid(format!(
            "{} samples cannot fill {} folds",
            pairs.len(),
            train_cfg.folds
        )));
    }
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let folds = make_folds(&ids, train_cfg.folds, train_cfg.seed)?;
    let mut runs = Vec::with_capacity(folds.len());
    for fold in &folds {
        runs.push(train_fold(
            model_cfg,
            train_cfg,
            fold,
            pairs,
            &out_dir.join(format!("fold_{}", fold.fold_id)),
        )?);
    }
    let summaries: Vec<&MetricsSummary> = runs.iter().map(|r| &r.best_validation.summary).collect();
    let summary = CvSummary::from_summaries(model_cfg.architecture, &summaries);
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(CrossValidation { folds, runs, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub architecture: Architecture,
    pub parameters: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub runs: usize,
}

/// Eval-mode latency of single-sample forward passes: `warmup` untimed
/// passes, then `runs` timed ones (sample std). Runs strictly serially.
pub fn benchmark(cfgs: &[ModelConfig], warmup: usize, runs: usize) -> Result<Vec<BenchmarkRow>> {
    if runs < 2 {
        return Err(Error::invalid("benchmark needs at least 2 timed runs"));
    }
    let mut rows = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let model = Model::new(cfg, DType::F32)?;
        let s = cfg.image_size;
        let jet = Tensor::randn(0f32, 1.0, (1, cfg.in_channels, s, s), &Device::Cpu)?;
        let rgb = Tensor::randn(0f32, 1.0, (1, cfg.in_channels, s, s), &Device::Cpu)?;
        let input = if cfg.architecture.is_dual() {
            ModelInput::Pair { jet: &jet, rgb: &rgb }
        } else {
            ModelInput::Single(&jet)
        };
        for _ in 0..warmup {
            model.forward(input, &mut Mode::Eval)?;
        }
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t0 = Instant::now();
            let out = model.forward(input, &mut Mode::Eval)?;
            // Force materialisation before stopping the clock.
            out.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let stat = MeanStd::of(&times).expect("runs >= 2");
        rows.push(BenchmarkRow {
            architecture: cfg.architecture,
            parameters: model.parameter_count(),
            mean_ms: stat.mean,
            std_ms: stat.std.unwrap_or(0.0),
            runs,
        });
    }
    Ok(rows)
}

/// Restores the parameters of `model` from a snapshot taken with
/// [`snapshot`].
pub fn restore(model: &Model, snap: &HashMap<String, Tensor>) -> Result<()> {
    model.params().load(snap)
}

/// Deep copy of all parameters and buffers.
pub fn snapshot(model: &Model) -> Result<HashMap<String, Tensor>> {
    model
        .params()
        .named_tensors()
        .into_iter()
        .map(|(n, t)| Ok((n, t.copy()?)))
        .collect()
}
