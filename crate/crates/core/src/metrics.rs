//! Segmentation metrics (Dice, F2) and image-level detection metrics.
//!
//! Detection uses a Dice-threshold rule: an image whose predicted mask
//! reaches a Dice strictly greater than the threshold counts as a true
//! positive when it is labelled as containing nerve and as a true negative
//! otherwise; below (or at) the threshold it is a false negative or a false
//! positive respectively. When both prediction and ground truth are empty,
//! Dice and F2 are defined as 1.0, which is what lets correctly empty
//! predictions on nerve-free images count as true negatives.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PROB_THRESHOLD: f32 = 0.5;

/// Pixel is foreground iff its probability is >= 0.5.
pub fn binarize(probs: &[f32]) -> Vec<u8> {
    probs
        .iter()
        .map(|&p| u8::from(p >= DEFAULT_PROB_THRESHOLD))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelConfusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl PixelConfusion {
    pub fn from_masks(pred: &[u8], target: &[u8]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, target has {}",
                pred.len(),
                target.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(target) {
            match (p != 0, t != 0) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// `(1 + β²) TP / ((1 + β²) TP + β² FN + FP)` in exact integer
    /// arithmetic up to the final division; 1 when all counts are zero.
    fn f_beta(&self, beta_sq: u64) -> f64 {
        let num = (1 + beta_sq) * self.true_pos;
        let denom = num + beta_sq * self.false_neg + self.false_pos;
        if denom == 0 {
            1.0
        } else {
            num as f64 / denom as f64
        }
    }

    /// `2 TP / (2 TP + FP + FN)`.
    pub fn dice(&self) -> f64 {
        self.f_beta(1)
    }

    /// `5 TP / (5 TP + 4 FN + FP)`.
    pub fn f2(&self) -> f64 {
        self.f_beta(4)
    }
}

pub fn dice(pred: &[u8], target: &[u8]) -> Result<f64> {
    Ok(PixelConfusion::from_masks(pred, target)?.dice())
}

pub fn f2(pred: &[u8], target: &[u8]) -> Result<f64> {
    Ok(PixelConfusion::from_masks(pred, target)?.f2())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    TN,
    FP,
    FN,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::TP => "TP",
            Outcome::TN => "TN",
            Outcome::FP => "FP",
            Outcome::FN => "FN",
        }
    }
}

pub fn detection_classify(has_nerve: bool, dice: f64, dice_threshold: f64) -> Outcome {
    match (dice > dice_threshold, has_nerve) {
        (true, true) => Outcome::TP,
        (true, false) => Outcome::TN,
        (false, true) => Outcome::FN,
        (false, false) => Outcome::FP,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub has_nerve: bool,
    pub dice: f64,
    pub f2: f64,
    pub outcome: Outcome,
}

impl DetectionRecord {
    pub fn new(image_id: impl Into<String>, has_nerve: bool, dice: f64, f2: f64, dice_threshold: f64) -> Self {
        Self {
            image_id: image_id.into(),
            has_nerve,
            dice,
            f2,
            outcome: detection_classify(has_nerve, dice, dice_threshold),
        }
    }

    pub fn from_masks(
        image_id: impl Into<String>,
        has_nerve: bool,
        pred: &[u8],
        target: &[u8],
        dice_threshold: f64,
    ) -> Result<Self> {
        let c = PixelConfusion::from_masks(pred, target)?;
        Ok(Self::new(image_id, has_nerve, c.dice(), c.f2(), dice_threshold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub r#fn: usize,
}

/// Aggregates of one evaluation. Ratios with a zero denominator are `None`
/// ("undefined") rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub model: String,
    pub fold_id: Option<usize>,
    pub dice_threshold: f64,
    pub images: usize,
    pub counts: OutcomeCounts,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub mean_f2: f64,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub summary: MetricsSummary,
    pub records: Vec<DetectionRecord>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn aggregate(
    records: Vec<DetectionRecord>,
    dice_threshold: f64,
    model: impl Into<String>,
    fold_id: Option<usize>,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty record list"));
    }
    let mut counts = OutcomeCounts::default();
    for r in &records {
        match r.outcome {
            Outcome::TP => counts.tp += 1,
            Outcome::TN => counts.tn += 1,
            Outcome::FP => counts.fp += 1,
            Outcome::FN => counts.r#fn += 1,
        }
    }
    let n = records.len();
    let above = records.iter().filter(|r| r.dice > dice_threshold).count();
    let sensitivity = ratio(counts.tp, counts.tp + counts.r#fn);
    let specificity = ratio(counts.tn, counts.tn + counts.fp);
    let balanced_accuracy = match (sensitivity, specificity) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        _ => None,
    };
    let summary = MetricsSummary {
        model: model.into(),
        fold_id,
        dice_threshold,
        images: n,
        counts,
        accuracy: above as f64 / n as f64,
        sensitivity,
        specificity,
        precision: ratio(counts.tp, counts.tp + counts.fp),
        balanced_accuracy,
        mean_f2: records.iter().map(|r| r.f2).sum::<f64>() / n as f64,
        mean_dice: records.iter().map(|r| r.dice).sum::<f64>() / n as f64,
    };
    Ok(MetricsReport { summary, records })
}

impl MetricsReport {
    /// One row per image: `id,has_nerve,dice,f2,outcome`.
    pub fn write_per_image_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "has_nerve", "dice", "f2", "outcome"])?;
        for r in &self.records {
            w.write_record([
                r.image_id.as_str(),
                if r.has_nerve { "1" } else { "0" },
                &format!("{:.6}", r.dice),
                &format!("{:.6}", r.f2),
                r.outcome.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.summary)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Pixel class of an over/under-segmentation overlay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OverlayClass {
    Background,
    /// Predicted only; drawn blue.
    Over,
    /// Ground truth only; drawn red.
    Under,
    /// Both; drawn white.
    Correct,
}

impl OverlayClass {
    pub fn of(pred: bool, truth: bool) -> Self {
        match (pred, truth) {
            (false, false) => OverlayClass::Background,
            (true, false) => OverlayClass::Over,
            (false, true) => OverlayClass::Under,
            (true, true) => OverlayClass::Correct,
        }
    }

    pub fn color(self) -> Option<Rgb<u8>> {
        match self {
            OverlayClass::Background => None,
            OverlayClass::Over => Some(Rgb([0, 0, 255])),
            OverlayClass::Under => Some(Rgb([255, 0, 0])),
            OverlayClass::Correct => Some(Rgb([255, 255, 255])),
        }
    }
}

pub fn overlay_classes(pred: &[u8], truth: &[u8]) -> Result<Vec<OverlayClass>> {
    if pred.len() != truth.len() {
        return Err(Error::shape("overlay masks differ in size"));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| OverlayClass::of(p != 0, t != 0))
        .collect())
}

/// Renders the comparison overlay on top of `base` dimmed to 40%.
pub fn render_overlay(base: &RgbImage, pred: &[u8], truth: &[u8]) -> Result<RgbImage> {
    let (w, h) = base.dimensions();
    if pred.len() != (w * h) as usize {
        return Err(Error::shape(format!(
            "overlay base is {w}x{h} but masks have {} pixels",
            pred.len()
        )));
    }
    let classes = overlay_classes(pred, truth)?;
    let mut out = RgbImage::new(w, h);
    for (i, (px, class)) in out.pixels_mut().zip(classes).enumerate() {
        *px = match class.color() {
            Some(c) => c,
            None => {
                let b = base.get_pixel(i as u32 % w, i as u32 / w);
                Rgb(b.0.map(|v| (v as f32 * 0.4).round() as u8))
            }
        };
    }
    Ok(out)
}
