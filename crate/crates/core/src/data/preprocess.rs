use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::SamplePair;
use crate::error::{Error, Result};

/// Floor applied to per-channel std so standardization never divides by 0.
const MIN_STD: f64 = 1e-6;

/// A pair resized to `size × size`, as channel-major planes.
///
/// `jet` and `rgb` hold `3·size·size` values, `mask` holds `size·size`
/// values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub size: usize,
    pub jet: Vec<f32>,
    pub rgb: Vec<f32>,
    pub mask: Vec<f32>,
    pub has_nerve: bool,
}

impl PreparedSample {
    pub fn plane_len(&self) -> usize {
        self.size * self.size
    }

    pub fn mask_has_foreground(&self) -> bool {
        self.mask.iter().any(|&v| v > 0.5)
    }
}

fn planes(img: &RgbImage) -> Vec<f32> {
    let n = (img.width() * img.height()) as usize;
    let mut out = vec![0f32; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + i] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

/// Direct resize to `size × size` (bilinear for images, nearest for the
/// mask) and scaling of image values to [0, 1].
pub fn resize_and_scale(pair: &SamplePair, size: usize) -> Result<PreparedSample> {
    let (w, h) = pair.jet.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!("sample {} has a zero-area image", pair.id)));
    }
    if size == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let s = size as u32;
    let resize_rgb = |img: &RgbImage| {
        if img.dimensions() == (s, s) {
            img.clone()
        } else {
            imageops::resize(img, s, s, FilterType::Triangle)
        }
    };
    let mask = if pair.mask.dimensions() == (s, s) {
        pair.mask.clone()
    } else {
        imageops::resize(&pair.mask, s, s, FilterType::Nearest)
    };
    Ok(PreparedSample {
        id: pair.id.clone(),
        size,
        jet: planes(&resize_rgb(&pair.jet)),
        rgb: planes(&resize_rgb(&pair.rgb)),
        mask: mask.pixels().map(|p| if p.0[0] > 0 { 1.0 } else { 0.0 }).collect(),
        has_nerve: pair.has_nerve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Population mean and std per channel over `3·n`-plane images.
    fn compute<'a>(images: impl Iterator<Item = &'a [f32]>) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for img in images {
            let n = img.len() / 3;
            for c in 0..3 {
                for &v in &img[c * n..(c + 1) * n] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += n;
        }
        if count == 0 {
            return Err(Error::invalid("normalization statistics need at least one image"));
        }
        let mut mean = [0f64; 3];
        let mut std = [0f64; 3];
        for c in 0..3 {
            mean[c] = sum[c] / count as f64;
            std[c] = (sq[c] / count as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(MIN_STD);
        }
        Ok(Self { mean, std })
    }

    fn apply(&self, img: &mut [f32]) {
        let n = img.len() / 3;
        for c in 0..3 {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut img[c * n..(c + 1) * n] {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }
}

/// Per-modality channel statistics of scaled ([0, 1]) images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub jet: ChannelStats,
    pub rgb: ChannelStats,
}

impl NormalizationStats {
    /// Statistics over exactly the given samples; callers pass training ids
    /// only.
    pub fn compute(samples: &[PreparedSample]) -> Result<Self> {
        Ok(Self {
            jet: ChannelStats::compute(samples.iter().map(|s| s.jet.as_slice()))?,
            rgb: ChannelStats::compute(samples.iter().map(|s| s.rgb.as_slice()))?,
        })
    }

    pub fn standardize(&self, sample: &mut PreparedSample) {
        self.jet.apply(&mut sample.jet);
        self.rgb.apply(&mut sample.rgb);
    }
}

/// Resize, scale to [0, 1] and standardize each modality by its stats.
pub fn preprocess(pair: &SamplePair, stats: &NormalizationStats, size: usize) -> Result<PreparedSample> {
    let mut s = resize_and_scale(pair, size)?;
    stats.standardize(&mut s);
    Ok(s)
}
