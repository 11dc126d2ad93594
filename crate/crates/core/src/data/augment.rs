use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PreparedSample;

/// Photometric ranges; images are assumed scaled to [0, 1] and results are
/// clamped back into that range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    VFlipBrightness { factor: f64 },
    HFlipContrast { factor: f64 },
    /// Counter-clockwise rotation by `quarter_turns · 90°`.
    Rotate { quarter_turns: u8 },
    Noise,
}

impl Variant {
    pub fn suffix(&self) -> String {
        match self {
            Variant::VFlipBrightness { .. } => "vflip".into(),
            Variant::HFlipContrast { .. } => "hflip".into(),
            Variant::Rotate { quarter_turns } => format!("rot{}", 90 * *quarter_turns as u32),
            Variant::Noise => "noise".into(),
        }
    }

    /// The positional part of the variant applied to `channels` stacked
    /// `size × size` planes.
    pub fn reposition(&self, data: &[f32], channels: usize, size: usize) -> Vec<f32> {
        let n = size * size;
        assert_eq!(data.len(), channels * n, "plane data does not match shape");
        let mut out = Vec::with_capacity(data.len());
        for c in 0..channels {
            let plane = &data[c * n..(c + 1) * n];
            match self {
                Variant::VFlipBrightness { .. } => {
                    for y in (0..size).rev() {
                        out.extend_from_slice(&plane[y * size..(y + 1) * size]);
                    }
                }
                Variant::HFlipContrast { .. } => {
                    for y in 0..size {
                        out.extend(plane[y * size..(y + 1) * size].iter().rev());
                    }
                }
                Variant::Rotate { quarter_turns } => {
                    let mut p = plane.to_vec();
                    for _ in 0..*quarter_turns % 4 {
                        p = rot90(&p, size);
                    }
                    out.extend(p);
                }
                Variant::Noise => out.extend_from_slice(plane),
            }
        }
        out
    }
}

fn rot90(p: &[f32], s: usize) -> Vec<f32> {
    let mut out = vec![0f32; p.len()];
    for y in 0..s {
        for x in 0..s {
            out[y * s + x] = p[x * s + (s - 1 - y)];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub variant: Variant,
    pub sample: PreparedSample,
}

fn scale(img: &mut [f32], f: f64) {
    for v in img {
        *v = (*v as f64 * f).clamp(0.0, 1.0) as f32;
    }
}

fn contrast(img: &mut [f32], f: f64) {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    for v in img {
        *v = ((*v as f64 - mean) * f + mean).clamp(0.0, 1.0) as f32;
    }
}

/// The four additive variants of one sample. Jet and rgb share every random
/// draw; the mask only receives positional transforms.
pub fn augment<R: Rng + ?Sized>(sample: &PreparedSample, rng: &mut R, cfg: &AugmentConfig) -> Vec<Augmented> {
    let s = sample.size;
    let bright = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness);
    let contr = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast);
    let turns = rng.gen_range(1..=3u8);
    let variants = [
        Variant::VFlipBrightness { factor: bright },
        Variant::HFlipContrast { factor: contr },
        Variant::Rotate { quarter_turns: turns },
        Variant::Noise,
    ];
    let noise: Vec<f32> = if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        (0..3 * s * s).map(|_| normal.sample(rng) as f32).collect()
    } else {
        vec![0.0; 3 * s * s]
    };
    variants
        .into_iter()
        .map(|variant| {
            let mut jet = variant.reposition(&sample.jet, 3, s);
            let mut rgb = variant.reposition(&sample.rgb, 3, s);
            let mask = variant.reposition(&sample.mask, 1, s);
            for img in [&mut jet, &mut rgb] {
                match variant {
                    Variant::VFlipBrightness { factor } => scale(img, factor),
                    Variant::HFlipContrast { factor } => contrast(img, factor),
                    Variant::Rotate { .. } => {}
                    Variant::Noise => {
                        for (v, n) in img.iter_mut().zip(&noise) {
                            *v = (*v + n).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            Augmented {
                variant,
                sample: PreparedSample {
                    id: format!("{}~{}", sample.id, variant.suffix()),
                    size: s,
                    jet,
                    rgb,
                    mask,
                    has_nerve: sample.has_nerve,
                },
            }
        })
        .collect()
}
