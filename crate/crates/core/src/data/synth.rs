//! Synthetic stand-in for paired nerve imagery.
//!
//! Each positive sample has one target band. The jet rendering shows it as a
//! bright pseudo-colour ridge next to distractor ridges of the same
//! intensity profile, so jet alone cannot tell them apart. The rgb rendering
//! lifts every band only slightly, but the target band also carries a stripe
//! texture that the distractors lack.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{sample_seed, write_labels, write_sample, SamplePair};
use crate::error::{Error, Result};

const CURVE_SEGMENTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    /// Fraction of samples (rounded down) with no target band.
    pub empty_fraction: f64,
    /// Maximum number of distractor ridges per image.
    pub distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 40,
            size: 256,
            seed: 7,
            empty_fraction: 0.2,
            distractors: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n == 0 {
            errs.push("n must be at least 1".to_string());
        }
        if self.size < 64 {
            errs.push(format!("size must be at least 64, got {}", self.size));
        }
        if !(0.0..1.0).contains(&self.empty_fraction) {
            errs.push(format!("empty_fraction must lie in [0, 1), got {}", self.empty_fraction));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Generates all samples in memory, ordered by id.
    pub fn samples(&self) -> Result<Vec<SamplePair>> {
        self.validate()?;
        let n_empty = (self.n as f64 * self.empty_fraction).floor() as usize;
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let mut empty = vec![false; self.n];
        for &i in &order[..n_empty] {
            empty[i] = true;
        }
        Ok((0..self.n)
            .map(|i| {
                let id = format!("synth_{i:04}");
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed, &id));
                render(id, self.size, !empty[i], self.distractors, &mut rng)
            })
            .collect())
    }
}

/// Writes a synthetic dataset in the standard layout under `out`.
pub fn synth_generate(out: &Path, cfg: &SynthConfig) -> Result<Vec<SamplePair>> {
    let pairs = cfg.samples()?;
    for p in &pairs {
        write_sample(out, p)?;
    }
    write_labels(out, &pairs)?;
    Ok(pairs)
}

/// A sinusoidally bent line in unit coordinates.
struct Curve {
    points: Vec<(f64, f64)>,
    half_width: f64,
    peak: f64,
}

impl Curve {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let (cx, cy) = (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75));
        let theta = rng.gen_range(0.0..PI);
        let (ux, uy) = (theta.cos(), theta.sin());
        let amp = rng.gen_range(0.03..0.10);
        let freq = rng.gen_range(1.5 * PI..3.0 * PI);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let points = (0..=CURVE_SEGMENTS)
            .map(|i| {
                let t = -0.8 + 1.6 * i as f64 / CURVE_SEGMENTS as f64;
                let off = amp * (freq * t + phase).sin();
                (cx + t * ux - off * uy, cy + t * uy + off * ux)
            })
            .collect();
        Self {
            points,
            half_width: rng.gen_range(0.035..0.055),
            peak: rng.gen_range(0.75..0.95),
        }
    }

    fn distance(&self, x: f64, y: f64) -> f64 {
        self.points
            .windows(2)
            .map(|s| segment_distance(x, y, s[0], s[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Closest approach between the visible parts of two curves.
    fn gap(&self, other: &Curve) -> f64 {
        self.points
            .iter()
            .filter(|(x, y)| (-0.1..1.1).contains(x) && (-0.1..1.1).contains(y))
            .map(|&(x, y)| other.distance(x, y))
            .fold(f64::INFINITY, f64::min)
    }

    fn visible(&self) -> bool {
        self.points
            .iter()
            .filter(|(x, y)| (0.05..0.95).contains(x) && (0.05..0.95).contains(y))
            .count()
            > CURVE_SEGMENTS / 4
    }

    /// Ridge profile: 1 on the centre line, 0.5 at the band edge.
    fn profile(&self, d: f64) -> f64 {
        (-(d / self.half_width).powi(4) * std::f64::consts::LN_2).exp()
    }
}

fn segment_distance(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (px, py) = (a.0 + t * dx - x, a.1 + t * dy - y);
    (px * px + py * py).sqrt()
}

/// Sum of a few random low-frequency cosines, roughly in [-1, 1].
struct SmoothField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl SmoothField {
    fn random<R: Rng>(rng: &mut R, waves: usize) -> Self {
        Self {
            waves: (0..waves)
                .map(|_| {
                    let angle = rng.gen_range(0.0..2.0 * PI);
                    let k = rng.gen_range(1.0..4.0) * 2.0 * PI;
                    (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0))
                })
                .collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        self.waves.iter().map(|&(kx, ky, p, a)| a * (kx * x + ky * y + p).cos()).sum::<f64>() / total
    }
}

fn jet_colormap(v: f64) -> [f64; 3] {
    let f = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn render<R: Rng>(id: String, size: usize, has_nerve: bool, max_distractors: usize, rng: &mut R) -> SamplePair {
    let target = loop {
        let c = Curve::random(rng);
        if c.visible() {
            break c;
        }
    };
    let wanted = if has_nerve {
        rng.gen_range(1..=max_distractors.max(1)).min(max_distractors)
    } else {
        rng.gen_range(0..=max_distractors)
    };
    // Without a nerve the "target" slot is just one more distractor.
    let mut ridges = vec![target];
    for _ in 0..200 {
        if ridges.len() > wanted {
            break;
        }
        let c = Curve::random(rng);
        if c.visible() && ridges.iter().all(|r| c.gap(r) > c.half_width + r.half_width + 0.05) {
            ridges.push(c);
        }
    }
    let clutter = SmoothField::random(rng, 5);
    let tissue = SmoothField::random(rng, 4);
    let base = [
        0.72 + rng.gen_range(-0.05..0.05),
        0.48 + rng.gen_range(-0.05..0.05),
        0.42 + rng.gen_range(-0.05..0.05),
    ];
    let stripe_angle = rng.gen_range(0.0..PI);
    let (sx, sy) = (stripe_angle.cos(), stripe_angle.sin());
    let stripe_period = 0.07;
    let jet_noise = Normal::new(0.0, 0.01).unwrap();
    let rgb_noise = Normal::new(0.0, 0.015).unwrap();

    let s = size as u32;
    let mut jet = RgbImage::new(s, s);
    let mut rgb = RgbImage::new(s, s);
    let mut mask = GrayImage::new(s, s);
    for py in 0..s {
        for px in 0..s {
            let x = (px as f64 + 0.5) / size as f64;
            let y = (py as f64 + 0.5) / size as f64;
            let mut intensity = 0.17 + 0.12 * clutter.at(x, y);
            let mut lift = 0.0;
            let mut in_target = false;
            for (i, r) in ridges.iter().enumerate() {
                let d = r.distance(x, y);
                intensity = intensity.max(r.peak * r.profile(d));
                if d < r.half_width {
                    lift = 0.04f64.max(lift);
                    if i == 0 && has_nerve {
                        in_target = true;
                    }
                }
            }
            intensity += jet_noise.sample(rng);
            let j = jet_colormap(intensity.clamp(0.0, 1.0));
            jet.put_pixel(px, py, Rgb([to_u8(j[0]), to_u8(j[1]), to_u8(j[2])]));

            let shade = 0.06 * tissue.at(x, y) + lift;
            let texture = if in_target {
                0.09 * (2.0 * PI * (x * sx + y * sy) / stripe_period).sin().signum()
            } else {
                0.0
            };
            let n = rgb_noise.sample(rng);
            let c: Vec<u8> = base.iter().map(|&b| to_u8(b + shade + texture + n)).collect();
            rgb.put_pixel(px, py, Rgb([c[0], c[1], c[2]]));
            mask.put_pixel(px, py, Luma([u8::from(in_target)]));
        }
    }
    let has_nerve = has_nerve && mask.pixels().any(|p| p.0[0] > 0);
    SamplePair {
        id,
        jet,
        rgb,
        mask,
        has_nerve,
    }
}
