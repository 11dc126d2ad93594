//! Dataset ingestion, preprocessing, augmentation, fold splitting and the
//! synthetic paired-modality generator.
//!
//! On-disk layout (shared by real and synthetic data):
//!
//! ```text
//! {root}/jet/{id}.png     8-bit RGB pseudo-colour rendering
//! {root}/rgb/{id}.png     8-bit RGB photograph, pixel-aligned with jet
//! {root}/masks/{id}.png   8-bit grayscale, 0 = background, >0 = nerve
//! {root}/labels.csv       header `id,has_nerve`, one row per id (0/1)
//! ```

mod augment;
mod dataset;
mod folds;
mod preprocess;
mod synth;

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig, Augmented, Variant};
pub use dataset::{load_dataset, write_labels, write_sample, LoadReport, LoadedDataset, SamplePair};
pub use folds::{make_folds, FoldSplit};
pub use preprocess::{preprocess, resize_and_scale, ChannelStats, NormalizationStats, PreparedSample};
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Jet,
    Rgb,
}

impl std::str::FromStr for Modality {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jet" => Ok(Modality::Jet),
            "rgb" => Ok(Modality::Rgb),
            other => Err(crate::Error::invalid(format!(
                "unknown modality `{other}` (expected jet or rgb)"
            ))),
        }
    }
}

/// Stable 64-bit FNV-1a hash, used to derive per-sample seeds.
pub(crate) fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for sample-level randomness, independent of processing order.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    seed.rotate_left(17) ^ stable_hash(id)
}
