//! Fixtures shared by the benchmarks.

use nerveseg::data::{resize_and_scale, NormalizationStats, PreparedSample, SynthConfig};
use nerveseg::Result;

/// `n` standardized synthetic samples at `size`×`size`.
pub fn prepared_samples(n: usize, size: usize) -> Result<Vec<PreparedSample>> {
    let pairs = SynthConfig {
        n,
        size: size.max(64),
        seed: 11,
        ..Default::default()
    }
    .samples()?;
    let mut samples = pairs
        .iter()
        .map(|p| resize_and_scale(p, size))
        .collect::<Result<Vec<_>>>()?;
    let stats = NormalizationStats::compute(&samples)?;
    for s in &mut samples {
        stats.standardize(s);
    }
    Ok(samples)
}
