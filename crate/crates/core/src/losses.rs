//! Training objective: positively weighted binary cross-entropy plus a Sobel
//! edge loss, summed with equal weight.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub edge: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(bce: f64, edge: f64) -> Self {
        Self {
            bce,
            edge,
            total: bce + edge,
        }
    }
}

/// How the per-kernel edge-map difference is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeNorm {
    /// Sum over pixels of the absolute edge-response difference, divided by
    /// the pixel count and the number of kernels.
    #[default]
    PixelAbs,
    /// Euclidean norm of the whole difference map per image and kernel,
    /// divided by the same normalizers.
    ImageL2,
}

/// Fixed, untrained 3×3 edge filters.
#[derive(Debug, Clone)]
pub struct SobelBank {
    kernels: Vec<[f64; 9]>,
}

impl SobelBank {
    /// Horizontal and vertical Sobel kernels.
    pub fn standard() -> Self {
        Self {
            kernels: vec![
                [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
                [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
            ],
        }
    }

    pub fn kernels(&self) -> &[[f64; 9]] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Edge responses of a `(B, 1, H, W)` map: `(B, K, H, W)`, with
    /// reflected borders.
    pub fn responses(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("edge responses need one channel, got {c}")));
        }
        if h < 2 || w < 2 {
            return Err(Error::shape(format!("edge responses need at least 2x2, got {h}x{w}")));
        }
        let flat: Vec<f64> = self.kernels.iter().flatten().copied().collect();
        let k = Tensor::from_vec(flat, (self.len(), 1, 3, 3), x.device())?.to_dtype(x.dtype())?;
        Ok(reflect_pad1(x)?.conv2d(&k, 0, 1, 1, 1)?)
    }
}

fn reflect_pad1(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = Tensor::cat(&[&x.narrow(2, 1, 1)?, x, &x.narrow(2, h - 2, 1)?], 2)?;
    Ok(Tensor::cat(&[&x.narrow(3, 1, 1)?, &x, &x.narrow(3, w - 2, 1)?], 3)?)
}

/// Background-to-foreground pixel ratio over a set of masks. Values above
/// 0.5 count as foreground.
pub fn positive_weight<I, M>(masks: I) -> Result<f64>
where
    I: IntoIterator<Item = M>,
    M: AsRef<[f32]>,
{
    let (mut fg, mut bg) = (0u64, 0u64);
    for m in masks {
        for &v in m.as_ref() {
            if v > 0.5 {
                fg += 1;
            } else {
                bg += 1;
            }
        }
    }
    if fg == 0 {
        return Err(Error::DegenerateTrainingSet(format!(
            "no foreground pixels among {bg} training pixels; positive weight is undefined"
        )));
    }
    Ok(bg as f64 / fg as f64)
}

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_binary(target: &Tensor) -> Result<()> {
    let vals = target.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(v) = vals.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("target is not binary (found {v})")));
    }
    Ok(())
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + log(1 + exp(-|x|))
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Mean over pixels of `-(w_p y log p + (1 - y) log(1 - p))` with
/// `p = sigmoid(logit)`, evaluated in logit space.
pub fn weighted_bce(logits: &Tensor, target: &Tensor, w_p: f64) -> Result<Tensor> {
    check_pair(logits, target, "weighted bce")?;
    if !(w_p >= 0.0 && w_p.is_finite()) {
        return Err(Error::invalid(format!("positive weight must be finite and >= 0, got {w_p}")));
    }
    check_binary(target)?;
    let target = target.to_dtype(logits.dtype())?;
    let pos = (softplus(&logits.neg()?)? * &target)?;
    let neg = (softplus(logits)? * (target.neg()? + 1.0)?)?;
    Ok(((pos * w_p)? + neg)?.mean_all()?)
}

/// Edge loss between a probability map and a target, both `(B, 1, H, W)`.
pub fn edge_loss(probs: &Tensor, target: &Tensor, bank: &SobelBank, norm: EdgeNorm) -> Result<Tensor> {
    check_pair(probs, target, "edge loss")?;
    let (b, _, h, w) = probs.dims4()?;
    let target = target.to_dtype(probs.dtype())?;
    let diff = (bank.responses(&target)? - bank.responses(probs)?)?;
    let k = bank.len();
    let n = (h * w) as f64;
    match norm {
        EdgeNorm::PixelAbs => Ok((diff.abs()?.sum_all()? / (k as f64 * n * b as f64))?),
        EdgeNorm::ImageL2 => {
            let per_map = (diff.sqr()?.flatten_from(2)?.sum(D::Minus1)? + 1e-12)?.sqrt()?;
            Ok((per_map.sum_all()? / (k as f64 * n * b as f64))?)
        }
    }
}

/// Sum of [`weighted_bce`] and [`edge_loss`] on `sigmoid(logits)`. Returns
/// the differentiable total and its scalar breakdown.
pub fn total_loss(
    logits: &Tensor,
    target: &Tensor,
    w_p: f64,
    bank: &SobelBank,
    norm: EdgeNorm,
) -> Result<(Tensor, LossBreakdown)> {
    let bce = weighted_bce(logits, target, w_p)?;
    let probs = nn::sigmoid(logits)?;
    let edge = edge_loss(&probs, target, bank, norm)?;
    let breakdown = LossBreakdown::new(scalar(&bce)?, scalar(&edge)?);
    Ok(((bce + edge)?, breakdown))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    fn t(v: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn positive_weight_counts_pixels() {
        assert_eq!(positive_weight([vec![1f32, 0., 0., 0.]]).unwrap(), 3.0);
        assert_eq!(positive_weight([vec![1f32; 8], vec![1f32; 4]]).unwrap(), 0.0);
        let mut a = vec![0f32; 16];
        a[..4].fill(1.0);
        let mut b = vec![0f32; 16];
        b[..12].fill(1.0);
        assert_eq!(positive_weight([a, b]).unwrap(), 1.0);
        assert!(matches!(
            positive_weight([vec![0f32; 9]]),
            Err(Error::DegenerateTrainingSet(_))
        ));
    }

    #[test]
    fn bce_spot_values() -> Result<()> {
        let logit = t(&[0.0], 1, 1);
        let y = t(&[1.0], 1, 1);
        let l1 = scalar(&weighted_bce(&logit, &y, 1.0)?)?;
        assert!((l1 - std::f64::consts::LN_2).abs() < 1e-12);
        let l3 = scalar(&weighted_bce(&logit, &y, 3.0)?)?;
        assert!((l3 - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let sat = scalar(&weighted_bce(&t(&[60.0; 4], 2, 2), &t(&[1.0; 4], 2, 2), 2.0)?)?;
        assert!(sat < 1e-20);
        Ok(())
    }

    #[test]
    fn bce_rejects_bad_targets() {
        let logit = t(&[0.0, 0.0], 1, 2);
        assert!(weighted_bce(&logit, &t(&[0.5, 1.0], 1, 2), 1.0).is_err());
        assert!(weighted_bce(&logit, &t(&[1.0], 1, 1), 1.0).is_err());
        assert!(weighted_bce(&logit, &t(&[1.0, 0.0], 1, 2), -1.0).is_err());
    }

    #[test]
    fn edge_loss_vanishes_on_identical_and_constant_maps() -> Result<()> {
        let bank = SobelBank::standard();
        for k in bank.kernels() {
            assert_eq!(k.iter().sum::<f64>(), 0.0);
        }
        let y = t(&[0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 1., 0., 1., 1., 1., 1.], 4, 4);
        assert_eq!(scalar(&edge_loss(&y, &y, &bank, EdgeNorm::PixelAbs)?)?, 0.0);
        let p = t(&[0.3; 16], 4, 4);
        let c = t(&[1.0; 16], 4, 4);
        assert!(scalar(&edge_loss(&p, &c, &bank, EdgeNorm::PixelAbs)?)?.abs() < 1e-15);
        Ok(())
    }

    #[test]
    fn total_is_sum_of_parts() -> Result<()> {
        let logits = Tensor::randn(0f64, 2., (2, 1, 6, 6), &Device::Cpu)?;
        let y = Tensor::rand(0f64, 1., (2, 1, 6, 6), &Device::Cpu)?.ge(0.6)?.to_dtype(DType::F64)?;
        let (_, b) = total_loss(&logits, &y, 2.5, &SobelBank::standard(), EdgeNorm::PixelAbs)?;
        assert_eq!(b.total, b.bce + b.edge);
        assert!(b.bce >= 0.0 && b.edge >= 0.0);
        Ok(())
    }

    #[test]
    fn weighted_bce_increases_with_weight() -> Result<()> {
        let logit = t(&[-0.7], 1, 1);
        let y = t(&[1.0], 1, 1);
        let mut prev = -1.0;
        for w in [0.0, 0.5, 1.0, 2.0, 7.5] {
            let l = scalar(&weighted_bce(&logit, &y, w)?)?;
            assert!(l > prev);
            prev = l;
        }
        Ok(())
    }
}
