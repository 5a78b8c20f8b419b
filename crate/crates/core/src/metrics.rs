//! Image metrics and the weighted reconstruction loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const PSNR_CAP_DB: f64 = 120.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_lpips: f64,
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            lambda_lpips: 0.05,
            lambda_ssim: 0.03,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_mse, self.lambda_lpips, self.lambda_ssim];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Validation("loss weights must be non-negative".into()))
        }
    }
}

/// Optional perceptual distance between two images.
pub trait PerceptualScorer {
    fn score(&self, rendered: &Tensor3, target: &Tensor3) -> Result<f64>;
}

fn same(a: &Tensor3, b: &Tensor3) -> Result<()> {
    a.ensure_same_dims(b, "metric inputs")
}

pub fn mse(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    same(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::shape("empty images"));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / n as f64)
}

/// PSNR from an MSE of unit-range images, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(m: f64) -> f64 {
    if m < 1e-12 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of one plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let n = mu_a.len();
    let mut sum = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    sum / n as f64
}

/// Gaussian-window SSIM averaged over valid positions and then channels.
pub fn ssim(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    same(a, b)?;
    let (c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    if c == 0 {
        return Err(Error::shape("image has no channels"));
    }
    let total: f64 = (0..c).map(|ch| ssim_plane(a.channel(ch), b.channel(ch), h, w)).sum();
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub perceptual: f64,
    pub ssim: f64,
    pub lambda_mse: f64,
    pub lambda_lpips: f64,
    pub lambda_ssim: f64,
}

/// `l_mse * mse + l_lpips * perceptual + l_ssim * (1 - ssim)`; the
/// perceptual term is zero without a scorer.
pub fn composite_loss(
    rendered: &Tensor3,
    target: &Tensor3,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualScorer>,
) -> Result<(f64, LossParts)> {
    weights.validate()?;
    let m = mse(rendered, target)?;
    let s = ssim(rendered, target)?;
    let p = match perceptual {
        Some(scorer) => scorer.score(rendered, target)?,
        None => 0.0,
    };
    let total = weights.lambda_mse * m + weights.lambda_lpips * p + weights.lambda_ssim * (1.0 - s);
    Ok((
        total,
        LossParts {
            mse: m,
            perceptual: p,
            ssim: s,
            lambda_mse: weights.lambda_mse,
            lambda_lpips: weights.lambda_lpips,
            lambda_ssim: weights.lambda_ssim,
        },
    ))
}

/// One evaluation as written to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub loss_total: f64,
    pub loss_parts: LossParts,
}

pub fn evaluate(
    rendered: &Tensor3,
    target: &Tensor3,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualScorer>,
) -> Result<MetricsReport> {
    let (total, parts) = composite_loss(rendered, target, weights, perceptual)?;
    Ok(MetricsReport {
        psnr_db: psnr_from_mse(parts.mse),
        ssim: parts.ssim,
        mse: parts.mse,
        loss_total: total,
        loss_parts: parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(seed: u64) -> Tensor3 {
        Tensor3::from_fn(3, 16, 16, |c, y, x| {
            ((seed as f64 + 1.3 * c as f64 + 0.7 * y as f64 * x as f64 + 0.1 * x as f64).sin() + 1.0) / 2.0
        })
    }

    #[test]
    fn mse_and_psnr_examples() {
        let z = Tensor3::zeros(3, 4, 4);
        let o = Tensor3::filled(3, 4, 4, 1.0);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_CAP_DB);
        assert!((psnr_from_mse(1e-3) - 30.0).abs() < 1e-9);
        assert!(psnr_from_mse(1e-4) > psnr_from_mse(1e-3));
        assert!(mse(&z, &Tensor3::zeros(3, 4, 5)).is_err());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Tensor3::filled(3, 12, 12, 0.25);
        let b = Tensor3::filled(3, 12, 12, 0.75);
        let want = (2.0 * 0.25 * 0.75 + SSIM_C1) / (0.25f64.powi(2) + 0.75f64.powi(2) + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let (a, b) = (noise(1), noise(2));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(matches!(
            ssim(&Tensor3::zeros(3, 10, 20), &Tensor3::zeros(3, 10, 20)),
            Err(Error::TooSmall { .. })
        ));
    }

    struct Constant(f64);

    impl PerceptualScorer for Constant {
        fn score(&self, _: &Tensor3, _: &Tensor3) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn composite_loss_terms() {
        let w = LossWeights::default();
        let (a, b) = (noise(3), noise(4));
        let (t0, _) = composite_loss(&a, &a, &w, None).unwrap();
        assert!(t0.abs() < 1e-9);
        let (base, parts) = composite_loss(&a, &b, &w, None).unwrap();
        let (with, _) = composite_loss(&a, &b, &w, Some(&Constant(2.0))).unwrap();
        assert!((with - base - 0.10).abs() < 1e-12);
        assert!((base - (parts.mse + 0.03 * (1.0 - parts.ssim))).abs() < 1e-15);
    }
}
