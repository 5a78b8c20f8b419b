//! Sources for the depth-prior (DF) and semantic (SF) feature streams and the
//! sentence embedding. Each is read from a TSF1 file or synthesized
//! deterministically.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{load_tsf1, FeatureMap, FeatureRole, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    File,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureProviderConfig {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub channels: usize,
    /// Spatial stride relative to the input image.
    pub scale: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Bound on synthetic values.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    3.0
}

impl FeatureProviderConfig {
    pub fn synthetic(channels: usize, scale: usize, seed: u64) -> Self {
        Self {
            kind: ProviderKind::Synthetic,
            path: None,
            channels,
            scale,
            seed: Some(seed),
            amplitude: default_amplitude(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, channels: usize, scale: usize) -> Self {
        Self {
            kind: ProviderKind::File,
            path: Some(path.into()),
            channels,
            scale,
            seed: None,
            amplitude: default_amplitude(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ProviderKind::File if self.path.is_none() => {
                return Err(Error::Validation("file provider requires a path".into()))
            }
            ProviderKind::Synthetic if self.seed.is_none() => {
                return Err(Error::Validation("synthetic provider requires a seed".into()))
            }
            _ => {}
        }
        if self.channels == 0 || self.scale == 0 || !self.scale.is_power_of_two() {
            return Err(Error::Validation(format!(
                "provider needs positive channels and a power-of-two scale, got {} / {}",
                self.channels, self.scale
            )));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::Validation("provider amplitude must be positive".into()));
        }
        Ok(())
    }

    /// Feature dims produced for an `image_h x image_w` input.
    pub fn output_dims(&self, image_h: usize, image_w: usize) -> (usize, usize, usize) {
        (self.channels, image_h.div_ceil(self.scale), image_w.div_ceil(self.scale))
    }
}

fn role_stream(role: FeatureRole) -> u64 {
    match role {
        FeatureRole::DepthPrior => 1,
        FeatureRole::Semantic => 2,
        _ => 3,
    }
}

/// Load or synthesize the `role` feature map of one view.
pub fn load_feature(
    cfg: &FeatureProviderConfig,
    role: FeatureRole,
    view_index: usize,
    image_h: usize,
    image_w: usize,
) -> Result<FeatureMap> {
    cfg.validate()?;
    let (c, h, w) = cfg.output_dims(image_h, image_w);
    let tensor = match cfg.kind {
        ProviderKind::File => {
            let path = cfg.path.as_ref().expect("validated");
            let (dims, data) = load_tsf1(path)?;
            if dims != [c, h, w] {
                return Err(Error::DimsMismatch {
                    expected: vec![c, h, w],
                    found: dims,
                });
            }
            let t = Tensor3::from_vec(c, h, w, data)?;
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("feature file {}", path.display())));
            }
            t
        }
        ProviderKind::Synthetic => {
            let seed = cfg.seed.expect("validated");
            synthetic_field(seed, role_stream(role), view_index, c, h, w, cfg.amplitude)
        }
    };
    Ok(FeatureMap::new(role, tensor))
}

const BLOBS: usize = 3;
const WAVES: usize = 3;

/// Smooth pseudo-random field: per channel, a convex-weighted mix of Gaussian
/// blobs and low-frequency cosines, so `|v| <= amplitude`.
fn synthetic_field(seed: u64, stream: u64, view: usize, c: usize, h: usize, w: usize, amplitude: f64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32).wrapping_add(view as u64));
    let mut out = Tensor3::zeros(c, h, w);
    let diag = ((h * h + w * w) as f64).sqrt();
    for ch in 0..c {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..BLOBS)
            .map(|_| {
                (
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.1..0.4) * diag,
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
            .map(|_| {
                (
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let norm: f64 = blobs.iter().map(|b| b.3.abs()).sum::<f64>() + waves.iter().map(|wv| wv.3.abs()).sum::<f64>();
        let norm = norm.max(1e-12);
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = 0.0;
                for &(my, mx, s, a) in &blobs {
                    let d2 = (yf - my).powi(2) + (xf - mx).powi(2);
                    v += a * (-d2 / (2.0 * s * s)).exp();
                }
                for &(fy, fx, phase, a) in &waves {
                    let arg = std::f64::consts::TAU * (fy * yf / h as f64 + fx * xf / w as f64) + phase;
                    v += a * arg.cos();
                }
                out.set(ch, y, x, amplitude * v / norm);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding {
    pub values: Vec<f64>,
    pub view_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceProviderConfig {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub dim: usize,
}

impl SentenceProviderConfig {
    pub fn synthetic(dim: usize) -> Self {
        Self {
            kind: ProviderKind::Synthetic,
            path: None,
            dim,
        }
    }

    pub fn file(path: impl Into<PathBuf>, dim: usize) -> Self {
        Self {
            kind: ProviderKind::File,
            path: Some(path.into()),
            dim,
        }
    }
}

/// Sentence-level embedding of a view description.
///
/// The synthetic kind seeds a generator from the SHA-256 of the description
/// bytes and returns a unit-normalized Gaussian vector.
pub fn sentence_embedding(cfg: &SentenceProviderConfig, description: &str, view_index: usize) -> Result<SentenceEmbedding> {
    if cfg.dim == 0 {
        return Err(Error::Validation("sentence embedding dim must be positive".into()));
    }
    let values = match cfg.kind {
        ProviderKind::File => {
            let path = cfg
                .path
                .as_ref()
                .ok_or_else(|| Error::Validation("file sentence provider requires a path".into()))?;
            let (dims, data) = load_tsf1(path)?;
            let flat_ok = dims.iter().filter(|&&d| d != 1).count() <= 1 && data.len() == cfg.dim;
            if !flat_ok {
                return Err(Error::DimsMismatch {
                    expected: vec![cfg.dim],
                    found: dims,
                });
            }
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("sentence file {}", path.display())));
            }
            data
        }
        ProviderKind::Synthetic => {
            let digest = Sha256::digest(description.as_bytes());
            let mut seed = [0u8; 32];
            seed.copy_from_slice(&digest[..32]);
            let mut rng = ChaCha8Rng::from_seed(seed);
            let raw: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.into_iter().map(|v| v / norm).collect()
        }
    };
    Ok(SentenceEmbedding { values, view_index })
}
