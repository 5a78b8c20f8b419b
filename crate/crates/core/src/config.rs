//! Pipeline configuration and the full parameter layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depthdec::{self, DepthConfig};
use crate::error::{Error, Result};
use crate::gausshead::{self, GaussConfig};
use crate::kernels::LayerSpec;
use crate::metrics::LossWeights;
use crate::mvin::{self, MvinConfig};
use crate::providers::{FeatureProviderConfig, SentenceProviderConfig};
use crate::renderer::RenderConfig;
use crate::sh::MAX_DEGREE;
use crate::tensor::open_existing;
use crate::tsfm::{self, SourceChannels, TsfmConfig};

/// Downsampling of the image CNN, and the grid of every fused feature.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    pub mvin: MvinConfig,
    pub tsfm: TsfmConfig,
    pub depth: DepthConfig,
    pub gauss: GaussConfig,
    pub render: RenderConfig,
    pub loss: LossWeights,
    pub depth_prior: FeatureProviderConfig,
    pub semantic: FeatureProviderConfig,
    pub sentence: SentenceProviderConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            seed: 0,
            mvin: MvinConfig::default(),
            tsfm: TsfmConfig::default(),
            depth: DepthConfig::default(),
            gauss: GaussConfig::default(),
            render: RenderConfig::default(),
            loss: LossWeights::default(),
            depth_prior: FeatureProviderConfig::synthetic(128, 4, 1),
            semantic: FeatureProviderConfig::synthetic(128, 4, 2),
            sentence: SentenceProviderConfig::synthetic(384),
        }
    }
}

impl PipelineConfig {
    /// A reduced configuration for fast tests.
    pub fn tiny() -> Self {
        let mut c = Self {
            image_height: 32,
            image_width: 32,
            ..Self::default()
        };
        c.mvin.channels = 8;
        c.mvin.window = 4;
        c.mvin.blocks = 1;
        c.tsfm.channels = 8;
        c.tsfm.groups = 1;
        c.tsfm.window = 4;
        c.tsfm.routing_hidden = 8;
        c.depth.candidates = 8;
        c.depth.unet_width = 4;
        c.gauss.opacity_hidden = 4;
        c.gauss.shape_hidden = 8;
        c.render = RenderConfig::with_size(32, 32);
        c.depth_prior.channels = 6;
        c.semantic.channels = 5;
        c.sentence.dim = 16;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.image_height == 0
            || self.image_width == 0
            || !self.image_height.is_multiple_of(FEATURE_STRIDE)
            || !self.image_width.is_multiple_of(FEATURE_STRIDE)
        {
            return bad(format!(
                "image size {}x{} must be a positive multiple of {FEATURE_STRIDE}",
                self.image_height, self.image_width
            ));
        }
        let positive = [
            ("mvin.channels", self.mvin.channels),
            ("mvin.window", self.mvin.window),
            ("mvin.heads", self.mvin.heads),
            ("tsfm.channels", self.tsfm.channels),
            ("tsfm.window", self.tsfm.window),
            ("tsfm.heads", self.tsfm.heads),
            ("tsfm.routing_hidden", self.tsfm.routing_hidden),
            ("depth.unet_width", self.depth.unet_width),
            ("gauss.opacity_hidden", self.gauss.opacity_hidden),
            ("gauss.shape_hidden", self.gauss.shape_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.mvin.channels.is_multiple_of(self.mvin.heads) || !self.tsfm.channels.is_multiple_of(self.tsfm.heads) {
            return bad("attention heads must divide the channel count".into());
        }
        if self.depth.candidates < 2 {
            return bad("depth.candidates must be at least 2".into());
        }
        if self.gauss.sh_degree > MAX_DEGREE {
            return bad(format!("gauss.sh_degree above {MAX_DEGREE}"));
        }
        self.render.validate()?;
        self.loss.validate()?;
        self.depth_prior.validate()?;
        self.semantic.validate()?;
        if self.sentence.dim == 0 {
            return bad("sentence.dim must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut s = String::new();
        std::io::Read::read_to_string(&mut open_existing(path.as_ref())?, &mut s)?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn source_channels(&self) -> SourceChannels {
        SourceChannels {
            semantic: self.semantic.channels,
            depth: self.depth_prior.channels,
            multi_view: self.mvin.channels,
        }
    }
}

/// Every learned layer of the pipeline.
pub fn model_layout(cfg: &PipelineConfig) -> Vec<LayerSpec> {
    let mut out = mvin::layers(&cfg.mvin);
    out.extend(tsfm::layers(&cfg.tsfm, cfg.source_channels(), cfg.sentence.dim));
    out.extend(depthdec::layers(&cfg.depth, cfg.tsfm.channels, cfg.mvin.channels));
    out.extend(gausshead::layers(&cfg.gauss, cfg.mvin.channels, cfg.depth.candidates));
    out
}
