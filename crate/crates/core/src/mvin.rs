//! Multi-view interaction: a shallow residual CNN per view followed by
//! interleaved self- and cross-view window attention.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ViewContext};
use crate::kernels::{
    conv_layer, gelu_map, norm_layer, pointwise, window_attention, ConvOpts, LayerSpec, ParamStore, WindowAttention,
};
use crate::tensor::{FeatureMap, FeatureRole, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvinConfig {
    /// Output channels of the CNN (and of the attention blocks).
    pub channels: usize,
    pub window: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for MvinConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            window: 8,
            blocks: 2,
            heads: 1,
        }
    }
}

const RES_BLOCKS: usize = 2;

fn stage_channels(cfg: &MvinConfig) -> [usize; 2] {
    [(cfg.channels / 2).max(1), cfg.channels]
}

pub fn layers(cfg: &MvinConfig) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let mut in_ch = 3;
    for (s, ch) in stage_channels(cfg).into_iter().enumerate() {
        out.push(LayerSpec::conv(format!("mvin.cnn.s{s}.down"), in_ch, ch, 3));
        for r in 0..RES_BLOCKS {
            out.push(LayerSpec::conv(format!("mvin.cnn.s{s}.res{r}.conv1"), ch, ch, 3));
            out.push(LayerSpec::conv(format!("mvin.cnn.s{s}.res{r}.conv2"), ch, ch, 3));
        }
        in_ch = ch;
    }
    let c = cfg.channels;
    for b in 0..cfg.blocks {
        for kind in ["self", "cross"] {
            let p = format!("mvin.block{b}.{kind}");
            out.push(LayerSpec::norm(format!("{p}_norm"), c));
            for proj in ["q", "k", "v"] {
                out.push(LayerSpec::linear(format!("{p}.{proj}"), c, c));
            }
            out.push(LayerSpec::linear(format!("{p}_proj"), c, c));
        }
    }
    out
}

/// Shared-weight residual CNN for one view: `(3, H, W)` to `(C, H/4, W/4)`.
pub fn extract_view(image: &Tensor3, store: &ParamStore, cfg: &MvinConfig) -> Result<Tensor3> {
    if image.channels() != 3 {
        return Err(Error::shape(format!("expected RGB input, got {} channels", image.channels())));
    }
    let mut x = image.clone();
    for s in 0..2 {
        x = gelu_map(&conv_layer(&x, store, &format!("mvin.cnn.s{s}.down"), ConvOpts::DOWN)?);
        for r in 0..RES_BLOCKS {
            let p = format!("mvin.cnn.s{s}.res{r}");
            let h = gelu_map(&conv_layer(&x, store, &format!("{p}.conv1"), ConvOpts::FEATURE)?);
            let h = conv_layer(&h, store, &format!("{p}.conv2"), ConvOpts::FEATURE)?;
            x = x.add(&h)?;
        }
    }
    if x.channels() != cfg.channels {
        return Err(Error::shape(format!(
            "CNN weights produce {} channels, config expects {}",
            x.channels(),
            cfg.channels
        )));
    }
    Ok(x)
}

/// Per-view image features CF for all views.
pub fn extract_cf(images: &[Tensor3], store: &ParamStore, cfg: &MvinConfig) -> Result<Vec<FeatureMap>> {
    let first = images.first().ok_or(Error::TooFewViews(0))?;
    for (i, im) in images.iter().enumerate() {
        if (im.height(), im.width()) != (first.height(), first.width()) {
            return Err(Error::shape(format!(
                "view {i} is {}x{}, view 0 is {}x{}",
                im.height(),
                im.width(),
                first.height(),
                first.width()
            )));
        }
    }
    images
        .par_iter()
        .enumerate()
        .map(|(i, im)| {
            extract_view(im, store, cfg)
                .map(|t| FeatureMap::new(FeatureRole::Image, t))
                .view(i)
        })
        .collect()
}

fn attention<'a>(store: &'a ParamStore, prefix: &'a str, cfg: &MvinConfig) -> WindowAttention<'a> {
    WindowAttention {
        store,
        prefix,
        window: cfg.window,
        heads: cfg.heads,
    }
}

fn project(x: &Tensor3, store: &ParamStore, layer: &str) -> Result<Tensor3> {
    pointwise(x, store.weight(layer)?, store.bias(layer)?)
}

/// Cross-view features MF. Each block runs pre-norm residual self-attention
/// per view, then residual cross-attention from each view to every other
/// view, averaged over the other views. A single view skips the cross stage.
pub fn cross_view_attend(cf: &[FeatureMap], store: &ParamStore, cfg: &MvinConfig) -> Result<Vec<FeatureMap>> {
    let first = cf.first().ok_or(Error::TooFewViews(0))?;
    for f in cf {
        f.tensor.ensure_same_dims(&first.tensor, "multi-view features")?;
    }
    let mut xs: Vec<Tensor3> = cf.iter().map(|f| f.tensor.clone()).collect();
    for b in 0..cfg.blocks {
        let p = format!("mvin.block{b}.self");
        xs = xs
            .iter()
            .map(|x| {
                let n = norm_layer(x, store, &format!("{p}_norm"))?;
                let a = window_attention(&n, &n, attention(store, &p, cfg))?;
                x.add(&project(&a, store, &format!("{p}_proj"))?)
            })
            .collect::<Result<_>>()?;
        if xs.len() < 2 {
            continue;
        }
        let p = format!("mvin.block{b}.cross");
        let normed: Vec<Tensor3> = xs
            .iter()
            .map(|x| norm_layer(x, store, &format!("{p}_norm")))
            .collect::<Result<_>>()?;
        let k = xs.len();
        xs = (0..k)
            .map(|i| {
                let mut acc: Option<Tensor3> = None;
                for j in (0..k).filter(|&j| j != i) {
                    let a = window_attention(&normed[i], &normed[j], attention(store, &p, cfg))?;
                    acc = Some(match acc {
                        None => a,
                        Some(s) => s.add(&a)?,
                    });
                }
                let mean = acc.expect("k >= 2").scale(1.0 / (k - 1) as f64);
                xs[i].add(&project(&mean, store, &format!("{p}_proj"))?)
            })
            .collect::<Result<_>>()?;
    }
    Ok(xs.into_iter().map(|t| FeatureMap::new(FeatureRole::MultiView, t)).collect())
}
