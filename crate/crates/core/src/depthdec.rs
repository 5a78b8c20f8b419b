//! Plane-sweep cost volumes, residual volume refinement, softmax depth
//! regression and residual depth refinement.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ViewContext};
use crate::geometry::{sweep_warp, CameraParams, DepthMap};
use crate::kernels::{bilinear_resize, conv_layer, gelu_map, sample_bilinear, ConvOpts, LayerSpec, ParamStore};
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Uniform in `1 / d`.
    Inverse,
    /// Uniform in `d`.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthConfig {
    pub candidates: usize,
    pub spacing: Spacing,
    /// Base width of the refinement U-Nets.
    pub unet_width: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            candidates: 32,
            spacing: Spacing::Inverse,
            unet_width: 32,
        }
    }
}

/// Strictly increasing depth hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthCandidates {
    values: Vec<f64>,
}

impl DepthCandidates {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    /// Largest gap between `values[k]` and its neighbors.
    pub fn spacing_at(&self, k: usize) -> f64 {
        let v = &self.values;
        let below = if k > 0 { v[k] - v[k - 1] } else { 0.0 };
        let above = if k + 1 < v.len() { v[k + 1] - v[k] } else { 0.0 };
        below.max(above)
    }
}

pub fn make_candidates(near: f64, far: f64, count: usize, spacing: Spacing) -> Result<DepthCandidates> {
    if !(near > 0.0 && near < far && far.is_finite()) || count < 2 {
        return Err(Error::InvalidRange { near, far, count });
    }
    let last = (count - 1) as f64;
    let mut values: Vec<f64> = (0..count)
        .map(|k| {
            let t = k as f64 / last;
            match spacing {
                Spacing::Linear => near + t * (far - near),
                Spacing::Inverse => 1.0 / (1.0 / near + t * (1.0 / far - 1.0 / near)),
            }
        })
        .collect();
    values[0] = near;
    values[count - 1] = far;
    Ok(DepthCandidates { values })
}

/// Matching scores `D x h x w` for one reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub scores: Tensor3,
    pub candidates: DepthCandidates,
    pub view_index: usize,
}

/// Plane-sweep correlation volumes. `cams` are given at image resolution and
/// rescaled by `1 / stride` to the feature grid.
///
/// Score at `(d, p)` is the mean over source views with an in-bounds warp of
/// `<rf_ref(p), rf_src(warp(p, d))> / sqrt(C)`, or 0 when no warp is in bounds.
pub fn build_cost_volume(
    rf: &[Tensor3],
    cams: &[CameraParams],
    candidates: &[DepthCandidates],
    stride: f64,
) -> Result<Vec<CostVolume>> {
    let k = rf.len();
    if k < 2 {
        return Err(Error::TooFewViews(k));
    }
    if cams.len() != k || candidates.len() != k {
        return Err(Error::shape(format!(
            "{k} feature maps with {} cameras and {} candidate sets",
            cams.len(),
            candidates.len()
        )));
    }
    for f in rf {
        f.ensure_same_dims(&rf[0], "cost volume features")?;
    }
    let feat_cams: Vec<CameraParams> = cams.iter().map(|c| c.downscaled(stride)).collect();
    let (c, h, w) = rf[0].dims();
    let norm = 1.0 / (c as f64).sqrt();
    (0..k)
        .map(|i| {
            let cand = &candidates[i];
            let mut scores = vec![0.0; cand.len() * h * w];
            scores.par_chunks_mut(h * w).enumerate().for_each(|(d, plane)| {
                let depth = cand.values[d];
                let mut sample = vec![0.0; c];
                for y in 0..h {
                    for x in 0..w {
                        let p = Vector2::new(x as f64, y as f64);
                        let mut sum = 0.0;
                        let mut hits = 0usize;
                        for j in (0..k).filter(|&j| j != i) {
                            let warp = sweep_warp(&p, depth, &feat_cams[i], &feat_cams[j], w, h);
                            if !warp.in_bounds {
                                continue;
                            }
                            sample_bilinear(&rf[j], warp.pixel.x, warp.pixel.y, &mut sample);
                            let dot: f64 = (0..c).map(|ch| rf[i].get(ch, y, x) * sample[ch]).sum();
                            sum += dot * norm;
                            hits += 1;
                        }
                        plane[y * w + x] = if hits > 0 { sum / hits as f64 } else { 0.0 };
                    }
                }
            });
            Ok(CostVolume {
                scores: Tensor3::from_vec(cand.len(), h, w, scores)?,
                candidates: cand.clone(),
                view_index: i,
            })
        })
        .collect()
}

/// Layers of a two-scale encoder-decoder with one skip connection.
pub fn unet_layers(prefix: &str, in_ch: usize, width: usize, out_ch: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(format!("{prefix}.enc"), in_ch, width, 3),
        LayerSpec::conv(format!("{prefix}.down"), width, 2 * width, 3),
        LayerSpec::conv(format!("{prefix}.mid"), 2 * width, 2 * width, 3),
        LayerSpec::conv(format!("{prefix}.dec"), 3 * width, width, 3),
        LayerSpec::conv(format!("{prefix}.out"), width, out_ch, 3),
    ]
}

pub fn unet(x: &Tensor3, store: &ParamStore, prefix: &str) -> Result<Tensor3> {
    let enc = gelu_map(&conv_layer(x, store, &format!("{prefix}.enc"), ConvOpts::FEATURE)?);
    let down = gelu_map(&conv_layer(&enc, store, &format!("{prefix}.down"), ConvOpts::DOWN)?);
    let mid = gelu_map(&conv_layer(&down, store, &format!("{prefix}.mid"), ConvOpts::FEATURE)?);
    let up = bilinear_resize(&mid, enc.height(), enc.width())?;
    let dec = gelu_map(&conv_layer(&Tensor3::concat(&[&enc, &up])?, store, &format!("{prefix}.dec"), ConvOpts::FEATURE)?);
    conv_layer(&dec, store, &format!("{prefix}.out"), ConvOpts::FEATURE)
}

pub fn layers(cfg: &DepthConfig, rf_channels: usize, cf_channels: usize) -> Vec<LayerSpec> {
    let w = cfg.unet_width;
    let mut out = unet_layers("depth.volume", rf_channels + cfg.candidates, w, cfg.candidates);
    out.push(LayerSpec::conv("depth.refine.composite", rf_channels + cf_channels, w, 3));
    out.extend(unet_layers("depth.refine", 3 + w + 1, w, 1));
    out
}

/// Add a U-Net residual predicted from `cat(RF, V)` to the volume.
pub fn refine_volume(rf: &Tensor3, v: &CostVolume, store: &ParamStore) -> Result<CostVolume> {
    let input = Tensor3::concat(&[rf, &v.scores])?;
    let residual = unet(&input, store, "depth.volume")?;
    let scores = v.scores.add(&residual)?;
    Ok(CostVolume {
        scores,
        candidates: v.candidates.clone(),
        view_index: v.view_index,
    })
}

/// Per-pixel maximum softmax probability over candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ConfidenceMap {
    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_vec(1, self.height, self.width, self.values.clone()).expect("consistent dims")
    }
}

/// Softmax over candidates, then expected depth and peak probability.
pub fn regress_depth(v: &CostVolume) -> Result<(DepthMap, ConfidenceMap)> {
    let (d, h, w) = v.scores.dims();
    if d != v.candidates.len() {
        return Err(Error::shape(format!("{d} score planes for {} candidates", v.candidates.len())));
    }
    let n = h * w;
    let s = v.scores.data();
    let cand = v.candidates.values();
    let mut depth = vec![0.0; n];
    let mut conf = vec![0.0; n];
    let mut probs = vec![0.0; d];
    for p in 0..n {
        for k in 0..d {
            probs[k] = s[k * n + p];
        }
        crate::kernels::softmax_in_place(&mut probs);
        let expected: f64 = probs.iter().zip(cand).map(|(a, b)| a * b).sum();
        depth[p] = expected.clamp(cand[0], cand[d - 1]);
        conf[p] = probs.iter().copied().fold(0.0, f64::max);
    }
    Ok((
        DepthMap::new(h, w, depth, v.view_index)?,
        ConfidenceMap {
            height: h,
            width: w,
            values: conf,
        },
    ))
}

pub fn depth_tensor(d: &DepthMap) -> Tensor3 {
    Tensor3::from_vec(1, d.height, d.width, d.values.clone()).expect("consistent dims")
}

/// Residual refinement of one view's depth at image resolution, clamped to
/// `[0.5 * near, 2 * far]`.
pub fn refine_view_depth(
    image: &Tensor3,
    rf: &Tensor3,
    cf: &Tensor3,
    depth: &DepthMap,
    cam: &CameraParams,
    store: &ParamStore,
) -> Result<DepthMap> {
    let (h, w) = (image.height(), image.width());
    let composite = conv_layer(&Tensor3::concat(&[rf, cf])?, store, "depth.refine.composite", ConvOpts::FEATURE)?;
    let composite = bilinear_resize(&composite, h, w)?;
    let up = bilinear_resize(&depth_tensor(depth), h, w)?;
    let residual = unet(&Tensor3::concat(&[image, &composite, &up])?, store, "depth.refine")?;
    let (lo, hi) = (0.5 * cam.near, 2.0 * cam.far);
    let values = up
        .data()
        .iter()
        .zip(residual.data())
        .map(|(d, r)| (d + r).clamp(lo, hi))
        .collect::<Vec<_>>();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("refined depth".into()));
    }
    DepthMap::new(h, w, values, depth.view_index)
}

pub fn refine_depth(
    images: &[Tensor3],
    rf: &[Tensor3],
    cf: &[Tensor3],
    depth: &[DepthMap],
    cams: &[CameraParams],
    store: &ParamStore,
) -> Result<Vec<DepthMap>> {
    let k = images.len();
    if rf.len() != k || cf.len() != k || depth.len() != k || cams.len() != k {
        return Err(Error::shape("refine_depth needs one of each input per view"));
    }
    (0..k)
        .into_par_iter()
        .map(|i| refine_view_depth(&images[i], &rf[i], &cf[i], &depth[i], &cams[i], store).view(i))
        .collect()
}
