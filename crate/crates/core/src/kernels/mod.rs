//! Deterministic numeric building blocks shared by every neural stage.
//!
//! Every reduction runs in a fixed order, so results are bit-identical for
//! any thread count.

mod attention;
mod params;

pub use attention::{window_attention, window_attention_traced, AttentionTrace, WindowAttention};
pub use params::{init_params, LayerKind, LayerSpec, ParamBlock, ParamStore, ARCHIVE_MAGIC};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvOpts {
    /// Stride-1 reflect-padded convolution.
    pub const FEATURE: ConvOpts = ConvOpts {
        stride: 1,
        dilation: 1,
        groups: 1,
        padding: Padding::Reflect,
    };

    /// Stride-2 zero-padded downsampling convolution.
    pub const DOWN: ConvOpts = ConvOpts {
        stride: 2,
        dilation: 1,
        groups: 1,
        padding: Padding::Zero,
    };

    pub fn depthwise(channels: usize, dilation: usize) -> ConvOpts {
        ConvOpts {
            stride: 1,
            dilation,
            groups: channels,
            padding: Padding::Reflect,
        }
    }
}

/// Map a possibly out-of-range index into `[0, n)`; `None` means a zero tap.
#[inline]
fn pad_index(i: isize, n: usize, padding: Padding) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n - 1);
            let mut j = i.rem_euclid(period);
            if j >= n {
                j = period - j;
            }
            Some(j as usize)
        }
    }
}

/// Cross-correlation with "same" padding: output spatial dims are `ceil(in / stride)`.
///
/// `weight` has shape `(out, in / groups, k, k)` with odd `k`.
pub fn conv2d(x: &Tensor3, weight: &ParamBlock, bias: Option<&ParamBlock>, opts: ConvOpts) -> Result<Tensor3> {
    let [out_ch, in_per_group, k, k2] = weight.shape[..] else {
        return Err(Error::shape(format!("conv weight must be 4-D, got {:?}", weight.shape)));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape(format!("conv kernel must be square and odd, got {k}x{k2}")));
    }
    let groups = opts.groups.max(1);
    if x.channels() != in_per_group * groups || out_ch % groups != 0 {
        return Err(Error::shape(format!(
            "conv expects {} input channels in {groups} groups, got {}",
            in_per_group * groups,
            x.channels()
        )));
    }
    if let Some(b) = bias {
        if b.data.len() != out_ch {
            return Err(Error::shape(format!("conv bias length {} vs {out_ch}", b.data.len())));
        }
    }
    if opts.stride == 0 || opts.dilation == 0 {
        return Err(Error::shape("conv stride and dilation must be positive"));
    }
    let (h, w) = (x.height(), x.width());
    let oh = h.div_ceil(opts.stride);
    let ow = w.div_ceil(opts.stride);
    let half = (k / 2) as isize;
    let dil = opts.dilation as isize;
    let tap_map = |o: usize, n: usize| -> Vec<Option<usize>> {
        (0..k)
            .map(|t| pad_index((o * opts.stride) as isize + (t as isize - half) * dil, n, opts.padding))
            .collect()
    };
    let rows: Vec<Vec<Option<usize>>> = (0..oh).map(|o| tap_map(o, h)).collect();
    let cols: Vec<Vec<Option<usize>>> = (0..ow).map(|o| tap_map(o, w)).collect();
    let out_per_group = out_ch / groups;
    let xd = x.data();
    let plane = h * w;

    let mut out = vec![0.0; out_ch * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, dst)| {
        let g = oc / out_per_group;
        let b = bias.map_or(0.0, |b| b.data[oc]);
        let wbase = oc * in_per_group * k * k;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for icg in 0..in_per_group {
                    let src = &xd[(g * in_per_group + icg) * plane..][..plane];
                    let wk = &weight.data[wbase + icg * k * k..][..k * k];
                    for (ky, ry) in rows[oy].iter().enumerate() {
                        let Some(ry) = ry else { continue };
                        let row = &src[ry * w..][..w];
                        for (kx, rx) in cols[ox].iter().enumerate() {
                            if let Some(rx) = rx {
                                acc += wk[ky * k + kx] * row[*rx];
                            }
                        }
                    }
                }
                dst[oy * ow + ox] = acc + b;
            }
        }
    });
    Tensor3::from_vec(out_ch, oh, ow, out)
}

/// Convolution looked up by layer name in a [`ParamStore`].
pub fn conv_layer(x: &Tensor3, store: &ParamStore, layer: &str, opts: ConvOpts) -> Result<Tensor3> {
    conv2d(x, store.weight(layer)?, Some(store.bias(layer)?), opts)
}

/// Bilinear resampling with align-corners-false sampling.
pub fn bilinear_resize(x: &Tensor3, out_h: usize, out_w: usize) -> Result<Tensor3> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be positive"));
    }
    if (out_h, out_w) == (x.height(), x.width()) {
        return Ok(x.clone());
    }
    let taps = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|o| taps(o, out_h, x.height())).collect();
    let xs: Vec<_> = (0..out_w).map(|o| taps(o, out_w, x.width())).collect();
    let mut out = vec![0.0; x.channels() * out_h * out_w];
    out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(c, dst)| {
        let src = x.channel(c);
        let w = x.width();
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    Tensor3::from_vec(x.channels(), out_h, out_w, out)
}

/// Bilinear sample of every channel at continuous pixel `(x, y)` (centers at
/// integers), clamping to the border. Writes into `out`.
pub fn sample_bilinear(t: &Tensor3, x: f64, y: f64, out: &mut [f64]) {
    let (h, w) = (t.height(), t.width());
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    for (c, o) in out.iter_mut().enumerate().take(t.channels()) {
        let p = t.channel(c);
        let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
        let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn gelu_map(x: &Tensor3) -> Tensor3 {
    x.map(gelu)
}

/// `W v + b` with `W` of shape `(out, in)`.
pub fn linear(v: &[f64], weight: &ParamBlock, bias: &ParamBlock) -> Result<Vec<f64>> {
    let [outputs, inputs] = weight.shape[..] else {
        return Err(Error::shape(format!("linear weight must be 2-D, got {:?}", weight.shape)));
    };
    if v.len() != inputs || bias.data.len() != outputs {
        return Err(Error::shape(format!(
            "linear {inputs}->{outputs} applied to length {} (bias {})",
            v.len(),
            bias.data.len()
        )));
    }
    Ok((0..outputs)
        .map(|o| {
            let row = &weight.data[o * inputs..][..inputs];
            row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + bias.data[o]
        })
        .collect())
}

pub fn linear_layer(v: &[f64], store: &ParamStore, layer: &str) -> Result<Vec<f64>> {
    linear(v, store.weight(layer)?, store.bias(layer)?)
}

/// affine -> GELU -> affine.
pub fn mlp(v: &[f64], store: &ParamStore, first: &str, second: &str) -> Result<Vec<f64>> {
    let hidden: Vec<f64> = linear_layer(v, store, first)?.into_iter().map(gelu).collect();
    linear_layer(&hidden, store, second)
}

/// Apply a linear layer independently at every pixel (a 1x1 convolution).
pub fn pointwise(x: &Tensor3, weight: &ParamBlock, bias: &ParamBlock) -> Result<Tensor3> {
    let [outputs, inputs] = weight.shape[..] else {
        return Err(Error::shape(format!("pointwise weight must be 2-D, got {:?}", weight.shape)));
    };
    let as_conv = ParamBlock {
        shape: vec![outputs, inputs, 1, 1],
        data: weight.data.clone(),
    };
    conv2d(x, &as_conv, Some(bias), ConvOpts::FEATURE)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm across channels at each pixel.
pub fn layer_norm(x: &Tensor3, gamma: &ParamBlock, beta: &ParamBlock) -> Result<Tensor3> {
    let c = x.channels();
    if gamma.data.len() != c || beta.data.len() != c {
        return Err(Error::shape(format!(
            "layer norm over {c} channels with gamma {} / beta {}",
            gamma.data.len(),
            beta.data.len()
        )));
    }
    let n = x.plane_len();
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for p in 0..n {
        let mean = (0..c).map(|ch| xd[ch * n + p]).sum::<f64>() / c as f64;
        let var = (0..c).map(|ch| (xd[ch * n + p] - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ch in 0..c {
            out[ch * n + p] = (xd[ch * n + p] - mean) * inv * gamma.data[ch] + beta.data[ch];
        }
    }
    Tensor3::from_vec(c, x.height(), x.width(), out)
}

pub fn norm_layer(x: &Tensor3, store: &ParamStore, layer: &str) -> Result<Tensor3> {
    layer_norm(x, store.get(&format!("{layer}.gamma"))?, store.get(&format!("{layer}.beta"))?)
}
