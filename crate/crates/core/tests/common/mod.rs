//! Naive dense reference implementations used as test oracles.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Unit, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatforge::geometry::CameraParams;
use splatforge::kernels::{ParamBlock, ParamStore};
use splatforge::tensor::Tensor3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, amp: f64) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-amp..amp))
}

pub fn rand_block(rng: &mut ChaCha8Rng, shape: Vec<usize>, amp: f64) -> ParamBlock {
    let n = shape.iter().product();
    ParamBlock::new(shape, (0..n).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
}

/// Replace every parameter in `store` with uniform noise, gains near one.
pub fn randomize(store: &mut ParamStore, seed: u64, amp: f64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        let b = store.get_mut(&name).unwrap();
        let gain = name.ends_with(".gamma") || name.ends_with(".scale");
        for v in &mut b.data {
            *v = if gain { 1.0 + r.random_range(-0.2..0.2) } else { r.random_range(-amp..amp) };
        }
    }
}

/// `max |a - b| / max |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn tensor_rel_err(a: &Tensor3, b: &Tensor3) -> f64 {
    assert_eq!(a.dims(), b.dims(), "dims mismatch");
    rel_err(a.data(), b.data())
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct-definition convolution: output pixel `o` centers its taps on input `o * stride`.
pub fn conv(
    x: &Tensor3,
    w: &ParamBlock,
    b: Option<&ParamBlock>,
    stride: usize,
    dilation: usize,
    groups: usize,
    reflect_pad: bool,
) -> Tensor3 {
    let (oc_n, icg, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let (h, wd) = (x.height(), x.width());
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let half = (k / 2) as isize;
    let per_group = oc_n / groups;
    let fetch = |c: usize, y: isize, xx: isize| -> f64 {
        if reflect_pad {
            x.get(c, reflect(y, h), reflect(xx, wd))
        } else if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.get(c, y as usize, xx as usize)
        }
    };
    Tensor3::from_fn(oc_n, oh, ow, |oc, oy, ox| {
        let g = oc / per_group;
        let mut acc = b.map_or(0.0, |b| b.data[oc]);
        for i in 0..icg {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * stride) as isize + (ky as isize - half) * dilation as isize;
                    let xx = (ox * stride) as isize + (kx as isize - half) * dilation as isize;
                    acc += w.data[((oc * icg + i) * k + ky) * k + kx] * fetch(g * icg + i, y, xx);
                }
            }
        }
        acc
    })
}

pub fn conv_named(x: &Tensor3, store: &ParamStore, layer: &str, stride: usize, reflect_pad: bool) -> Tensor3 {
    conv(x, store.weight(layer).unwrap(), Some(store.bias(layer).unwrap()), stride, 1, 1, reflect_pad)
}

pub fn depthwise_named(x: &Tensor3, store: &ParamStore, layer: &str, dilation: usize) -> Tensor3 {
    conv(
        x,
        store.weight(layer).unwrap(),
        Some(store.bias(layer).unwrap()),
        1,
        dilation,
        x.channels(),
        true,
    )
}

/// Interpolation matrix of align-corners-false bilinear resampling.
fn interp_matrix(out: usize, inp: usize) -> Vec<Vec<f64>> {
    (0..out)
        .map(|o| {
            let mut row = vec![0.0; inp];
            let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = s.floor() as usize;
            let f = s - i0 as f64;
            row[i0] += 1.0 - f;
            row[(i0 + 1).min(inp - 1)] += f;
            row
        })
        .collect()
}

/// `Ry X Rx^T` per channel.
pub fn resize(x: &Tensor3, oh: usize, ow: usize) -> Tensor3 {
    let ry = interp_matrix(oh, x.height());
    let rx = interp_matrix(ow, x.width());
    Tensor3::from_fn(x.channels(), oh, ow, |c, y, xx| {
        let mut acc = 0.0;
        for (i, a) in ry[y].iter().enumerate() {
            for (j, b) in rx[xx].iter().enumerate() {
                acc += a * b * x.get(c, i, j);
            }
        }
        acc
    })
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn linear(v: &[f64], w: &ParamBlock, b: &ParamBlock) -> Vec<f64> {
    let (o, i) = (w.shape[0], w.shape[1]);
    (0..o).map(|r| b.data[r] + (0..i).map(|c| w.data[r * i + c] * v[c]).sum::<f64>()).collect()
}

pub fn linear_named(v: &[f64], store: &ParamStore, layer: &str) -> Vec<f64> {
    linear(v, store.weight(layer).unwrap(), store.bias(layer).unwrap())
}

pub fn mlp(v: &[f64], store: &ParamStore, first: &str, second: &str) -> Vec<f64> {
    let h: Vec<f64> = linear_named(v, store, first).into_iter().map(gelu).collect();
    linear_named(&h, store, second)
}

pub fn pixel(x: &Tensor3, y: usize, xx: usize) -> Vec<f64> {
    (0..x.channels()).map(|c| x.get(c, y, xx)).collect()
}

/// Apply `f` to every pixel vector.
pub fn per_pixel(x: &Tensor3, out_ch: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor3 {
    let mut out = Tensor3::zeros(out_ch, x.height(), x.width());
    for y in 0..x.height() {
        for xx in 0..x.width() {
            let v = f(&pixel(x, y, xx));
            for (c, val) in v.into_iter().enumerate() {
                out.set(c, y, xx, val);
            }
        }
    }
    out
}

pub fn layer_norm(x: &Tensor3, gamma: &[f64], beta: &[f64]) -> Tensor3 {
    per_pixel(x, x.channels(), |v| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        v.iter()
            .enumerate()
            .map(|(c, a)| (a - mean) / (var + 1e-5).sqrt() * gamma[c] + beta[c])
            .collect()
    })
}

pub fn norm_named(x: &Tensor3, store: &ParamStore, layer: &str) -> Tensor3 {
    layer_norm(
        x,
        &store.get(&format!("{layer}.gamma")).unwrap().data,
        &store.get(&format!("{layer}.beta")).unwrap().data,
    )
}

pub fn map(x: &Tensor3, f: impl Fn(f64) -> f64) -> Tensor3 {
    Tensor3::from_fn(x.channels(), x.height(), x.width(), |c, y, xx| f(x.get(c, y, xx)))
}

pub fn add(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    Tensor3::from_fn(a.channels(), a.height(), a.width(), |c, y, x| a.get(c, y, x) + b.get(c, y, x))
}

pub fn concat(parts: &[&Tensor3]) -> Tensor3 {
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    Tensor3::from_fn(total, parts[0].height(), parts[0].width(), |mut c, y, x| {
        for p in parts {
            if c < p.channels() {
                return p.get(c, y, x);
            }
            c -= p.channels();
        }
        unreachable!()
    })
}

/// Attention over every pixel token with a dense mask allowing only pairs
/// in the same `window x window` tile.
pub fn attention(q_src: &Tensor3, kv_src: &Tensor3, store: &ParamStore, prefix: &str, window: usize, heads: usize) -> Tensor3 {
    let proj = |x: &Tensor3, p: &str| {
        let l = format!("{prefix}.{p}");
        let c = store.weight(&l).unwrap().shape[0];
        per_pixel(x, c, |v| linear_named(v, store, &l))
    };
    let (q, k, v) = (proj(q_src, "q"), proj(kv_src, "k"), proj(kv_src, "v"));
    let (c, h, w) = q.dims();
    let dh = c / heads;
    let n = h * w;
    let coord = |i: usize| (i / w, i % w);
    let mask: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            let (yi, xi) = coord(i);
            (0..n)
                .map(|j| {
                    let (yj, xj) = coord(j);
                    yi / window == yj / window && xi / window == xj / window
                })
                .collect()
        })
        .collect();
    let mut out = Tensor3::zeros(c, h, w);
    for hd in 0..heads {
        let chans = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let (yi, xi) = coord(i);
            let mut allowed = Vec::new();
            let mut scores = Vec::new();
            for j in (0..n).filter(|&j| mask[i][j]) {
                let (yj, xj) = coord(j);
                let dot: f64 = chans.clone().map(|ch| q.get(ch, yi, xi) * k.get(ch, yj, xj)).sum();
                allowed.push(j);
                scores.push(dot / (dh as f64).sqrt());
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = softmax(&scores.iter().map(|s| s - m).collect::<Vec<_>>());
            for ch in chans.clone() {
                let val: f64 = allowed.iter().zip(&p).map(|(&j, pj)| pj * v.get(ch, j / w, j % w)).sum();
                out.set(ch, yi, xi, val);
            }
        }
    }
    out
}

pub fn pointwise_named(x: &Tensor3, store: &ParamStore, layer: &str) -> Tensor3 {
    let c = store.weight(layer).unwrap().shape[0];
    per_pixel(x, c, |v| linear_named(v, store, layer))
}

/// Homogeneous projection `K [R | t] [p; 1]` followed by perspective division.
pub fn project_homogeneous(p: &Vector3<f64>, cam: &CameraParams) -> (f64, f64, f64) {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
    rt.set_column(3, &cam.translation);
    let x = cam.intrinsics * rt * Vector4::new(p.x, p.y, p.z, 1.0);
    (x.x / x.z, x.y / x.z, x.z)
}

pub fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let axis = Unit::new_normalize(if axis.norm() < 1e-3 { Vector3::z() } else { axis });
    Rotation3::from_axis_angle(&axis, rng.random_range(-max_angle..max_angle)).into_inner()
}

pub fn random_camera(rng: &mut ChaCha8Rng, max_angle: f64, max_shift: f64) -> CameraParams {
    let f = rng.random_range(20.0..200.0);
    let rot = random_rotation(rng, max_angle);
    let t = Vector3::new(
        rng.random_range(-max_shift..max_shift),
        rng.random_range(-max_shift..max_shift),
        rng.random_range(-max_shift..max_shift),
    );
    CameraParams::new(
        f,
        f * rng.random_range(0.8..1.2),
        rng.random_range(10.0..60.0),
        rng.random_range(10.0..60.0),
        rot,
        t,
        0.1,
        100.0,
    )
    .unwrap()
}

/// Scalar front-to-back compositing of already-sorted `(weight, color)` pairs.
pub fn composite(layers: &[(f64, [f64; 3])], background: [f64; 3], alpha_min: f64, t_min: f64) -> [f64; 3] {
    let mut t = 1.0;
    let mut out = [0.0; 3];
    for &(a, c) in layers {
        let a = a.min(0.99);
        if a < alpha_min {
            continue;
        }
        for k in 0..3 {
            out[k] += t * a * c[k];
        }
        t *= 1.0 - a;
        if t < t_min {
            break;
        }
    }
    for k in 0..3 {
        out[k] += t * background[k];
    }
    out
}
