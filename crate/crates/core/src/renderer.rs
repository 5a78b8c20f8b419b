//! Tile-based Gaussian rasterizer with an analytic backward pass.
//!
//! Gaussians are sorted once by camera depth (stable on index), binned into
//! tiles by the bounding box of their cutoff radius, and each pixel applies
//! the exact radius test. A pixel's result therefore depends only on the
//! global order, never on the tiling or the thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gausshead::{quaternion_to_matrix, GaussianSet, QUAT_EPS};
use crate::geometry::{CameraParams, MIN_DEPTH};
use crate::sh::{basis_with_grad, raw_color};
use crate::tensor::Tensor3;

/// Low-pass term added to every screen-space covariance.
pub const COV2D_BLUR: f64 = 0.3;
pub const MAX_WEIGHT: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub tile: usize,
    pub alpha_min: f64,
    pub transmittance_min: f64,
    pub radius_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            background: [0.0; 3],
            tile: 16,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            radius_sigma: 3.0,
        }
    }
}

impl RenderConfig {
    pub fn with_size(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("render config: {m}")));
        if self.width == 0 || self.height == 0 || self.tile == 0 {
            return bad("width, height and tile must be positive");
        }
        if !self.background.iter().all(|v| (0.0..=1.0).contains(v)) {
            return bad("background outside [0, 1]");
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < 1.0) {
            return bad("alpha_min outside (0, 1)");
        }
        if !(self.transmittance_min > 0.0 && self.transmittance_min < 1.0) {
            return bad("transmittance_min outside (0, 1)");
        }
        if !(self.radius_sigma > 0.0 && self.radius_sigma.is_finite()) {
            return bad("radius_sigma must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor3,
    /// `1 - T_end` per pixel, row-major.
    pub alpha_accum: Vec<f64>,
    /// Gaussians that contributed to each pixel, row-major.
    pub gaussian_count: Vec<u32>,
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    /// Regularized screen covariance.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Everything the forward and backward passes need about one Gaussian.
#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    p_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    sigma_cam: Matrix3<f64>,
    mean: Vector2<f64>,
    cov: Matrix2<f64>,
    conic: Matrix2<f64>,
    radius: f64,
    opacity: f64,
    raw: [f64; 3],
    color: [f64; 3],
}

fn unit_quaternion(q: [f64; 4]) -> Option<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    (n >= QUAT_EPS).then(|| q.map(|v| v / n))
}

fn world_covariance(q: [f64; 4], s: [f64; 3]) -> Matrix3<f64> {
    let qn = unit_quaternion(q).unwrap_or([1.0, 0.0, 0.0, 0.0]);
    let r = quaternion_to_matrix(qn);
    let d = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    r * d * r.transpose()
}

fn jacobian(p: &Vector3<f64>, cam: &CameraParams) -> Matrix2x3<f64> {
    let (fx, fy) = (cam.fx(), cam.fy());
    let iz = 1.0 / p.z;
    Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz * iz, 0.0, fy * iz, -fy * p.y * iz * iz)
}

fn splat(g: &GaussianSet, i: usize, cam: &CameraParams, radius_sigma: f64) -> Option<Splat> {
    let mu = Vector3::from(g.centers[i]);
    let p = cam.world_to_camera(&mu);
    if !(p.z > MIN_DEPTH) {
        return None;
    }
    let w = cam.rotation;
    let sigma_cam = w * world_covariance(g.rotations[i], g.scales[i]) * w.transpose();
    let jac = jacobian(&p, cam);
    let mut cov = jac * sigma_cam * jac.transpose();
    cov[(0, 1)] = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(1, 0)] = cov[(0, 1)];
    cov += Matrix2::identity() * COV2D_BLUR;
    let conic = cov.try_inverse()?;
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let lambda_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let mean = Vector2::new(cam.fx() * p.x / p.z + cam.cx(), cam.fy() * p.y / p.z + cam.cy());
    let v = mu - cam.center();
    let norm = v.norm();
    let dir = if norm > 0.0 { v / norm } else { Vector3::z() };
    let (basis, _) = basis_with_grad(g.sh_degree, [dir.x, dir.y, dir.z]);
    let raw = raw_color(g.sh_of(i), &basis);
    Some(Splat {
        index: i,
        p_cam: p,
        jac,
        sigma_cam,
        mean,
        cov,
        conic,
        radius: radius_sigma * lambda_max.sqrt(),
        opacity: g.opacities[i],
        raw,
        color: raw.map(|c| c.clamp(0.0, 1.0)),
    })
}

/// Projects one Gaussian; `None` when its center is not in front of the
/// camera (the Gaussian is culled).
pub fn project_gaussian(g: &GaussianSet, i: usize, cam: &CameraParams) -> Option<Projection> {
    let s = splat(g, i, cam, 3.0)?;
    Some(Projection {
        mean2d: s.mean,
        cov2d: s.cov,
        depth: s.p_cam.z,
    })
}

fn check_inputs(g: &GaussianSet, cfg: &RenderConfig) -> Result<()> {
    cfg.validate()?;
    let n = g.len();
    if g.opacities.len() != n || g.rotations.len() != n || g.scales.len() != n || g.sh.len() != n * g.coeffs_per_gaussian() {
        return Err(Error::shape("GaussianSet arrays have inconsistent lengths"));
    }
    Ok(())
}

/// Visible splats in global front-to-back order.
fn sorted_splats(g: &GaussianSet, cam: &CameraParams, cfg: &RenderConfig) -> Vec<Splat> {
    let mut splats: Vec<Splat> = (0..g.len())
        .into_par_iter()
        .filter_map(|i| splat(g, i, cam, cfg.radius_sigma))
        .filter(|s| s.radius.is_finite() && s.mean.iter().all(|v| v.is_finite()))
        .collect();
    splats.sort_by(|a, b| a.p_cam.z.total_cmp(&b.p_cam.z));
    splats
}

struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Positions into the sorted splat list.
    members: Vec<usize>,
}

fn bin_tiles(splats: &[Splat], cfg: &RenderConfig) -> Vec<Tile> {
    let (tw, th) = (cfg.width.div_ceil(cfg.tile), cfg.height.div_ceil(cfg.tile));
    let mut tiles: Vec<Tile> = (0..th * tw)
        .map(|t| {
            let (ty, tx) = (t / tw, t % tw);
            Tile {
                x0: tx * cfg.tile,
                y0: ty * cfg.tile,
                x1: ((tx + 1) * cfg.tile).min(cfg.width),
                y1: ((ty + 1) * cfg.tile).min(cfg.height),
                members: Vec::new(),
            }
        })
        .collect();
    let clamp_tile = |v: f64, n: usize| -> usize { (v / cfg.tile as f64).floor().clamp(0.0, n as f64 - 1.0) as usize };
    for (pos, s) in splats.iter().enumerate() {
        let (lo_x, hi_x) = (s.mean.x - s.radius, s.mean.x + s.radius);
        let (lo_y, hi_y) = (s.mean.y - s.radius, s.mean.y + s.radius);
        if hi_x < 0.0 || hi_y < 0.0 || lo_x > (cfg.width - 1) as f64 || lo_y > (cfg.height - 1) as f64 {
            continue;
        }
        for ty in clamp_tile(lo_y, th)..=clamp_tile(hi_y, th) {
            for tx in clamp_tile(lo_x, tw)..=clamp_tile(hi_x, tw) {
                tiles[ty * tw + tx].members.push(pos);
            }
        }
    }
    tiles
}

/// One contribution to a pixel during compositing.
struct Hit {
    member: usize,
    delta: Vector2<f64>,
    gauss: f64,
    weight: f64,
    clipped: bool,
    trans: f64,
}

/// Front-to-back compositing of one pixel; returns the hits and `T_end`.
fn composite(px: f64, py: f64, tile: &Tile, splats: &[Splat], cfg: &RenderConfig, hits: &mut Vec<Hit>) -> f64 {
    hits.clear();
    let mut t = 1.0;
    for (m, &pos) in tile.members.iter().enumerate() {
        let s = &splats[pos];
        let delta = Vector2::new(px - s.mean.x, py - s.mean.y);
        if delta.norm_squared() > s.radius * s.radius {
            continue;
        }
        let power = -0.5 * (delta.transpose() * s.conic * delta)[0];
        if power > 0.0 {
            continue;
        }
        let gauss = power.exp();
        let raw = s.opacity * gauss;
        let clipped = raw > MAX_WEIGHT;
        let weight = raw.min(MAX_WEIGHT);
        if weight < cfg.alpha_min {
            continue;
        }
        hits.push(Hit {
            member: m,
            delta,
            gauss,
            weight,
            clipped,
            trans: t,
        });
        t *= 1.0 - weight;
        if t < cfg.transmittance_min {
            break;
        }
    }
    t
}

/// Renders `g` from `cam`.
pub fn rasterize(g: &GaussianSet, cam: &CameraParams, cfg: &RenderConfig) -> Result<RenderOutput> {
    check_inputs(g, cfg)?;
    let splats = sorted_splats(g, cam, cfg);
    let tiles = bin_tiles(&splats, cfg);
    let (w, h) = (cfg.width, cfg.height);
    let per_tile: Vec<Vec<(usize, [f64; 3], f64, u32)>> = tiles
        .par_iter()
        .map(|tile| {
            let mut hits = Vec::new();
            let mut out = Vec::with_capacity((tile.x1 - tile.x0) * (tile.y1 - tile.y0));
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let t_end = composite(x as f64, y as f64, tile, &splats, cfg, &mut hits);
                    let mut c = [0.0; 3];
                    for hit in &hits {
                        let s = &splats[tile.members[hit.member]];
                        for k in 0..3 {
                            c[k] += hit.weight * hit.trans * s.color[k];
                        }
                    }
                    for k in 0..3 {
                        c[k] += t_end * cfg.background[k];
                    }
                    out.push((y * w + x, c, 1.0 - t_end, hits.len() as u32));
                }
            }
            out
        })
        .collect();
    let mut image = Tensor3::zeros(3, h, w);
    let mut alpha_accum = vec![0.0; h * w];
    let mut gaussian_count = vec![0; h * w];
    let plane = h * w;
    for (p, c, a, n) in per_tile.into_iter().flatten() {
        for k in 0..3 {
            image.data_mut()[k * plane + p] = c[k];
        }
        alpha_accum[p] = a;
        gaussian_count[p] = n;
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("rendered image".into()));
    }
    Ok(RenderOutput {
        image,
        alpha_accum,
        gaussian_count,
    })
}

/// Gradients of a scalar loss with respect to every Gaussian parameter, laid
/// out like the fields of [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub centers: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 3]>,
    pub sh: Vec<f64>,
}

impl GaussianGrads {
    fn zeros(g: &GaussianSet) -> Self {
        Self {
            centers: vec![[0.0; 3]; g.len()],
            opacities: vec![0.0; g.len()],
            rotations: vec![[0.0; 4]; g.len()],
            scales: vec![[0.0; 3]; g.len()],
            sh: vec![0.0; g.sh.len()],
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.centers.iter().flatten().all(|&v| v == 0.0)
            && self.opacities.iter().all(|&v| v == 0.0)
            && self.rotations.iter().flatten().all(|&v| v == 0.0)
            && self.scales.iter().flatten().all(|&v| v == 0.0)
            && self.sh.iter().all(|&v| v == 0.0)
    }
}

/// Screen-space gradient of one splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    /// Symmetric gradient with respect to the conic, `[a, b, c]` for
    /// `[[a, b], [b, c]]` counted once per entry of the full matrix.
    conic: [f64; 4],
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..4 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
    }
}

/// Analytic gradients of `L` given `dL/dimage` (shape `(3, H, W)`).
pub fn rasterize_backward(
    g: &GaussianSet,
    cam: &CameraParams,
    cfg: &RenderConfig,
    dl_dimage: &Tensor3,
) -> Result<GaussianGrads> {
    check_inputs(g, cfg)?;
    if dl_dimage.dims() != (3, cfg.height, cfg.width) {
        return Err(Error::shape(format!(
            "image gradient {:?} for a {}x{} render",
            dl_dimage.dims(),
            cfg.height,
            cfg.width
        )));
    }
    let splats = sorted_splats(g, cam, cfg);
    let tiles = bin_tiles(&splats, cfg);
    let plane = cfg.width * cfg.height;
    let dl = dl_dimage.data();

    let partials: Vec<Vec<SplatGrad>> = tiles
        .par_iter()
        .map(|tile| {
            let mut acc = vec![SplatGrad::default(); tile.members.len()];
            let mut hits = Vec::new();
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let p = y * cfg.width + x;
                    let gpix = [dl[p], dl[plane + p], dl[2 * plane + p]];
                    if gpix == [0.0; 3] {
                        continue;
                    }
                    let t_end = composite(x as f64, y as f64, tile, &splats, cfg, &mut hits);
                    let mut suffix = cfg.background.map(|b| b * t_end);
                    for hit in hits.iter().rev() {
                        let s = &splats[tile.members[hit.member]];
                        let a = &mut acc[hit.member];
                        let wt = hit.weight * hit.trans;
                        let mut dw = 0.0;
                        for k in 0..3 {
                            a.color[k] += gpix[k] * wt;
                            dw += gpix[k] * (hit.trans * s.color[k] - suffix[k] / (1.0 - hit.weight));
                            suffix[k] += wt * s.color[k];
                        }
                        if hit.clipped {
                            continue;
                        }
                        a.opacity += dw * hit.gauss;
                        let dpower = dw * hit.weight;
                        let ad = s.conic * hit.delta;
                        a.mean[0] += dpower * ad.x;
                        a.mean[1] += dpower * ad.y;
                        let (dx, dy) = (hit.delta.x, hit.delta.y);
                        a.conic[0] += -0.5 * dpower * dx * dx;
                        a.conic[1] += -0.5 * dpower * dx * dy;
                        a.conic[2] += -0.5 * dpower * dy * dx;
                        a.conic[3] += -0.5 * dpower * dy * dy;
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![SplatGrad::default(); splats.len()];
    for (tile, acc) in tiles.iter().zip(&partials) {
        for (m, &pos) in tile.members.iter().enumerate() {
            screen[pos].add(&acc[m]);
        }
    }

    let mut out = GaussianGrads::zeros(g);
    let per: Vec<(usize, SplatParamGrad)> = splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(s, sg)| (s.index, splat_param_grad(g, s, sg, cam)))
        .collect();
    let nb = g.coeffs_per_gaussian();
    for (i, pg) in per {
        out.centers[i] = pg.center;
        out.opacities[i] = pg.opacity;
        out.rotations[i] = pg.rotation;
        out.scales[i] = pg.scale;
        out.sh[i * nb..(i + 1) * nb].copy_from_slice(&pg.sh);
    }
    Ok(out)
}

struct SplatParamGrad {
    center: [f64; 3],
    opacity: f64,
    rotation: [f64; 4],
    scale: [f64; 3],
    sh: Vec<f64>,
}

/// `dR/dq` for a unit quaternion: entry `[k]` is the 3x3 derivative with
/// respect to component `k` of `(w, x, y, z)`.
fn rotation_derivatives(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    let t = 2.0;
    [
        Matrix3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Matrix3::new(0.0, t * y, t * z, t * y, -2.0 * t * x, -t * w, t * z, t * w, -2.0 * t * x),
        Matrix3::new(-2.0 * t * y, t * x, t * w, t * x, 0.0, t * z, -t * w, t * z, -2.0 * t * y),
        Matrix3::new(-2.0 * t * z, -t * w, t * x, t * w, -2.0 * t * z, t * y, t * x, t * y, 0.0),
    ]
}

fn splat_param_grad(g: &GaussianSet, s: &Splat, sg: &SplatGrad, cam: &CameraParams) -> SplatParamGrad {
    let i = s.index;
    let (fx, fy) = (cam.fx(), cam.fy());
    let p = s.p_cam;
    let iz = 1.0 / p.z;

    // Color: channels with an active clamp pass no gradient.
    let mu = Vector3::from(g.centers[i]);
    let v = mu - cam.center();
    let dist = v.norm();
    let dir = if dist > 0.0 { v / dist } else { Vector3::z() };
    let (basis, dbasis) = basis_with_grad(g.sh_degree, [dir.x, dir.y, dir.z]);
    let nb = basis.len();
    let coeffs = g.sh_of(i);
    let mut sh = vec![0.0; 3 * nb];
    let mut d_dir = Vector3::zeros();
    for c in 0..3 {
        if !(0.0..=1.0).contains(&s.raw[c]) {
            continue;
        }
        let gc = sg.color[c];
        for b in 0..nb {
            sh[c * nb + b] = gc * basis[b];
            let k = coeffs[c * nb + b] * gc;
            d_dir += Vector3::from(dbasis[b]) * k;
        }
    }
    let mut d_mu = if dist > 0.0 {
        (Matrix3::identity() - dir * dir.transpose()) * d_dir / dist
    } else {
        Vector3::zeros()
    };

    // Conic to covariance: dL/dM = -A G A.
    let ga = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[2], sg.conic[3]);
    let gm = -(s.conic * ga * s.conic);
    let gm = 0.5 * (gm + gm.transpose());

    // M = J S J^T + blur.
    let g_sigma_cam = s.jac.transpose() * gm * s.jac;
    let g_jac = 2.0 * gm * s.jac * s.sigma_cam;

    // Mean and Jacobian to camera-space position.
    let mut d_p = Vector3::new(
        sg.mean[0] * fx * iz,
        sg.mean[1] * fy * iz,
        -sg.mean[0] * fx * p.x * iz * iz - sg.mean[1] * fy * p.y * iz * iz,
    );
    d_p.x += g_jac[(0, 2)] * (-fx * iz * iz);
    d_p.y += g_jac[(1, 2)] * (-fy * iz * iz);
    d_p.z += g_jac[(0, 0)] * (-fx * iz * iz)
        + g_jac[(1, 1)] * (-fy * iz * iz)
        + g_jac[(0, 2)] * (2.0 * fx * p.x * iz * iz * iz)
        + g_jac[(1, 2)] * (2.0 * fy * p.y * iz * iz * iz);
    let w = cam.rotation;
    d_mu += w.transpose() * d_p;

    // World covariance to rotation and scale.
    let g_sigma = w.transpose() * g_sigma_cam * w;
    let scale = g.scales[i];
    let q = g.rotations[i];
    let (rotation, r) = match unit_quaternion(q) {
        Some(qn) => {
            let r = quaternion_to_matrix(qn);
            let d = Matrix3::from_diagonal(&Vector3::new(scale[0].powi(2), scale[1].powi(2), scale[2].powi(2)));
            let g_r = 2.0 * g_sigma * r * d;
            let dr = rotation_derivatives(qn);
            let g_qn: [f64; 4] = std::array::from_fn(|k| g_r.component_mul(&dr[k]).sum());
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = (0..4).map(|k| qn[k] * g_qn[k]).sum();
            (std::array::from_fn(|k| (g_qn[k] - qn[k] * dot) / norm), r)
        }
        None => ([0.0; 4], Matrix3::identity()),
    };
    let rgr = r.transpose() * g_sigma * r;
    let scale_grad = std::array::from_fn(|k| 2.0 * scale[k] * rgr[(k, k)]);

    SplatParamGrad {
        center: [d_mu.x, d_mu.y, d_mu.z],
        opacity: sg.opacity,
        rotation,
        scale: scale_grad,
        sh,
    }
}
