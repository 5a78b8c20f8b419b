//! Per-pixel Gaussian prediction and the GSP1 dump format.
//!
//! GSP1 layout (little-endian): `b"GSP1"`, `u32` count, then one record of
//! `11 + 3B` f32 values per Gaussian: center xyz, opacity, quaternion wxyz,
//! scales xyz, and SH coefficients channel-major (B for r, then g, then b).
//! The SH degree is recovered from the record length; an empty file is read
//! as degree 1.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::depthdec::ConfidenceMap;
use crate::error::{Error, Result};
use crate::geometry::{unproject_pixel, CameraParams, DepthMap};
use crate::kernels::{bilinear_resize, conv_layer, gelu_map, sigmoid, softplus, ConvOpts, LayerSpec, ParamStore};
use crate::sh::{basis_count, degree_for_count, MAX_DEGREE};
use crate::tensor::{open_existing, Tensor3};

pub const GSP1_MAGIC: &[u8; 4] = b"GSP1";

/// Quaternion logits below this norm map to the identity rotation.
pub const QUAT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussConfig {
    pub sh_degree: usize,
    pub opacity_hidden: usize,
    pub shape_hidden: usize,
}

impl Default for GaussConfig {
    fn default() -> Self {
        Self {
            sh_degree: 1,
            opacity_hidden: 16,
            shape_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub centers: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 3]>,
    /// `N * 3 * B` values, channel-major per Gaussian.
    pub sh: Vec<f64>,
}

impl GaussianSet {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            centers: Vec::new(),
            opacities: Vec::new(),
            rotations: Vec::new(),
            scales: Vec::new(),
            sh: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn basis_count(&self) -> usize {
        basis_count(self.sh_degree)
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        3 * self.basis_count()
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let n = self.coeffs_per_gaussian();
        &self.sh[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, center: [f64; 3], opacity: f64, rotation: [f64; 4], scale: [f64; 3], sh: &[f64]) {
        self.centers.push(center);
        self.opacities.push(opacity);
        self.rotations.push(rotation);
        self.scales.push(scale);
        self.sh.extend_from_slice(sh);
    }

    pub fn append(&mut self, other: &GaussianSet) -> Result<()> {
        if other.sh_degree != self.sh_degree {
            return Err(Error::shape(format!(
                "SH degree {} appended to degree {}",
                other.sh_degree, self.sh_degree
            )));
        }
        self.centers.extend_from_slice(&other.centers);
        self.opacities.extend_from_slice(&other.opacities);
        self.rotations.extend_from_slice(&other.rotations);
        self.scales.extend_from_slice(&other.scales);
        self.sh.extend_from_slice(&other.sh);
        Ok(())
    }

    /// Checks array lengths, unit quaternions, positive scales, opacities in
    /// `[0, 1]` and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.sh_degree > MAX_DEGREE {
            return Err(Error::Validation(format!("SH degree {} above {MAX_DEGREE}", self.sh_degree)));
        }
        if self.opacities.len() != n
            || self.rotations.len() != n
            || self.scales.len() != n
            || self.sh.len() != n * self.coeffs_per_gaussian()
        {
            return Err(Error::shape("GaussianSet arrays have inconsistent lengths"));
        }
        let finite = self.centers.iter().flatten().all(|v| v.is_finite())
            && self.opacities.iter().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.scales.iter().flatten().all(|v| v.is_finite())
            && self.sh.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        for i in 0..n {
            let q = self.rotations[i];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("Gaussian {i}: quaternion norm {norm}")));
            }
            if self.scales[i].iter().any(|&s| s <= 0.0) {
                return Err(Error::Validation(format!("Gaussian {i}: non-positive scale")));
            }
            if !(0.0..=1.0).contains(&self.opacities[i]) {
                return Err(Error::Validation(format!("Gaussian {i}: opacity {}", self.opacities[i])));
            }
        }
        Ok(())
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        covariance(self.rotations[i], self.scales[i])
    }

    /// Rounds every parameter to f32, matching what a GSP1 round trip keeps.
    pub fn quantized(&self) -> GaussianSet {
        let q = |v: f64| v as f32 as f64;
        GaussianSet {
            sh_degree: self.sh_degree,
            centers: self.centers.iter().map(|c| c.map(q)).collect(),
            opacities: self.opacities.iter().copied().map(q).collect(),
            rotations: self.rotations.iter().map(|c| c.map(q)).collect(),
            scales: self.scales.iter().map(|c| c.map(q)).collect(),
            sh: self.sh.iter().copied().map(q).collect(),
        }
    }

    pub fn write_gsp1(&self, mut w: impl Write) -> Result<()> {
        let n = u32::try_from(self.len()).map_err(|_| Error::format("GSP1", "too many Gaussians"))?;
        let mut buf = Vec::with_capacity(8 + self.len() * (11 + self.coeffs_per_gaussian()) * 4);
        buf.extend_from_slice(GSP1_MAGIC);
        buf.extend_from_slice(&n.to_le_bytes());
        for i in 0..self.len() {
            let record = self.centers[i]
                .iter()
                .chain(std::iter::once(&self.opacities[i]))
                .chain(&self.rotations[i])
                .chain(&self.scales[i])
                .chain(self.sh_of(i));
            for &v in record {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_gsp1(mut r: impl Read) -> Result<GaussianSet> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || &bytes[..4] != GSP1_MAGIC {
            return Err(Error::format("GSP1", "bad magic"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if n == 0 {
            if !body.is_empty() {
                return Err(Error::format("GSP1", "trailing bytes after empty header"));
            }
            return Ok(GaussianSet::empty(1));
        }
        if body.len() % (4 * n) != 0 {
            return Err(Error::format("GSP1", format!("{} body bytes for {n} records", body.len())));
        }
        let per = body.len() / (4 * n);
        let degree = per
            .checked_sub(11)
            .filter(|r| r % 3 == 0)
            .and_then(|r| degree_for_count(r / 3))
            .ok_or_else(|| Error::format("GSP1", format!("record of {per} values")))?;
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut set = GaussianSet::empty(degree);
        for rec in vals.chunks_exact(per) {
            set.push(
                [rec[0], rec[1], rec[2]],
                rec[3],
                [rec[4], rec[5], rec[6], rec[7]],
                [rec[8], rec[9], rec[10]],
                &rec[11..],
            );
        }
        if set.sh.iter().chain(set.opacities.iter()).any(|v| !v.is_finite()) {
            return Err(Error::format("GSP1", "non-finite values"));
        }
        Ok(set)
    }

    pub fn save_gsp1(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_gsp1(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_gsp1(path: impl AsRef<Path>) -> Result<GaussianSet> {
        GaussianSet::read_gsp1(std::io::BufReader::new(open_existing(path.as_ref())?))
    }
}

/// Unit quaternion from raw logits; near-zero logits snap to identity.
pub fn normalize_quaternion(q: [f64; 4]) -> [f64; 4] {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < QUAT_EPS {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        q.map(|v| v / norm)
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R diag(s^2) R^T`.
pub fn covariance(q: [f64; 4], s: [f64; 3]) -> Matrix3<f64> {
    let r = quaternion_to_matrix(q);
    let d = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let m = r * d * r.transpose();
    0.5 * (m + m.transpose())
}

/// Unprojected pixel centers of every view, view-major then row-major.
pub fn predict_centers(depths: &[DepthMap], cams: &[CameraParams]) -> Result<Vec<[f64; 3]>> {
    if depths.len() != cams.len() {
        return Err(Error::shape(format!("{} depth maps for {} cameras", depths.len(), cams.len())));
    }
    let mut out = Vec::with_capacity(depths.iter().map(|d| d.height * d.width).sum());
    for (d, cam) in depths.iter().zip(cams) {
        for y in 0..d.height {
            for x in 0..d.width {
                let p = unproject_pixel(&Vector2::new(x as f64, y as f64), d.get(y, x), cam)?;
                out.push([p.x, p.y, p.z]);
            }
        }
    }
    Ok(out)
}

pub fn layers(cfg: &GaussConfig, cf_channels: usize, candidates: usize) -> Vec<LayerSpec> {
    let shape_in = 3 + cf_channels + candidates;
    let shape_out = 7 + 3 * basis_count(cfg.sh_degree);
    vec![
        LayerSpec::conv("gauss.opacity.conv1", 1, cfg.opacity_hidden, 3),
        LayerSpec::conv("gauss.opacity.conv2", cfg.opacity_hidden, 1, 3),
        LayerSpec::conv("gauss.shape.conv1", shape_in, cfg.shape_hidden, 3),
        LayerSpec::conv("gauss.shape.conv2", cfg.shape_hidden, shape_out, 3),
    ]
}

/// Opacities of one view at image resolution from its matching confidence.
pub fn predict_opacity(conf: &ConfidenceMap, height: usize, width: usize, store: &ParamStore) -> Result<Vec<f64>> {
    let up = bilinear_resize(&conf.to_tensor(), height, width)?;
    let h = gelu_map(&conv_layer(&up, store, "gauss.opacity.conv1", ConvOpts::FEATURE)?);
    let logits = conv_layer(&h, store, "gauss.opacity.conv2", ConvOpts::FEATURE)?;
    if logits.channels() != 1 {
        return Err(Error::shape(format!("opacity head emits {} channels", logits.channels())));
    }
    Ok(logits.data().iter().map(|&v| sigmoid(v)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeColor {
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 3]>,
    pub sh: Vec<f64>,
}

/// Maps per-pixel head logits to rotations, scales and SH coefficients.
/// `logits` has `7 + 3B` channels at image resolution.
pub fn decode_shape_color(logits: &Tensor3, depth: &DepthMap, fx: f64, sh_degree: usize) -> Result<ShapeColor> {
    let b3 = 3 * basis_count(sh_degree);
    let (c, h, w) = logits.dims();
    if c != 7 + b3 {
        return Err(Error::shape(format!("shape head emits {c} channels, expected {}", 7 + b3)));
    }
    if (depth.height, depth.width) != (h, w) {
        return Err(Error::shape(format!(
            "depth {}x{} for {h}x{w} head output",
            depth.height, depth.width
        )));
    }
    let n = h * w;
    let data = logits.data();
    let at = |ch: usize, p: usize| data[ch * n + p];
    let mut out = ShapeColor {
        rotations: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        sh: Vec::with_capacity(n * b3),
    };
    for p in 0..n {
        out.rotations
            .push(normalize_quaternion([at(0, p), at(1, p), at(2, p), at(3, p)]));
        let factor = depth.values[p] / fx;
        out.scales.push([4, 5, 6].map(|ch| softplus(at(ch, p)) * factor));
        out.sh.extend((0..b3).map(|k| at(7 + k, p)));
    }
    Ok(out)
}

/// Rotation, scale and color head for one view. `cf` and `v_refined` are
/// resampled to the image resolution and concatenated with the image.
pub fn predict_shape_color(
    image: &Tensor3,
    cf: &Tensor3,
    v_refined: &Tensor3,
    depth: &DepthMap,
    cam: &CameraParams,
    store: &ParamStore,
    sh_degree: usize,
) -> Result<ShapeColor> {
    let (h, w) = (image.height(), image.width());
    let input = Tensor3::concat(&[image, &bilinear_resize(cf, h, w)?, &bilinear_resize(v_refined, h, w)?])?;
    let hidden = gelu_map(&conv_layer(&input, store, "gauss.shape.conv1", ConvOpts::FEATURE)?);
    let logits = conv_layer(&hidden, store, "gauss.shape.conv2", ConvOpts::FEATURE)?;
    decode_shape_color(&logits, depth, cam.fx(), sh_degree)
}

/// Full per-view head: centers, opacities, shape and color.
#[allow(clippy::too_many_arguments)]
pub fn predict_view(
    image: &Tensor3,
    cf: &Tensor3,
    v_refined: &Tensor3,
    conf: &ConfidenceMap,
    depth: &DepthMap,
    cam: &CameraParams,
    store: &ParamStore,
    sh_degree: usize,
) -> Result<GaussianSet> {
    let (h, w) = (image.height(), image.width());
    if (depth.height, depth.width) != (h, w) {
        return Err(Error::shape("depth must be at image resolution"));
    }
    let centers = predict_centers(std::slice::from_ref(depth), std::slice::from_ref(cam))?;
    let opacities = predict_opacity(conf, h, w, store)?;
    let sc = predict_shape_color(image, cf, v_refined, depth, cam, store, sh_degree)?;
    Ok(GaussianSet {
        sh_degree,
        centers,
        opacities,
        rotations: sc.rotations,
        scales: sc.scales,
        sh: sc.sh,
    })
}

/// Opacity of the analytic heads.
pub const ORACLE_OPACITY: f64 = 0.95;
/// Footprint standard deviation of the analytic heads, in source pixels.
pub const ORACLE_SIGMA_PX: f64 = 0.6;

/// Analytic stand-in for the learned heads, used when depth is supplied
/// externally: isotropic pixel-footprint Gaussians carrying the pixel color
/// in the degree-0 coefficient.
pub fn oracle_view(image: &Tensor3, depth: &DepthMap, cam: &CameraParams, sh_degree: usize) -> Result<GaussianSet> {
    let (h, w) = (image.height(), image.width());
    if image.channels() != 3 || (depth.height, depth.width) != (h, w) {
        return Err(Error::shape("oracle heads need an RGB image and a same-size depth map"));
    }
    let centers = predict_centers(std::slice::from_ref(depth), std::slice::from_ref(cam))?;
    let b = basis_count(sh_degree);
    let mut set = GaussianSet::empty(sh_degree);
    let mut sh = vec![0.0; 3 * b];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for c in 0..3 {
                sh[c * b] = (image.get(c, y, x) - 0.5) / crate::sh::Y0;
            }
            let s = ORACLE_SIGMA_PX * depth.values[p] / cam.fx();
            set.push(centers[p], ORACLE_OPACITY, [1.0, 0.0, 0.0, 0.0], [s; 3], &sh);
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_point;
    use crate::kernels::init_params;
    use proptest::prelude::*;

    fn plane(h: usize, w: usize, d: f64) -> DepthMap {
        DepthMap::new(h, w, vec![d; h * w], 0).unwrap()
    }

    #[test]
    fn centers_of_constant_depth_lie_on_plane_and_reproject() {
        let cam = CameraParams::simple(20.0, 22.0, 3.5, 2.5, 0.1, 10.0).unwrap();
        let centers = predict_centers(&[plane(6, 8, 2.5)], std::slice::from_ref(&cam)).unwrap();
        assert_eq!(centers.len(), 48);
        for (i, c) in centers.iter().enumerate() {
            assert!((c[2] - 2.5).abs() < 1e-12);
            let (px, _) = project_point(&Vector3::from(*c), &cam).unwrap();
            assert!((px.x - (i % 8) as f64).abs() < 1e-6);
            assert!((px.y - (i / 8) as f64).abs() < 1e-6);
        }
        let dup = predict_centers(&[plane(6, 8, 2.5), plane(6, 8, 2.5)], &[cam.clone(), cam]).unwrap();
        assert_eq!(dup.len(), 96);
        assert_eq!(dup[..48], dup[48..]);
    }

    #[test]
    fn zeroed_opacity_head_gives_half() {
        let cfg = GaussConfig::default();
        let mut store = init_params(&layers(&cfg, 4, 4), 3).unwrap();
        store.zero_layer("gauss.opacity.conv1").unwrap();
        store.zero_layer("gauss.opacity.conv2").unwrap();
        let conf = ConfidenceMap {
            height: 2,
            width: 2,
            values: vec![0.1, 0.9, 0.4, 0.7],
        };
        let o = predict_opacity(&conf, 8, 8, &store).unwrap();
        assert_eq!(o.len(), 64);
        assert!(o.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decoded_logits() {
        let depth = plane(1, 2, 3.0);
        let mut logits = Tensor3::zeros(19, 1, 2);
        logits.set(0, 0, 0, 1.0);
        let out = decode_shape_color(&logits, &depth, 30.0, 1).unwrap();
        assert_eq!(out.rotations[0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(out.rotations[1], [1.0, 0.0, 0.0, 0.0]);
        let expected = 2f64.ln() * 3.0 / 30.0;
        assert!(out.scales.iter().flatten().all(|&s| (s - expected).abs() < 1e-12));
        let cov = covariance(out.rotations[0], out.scales[0]);
        assert!(cov[(0, 1)] == 0.0 && cov[(0, 2)] == 0.0 && cov[(1, 2)] == 0.0);
        assert_eq!(out.sh.len(), 24);
    }

    #[test]
    fn gsp1_layout_and_round_trip() {
        let mut set = GaussianSet::empty(0);
        set.push([1.0, 2.0, 3.0], 0.5, [1.0, 0.0, 0.0, 0.0], [0.1, 0.2, 0.3], &[0.25, -0.5, 1.0]);
        let mut bytes = Vec::new();
        set.write_gsp1(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"GSP1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 8 + 14 * 4);
        assert_eq!(f32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0.5);
        let back = GaussianSet::read_gsp1(&bytes[..]).unwrap();
        assert_eq!(back, set.quantized());
        assert!(GaussianSet::read_gsp1(&bytes[..bytes.len() - 4]).is_err());
        assert!(GaussianSet::read_gsp1(&b"GSP0\0\0\0\0"[..]).is_err());
        let mut empty = Vec::new();
        GaussianSet::empty(1).write_gsp1(&mut empty).unwrap();
        assert!(GaussianSet::read_gsp1(&empty[..]).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn covariance_is_psd_with_scale_eigenvalues(
            q in prop::array::uniform4(-1.0f64..1.0),
            s in prop::array::uniform3(0.01f64..2.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-4);
            let qn = normalize_quaternion(q);
            prop_assert!((qn.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            let cov = covariance(qn, s);
            prop_assert!((cov - cov.transpose()).abs().max() < 1e-15);
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
