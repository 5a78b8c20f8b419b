//! Pinhole cameras, projection and plane-sweep warping.
//!
//! Extrinsics map world to camera: `x_c = R * p + t`. Pixel centers sit at
//! integer coordinates.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-frame depth at or below which a point is considered behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraParams {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

/// Flat on-disk camera record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
}

impl CameraParams {
    /// Build a validated camera.
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics: Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            rotation,
            translation,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with identity pose.
    pub fn simple(fx: f64, fy: f64, cx: f64, cy: f64, near: f64, far: f64) -> Result<Self> {
        Self::new(fx, fy, cx, cy, Matrix3::identity(), Vector3::zeros(), near, far)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(dev < ORTHONORMAL_TOL) || !((r.determinant() - 1.0).abs() < ORTHONORMAL_TOL) {
            return Err(Error::InvalidCamera(format!(
                "rotation is not a proper orthonormal matrix (deviation {dev:e})"
            )));
        }
        let k = &self.intrinsics;
        if k[(0, 1)] != 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0
        {
            return Err(Error::InvalidCamera("intrinsics must be zero-skew pinhole".into()));
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) || !self.cx().is_finite() || !self.cy().is_finite() {
            return Err(Error::InvalidCamera("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// `P = K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        self.intrinsics * rt
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// The same camera observed at a grid downsampled by `stride`.
    ///
    /// Pixel `(u, v)` of the coarse grid covers the fine-grid cell centered at
    /// `stride * (u + 0.5) - 0.5`, matching align-corners-false resampling.
    pub fn downscaled(&self, stride: f64) -> CameraParams {
        let mut cam = self.clone();
        cam.intrinsics[(0, 0)] = self.fx() / stride;
        cam.intrinsics[(1, 1)] = self.fy() / stride;
        cam.intrinsics[(0, 2)] = (self.cx() + 0.5) / stride - 0.5;
        cam.intrinsics[(1, 2)] = (self.cy() + 0.5) / stride - 0.5;
        cam
    }

    pub fn from_record(rec: &CameraRecord, default_near: f64, default_far: f64) -> Result<Self> {
        let r = Matrix3::from_row_slice(&rec.rotation);
        Self::new(
            rec.fx,
            rec.fy,
            rec.cx,
            rec.cy,
            r,
            Vector3::from_column_slice(&rec.translation),
            rec.near.unwrap_or(default_near),
            rec.far.unwrap_or(default_far),
        )
    }

    pub fn to_record(&self) -> CameraRecord {
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i * 3 + j] = self.rotation[(i, j)];
            }
        }
        CameraRecord {
            fx: self.fx(),
            fy: self.fy(),
            cx: self.cx(),
            cy: self.cy(),
            rotation,
            translation: [self.translation.x, self.translation.y, self.translation.z],
            near: Some(self.near),
            far: Some(self.far),
        }
    }
}

/// Project a world point to `(pixel, depth)`.
pub fn project_point(p_world: &Vector3<f64>, cam: &CameraParams) -> Result<(Vector2<f64>, f64)> {
    let pc = cam.world_to_camera(p_world);
    if !(pc.z > MIN_DEPTH) {
        return Err(Error::NonPositiveDepth(pc.z));
    }
    let u = cam.fx() * pc.x / pc.z + cam.cx();
    let v = cam.fy() * pc.y / pc.z + cam.cy();
    Ok((Vector2::new(u, v), pc.z))
}

/// Inverse of [`project_point`] for a known camera-frame depth.
pub fn unproject_pixel(pixel: &Vector2<f64>, depth: f64, cam: &CameraParams) -> Result<Vector3<f64>> {
    if !(depth > MIN_DEPTH) {
        return Err(Error::NonPositiveDepth(depth));
    }
    let xc = (pixel.x - cam.cx()) / cam.fx() * depth;
    let yc = (pixel.y - cam.cy()) / cam.fy() * depth;
    let pc = Vector3::new(xc, yc, depth);
    Ok(cam.rotation.transpose() * (pc - cam.translation))
}

/// Result of warping a reference pixel into a source view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub pixel: Vector2<f64>,
    /// Depth of the hypothesized point in the source camera.
    pub depth: f64,
    /// False when the point lands outside `[0, W) x [0, H)` or behind the source camera.
    pub in_bounds: bool,
}

/// Warp `pixel_ref` at hypothesized depth into `src_cam` with a `width x height` image.
pub fn sweep_warp(
    pixel_ref: &Vector2<f64>,
    depth_candidate: f64,
    ref_cam: &CameraParams,
    src_cam: &CameraParams,
    width: usize,
    height: usize,
) -> Warp {
    let behind = Warp {
        pixel: Vector2::new(f64::NAN, f64::NAN),
        depth: f64::NAN,
        in_bounds: false,
    };
    let Ok(p) = unproject_pixel(pixel_ref, depth_candidate, ref_cam) else {
        return behind;
    };
    match project_point(&p, src_cam) {
        Ok((pixel, depth)) => {
            let in_bounds =
                pixel.x >= 0.0 && pixel.x < width as f64 && pixel.y >= 0.0 && pixel.y < height as f64;
            Warp {
                pixel,
                depth,
                in_bounds,
            }
        }
        Err(_) => Warp { depth: f64::NAN, ..behind },
    }
}

/// Per-pixel positive depths for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub view_index: usize,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, view_index: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "depth map {height}x{width} with {} values",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Validation(format!("depth value {bad} is not finite and positive")));
        }
        Ok(Self {
            height,
            width,
            values,
            view_index,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn axis_angle(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
        let a = nalgebra::Unit::new_normalize(Vector3::from(axis));
        *nalgebra::Rotation3::from_axis_angle(&a, angle).matrix()
    }

    #[test]
    fn principal_ray_projects_to_principal_point() {
        let cam = CameraParams::simple(1.0, 1.0, 0.0, 0.0, 0.1, 10.0).unwrap();
        let (px, d) = project_point(&Vector3::new(0.0, 0.0, 2.0), &cam).unwrap();
        assert_eq!((px.x, px.y, d), (0.0, 0.0, 2.0));
    }

    #[test]
    fn off_axis_projection() {
        let cam = CameraParams::simple(100.0, 100.0, 128.0, 128.0, 0.1, 10.0).unwrap();
        let (px, d) = project_point(&Vector3::new(0.5, 0.0, 1.0), &cam).unwrap();
        assert_eq!((px.x, px.y, d), (178.0, 128.0, 1.0));
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = CameraParams::simple(1.0, 1.0, 0.0, 0.0, 0.1, 10.0).unwrap();
        assert!(matches!(
            project_point(&Vector3::new(0.0, 0.0, -1.0), &cam),
            Err(Error::NonPositiveDepth(_))
        ));
        assert!(project_point(&Vector3::new(0.0, 0.0, 0.0), &cam).is_err());
        assert!(unproject_pixel(&Vector2::new(0.0, 0.0), 0.0, &cam).is_err());
    }

    #[test]
    fn principal_ray_unprojects_on_axis() {
        let cam = CameraParams::simple(50.0, 60.0, 31.5, 20.0, 0.1, 10.0).unwrap();
        let p = unproject_pixel(&Vector2::new(31.5, 20.0), 3.0, &cam).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 3.0));
    }

    #[test]
    fn rejects_invalid_cameras() {
        let bad_rot = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraParams::new(1.0, 1.0, 0.0, 0.0, bad_rot, Vector3::zeros(), 1.0, 2.0).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraParams::new(1.0, 1.0, 0.0, 0.0, reflection, Vector3::zeros(), 1.0, 2.0).is_err());
        assert!(CameraParams::simple(-1.0, 1.0, 0.0, 0.0, 1.0, 2.0).is_err());
        assert!(CameraParams::simple(1.0, 1.0, 0.0, 0.0, 2.0, 1.0).is_err());
        assert!(CameraParams::simple(1.0, 1.0, 0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn identity_warp() {
        let cam = CameraParams::simple(40.0, 40.0, 16.0, 16.0, 0.5, 10.0).unwrap();
        for d in [0.7, 1.0, 3.3, 9.0] {
            let w = sweep_warp(&Vector2::new(5.25, 20.0), d, &cam, &cam, 32, 32);
            assert!(w.in_bounds);
            assert!((w.pixel - Vector2::new(5.25, 20.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn horizontal_baseline_gives_disparity() {
        let fx = 64.0;
        let b = 0.25;
        let reference = CameraParams::simple(fx, fx, 32.0, 32.0, 0.5, 10.0).unwrap();
        // camera centered at x = b: t = -R c = (-b, 0, 0)
        let src = CameraParams::new(fx, fx, 32.0, 32.0, Matrix3::identity(), Vector3::new(-b, 0.0, 0.0), 0.5, 10.0)
            .unwrap();
        for d in [1.0, 2.0, 4.0] {
            let w = sweep_warp(&Vector2::new(40.0, 12.0), d, &reference, &src, 64, 64);
            assert!((40.0 - w.pixel.x - fx * b / d).abs() < 1e-12);
            assert!((w.pixel.y - 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_flags_out_of_bounds_and_behind() {
        let reference = CameraParams::simple(10.0, 10.0, 4.0, 4.0, 0.5, 10.0).unwrap();
        let src = CameraParams::new(10.0, 10.0, 4.0, 4.0, Matrix3::identity(), Vector3::new(-5.0, 0.0, 0.0), 0.5, 10.0)
            .unwrap();
        let w = sweep_warp(&Vector2::new(4.0, 4.0), 1.0, &reference, &src, 8, 8);
        assert!(!w.in_bounds);
        let flipped = CameraParams::new(
            10.0,
            10.0,
            4.0,
            4.0,
            axis_angle([0.0, 1.0, 0.0], std::f64::consts::PI),
            Vector3::zeros(),
            0.5,
            10.0,
        )
        .unwrap();
        let w = sweep_warp(&Vector2::new(4.0, 4.0), 1.0, &reference, &flipped, 8, 8);
        assert!(!w.in_bounds);
    }

    #[test]
    fn record_round_trip() {
        let cam = CameraParams::new(
            50.0,
            55.0,
            30.0,
            31.0,
            axis_angle([0.2, 1.0, -0.3], 0.4),
            Vector3::new(0.1, -0.2, 0.3),
            0.5,
            8.0,
        )
        .unwrap();
        let back = CameraParams::from_record(&cam.to_record(), 1.0, 2.0).unwrap();
        assert!((back.rotation - cam.rotation).abs().max() < 1e-15);
        assert_eq!(back.translation, cam.translation);
        assert_eq!((back.near, back.far), (0.5, 8.0));
    }

    #[test]
    fn downscaled_camera_tracks_resampled_grid() {
        let cam = CameraParams::simple(64.0, 64.0, 31.5, 31.5, 0.5, 10.0).unwrap();
        let s = cam.downscaled(4.0);
        assert_eq!((s.fx(), s.cx()), (16.0, 7.5));
    }

    fn arb_camera() -> impl Strategy<Value = CameraParams> {
        (
            (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.0f64..std::f64::consts::PI),
            (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            (20.0f64..200.0, 20.0f64..200.0, 0.0f64..64.0, 0.0f64..64.0),
        )
            .prop_filter_map("degenerate axis", |((ax, ay, az, ang), (tx, ty, tz), (fx, fy, cx, cy))| {
                if ax * ax + ay * ay + az * az < 1e-3 {
                    return None;
                }
                CameraParams::new(fx, fy, cx, cy, axis_angle([ax, ay, az], ang), Vector3::new(tx, ty, tz), 0.1, 50.0)
                    .ok()
            })
    }

    proptest! {
        #[test]
        fn unprojection_matches_explicit_inverse(
            cam in arb_camera(), u in 0.0f64..64.0, v in 0.0f64..64.0, d in 0.1f64..20.0
        ) {
            let p = unproject_pixel(&Vector2::new(u, v), d, &cam).unwrap();
            let k_inv = cam.intrinsics.try_inverse().unwrap();
            let oracle = cam.rotation.transpose() * (k_inv * Vector3::new(u, v, 1.0) * d - cam.translation);
            prop_assert!((p - oracle).abs().max() < 1e-9 * (1.0 + oracle.abs().max()));
        }

        #[test]
        fn warp_composition_returns_start(
            ref_cam in arb_camera(), src_cam in arb_camera(),
            u in 0.0f64..64.0, v in 0.0f64..64.0, d in 0.5f64..10.0
        ) {
            let start = Vector2::new(u, v);
            let w = sweep_warp(&start, d, &ref_cam, &src_cam, 64, 64);
            prop_assume!(w.depth.is_finite() && w.depth > 1e-3);
            let back = sweep_warp(&w.pixel, w.depth, &src_cam, &ref_cam, 64, 64);
            prop_assert!((back.pixel - start).abs().max() < 1e-6);
        }
    }
}
