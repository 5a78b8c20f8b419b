//! Analytic synthetic scenes: fronto-parallel textured planes seen by a
//! horizontal rig of identity-rotation cameras, rendered by exact ray-plane
//! intersection.
//!
//! Each generated directory holds `view_{i}.png`, ground-truth depth
//! `depth_{i}.tsf`, `target_{j}.png` and `manifest.json`; the
//! photo-consistent kind adds `df_{i}.tsf` and `sf_{i}.tsf`.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::FEATURE_STRIDE;
use crate::depthdec::{make_candidates, DepthCandidates, Spacing};
use crate::error::{Error, Result};
use crate::geometry::{CameraParams, CameraRecord};
use crate::imageio::save_rgb;
use crate::manifest::{SceneManifest, TargetEntry, ViewEntry, MANIFEST_VERSION};
use crate::tensor::{save_tsf1, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    TexturedPlane,
    TwoPlaneOcclusion,
    PhotoConsistentFeatures,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textured-plane" => Ok(SceneKind::TexturedPlane),
            "two-plane-occlusion" => Ok(SceneKind::TwoPlaneOcclusion),
            "photo-consistent-features" => Ok(SceneKind::PhotoConsistentFeatures),
            _ => Err(Error::Validation(format!("unknown scene kind `{s}`"))),
        }
    }
}

/// Low-frequency color pattern on a plane, in world units.
#[derive(Clone, Debug)]
pub struct Texture {
    waves: Vec<([f64; 2], [f64; 3], [f64; 3])>,
}

impl Texture {
    /// `max_freq` is the highest spatial frequency in cycles per world unit.
    pub fn new(seed: u64, max_freq: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..4)
            .map(|_| {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let f = rng.random_range(0.3..1.0) * max_freq;
                let amp = [(); 3].map(|_| rng.random_range(0.02..0.1));
                let phase = [(); 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
                ([f * angle.cos(), f * angle.sin()], amp, phase)
            })
            .collect();
        Self { waves }
    }

    /// Color in `[0.1, 0.9]`.
    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = [0.5; 3];
        for (f, amp, phase) in &self.waves {
            let arg = std::f64::consts::TAU * (f[0] * x + f[1] * y);
            for k in 0..3 {
                c[k] += amp[k] * (arg + phase[k]).cos();
            }
        }
        c
    }
}

/// Unit-norm vector lattice, scaled by `amplitude` and bilinearly
/// interpolated between lattice points.
#[derive(Clone, Debug)]
pub struct FeatureField {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// World units per lattice cell.
    pub step: f64,
    /// World coordinates of lattice point `(0, 0)`.
    pub origin: [f64; 2],
    values: Vec<f64>,
}

impl FeatureField {
    pub fn new(seed: u64, channels: usize, rows: usize, cols: usize, step: f64, origin: [f64; 2], amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(rows * cols * channels);
        for _ in 0..rows * cols {
            let v: Vec<f64> = (0..channels).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            values.extend(v.into_iter().map(|a| amplitude * a / n));
        }
        Self {
            channels,
            rows,
            cols,
            step,
            origin,
            values,
        }
    }

    fn lattice(&self, r: usize, c: usize) -> &[f64] {
        let i = (r.min(self.rows - 1) * self.cols + c.min(self.cols - 1)) * self.channels;
        &self.values[i..i + self.channels]
    }

    pub fn sample(&self, x: f64, y: f64, out: &mut [f64]) {
        let u = ((x - self.origin[0]) / self.step).clamp(0.0, (self.cols - 1) as f64);
        let v = ((y - self.origin[1]) / self.step).clamp(0.0, (self.rows - 1) as f64);
        let (c0, r0) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let corners = [
            (r0, c0, (1.0 - fu) * (1.0 - fv)),
            (r0, c0 + 1, fu * (1.0 - fv)),
            (r0 + 1, c0, (1.0 - fu) * fv),
            (r0 + 1, c0 + 1, fu * fv),
        ];
        out.fill(0.0);
        for (r, c, wgt) in corners {
            if wgt == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.lattice(r, c)) {
                *o += wgt * a;
            }
        }
    }
}

/// Geometry and textures of one generated scene.
#[derive(Clone, Debug)]
pub struct Layout {
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub baseline: f64,
    pub near: f64,
    pub far: f64,
    /// Depth of the main (far) plane.
    pub plane_depth: f64,
    /// Depth of the occluding half-plane `x < 0`, if any.
    pub occluder_depth: Option<f64>,
    pub texture: Texture,
    pub occluder_texture: Texture,
}

impl Layout {
    pub fn new(kind: SceneKind, seed: u64, height: usize, width: usize) -> Self {
        let focal = width as f64;
        let (plane_depth, occluder_depth) = match kind {
            SceneKind::TwoPlaneOcclusion => (6.0, Some(3.0)),
            _ => (4.0, None),
        };
        // At most one cycle per 16 pixels on the far plane.
        let max_freq = focal / plane_depth / 16.0;
        Self {
            kind,
            height,
            width,
            focal,
            baseline: 0.4,
            near: 2.0,
            far: 8.0,
            plane_depth,
            occluder_depth,
            texture: Texture::new(seed, max_freq),
            occluder_texture: Texture::new(seed ^ 0x9e37_79b9_7f4a_7c15, max_freq),
        }
    }

    /// Camera with identity rotation centered at `(x, 0, 0)`.
    pub fn camera_at(&self, x: f64) -> CameraParams {
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        CameraParams::new(
            self.focal,
            self.focal,
            cx,
            cy,
            Matrix3::identity(),
            Vector3::new(-x, 0.0, 0.0),
            self.near,
            self.far,
        )
        .expect("valid synthetic camera")
    }

    pub fn view_centers(&self) -> [f64; 2] {
        [-0.5 * self.baseline, 0.5 * self.baseline]
    }

    pub fn views(&self) -> Vec<CameraParams> {
        self.view_centers().iter().map(|&x| self.camera_at(x)).collect()
    }

    pub fn targets(&self) -> Vec<CameraParams> {
        vec![self.camera_at(0.0)]
    }

    /// World hit point, color and z-depth along the ray through `pixel`.
    pub fn trace(&self, cam: &CameraParams, pixel: Vector2<f64>) -> (Vector3<f64>, [f64; 3], f64) {
        let c = cam.center();
        let dir = Vector3::new((pixel.x - cam.cx()) / cam.fx(), (pixel.y - cam.cy()) / cam.fy(), 1.0);
        if let Some(zo) = self.occluder_depth {
            let t = zo - c.z;
            let p = c + dir * t;
            if p.x < 0.0 {
                return (p, self.occluder_texture.color(p.x, p.y), zo);
            }
        }
        let t = self.plane_depth - c.z;
        let p = c + dir * t;
        (p, self.texture.color(p.x, p.y), self.plane_depth)
    }

    /// Point-sampled image and z-depth of `cam`.
    pub fn render(&self, cam: &CameraParams) -> (Tensor3, Vec<f64>) {
        let (h, w) = (self.height, self.width);
        let mut img = Tensor3::zeros(3, h, w);
        let mut depth = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (_, col, z) = self.trace(cam, Vector2::new(x as f64, y as f64));
                for k in 0..3 {
                    img.set(k, y, x, col[k]);
                }
                depth[y * w + x] = z;
            }
        }
        (img, depth)
    }

    /// Feature map at `stride` sampled from `field` at each feature cell's
    /// ray-plane hit.
    pub fn render_features(&self, cam: &CameraParams, field: &FeatureField, stride: usize) -> Tensor3 {
        let (h, w) = (self.height.div_ceil(stride), self.width.div_ceil(stride));
        let s = stride as f64;
        let mut out = Tensor3::zeros(field.channels, h, w);
        let mut v = vec![0.0; field.channels];
        for y in 0..h {
            for x in 0..w {
                let px = Vector2::new((x as f64 + 0.5) * s - 0.5, (y as f64 + 0.5) * s - 0.5);
                let (p, _, _) = self.trace(cam, px);
                field.sample(p.x, p.y, &mut v);
                for (k, &a) in v.iter().enumerate() {
                    out.set(k, y, x, a);
                }
            }
        }
        out
    }

    fn description(&self) -> &'static str {
        match self.kind {
            SceneKind::TexturedPlane => "a flat wall covered in a smooth colorful pattern",
            SceneKind::TwoPlaneOcclusion => "a patterned panel standing in front of a patterned wall",
            SceneKind::PhotoConsistentFeatures => "a flat wall with a feature-rich pattern",
        }
    }
}

fn record(cam: &CameraParams) -> CameraRecord {
    let mut r = cam.to_record();
    r.near = None;
    r.far = None;
    r
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticOptions {
    pub kind: SceneKind,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Channels of the DF and SF fixtures of the photo-consistent kind.
    pub depth_prior_channels: usize,
    pub semantic_channels: usize,
}

impl SyntheticOptions {
    pub fn new(kind: SceneKind, seed: u64, height: usize, width: usize) -> Self {
        Self {
            kind,
            seed,
            height,
            width,
            depth_prior_channels: 128,
            semantic_channels: 128,
        }
    }
}

/// Writes a scene directory and returns its manifest.
pub fn gen_synthetic(opts: &SyntheticOptions, out: impl AsRef<Path>) -> Result<SceneManifest> {
    let out = out.as_ref();
    if opts.height < FEATURE_STRIDE || opts.width < FEATURE_STRIDE {
        return Err(Error::Validation(format!(
            "synthetic scenes need at least {FEATURE_STRIDE}x{FEATURE_STRIDE} pixels"
        )));
    }
    std::fs::create_dir_all(out)?;
    let layout = Layout::new(opts.kind, opts.seed, opts.height, opts.width);
    let fields = (opts.kind == SceneKind::PhotoConsistentFeatures).then(|| {
        let step = layout.plane_depth / layout.focal * FEATURE_STRIDE as f64;
        let span = layout.plane_depth * (opts.width.max(opts.height) as f64 / layout.focal) + 2.0 * layout.baseline;
        let cells = (span / step).ceil() as usize + 4;
        let origin = [-0.5 * span - 2.0 * step; 2];
        [
            FeatureField::new(opts.seed.wrapping_add(1), opts.depth_prior_channels, cells, cells, step, origin, 1.0),
            FeatureField::new(opts.seed.wrapping_add(2), opts.semantic_channels, cells, cells, step, origin, 1.0),
        ]
    });
    let mut views = Vec::new();
    for (i, cam) in layout.views().iter().enumerate() {
        let (img, depth) = layout.render(cam);
        let image_path = format!("view_{i}.png");
        save_rgb(&img, out.join(&image_path))?;
        save_tsf1(out.join(format!("depth_{i}.tsf")), &[opts.height, opts.width], &depth)?;
        let mut entry = ViewEntry {
            image_path: image_path.into(),
            camera: record(cam),
            description: layout.description().to_string(),
            df_path: None,
            sf_path: None,
            sentence_path: None,
        };
        if let Some([df, sf]) = &fields {
            for (field, name) in [(df, "df"), (sf, "sf")] {
                let t = layout.render_features(cam, field, FEATURE_STRIDE);
                let file = format!("{name}_{i}.tsf");
                t.save_tsf1(out.join(&file))?;
                if name == "df" {
                    entry.df_path = Some(file.into());
                } else {
                    entry.sf_path = Some(file.into());
                }
            }
        }
        views.push(entry);
    }
    let mut targets = Vec::new();
    for (j, cam) in layout.targets().iter().enumerate() {
        let (img, _) = layout.render(cam);
        let image_path = format!("target_{j}.png");
        save_rgb(&img, out.join(&image_path))?;
        targets.push(TargetEntry {
            camera: record(cam),
            image_path: Some(image_path.into()),
        });
    }
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        near: layout.near,
        far: layout.far,
        views,
        targets,
    };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}

/// Two-view stereo fixture with feature-resolution cameras: a fronto-parallel
/// plane carrying a unit-norm feature lattice, placed so the true disparity
/// is a whole number of pixels and equals one of the sweep candidates.
#[derive(Clone, Debug)]
pub struct PhotoFixture {
    pub features: Vec<Tensor3>,
    pub cameras: Vec<CameraParams>,
    pub candidates: DepthCandidates,
    pub true_index: usize,
    pub true_depth: f64,
}

impl PhotoFixture {
    /// `size x size` features with `channels` channels and `count`
    /// inverse-spaced candidates whose disparities step by 0.5 px down to 1.
    pub fn new(seed: u64, size: usize, channels: usize, count: usize) -> Result<Self> {
        let focal = size as f64;
        let fb = 32.0;
        let baseline = fb / focal;
        let step = 0.5;
        let disparities: Vec<f64> = (0..count).map(|k| 1.0 + step * (count - 1 - k) as f64).collect();
        let (near, far) = (fb / disparities[0], fb / disparities[count - 1]);
        let candidates = make_candidates(near, far, count, Spacing::Inverse)?;
        // An odd index has integer disparity.
        let true_index = count / 2 - (count / 2).is_multiple_of(2) as usize;
        let disparity = disparities[true_index];
        let true_depth = fb / disparity;
        let c = (size as f64 - 1.0) / 2.0;
        let cams: Vec<CameraParams> = [0.0, baseline]
            .iter()
            .map(|&x| {
                CameraParams::new(focal, focal, c, c, Matrix3::identity(), Vector3::new(-x, 0.0, 0.0), near, far)
            })
            .collect::<Result<_>>()?;
        // One lattice cell per pixel at the plane; scores at the true depth
        // are amplitude^2 / sqrt(C) = 40.
        let amplitude = (40.0 * (channels as f64).sqrt()).sqrt();
        let cell = true_depth / focal;
        let lattice = size + disparity as usize + 2;
        let origin = [-c * cell, -c * cell];
        let field = FeatureField::new(seed, channels, lattice, lattice, cell, origin, amplitude);
        let mut features = Vec::new();
        let mut v = vec![0.0; channels];
        for cam in &cams {
            let mut t = Tensor3::zeros(channels, size, size);
            for y in 0..size {
                for x in 0..size {
                    let ray = cam.center()
                        + Vector3::new((x as f64 - c) / focal, (y as f64 - c) / focal, 1.0) * true_depth;
                    field.sample(ray.x, ray.y, &mut v);
                    for (k, &a) in v.iter().enumerate() {
                        t.set(k, y, x, a);
                    }
                }
            }
            features.push(t);
        }
        Ok(Self {
            features,
            cameras: cams,
            candidates,
            true_index,
            true_depth,
        })
    }
}
