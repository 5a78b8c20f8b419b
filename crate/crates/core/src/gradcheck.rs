//! Finite-difference verification of the rasterizer gradients.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gausshead::GaussianSet;
use crate::geometry::CameraParams;
use crate::renderer::{rasterize, rasterize_backward, GaussianGrads, RenderConfig};
use crate::tensor::Tensor3;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Entries whose analytic and numeric gradients are both below this are
/// not compared.
pub const MIN_GRAD: f64 = 1e-6;

pub const CLASSES: [&str; 5] = ["center", "opacity", "rotation", "scale", "sh"];

/// A small scene plus a random linear loss `L = sum(g * image)`.
#[derive(Clone, Debug)]
pub struct GradScene {
    pub gaussians: GaussianSet,
    pub camera: CameraParams,
    pub config: RenderConfig,
    pub upstream: Tensor3,
}

impl GradScene {
    pub fn loss(&self, g: &GaussianSet) -> Result<f64> {
        let img = rasterize(g, &self.camera, &self.config)?.image;
        Ok(img.data().iter().zip(self.upstream.data()).map(|(a, b)| a * b).sum())
    }
}

/// Seeded scene of `count` Gaussians on a `size x size` image. Footprints
/// cover the whole image above the opacity cutoff and radius, weights stay
/// below the clip, colors stay unclamped and depths are at least 0.05 apart,
/// so the loss is smooth in every parameter.
pub fn random_scene(seed: u64, count: usize, size: usize) -> Result<GradScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = size as f64;
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let rot = Rotation3::new(axis.normalize() * rng.random_range(0.0..0.3));
    let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let (fx, cx) = (f, (f - 1.0) / 2.0);
    let (r, t_arr) = (rot.matrix(), [t.x, t.y, t.z]);
    let camera = CameraParams::new(fx, fx, cx, cx, *r, Vector3::from(t_arr), 0.1, 100.0)?;

    let mut slots: Vec<usize> = (0..count).collect();
    for i in (1..slots.len()).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    let mut g = GaussianSet::empty(1);
    for &slot in &slots {
        let z = 2.0 + 0.25 * slot as f64 + rng.random_range(0.0..0.1);
        let u = rng.random_range(0.15 * f..0.85 * f);
        let v = rng.random_range(0.15 * f..0.85 * f);
        let p_cam = Vector3::new((u - cx) * z / fx, (v - cx) * z / fx, z);
        let mu = r.transpose() * (p_cam - t);
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let qn = q.map(|c| c / q.iter().map(|v| v * v).sum::<f64>().sqrt());
        // Footprint sigma of at least 0.7 * size pixels up to depth 4.2.
        let min_scale = 0.7 * f * 4.2 / fx;
        let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(min_scale..1.6 * min_scale));
        let sh: Vec<f64> = (0..12).map(|_| rng.random_range(-0.2..0.2)).collect();
        g.push([mu.x, mu.y, mu.z], rng.random_range(0.05..0.6), qn, scale, &sh);
    }
    let upstream = Tensor3::from_fn(3, size, size, |_, _, _| rng.random_range(-1.0..1.0));
    Ok(GradScene {
        gaussians: g,
        camera,
        config: RenderConfig::with_size(size, size),
        upstream,
    })
}

/// Central-difference gradients of the scene loss, in the layout of
/// [`GaussianGrads`].
pub fn numeric_grads(scene: &GradScene, h: f64) -> Result<GaussianGrads> {
    let base = &scene.gaussians;
    let diff = |edit: &dyn Fn(&mut GaussianSet, f64)| -> Result<f64> {
        let mut p = base.clone();
        edit(&mut p, h);
        let mut m = base.clone();
        edit(&mut m, -h);
        Ok((scene.loss(&p)? - scene.loss(&m)?) / (2.0 * h))
    };
    let n = base.len();
    let mut out = GaussianGrads {
        centers: vec![[0.0; 3]; n],
        opacities: vec![0.0; n],
        rotations: vec![[0.0; 4]; n],
        scales: vec![[0.0; 3]; n],
        sh: vec![0.0; base.sh.len()],
    };
    for i in 0..n {
        for k in 0..3 {
            out.centers[i][k] = diff(&|g, d| g.centers[i][k] += d)?;
            out.scales[i][k] = diff(&|g, d| g.scales[i][k] += d)?;
        }
        out.opacities[i] = diff(&|g, d| g.opacities[i] += d)?;
        for k in 0..4 {
            out.rotations[i][k] = diff(&|g, d| g.rotations[i][k] += d)?;
        }
    }
    for j in 0..base.sh.len() {
        out.sh[j] = diff(&|g, d| g.sh[j] += d)?;
    }
    Ok(out)
}

fn flatten(g: &GaussianGrads) -> [Vec<f64>; 5] {
    [
        g.centers.iter().flatten().copied().collect(),
        g.opacities.clone(),
        g.rotations.iter().flatten().copied().collect(),
        g.scales.iter().flatten().copied().collect(),
        g.sh.clone(),
    ]
}

/// Maximum relative error per parameter class, in [`CLASSES`] order, and the
/// number of entries compared per class.
pub fn compare(analytic: &GaussianGrads, numeric: &GaussianGrads) -> ([f64; 5], [usize; 5]) {
    let (a, n) = (flatten(analytic), flatten(numeric));
    let mut err = [0.0; 5];
    let mut counted = [0; 5];
    for c in 0..5 {
        for (x, y) in a[c].iter().zip(&n[c]) {
            let scale = x.abs().max(y.abs());
            if scale > MIN_GRAD {
                err[c] = f64::max(err[c], (x - y).abs() / scale);
                counted[c] += 1;
            }
        }
    }
    (err, counted)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub seed: u64,
    pub scenes: usize,
    pub size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub classes: Vec<ClassReport>,
    pub passed: bool,
}

/// Checks `scenes` seeded scenes of 1 to 8 Gaussians. With `zero_loss` the
/// upstream gradient is zero, so every compared entry is skipped.
pub fn check_grad(seed: u64, scenes: usize, size: usize, zero_loss: bool) -> Result<GradReport> {
    let mut err = [0.0f64; 5];
    let mut counted = [0usize; 5];
    for s in 0..scenes {
        let count = 1 + (s % 8);
        let mut scene = random_scene(seed.wrapping_add(s as u64), count, size)?;
        if zero_loss {
            scene.upstream = Tensor3::zeros(3, size, size);
        }
        let analytic = rasterize_backward(&scene.gaussians, &scene.camera, &scene.config, &scene.upstream)?;
        let numeric = numeric_grads(&scene, STEP)?;
        let (e, c) = compare(&analytic, &numeric);
        for k in 0..5 {
            err[k] = err[k].max(e[k]);
            counted[k] += c[k];
        }
    }
    let classes = CLASSES
        .iter()
        .enumerate()
        .map(|(k, name)| ClassReport {
            class: name.to_string(),
            max_rel_error: err[k],
            entries: counted[k],
        })
        .collect();
    Ok(GradReport {
        seed,
        scenes,
        size,
        step: STEP,
        tolerance: TOLERANCE,
        classes,
        passed: err.iter().all(|&e| e < TOLERANCE),
    })
}
