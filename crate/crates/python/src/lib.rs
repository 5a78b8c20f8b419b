//! Python bindings: cameras, Gaussian sets, rendering, metrics and the
//! end-to-end pipeline.

use std::collections::HashMap;
use std::path::PathBuf;

use nalgebra::{Matrix3, Vector2, Vector3};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use splatforge::config::{model_layout, PipelineConfig};
use splatforge::gausshead::GaussianSet;
use splatforge::geometry::{project_point, sweep_warp, unproject_pixel, CameraParams};
use splatforge::kernels::{init_params, ParamStore};
use splatforge::manifest::Scene;
use splatforge::metrics::{self, LossWeights};
use splatforge::pipeline::{self, InferOptions};
use splatforge::renderer::{rasterize, RenderConfig};
use splatforge::synthetic::{gen_synthetic as gen, SceneKind, SyntheticOptions};
use splatforge::tensor::Tensor3;

fn err(e: splatforge::Error) -> PyErr {
    match e.exit_code() {
        3 => PyIOError::new_err(e.to_string()),
        4 => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for splatforge::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Pinhole camera with world-to-camera pose `x_c = R p + t`.
#[pyclass(name = "Camera", module = "splatforge_py")]
struct PyCamera {
    inner: CameraParams,
}

#[pymethods]
impl PyCamera {
    #[new]
    #[pyo3(signature = (fx, fy, cx, cy, rotation = None, translation = None, near = 0.1, far = 100.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Option<[f64; 9]>,
        translation: Option<[f64; 3]>,
        near: f64,
        far: f64,
    ) -> PyResult<Self> {
        let r = rotation.map_or_else(Matrix3::identity, |r| Matrix3::from_row_slice(&r));
        let t = Vector3::from(translation.unwrap_or([0.0; 3]));
        Ok(Self {
            inner: CameraParams::new(fx, fy, cx, cy, r, t, near, far).py()?,
        })
    }

    /// Pixel and depth of a world point.
    fn project(&self, point: [f64; 3]) -> PyResult<(f64, f64, f64)> {
        let (px, z) = project_point(&Vector3::from(point), &self.inner).py()?;
        Ok((px.x, px.y, z))
    }

    /// World point at `depth` along the ray through pixel `(u, v)`.
    fn unproject(&self, u: f64, v: f64, depth: f64) -> PyResult<[f64; 3]> {
        let p = unproject_pixel(&Vector2::new(u, v), depth, &self.inner).py()?;
        Ok([p.x, p.y, p.z])
    }

    /// Warps `(u, v)` at `depth` into `src`; returns `(u', v', depth', in_bounds)`.
    fn warp(&self, u: f64, v: f64, depth: f64, src: &PyCamera, width: usize, height: usize) -> (f64, f64, f64, bool) {
        let w = sweep_warp(&Vector2::new(u, v), depth, &self.inner, &src.inner, width, height);
        (w.pixel.x, w.pixel.y, w.depth, w.in_bounds)
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        let c = self.inner.center();
        [c.x, c.y, c.z]
    }

    #[getter]
    fn intrinsics(&self) -> (f64, f64, f64, f64) {
        (self.inner.fx(), self.inner.fy(), self.inner.cx(), self.inner.cy())
    }

    fn __repr__(&self) -> String {
        let c = self.center();
        format!(
            "Camera(fx={}, fy={}, cx={}, cy={}, center=[{:.4}, {:.4}, {:.4}])",
            self.inner.fx(),
            self.inner.fy(),
            self.inner.cx(),
            self.inner.cy(),
            c[0],
            c[1],
            c[2]
        )
    }
}

/// A set of 3D Gaussians with spherical-harmonic color.
#[pyclass(name = "Gaussians", module = "splatforge_py")]
struct PyGaussians {
    inner: GaussianSet,
}

#[pymethods]
impl PyGaussians {
    #[new]
    #[pyo3(signature = (sh_degree = 1))]
    fn new(sh_degree: usize) -> Self {
        Self {
            inner: GaussianSet::empty(sh_degree),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: GaussianSet::load_gsp1(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_gsp1(path).py()
    }

    /// Appends one Gaussian; `sh` holds `3 * (degree + 1)^2` channel-major coefficients.
    fn push(&mut self, center: [f64; 3], opacity: f64, rotation: [f64; 4], scale: [f64; 3], sh: Vec<f64>) -> PyResult<()> {
        if sh.len() != self.inner.coeffs_per_gaussian() {
            return Err(PyValueError::new_err(format!(
                "expected {} SH coefficients, got {}",
                self.inner.coeffs_per_gaussian(),
                sh.len()
            )));
        }
        self.inner.push(center, opacity, rotation, scale, &sh);
        Ok(())
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.inner.sh_degree
    }

    #[getter]
    fn centers(&self) -> Vec<[f64; 3]> {
        self.inner.centers.clone()
    }

    #[getter]
    fn opacities(&self) -> Vec<f64> {
        self.inner.opacities.clone()
    }

    #[getter]
    fn scales(&self) -> Vec<[f64; 3]> {
        self.inner.scales.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Gaussians(n={}, sh_degree={})", self.inner.len(), self.inner.sh_degree)
    }
}

/// Renders `gaussians` from `camera`. Returns the `(3, H, W)` image as a flat
/// channel-major list and the per-pixel accumulated alpha.
#[pyfunction]
#[pyo3(signature = (gaussians, camera, width, height, background = [0.0, 0.0, 0.0]))]
fn render(
    gaussians: &PyGaussians,
    camera: &PyCamera,
    width: usize,
    height: usize,
    background: [f64; 3],
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let mut cfg = RenderConfig::with_size(width, height);
    cfg.background = background;
    let out = rasterize(&gaussians.inner, &camera.inner, &cfg).py()?;
    Ok((out.image.into_vec(), out.alpha_accum))
}

fn image(data: Vec<f64>, height: usize, width: usize) -> PyResult<Tensor3> {
    Tensor3::from_vec(3, height, width, data).py()
}

/// PSNR in dB of two flat `(3, H, W)` images in `[0, 1]`.
#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::psnr(&image(a, height, width)?, &image(b, height, width)?).py()
}

/// Mean SSIM of two flat `(3, H, W)` images.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::ssim(&image(a, height, width)?, &image(b, height, width)?).py()
}

/// Composite loss with the default weights; returns `(total, mse, ssim)`.
#[pyfunction]
fn composite_loss(rendered: Vec<f64>, target: Vec<f64>, height: usize, width: usize) -> PyResult<(f64, f64, f64)> {
    let (total, parts) = metrics::composite_loss(
        &image(rendered, height, width)?,
        &image(target, height, width)?,
        &LossWeights::default(),
        None,
    )
    .py()?;
    Ok((total, parts.mse, parts.ssim))
}

/// Default `(mse, perceptual, ssim)` loss weights.
#[pyfunction]
fn loss_weights() -> (f64, f64, f64) {
    let w = LossWeights::default();
    (w.lambda_mse, w.lambda_lpips, w.lambda_ssim)
}

/// Analytic vs finite-difference renderer gradients; returns `(passed, max error per class)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, scenes = 20, size = 16, zero_loss = false))]
fn check_grad(seed: u64, scenes: usize, size: usize, zero_loss: bool) -> PyResult<(bool, HashMap<String, f64>)> {
    let r = splatforge::gradcheck::check_grad(seed, scenes, size, zero_loss).py()?;
    Ok((r.passed, r.classes.into_iter().map(|c| (c.class, c.max_rel_error)).collect()))
}

/// Writes a synthetic scene to `out`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (kind, out, seed = 7, height = 64, width = 64))]
fn gen_synthetic(kind: &str, out: PathBuf, seed: u64, height: usize, width: usize) -> PyResult<PathBuf> {
    let kind: SceneKind = kind.parse().py()?;
    gen(&SyntheticOptions::new(kind, seed, height, width), &out).py()?;
    Ok(out.join("manifest.json"))
}

/// Runs the pipeline on a manifest and writes its outputs to `out`; returns
/// the number of predicted Gaussians.
#[pyfunction]
#[pyo3(signature = (scene, out, config = None, weights = None, depth_override = None, dump = false))]
fn infer(
    scene: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    weights: Option<PathBuf>,
    depth_override: Option<PathBuf>,
    dump: bool,
) -> PyResult<usize> {
    let cfg = match config {
        Some(p) => PipelineConfig::load(p).py()?,
        None => PipelineConfig::default(),
    };
    let scene = Scene::load(scene).py()?;
    let layout = model_layout(&cfg);
    let store = match (&depth_override, weights) {
        (Some(_), _) => ParamStore::empty(cfg.seed),
        (None, Some(p)) => {
            let s = ParamStore::load(p).py()?;
            s.check_layout(&layout).py()?;
            s
        }
        (None, None) => init_params(&layout, cfg.seed).py()?,
    };
    let opts = InferOptions { dump, depth_override };
    let result = pipeline::infer(&scene, &cfg, &store, &opts).py()?;
    pipeline::write_outputs(&result, &scene, &out).py()?;
    Ok(result.gaussians.map_or(0, |g| g.len()))
}

/// Runs the command-line interface with `args` (without the program name).
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    splatforge::cli::run(std::iter::once("splatforge".to_string()).chain(args))
}

#[pymodule]
fn splatforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyGaussians>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(composite_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_weights, m)?)?;
    m.add_function(wrap_pyfunction!(check_grad, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
