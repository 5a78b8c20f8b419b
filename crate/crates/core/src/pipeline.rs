//! End-to-end inference: providers, multi-view interaction, fusion, depth
//! decoding and Gaussian prediction, plus target rendering.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{PipelineConfig, FEATURE_STRIDE};
use crate::depthdec::{self, build_cost_volume, make_candidates, refine_volume, regress_depth, CostVolume};
use crate::error::{Error, Result, ViewContext};
use crate::gausshead::{self, GaussianSet};
use crate::geometry::DepthMap;
use crate::imageio::{save_feature_preview, save_gray16, save_rgb};
use crate::kernels::ParamStore;
use crate::manifest::Scene;
use crate::metrics::{evaluate, MetricsReport};
use crate::mvin;
use crate::providers::{load_feature, sentence_embedding, FeatureProviderConfig, SentenceProviderConfig};
use crate::renderer::rasterize;
use crate::tensor::{load_tsf1, FeatureRole, Tensor3};
use crate::tsfm;

pub const GAUSSIANS_FILE: &str = "gaussians.gsp";

/// How far [`run`] goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Features,
    Depth,
    Gaussians,
}

#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    /// Keep every intermediate feature map.
    pub dump: bool,
    /// Directory of ground-truth `depth_{i}.tsf` maps. Replaces the depth
    /// decoder and the learned heads with [`gausshead::oracle_view`].
    pub depth_override: Option<PathBuf>,
}

/// Named intermediate maps of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    pub view: usize,
    pub maps: Vec<(String, Tensor3)>,
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub gaussians: Option<GaussianSet>,
    /// Final per-view depth at image resolution.
    pub depths: Vec<DepthMap>,
    pub features: Vec<ViewFeatures>,
}

fn check_scene(scene: &Scene, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    if scene.len() < 2 {
        return Err(Error::TooFewViews(scene.len()));
    }
    let (h, w) = scene.image_dims();
    if (h, w) != (cfg.image_height, cfg.image_width) {
        return Err(Error::Validation(format!(
            "scene images are {h}x{w}, config expects {}x{}",
            cfg.image_height, cfg.image_width
        )));
    }
    Ok(())
}

/// Loads `depth_{i}.tsf` for every view from `dir`.
pub fn load_depth_override(dir: &Path, scene: &Scene) -> Result<Vec<DepthMap>> {
    let (h, w) = scene.image_dims();
    (0..scene.len())
        .map(|i| {
            let (dims, data) = load_tsf1(dir.join(format!("depth_{i}.tsf"))).view(i)?;
            let flat: Vec<usize> = dims.iter().copied().filter(|&d| d != 1).collect();
            if flat != [h, w] {
                return Err(Error::DimsMismatch {
                    expected: vec![h, w],
                    found: dims,
                }
                .in_view(i));
            }
            DepthMap::new(h, w, data, i).view(i)
        })
        .collect()
}

fn provider_for(base: &FeatureProviderConfig, path: Option<&PathBuf>, scene: &Scene) -> FeatureProviderConfig {
    match path {
        Some(p) => FeatureProviderConfig::file(scene.resolve(p), base.channels, base.scale),
        None => base.clone(),
    }
}

/// Runs the learned pipeline up to `stop`.
pub fn run(scene: &Scene, cfg: &PipelineConfig, store: &ParamStore, stop: Stage, dump: bool) -> Result<InferOutput> {
    check_scene(scene, cfg)?;
    let (h, w) = scene.image_dims();
    let (fh, fw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
    let k = scene.len();

    let mut df = Vec::with_capacity(k);
    let mut sf = Vec::with_capacity(k);
    let mut sentences = Vec::with_capacity(k);
    for (i, v) in scene.manifest.views.iter().enumerate() {
        let dcfg = provider_for(&cfg.depth_prior, v.df_path.as_ref(), scene);
        df.push(load_feature(&dcfg, FeatureRole::DepthPrior, i, h, w).view(i)?.tensor);
        let scfg = provider_for(&cfg.semantic, v.sf_path.as_ref(), scene);
        sf.push(load_feature(&scfg, FeatureRole::Semantic, i, h, w).view(i)?.tensor);
        let tcfg = match &v.sentence_path {
            Some(p) => SentenceProviderConfig::file(scene.resolve(p), cfg.sentence.dim),
            None => cfg.sentence.clone(),
        };
        sentences.push(sentence_embedding(&tcfg, &v.description, i).view(i)?);
    }

    let cf = mvin::extract_cf(&scene.images, store, &cfg.mvin)?;
    let mf = mvin::cross_view_attend(&cf, store, &cfg.mvin)?;
    let fused: Vec<tsfm::TsfmIntermediates> = (0..k)
        .into_par_iter()
        .map(|i| tsfm::run(&sf[i], &df[i], &mf[i].tensor, &sentences[i], store, &cfg.tsfm, fh, fw).view(i))
        .collect::<Result<_>>()?;

    let mut features = Vec::new();
    if dump {
        for i in 0..k {
            let mut maps = vec![
                ("cf".to_string(), cf[i].tensor.clone()),
                ("df".to_string(), df[i].clone()),
                ("sf".to_string(), sf[i].clone()),
                ("mf".to_string(), mf[i].tensor.clone()),
            ];
            maps.extend(fused[i].maps().into_iter().map(|(role, t)| (role.tag().to_string(), t.clone())));
            features.push(ViewFeatures { view: i, maps });
        }
    }
    if stop == Stage::Features {
        return Ok(InferOutput {
            gaussians: None,
            depths: Vec::new(),
            features,
        });
    }

    let rf: Vec<Tensor3> = fused.iter().map(|f| f.rf().clone()).collect();
    let cfs: Vec<Tensor3> = cf.iter().map(|f| f.tensor.clone()).collect();
    let candidates = scene
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| make_candidates(c.near, c.far, cfg.depth.candidates, cfg.depth.spacing).view(i))
        .collect::<Result<Vec<_>>>()?;
    let volumes = build_cost_volume(&rf, &scene.cameras, &candidates, FEATURE_STRIDE as f64)?;
    let refined: Vec<CostVolume> = volumes
        .par_iter()
        .enumerate()
        .map(|(i, v)| refine_volume(&rf[i], v, store).view(i))
        .collect::<Result<_>>()?;
    let regressed: Vec<_> = refined
        .iter()
        .enumerate()
        .map(|(i, v)| regress_depth(v).view(i))
        .collect::<Result<_>>()?;
    let coarse: Vec<DepthMap> = regressed.iter().map(|(d, _)| d.clone()).collect();
    let depths = depthdec::refine_depth(&scene.images, &rf, &cfs, &coarse, &scene.cameras, store)?;
    if dump {
        for (i, vf) in features.iter_mut().enumerate() {
            vf.maps.push(("cost".to_string(), refined[i].scores.clone()));
            vf.maps.push(("conf".to_string(), regressed[i].1.to_tensor()));
        }
    }
    if stop == Stage::Depth {
        return Ok(InferOutput {
            gaussians: None,
            depths,
            features,
        });
    }

    let per_view: Vec<GaussianSet> = (0..k)
        .into_par_iter()
        .map(|i| {
            gausshead::predict_view(
                &scene.images[i],
                &cfs[i],
                &refined[i].scores,
                &regressed[i].1,
                &depths[i],
                &scene.cameras[i],
                store,
                cfg.gauss.sh_degree,
            )
            .view(i)
        })
        .collect::<Result<_>>()?;
    let gaussians = merge(per_view, cfg.gauss.sh_degree)?;
    Ok(InferOutput {
        gaussians: Some(gaussians),
        depths,
        features,
    })
}

fn merge(per_view: Vec<GaussianSet>, sh_degree: usize) -> Result<GaussianSet> {
    let mut all = GaussianSet::empty(sh_degree);
    for g in &per_view {
        all.append(g)?;
    }
    all.validate()?;
    Ok(all)
}

/// Full inference. With a depth override only the analytic heads run.
pub fn infer(scene: &Scene, cfg: &PipelineConfig, store: &ParamStore, opts: &InferOptions) -> Result<InferOutput> {
    let Some(dir) = &opts.depth_override else {
        return run(scene, cfg, store, Stage::Gaussians, opts.dump);
    };
    check_scene(scene, cfg)?;
    let depths = load_depth_override(dir, scene)?;
    let per_view = (0..scene.len())
        .map(|i| gausshead::oracle_view(&scene.images[i], &depths[i], &scene.cameras[i], cfg.gauss.sh_degree).view(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(InferOutput {
        gaussians: Some(merge(per_view, cfg.gauss.sh_degree)?),
        depths,
        features: Vec::new(),
    })
}

/// Writes `gaussians.gsp`, `depth_{i}.tsf` / `.png` and, when present,
/// `features/view{i}_{tag}.tsf` / `.png`.
pub fn write_outputs(out: &InferOutput, scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if let Some(g) = &out.gaussians {
        g.save_gsp1(dir.join(GAUSSIANS_FILE))?;
    }
    for (i, d) in out.depths.iter().enumerate() {
        let cam = &scene.cameras[i];
        crate::tensor::save_tsf1(dir.join(format!("depth_{i}.tsf")), &[d.height, d.width], &d.values)?;
        save_gray16(&d.values, d.height, d.width, cam.near, cam.far, dir.join(format!("depth_{i}.png")))?;
    }
    if !out.features.is_empty() {
        let fdir = dir.join("features");
        std::fs::create_dir_all(&fdir)?;
        for vf in &out.features {
            for (tag, t) in &vf.maps {
                let stem = format!("view{}_{tag}", vf.view);
                t.save_tsf1(fdir.join(format!("{stem}.tsf")))?;
                save_feature_preview(t, fdir.join(format!("{stem}.png")))?;
            }
        }
    }
    Ok(())
}

/// Renders every target camera of `scene` into `dir/target_{j}.png`, writing
/// `dir/metrics_{j}.json` where the target has a ground-truth image.
pub fn render_targets(
    gaussians: &GaussianSet,
    scene: &Scene,
    cfg: &PipelineConfig,
    dir: &Path,
) -> Result<Vec<Option<MetricsReport>>> {
    std::fs::create_dir_all(dir)?;
    let mut reports = Vec::new();
    for (j, cam) in scene.target_cameras.iter().enumerate() {
        let out = rasterize(gaussians, cam, &cfg.render)?;
        save_rgb(&out.image, dir.join(format!("target_{j}.png")))?;
        let report = match scene.target_image(j)? {
            Some(gt) => {
                let r = evaluate(&out.image, &gt, &cfg.loss, None)?;
                let json = serde_json::to_string_pretty(&r)? + "\n";
                std::fs::write(dir.join(format!("metrics_{j}.json")), json)?;
                Some(r)
            }
            None => None,
        };
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::init_params;
    use crate::synthetic::{gen_synthetic, SceneKind, SyntheticOptions};

    #[test]
    fn oracle_path_reaches_threshold() {
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(&SyntheticOptions::new(SceneKind::TexturedPlane, 7, 64, 64), dir.path()).unwrap();
        let scene = Scene::load(dir.path().join("manifest.json")).unwrap();
        let cfg = PipelineConfig::default();
        let opts = InferOptions {
            dump: false,
            depth_override: Some(dir.path().to_path_buf()),
        };
        let out = infer(&scene, &cfg, &ParamStore::empty(0), &opts).unwrap();
        let g = out.gaussians.unwrap();
        assert_eq!(g.len(), 2 * 64 * 64);
        let reports = render_targets(&g, &scene, &cfg, &dir.path().join("render")).unwrap();
        let psnr = reports[0].as_ref().unwrap().psnr_db;
        println!("oracle psnr {psnr}");
        assert!(psnr >= 30.0);
    }

    #[test]
    fn single_view_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = gen_synthetic(&SyntheticOptions::new(SceneKind::TexturedPlane, 1, 32, 32), dir.path()).unwrap();
        m.views.truncate(1);
        let scene = Scene::from_manifest(m, dir.path().to_path_buf()).unwrap();
        let cfg = PipelineConfig::tiny();
        let store = init_params(&crate::config::model_layout(&cfg), 0).unwrap();
        let err = infer(&scene, &cfg, &store, &InferOptions::default()).unwrap_err();
        assert!(matches!(err, Error::TooFewViews(1)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn learned_path_produces_valid_set() {
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(&SyntheticOptions::new(SceneKind::TexturedPlane, 2, 32, 32), dir.path()).unwrap();
        let scene = Scene::load(dir.path().join("manifest.json")).unwrap();
        let cfg = PipelineConfig::tiny();
        let store = init_params(&crate::config::model_layout(&cfg), 5).unwrap();
        let opts = InferOptions {
            dump: true,
            depth_override: None,
        };
        let out = infer(&scene, &cfg, &store, &opts).unwrap();
        let g = out.gaussians.unwrap();
        assert_eq!(g.len(), 2 * 32 * 32);
        g.validate().unwrap();
        assert_eq!(out.features[0].maps.len(), 17);
    }
}
