//! Scene manifests: posed input views with descriptions, and target cameras.
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ViewContext};
use crate::geometry::{CameraParams, CameraRecord};
use crate::imageio::load_rgb;
use crate::tensor::{open_existing, Tensor3};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image_path: PathBuf,
    #[serde(flatten)]
    pub camera: CameraRecord,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sf_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    #[serde(flatten)]
    pub camera: CameraRecord,
    /// Ground-truth image for metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub near: f64,
    pub far: f64,
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub targets: Vec<TargetEntry>,
}

/// A manifest with images decoded, cameras validated and paths resolved.
#[derive(Clone, Debug)]
pub struct Scene {
    pub manifest: SceneManifest,
    pub root: PathBuf,
    pub images: Vec<Tensor3>,
    pub cameras: Vec<CameraParams>,
    pub target_cameras: Vec<CameraParams>,
}

impl SceneManifest {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

impl Scene {
    pub fn load(path: impl AsRef<Path>) -> Result<Scene> {
        let path = path.as_ref();
        let mut s = String::new();
        std::io::Read::read_to_string(&mut open_existing(path)?, &mut s)?;
        let manifest = SceneManifest::from_json(&s)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Scene::from_manifest(manifest, root)
    }

    pub fn from_manifest(manifest: SceneManifest, root: PathBuf) -> Result<Scene> {
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!("unsupported manifest version {}", manifest.version)));
        }
        if manifest.views.is_empty() {
            return Err(Error::Validation("manifest lists no views".into()));
        }
        let resolve = |p: &Path| root.join(p);
        let mut images = Vec::with_capacity(manifest.views.len());
        let mut cameras = Vec::with_capacity(manifest.views.len());
        for (i, v) in manifest.views.iter().enumerate() {
            for p in [&v.df_path, &v.sf_path, &v.sentence_path].into_iter().flatten() {
                drop(open_existing(&resolve(p)).view(i)?);
            }
            let img = load_rgb(resolve(&v.image_path)).view(i)?;
            if let Some(first) = images.first() {
                let first: &Tensor3 = first;
                if img.dims() != first.dims() {
                    return Err(Error::shape(format!(
                        "view image is {}x{}, view 0 is {}x{}",
                        img.height(),
                        img.width(),
                        first.height(),
                        first.width()
                    ))
                    .in_view(i));
                }
            }
            images.push(img);
            cameras.push(CameraParams::from_record(&v.camera, manifest.near, manifest.far).view(i)?);
        }
        let target_cameras = manifest
            .targets
            .iter()
            .map(|t| CameraParams::from_record(&t.camera, manifest.near, manifest.far))
            .collect::<Result<_>>()?;
        for t in &manifest.targets {
            if let Some(p) = &t.image_path {
                drop(open_existing(&resolve(p))?);
            }
        }
        Ok(Scene {
            manifest,
            root,
            images,
            cameras,
            target_cameras,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.images[0].height(), self.images[0].width())
    }

    pub fn target_image(&self, j: usize) -> Result<Option<Tensor3>> {
        match &self.manifest.targets[j].image_path {
            Some(p) => Ok(Some(load_rgb(self.resolve(p))?)),
            None => Ok(None),
        }
    }
}
