use std::path::{Path, PathBuf};

use super::{load_camera, load_depth, load_image};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap};
use crate::numerics::Tensor;

/// Locates one stereo pair inside a scene directory.
///
/// Scene layout: `images/<id>.pgm`, `depths/<id>.pfm`, `cams/<id>_cam.txt`
/// and `pairs.txt` with one `idA idB` line per pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairDescriptor {
    pub scene: String,
    pub scene_dir: PathBuf,
    pub id_a: String,
    pub id_b: String,
}

impl PairDescriptor {
    pub fn image_path(&self, id: &str) -> PathBuf {
        self.scene_dir.join("images").join(format!("{id}.pgm"))
    }

    pub fn depth_path(&self, id: &str) -> PathBuf {
        self.scene_dir.join("depths").join(format!("{id}.pfm"))
    }

    pub fn camera_path(&self, id: &str) -> PathBuf {
        self.scene_dir.join("cams").join(format!("{id}_cam.txt"))
    }

    /// `SCENE:IDA:IDB`, the form used on the command line.
    pub fn key(&self) -> String {
        format!("{}:{}:{}", self.scene, self.id_a, self.id_b)
    }
}

/// Both views of a pair, loaded.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub depth_a: DepthMap,
    pub depth_b: DepthMap,
    pub cam_a: Camera,
    pub cam_b: Camera,
}

/// Lists every pair under `root`, scenes in lexicographic order and pairs in
/// `pairs.txt` order. Scene directories are those whose name starts with
/// `scene`.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<Vec<PairDescriptor>> {
    let root = root.as_ref();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut scenes = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("scene") && entry.path().is_dir() {
            scenes.push((name, entry.path()));
        }
    }
    scenes.sort();
    let mut out = Vec::new();
    for (scene, dir) in scenes {
        let pairs_path = dir.join("pairs.txt");
        let text = std::fs::read_to_string(&pairs_path).map_err(|e| Error::io(&pairs_path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ids: Vec<&str> = line.split_whitespace().collect();
            if ids.len() != 2 {
                return Err(Error::format_at_line(&pairs_path, i + 1, "expected `idA idB`"));
            }
            let desc = PairDescriptor {
                scene: scene.clone(),
                scene_dir: dir.clone(),
                id_a: ids[0].to_string(),
                id_b: ids[1].to_string(),
            };
            for id in [&desc.id_a, &desc.id_b] {
                for p in [desc.image_path(id), desc.depth_path(id), desc.camera_path(id)] {
                    if !p.is_file() {
                        return Err(Error::Dataset(format!(
                            "scene `{scene}` pair {} {}: missing {}",
                            desc.id_a,
                            desc.id_b,
                            p.display()
                        )));
                    }
                }
            }
            out.push(desc);
        }
    }
    Ok(out)
}

/// Loads images, depths and cameras of a pair and checks that each view's
/// image and depth map have the same size.
pub fn load_pair(desc: &PairDescriptor) -> Result<ScenePair> {
    let view = |id: &str| -> Result<(Tensor, DepthMap, Camera)> {
        let image = load_image(desc.image_path(id))?;
        let depth = load_depth(desc.depth_path(id))?;
        let cam = load_camera(desc.camera_path(id))?;
        if image.shape()[1] != depth.height() || image.shape()[2] != depth.width() {
            return Err(Error::Dataset(format!(
                "scene `{}` view {id}: image is {}x{} but depth is {}x{}",
                desc.scene,
                image.shape()[2],
                image.shape()[1],
                depth.width(),
                depth.height()
            )));
        }
        Ok((image, depth, cam))
    };
    let (image_a, depth_a, cam_a) = view(&desc.id_a)?;
    let (image_b, depth_b, cam_b) = view(&desc.id_b)?;
    Ok(ScenePair {
        image_a,
        image_b,
        depth_a,
        depth_b,
        cam_a,
        cam_b,
    })
}

/// Finds a pair by its `SCENE:IDA:IDB` key.
pub fn find_pair<'a>(pairs: &'a [PairDescriptor], key: &str) -> Result<&'a PairDescriptor> {
    pairs
        .iter()
        .find(|p| p.key() == key)
        .ok_or_else(|| Error::Dataset(format!("no pair `{key}` in dataset")))
}
