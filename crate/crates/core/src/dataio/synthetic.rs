//! Procedural stand-in for a multi-view stereo dataset.
//!
//! Every scene is one textured plane (fronto-parallel for even scene
//! indices, slanted for odd ones) seen by several pinhole cameras with
//! small random motions. Images, exact depth maps and cameras are rendered
//! analytically, and `pairs.txt` lists every view pair of the scene.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{save_camera, save_depth, save_image, write_file};
use crate::error::{Error, Result};
use crate::geometry::{mat_vec, rotation_yx, transpose3, Camera, CameraExtrinsics, CameraIntrinsics, DepthMap, Point3};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub scenes: usize,
    pub width: usize,
    pub height: usize,
    pub views_per_scene: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(scenes: usize, width: usize, height: usize, seed: u64) -> Self {
        SynthConfig {
            scenes,
            width,
            height,
            views_per_scene: 4,
            seed,
        }
    }

    pub fn pairs_per_scene(&self) -> usize {
        self.views_per_scene * (self.views_per_scene - 1) / 2
    }
}

/// Isotropic Gaussian spot on the plane.
#[derive(Debug, Clone, Copy)]
pub struct Blob {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

/// Plane sinusoid `amplitude · sin(k·x + phase)`.
#[derive(Debug, Clone, Copy)]
pub struct Wave {
    pub k: [f64; 2],
    pub phase: f64,
    pub amplitude: f64,
}

/// Analytic description of one scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// A point on the plane.
    pub origin: Point3,
    /// Unit normal.
    pub normal: [f64; 3],
    /// Orthonormal in-plane axes used for texture coordinates.
    pub axes: [[f64; 3]; 2],
    pub blobs: Vec<Blob>,
    pub waves: Vec<Wave>,
    pub cameras: Vec<Camera>,
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl SceneSpec {
    /// Texture intensity at a world point on the plane, in `[0, 1]`.
    pub fn intensity(&self, x: &Point3) -> f64 {
        let rel = [x[0] - self.origin[0], x[1] - self.origin[1], x[2] - self.origin[2]];
        let (a, b) = (dot(&rel, &self.axes[0]), dot(&rel, &self.axes[1]));
        let mut v = 0.5;
        for blob in &self.blobs {
            let r2 = (a - blob.center[0]).powi(2) + (b - blob.center[1]).powi(2);
            v += blob.amplitude * (-r2 / (2.0 * blob.sigma * blob.sigma)).exp();
        }
        for w in &self.waves {
            v += w.amplitude * (w.k[0] * a + w.k[1] * b + w.phase).sin();
        }
        v.clamp(0.0, 1.0)
    }

    /// Ray-plane intersection through pixel `(u, v)` of view `cam`.
    /// Returns the camera-space depth and the world point.
    pub fn intersect(&self, cam: &Camera, u: f64, v: f64) -> Option<(f64, Point3)> {
        let k = &cam.intrinsics;
        let rt = transpose3(&cam.extrinsics.r);
        let dir = mat_vec(&rt, &[(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]);
        let c = cam.extrinsics.center();
        let denom = dot(&self.normal, &dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let to_plane = [self.origin[0] - c[0], self.origin[1] - c[1], self.origin[2] - c[2]];
        let lambda = dot(&self.normal, &to_plane) / denom;
        (lambda > 0.0).then(|| (lambda, [c[0] + lambda * dir[0], c[1] + lambda * dir[1], c[2] + lambda * dir[2]]))
    }

    /// Renders view `i` as an 8-bit-quantized image and its exact depth.
    pub fn render(&self, i: usize, width: usize, height: usize) -> (Tensor, DepthMap) {
        let cam = &self.cameras[i];
        let mut img = vec![0.0; width * height];
        let mut depth = vec![0.0; width * height];
        for v in 0..height {
            for u in 0..width {
                if let Some((z, x)) = self.intersect(cam, u as f64, v as f64) {
                    depth[v * width + u] = z;
                    img[v * width + u] = (self.intensity(&x) * 255.0).round() / 255.0;
                }
            }
        }
        (
            Tensor::new([1, height, width], img).expect("sized"),
            DepthMap::new(width, height, depth).expect("sized"),
        )
    }
}

fn scene_rng(seed: u64, scene: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene as u64);
    rng
}

/// Deterministic description of scene `scene` under `cfg`.
pub fn scene_spec(cfg: &SynthConfig, scene: usize) -> SceneSpec {
    let mut rng = scene_rng(cfg.seed, scene);
    let depth = rng.gen_range(4.0..6.0);
    let tilt = if scene % 2 == 1 {
        let sign = |r: &mut ChaCha8Rng| if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        rotation_yx(sign(&mut rng) * rng.gen_range(0.2..0.5), sign(&mut rng) * rng.gen_range(0.1..0.35))
    } else {
        rotation_yx(0.0, 0.0)
    };
    let normal = mat_vec(&tilt, &[0.0, 0.0, 1.0]);
    let axes = [mat_vec(&tilt, &[1.0, 0.0, 0.0]), mat_vec(&tilt, &[0.0, 1.0, 0.0])];
    let blobs = (0..90)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Blob {
                center: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)],
                sigma: rng.gen_range(0.12..0.45),
                amplitude: sign * rng.gen_range(0.2..0.5),
            }
        })
        .collect();
    let waves = (0..3)
        .map(|_| Wave {
            k: [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)],
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amplitude: rng.gen_range(0.03..0.08),
        })
        .collect();
    let f = cfg.width as f64;
    let intr = CameraIntrinsics::new(f, f, (cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0)
        .expect("positive focal length");
    let cameras = (0..cfg.views_per_scene)
        .map(|_| {
            let r = rotation_yx(rng.gen_range(-0.1..0.1), rng.gen_range(-0.08..0.08));
            let c = [rng.gen_range(-0.7..0.7), rng.gen_range(-0.5..0.5), rng.gen_range(-0.4..0.4)];
            let rc = mat_vec(&r, &c);
            Camera {
                intrinsics: intr,
                extrinsics: CameraExtrinsics::new(r, [-rc[0], -rc[1], -rc[2]]).expect("proper rotation"),
            }
        })
        .collect();
    SceneSpec {
        origin: [0.0, 0.0, depth],
        normal,
        axes,
        blobs,
        waves,
        cameras,
    }
}

pub fn view_id(i: usize) -> String {
    format!("{i:08}")
}

pub fn scene_name(s: usize) -> String {
    format!("scene{s:03}")
}

/// Writes `cfg.scenes` scenes under `root`; returns the number of pairs.
pub fn generate_synthetic_dataset(root: impl AsRef<Path>, cfg: &SynthConfig) -> Result<usize> {
    if cfg.width == 0 || cfg.height == 0 || cfg.width % 16 != 0 || cfg.height % 16 != 0 {
        return Err(Error::Config(format!(
            "image size {}x{} must be a nonzero multiple of 16",
            cfg.height, cfg.width
        )));
    }
    if cfg.views_per_scene < 2 {
        return Err(Error::Config("need at least two views per scene".into()));
    }
    let root = root.as_ref();
    let mut pairs = 0;
    for s in 0..cfg.scenes {
        let spec = scene_spec(cfg, s);
        let dir = root.join(scene_name(s));
        for i in 0..cfg.views_per_scene {
            let id = view_id(i);
            let (img, depth) = spec.render(i, cfg.width, cfg.height);
            save_image(dir.join("images").join(format!("{id}.pgm")), &img)?;
            save_depth(dir.join("depths").join(format!("{id}.pfm")), &depth)?;
            save_camera(dir.join("cams").join(format!("{id}_cam.txt")), &spec.cameras[i])?;
        }
        let mut list = String::new();
        for a in 0..cfg.views_per_scene {
            for b in a + 1..cfg.views_per_scene {
                list.push_str(&format!("{} {}\n", view_id(a), view_id(b)));
                pairs += 1;
            }
        }
        write_file(&dir.join("pairs.txt"), list.as_bytes())?;
    }
    Ok(pairs)
}
