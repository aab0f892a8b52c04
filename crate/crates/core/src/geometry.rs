//! Two-view camera math and depth-consistency ground truth.
//!
//! Ground truth between two views is produced by sampling one pixel per
//! coarse cell in view A, lifting it to 3-D with A's depth, reprojecting it
//! into view B, and keeping the pair when B's depth at the reprojected pixel
//! agrees within a relative tolerance.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type Point3 = [f64; 3];

/// Pinhole intrinsics in pixels (no skew).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Validation(format!(
                "focal lengths must be positive and finite (fx={fx}, fy={fy})"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }
}

/// World→camera rigid transform: `x_cam = R·x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl CameraExtrinsics {
    /// Validates `RᵀR = I` and `det R = 1` within `1e-6`.
    pub fn new(r: [[f64; 3]; 3], t: [f64; 3]) -> Result<Self> {
        Self::with_tolerance(r, t, 1e-6)
    }

    pub fn with_tolerance(r: [[f64; 3]; 3], t: [f64; 3], tol: f64) -> Result<Self> {
        let err = orthonormality_error(&r);
        if !(err <= tol) {
            return Err(Error::Validation(format!(
                "rotation is not orthonormal (max deviation {err:.3e} > {tol:e})"
            )));
        }
        let det = det3(&r);
        if !((det - 1.0).abs() <= tol) {
            return Err(Error::Validation(format!("rotation determinant {det} is not 1")));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("translation is not finite".into()));
        }
        Ok(CameraExtrinsics { r, t })
    }

    pub fn identity() -> Self {
        CameraExtrinsics {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    /// Camera center in world coordinates, `−Rᵀt`.
    pub fn center(&self) -> Point3 {
        let rt = transpose3(&self.r);
        let c = mat_vec(&rt, &self.t);
        [-c[0], -c[1], -c[2]]
    }
}

/// Intrinsics plus extrinsics of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

fn orthonormality_error(r: &[[f64; 3]; 3]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn transpose3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Per-pixel depth; values `≤ 0` (or non-finite) mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width * height != values.len() {
            return Err(Error::dim(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(DepthMap { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    /// Depth at `(u, v)` if it is inside the map and valid.
    pub fn valid_at(&self, u: usize, v: usize) -> Option<f64> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let d = self.at(u, v);
        (d > 0.0 && d.is_finite()).then_some(d)
    }
}

/// Lifts a pixel with known depth to world coordinates.
pub fn unproject(pixel: [f64; 2], depth: f64, intr: &CameraIntrinsics, extr: &CameraExtrinsics) -> Result<Point3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    let cam = [
        (pixel[0] - intr.cx) * depth / intr.fx,
        (pixel[1] - intr.cy) * depth / intr.fy,
        depth,
    ];
    let shifted = [cam[0] - extr.t[0], cam[1] - extr.t[1], cam[2] - extr.t[2]];
    Ok(mat_vec(&transpose3(&extr.r), &shifted))
}

/// Projects a world point; returns the pixel and the camera-space depth.
pub fn project(point: Point3, intr: &CameraIntrinsics, extr: &CameraExtrinsics) -> Result<([f64; 2], f64)> {
    let q = mat_vec(&extr.r, &point);
    let q = [q[0] + extr.t[0], q[1] + extr.t[1], q[2] + extr.t[2]];
    if q[2] <= 1e-9 {
        return Err(Error::BehindCamera(q[2]));
    }
    Ok(([intr.fx * q[0] / q[2] + intr.cx, intr.fy * q[1] / q[2] + intr.cy], q[2]))
}

/// Parameters of ground-truth generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtParams {
    /// Sampling stride in pixels; also the coarse cell size.
    pub grid_step: usize,
    /// Accepted relative depth disagreement `|z − d_B| / d_B`.
    pub depth_tol: f64,
}

impl Default for GtParams {
    fn default() -> Self {
        GtParams {
            grid_step: 16,
            depth_tol: 0.02,
        }
    }
}

/// Coarse grid extents `(rows, cols)`.
pub type GridDims = (usize, usize);

pub fn grid_dims(width: usize, height: usize, step: usize) -> GridDims {
    (height.div_ceil(step), width.div_ceil(step))
}

/// Matched coarse-cell pairs between two views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMatches {
    /// `(cell_a, cell_b)` sorted by `cell_a`; each `cell_a` appears once.
    pub pairs: Vec<(usize, usize)>,
    pub grid_a: GridDims,
    pub grid_b: GridDims,
}

impl GroundTruthMatches {
    pub fn n_a(&self) -> usize {
        self.grid_a.0 * self.grid_a.1
    }

    pub fn n_b(&self) -> usize {
        self.grid_b.0 * self.grid_b.1
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Binary `N_A × N_B` matrix with ones at matched pairs.
    pub fn dense(&self) -> Tensor {
        let (na, nb) = (self.n_a(), self.n_b());
        let mut t = Tensor::zeros([na, nb]);
        for &(a, b) in &self.pairs {
            t.data_mut()[a * nb + b] = 1.0;
        }
        t
    }

    /// Flat indices of matched pairs in the dense `N_A × N_B` layout.
    pub fn flat_indices(&self) -> Vec<usize> {
        let nb = self.n_b();
        self.pairs.iter().map(|&(a, b)| a * nb + b).collect()
    }
}

/// Pixel sampled for a cell: the cell center, clamped into the image.
pub fn cell_sample_pixel(row: usize, col: usize, step: usize, width: usize, height: usize) -> (usize, usize) {
    let u = (col * step + step / 2).min(width - 1);
    let v = (row * step + step / 2).min(height - 1);
    (u, v)
}

/// Pixel coordinate of a cell center (for reporting matches).
pub fn cell_center(cell: usize, grid: GridDims, step: usize) -> [f64; 2] {
    let (row, col) = (cell / grid.1, cell % grid.1);
    [(col * step + step / 2) as f64, (row * step + step / 2) as f64]
}

/// Depth-consistency matching of view A's grid samples into view B.
pub fn generate_ground_truth(
    depth_a: &DepthMap,
    depth_b: &DepthMap,
    cam_a: &Camera,
    cam_b: &Camera,
    params: GtParams,
) -> Result<GroundTruthMatches> {
    if params.grid_step == 0 {
        return Err(Error::Contract("grid_step must be at least 1".into()));
    }
    if !(params.depth_tol >= 0.0) {
        return Err(Error::Contract(format!("depth_tol {} must be ≥ 0", params.depth_tol)));
    }
    for (tag, d) in [("A", depth_a), ("B", depth_b)] {
        if d.width() == 0 || d.height() == 0 {
            return Err(Error::Contract(format!("depth map {tag} is empty")));
        }
    }
    let step = params.grid_step;
    let grid_a = grid_dims(depth_a.width(), depth_a.height(), step);
    let grid_b = grid_dims(depth_b.width(), depth_b.height(), step);
    let mut pairs = Vec::new();
    for row in 0..grid_a.0 {
        for col in 0..grid_a.1 {
            let (u, v) = cell_sample_pixel(row, col, step, depth_a.width(), depth_a.height());
            let Some(d) = depth_a.valid_at(u, v) else { continue };
            let world = unproject([u as f64, v as f64], d, &cam_a.intrinsics, &cam_a.extrinsics)?;
            let Ok((px, z)) = project(world, &cam_b.intrinsics, &cam_b.extrinsics) else {
                continue;
            };
            // f64::round is round-half-away-from-zero.
            let (ru, rv) = (px[0].round(), px[1].round());
            if ru < 0.0 || rv < 0.0 || ru >= depth_b.width() as f64 || rv >= depth_b.height() as f64 {
                continue;
            }
            let (ru, rv) = (ru as usize, rv as usize);
            let Some(db) = depth_b.valid_at(ru, rv) else { continue };
            if (z - db).abs() / db <= params.depth_tol {
                pairs.push((row * grid_a.1 + col, (rv / step) * grid_b.1 + ru / step));
            }
        }
    }
    Ok(GroundTruthMatches { pairs, grid_a, grid_b })
}

/// Rotation about the y axis followed by one about the x axis (radians).
pub fn rotation_yx(yaw: f64, pitch: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| rx[i][k] * ry[k][j]).sum();
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cam() -> (CameraIntrinsics, CameraExtrinsics) {
        (CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap(), CameraExtrinsics::identity())
    }

    #[test]
    fn unproject_identity_camera() {
        let (k, e) = unit_cam();
        assert_eq!(unproject([0.0, 0.0], 1.0, &k, &e).unwrap(), [0.0, 0.0, 1.0]);
        assert_eq!(unproject([2.0, 3.0], 2.0, &k, &e).unwrap(), [4.0, 6.0, 2.0]);
    }

    #[test]
    fn unproject_rejects_nonpositive_depth() {
        let (k, e) = unit_cam();
        assert!(matches!(unproject([0.0, 0.0], 0.0, &k, &e), Err(Error::InvalidDepth(_))));
        assert!(matches!(unproject([0.0, 0.0], -1.0, &k, &e), Err(Error::InvalidDepth(_))));
    }

    #[test]
    fn project_examples() {
        let (k, e) = unit_cam();
        assert_eq!(project([0.0, 0.0, 1.0], &k, &e).unwrap(), ([0.0, 0.0], 1.0));
        let shifted = CameraExtrinsics::new(e.r, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(project([0.0, 0.0, 1.0], &k, &shifted).unwrap(), ([1.0, 0.0], 1.0));
        assert!(matches!(project([0.0, 0.0, -1.0], &k, &e), Err(Error::BehindCamera(_))));
        assert!(matches!(project([1.0, 0.0, 0.0], &k, &e), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn extrinsics_validation() {
        let mut r = CameraExtrinsics::identity().r;
        r[0][0] = 1.01;
        assert!(CameraExtrinsics::new(r, [0.0; 3]).is_err());
        // Reflection: orthonormal but det = -1.
        let refl = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraExtrinsics::new(refl, [0.0; 3]).is_err());
        assert!(CameraExtrinsics::new(rotation_yx(0.3, -0.2), [1.0, 2.0, 3.0]).is_ok());
    }

    #[test]
    fn project_unproject_round_trip_random_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let k = CameraIntrinsics::new(
                rng.gen_range(50.0..500.0),
                rng.gen_range(50.0..500.0),
                rng.gen_range(0.0..320.0),
                rng.gen_range(0.0..240.0),
            )
            .unwrap();
            let e = CameraExtrinsics::new(
                rotation_yx(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
            )
            .unwrap();
            let px = [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)];
            let d = rng.gen_range(0.1..50.0);
            let world = unproject(px, d, &k, &e).unwrap();
            let (back, z) = project(world, &k, &e).unwrap();
            assert!((back[0] - px[0]).abs() < 1e-9 && (back[1] - px[1]).abs() < 1e-9);
            assert!((z - d).abs() < 1e-9);
        }
    }

    fn plane_depth(w: usize, h: usize, z: f64) -> DepthMap {
        DepthMap::new(w, h, vec![z; w * h]).unwrap()
    }

    fn cam(f: f64, w: usize, h: usize, t: [f64; 3]) -> Camera {
        Camera {
            intrinsics: CameraIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0).unwrap(),
            extrinsics: CameraExtrinsics::new(CameraExtrinsics::identity().r, t).unwrap(),
        }
    }

    #[test]
    fn identical_views_match_themselves() {
        let d = DepthMap::new(64, 48, (0..64 * 48).map(|i| 2.0 + (i % 7) as f64 * 0.1).collect()).unwrap();
        let c = cam(60.0, 64, 48, [0.1, -0.2, 0.3]);
        let gt = generate_ground_truth(&d, &d, &c, &c, GtParams::default()).unwrap();
        assert_eq!(gt.pairs.len(), 4 * 3);
        assert!(gt.pairs.iter().all(|&(a, b)| a == b));
        let dense = gt.dense();
        assert_eq!(dense.data().iter().sum::<f64>(), gt.pairs.len() as f64);
    }

    #[test]
    fn invalid_depth_yields_no_matches() {
        let d = DepthMap::new(32, 32, vec![0.0; 32 * 32]).unwrap();
        let neg = DepthMap::new(32, 32, vec![-1.0; 32 * 32]).unwrap();
        let c = cam(30.0, 32, 32, [0.0; 3]);
        assert!(generate_ground_truth(&d, &d, &c, &c, GtParams::default()).unwrap().is_empty());
        assert!(generate_ground_truth(&neg, &neg, &c, &c, GtParams::default()).unwrap().is_empty());
    }

    #[test]
    fn one_cell_translation_shifts_matches_by_one_column() {
        let (w, h, z, f) = (96usize, 64usize, 5.0, 80.0);
        let d = plane_depth(w, h, z);
        let a = cam(f, w, h, [0.0; 3]);
        // f · tx / z = 16 px.
        let b = cam(f, w, h, [16.0 * z / f, 0.0, 0.0]);
        let gt = generate_ground_truth(&d, &d, &a, &b, GtParams::default()).unwrap();
        let cols = w / 16;
        assert_eq!(gt.pairs.len(), (h / 16) * (cols - 1));
        for &(ca, cb) in &gt.pairs {
            assert_eq!(cb, ca + 1);
            assert_eq!(ca / cols, cb / cols);
        }
    }

    #[test]
    fn depth_tolerance_is_monotone() {
        let (w, h) = (64usize, 64usize);
        let d_a = plane_depth(w, h, 4.0);
        let d_b = DepthMap::new(w, h, (0..w * h).map(|i| 4.0 + 0.01 * (i % 13) as f64).collect()).unwrap();
        let c = cam(50.0, w, h, [0.0; 3]);
        let mut last = 0;
        for tol in [0.0, 0.0005, 0.001, 0.005, 0.01, 0.05] {
            let gt = generate_ground_truth(&d_a, &d_b, &c, &c, GtParams { grid_step: 16, depth_tol: tol }).unwrap();
            assert!(gt.pairs.len() >= last);
            last = gt.pairs.len();
        }
        assert_eq!(last, 16);
    }

    #[test]
    fn zero_step_rejected() {
        let d = plane_depth(16, 16, 1.0);
        let c = cam(10.0, 16, 16, [0.0; 3]);
        assert!(matches!(
            generate_ground_truth(&d, &d, &c, &c, GtParams { grid_step: 0, depth_tol: 0.02 }),
            Err(Error::Contract(_))
        ));
    }
}
