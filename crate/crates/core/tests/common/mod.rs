//! Helpers shared by integration test targets.
#![allow(dead_code)]

use cloftr_core::geometry::{Camera, DepthMap};

/// Per-point ground truth computed without the geometry module: sample each
/// A cell at its (clamped) center, lift with `K⁻¹`, move into B's frame,
/// then find the nearest B pixel by scanning the whole image.
pub fn brute_force_gt(da: &DepthMap, db: &DepthMap, ca: &Camera, cb: &Camera, step: usize, tol: f64) -> Vec<(usize, usize)> {
    let (wa, ha, wb, hb) = (da.width(), da.height(), db.width(), db.height());
    let cols_a = wa.div_ceil(step);
    let cols_b = wb.div_ceil(step);
    let mut out = Vec::new();
    for row in 0..ha.div_ceil(step) {
        for col in 0..cols_a {
            let u = (col * step + step / 2).min(wa - 1);
            let v = (row * step + step / 2).min(ha - 1);
            let d = da.at(u, v);
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            let (ka, ea) = (&ca.intrinsics, &ca.extrinsics);
            let p_cam = [(u as f64 - ka.cx) / ka.fx * d, (v as f64 - ka.cy) / ka.fy * d, d];
            // X = Rᵀ (p − t)
            let diff = [p_cam[0] - ea.t[0], p_cam[1] - ea.t[1], p_cam[2] - ea.t[2]];
            let x: Vec<f64> = (0..3).map(|i| (0..3).map(|k| ea.r[k][i] * diff[k]).sum()).collect();
            let (kb, eb) = (&cb.intrinsics, &cb.extrinsics);
            let q: Vec<f64> = (0..3).map(|i| (0..3).map(|k| eb.r[i][k] * x[k]).sum::<f64>() + eb.t[i]).collect();
            if q[2] <= 1e-9 {
                continue;
            }
            let (pu, pv) = (kb.fx * q[0] / q[2] + kb.cx, kb.fy * q[1] / q[2] + kb.cy);
            if pu < -0.5 || pv < -0.5 || pu >= wb as f64 - 0.5 || pv >= hb as f64 - 0.5 {
                continue;
            }
            let mut best = (f64::INFINITY, 0, 0);
            for y in 0..hb {
                for xx in 0..wb {
                    let dist = (xx as f64 - pu).powi(2) + (y as f64 - pv).powi(2);
                    if dist < best.0 {
                        best = (dist, xx, y);
                    }
                }
            }
            let (_, bu, bv) = best;
            let zb = db.at(bu, bv);
            if !(zb > 0.0 && zb.is_finite()) || (q[2] - zb).abs() / zb > tol {
                continue;
            }
            out.push((row * cols_a + col, (bv / step) * cols_b + bu / step));
        }
    }
    out
}
