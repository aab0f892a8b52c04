//! Score matrix, dual-softmax, match extraction and the MAE metric.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `[N_A, N_B]`.
    pub s: Tensor,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchProbability {
    /// `[N_A, N_B]`.
    pub p: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub cell_a: usize,
    pub cell_b: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    pub threshold: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature tau must be positive, got {tau}")))
    }
}

/// `S = A·Bᵀ / τ` on a tape.
pub fn score_matrix_var(tape: &Tape, feat_a: Var, feat_b: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (sa, sb) = (tape.shape(feat_a), tape.shape(feat_b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::dim(format!("score matrix needs [N, d] x [M, d], got {sa:?} and {sb:?}")));
    }
    tape.scale(tape.matmul(feat_a, tape.transpose(feat_b)?)?, 1.0 / tau)
}

/// Row softmax times column softmax, on a tape.
pub fn dual_softmax_var(tape: &Tape, s: Var) -> Result<Var> {
    tape.mul(tape.softmax(s, 1)?, tape.softmax(s, 0)?)
}

pub fn score_matrix(feat_a: &Tensor, feat_b: &Tensor, tau: f64) -> Result<ScoreMatrix> {
    let tape = Tape::new();
    let s = score_matrix_var(&tape, tape.constant(feat_a)?, tape.constant(feat_b)?, tau)?;
    Ok(ScoreMatrix { s: tape.value(s), tau })
}

pub fn dual_softmax(s: &ScoreMatrix) -> Result<MatchProbability> {
    let tape = Tape::new();
    let p = dual_softmax_var(&tape, tape.constant(&s.s)?)?;
    Ok(MatchProbability { p: tape.value(p) })
}

fn dims(p: &Tensor) -> Result<(usize, usize)> {
    match p.shape() {
        [n, m] => Ok((*n, *m)),
        s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
    }
}

/// First index of the maximum (ties go to the smaller index).
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Keeps `(i, j)` with `P(i, j) ≥ threshold`; with `mnn`, `j` must also be
/// the row argmax and `i` the column argmax. Output is in row-major order.
pub fn extract_matches(p: &MatchProbability, threshold: f64, mnn: bool) -> Result<MatchSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("match threshold must lie in (0, 1), got {threshold}")));
    }
    let (n, m) = dims(&p.p)?;
    let d = p.p.data();
    let (row_best, col_best): (Vec<usize>, Vec<usize>) = if mnn {
        (
            (0..n).map(|i| argmax((0..m).map(|j| d[i * m + j]))).collect(),
            (0..m).map(|j| argmax((0..n).map(|i| d[i * m + j]))).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let mut matches = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let c = d[i * m + j];
            if c >= threshold && (!mnn || (row_best[i] == j && col_best[j] == i)) {
                matches.push(Match {
                    cell_a: i,
                    cell_b: j,
                    confidence: c,
                });
            }
        }
    }
    Ok(MatchSet { matches, threshold })
}

/// Mean of `|P − G|` over every cell pair.
pub fn mae(p: &Tensor, g: &Tensor) -> Result<f64> {
    if p.shape() != g.shape() {
        return Err(Error::dim(format!("mae shapes differ: {:?} vs {:?}", p.shape(), g.shape())));
    }
    if p.numel() == 0 {
        return Err(Error::dim("mae of an empty matrix"));
    }
    Ok(p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.numel() as f64)
}
