//! Distillation and target losses.
//!
//! Distillation treats the whole score matrix as one categorical over all
//! `N_A·N_B` cell pairs: `p = softmax(S / t)` over the flattened entries and
//! `L = t² · KL(p_teacher ‖ p_student)`.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Floor applied to probabilities before the log in [`target_loss`].
pub const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub t: f64,
    pub c_d: f64,
    pub c_t: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            t: 5.0,
            c_d: 0.3,
            c_t: 0.7,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::Config(format!("distillation temperature must be positive, got {}", self.t)));
        }
        if !(self.c_d >= 0.0 && self.c_t >= 0.0 && self.c_d + self.c_t > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got c_d={} c_t={}",
                self.c_d, self.c_t
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_distill: f64,
    pub l_target: f64,
    pub total: f64,
}

/// `c_d·l_distill + c_t·l_target`.
pub fn total_loss(l_distill: f64, l_target: f64, cfg: &DistillConfig) -> LossBreakdown {
    LossBreakdown {
        l_distill,
        l_target,
        total: cfg.c_d * l_distill + cfg.c_t * l_target,
    }
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {t}")))
    }
}

/// Log-softmax of `S / t` over all entries, returned flat.
pub fn soften(tape: &Tape, s: Var, t: f64) -> Result<Var> {
    check_t(t)?;
    let n: usize = tape.shape(s).iter().product();
    tape.log_softmax(tape.scale(tape.reshape(s, &[n])?, 1.0 / t)?, 0)
}

/// `t² · Σ p_T (log p_T − log p_S)`; the teacher scores are detached.
pub fn kl_distill_loss(tape: &Tape, s_student: Var, s_teacher: Var, t: f64) -> Result<Var> {
    let (ss, st) = (tape.shape(s_student), tape.shape(s_teacher));
    if ss != st {
        return Err(Error::dim(format!("distillation shapes differ: student {ss:?}, teacher {st:?}")));
    }
    let log_t = soften(tape, tape.detach(s_teacher)?, t)?;
    let log_s = soften(tape, s_student, t)?;
    let p_t = tape.exp(log_t)?;
    let kl = tape.sum_all(tape.mul(p_t, tape.sub(log_t, log_s)?)?)?;
    tape.scale(kl, t * t)
}

/// `−mean log clamp(P, 1e-12, 1)` over ground-truth cell pairs, given as
/// flat indices into `P`.
pub fn target_loss(tape: &Tape, p: Var, gt_flat: &[usize]) -> Result<Var> {
    if gt_flat.is_empty() {
        return Err(Error::Contract("target loss needs at least one ground-truth match".into()));
    }
    let n: usize = tape.shape(p).iter().product();
    if let Some(&bad) = gt_flat.iter().find(|&&i| i >= n) {
        return Err(Error::dim(format!("ground-truth index {bad} outside a {n}-entry matrix")));
    }
    let picked = tape.clamp(tape.gather(p, gt_flat)?, P_FLOOR, 1.0)?;
    tape.neg(tape.mean_all(tape.log(picked)?)?)
}
