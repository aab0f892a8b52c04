//! AdamW, step learning-rate schedule, gradient accumulation and the
//! training loop.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{self, append_metrics, MetricsRow};
use crate::distillation::{self, DistillConfig, LossBreakdown};
use crate::error::{Error, Result};
use crate::geometry::{generate_ground_truth, GroundTruthMatches, GtParams};
use crate::matching;
use crate::model::{forward_params, Model, ModelConfig};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_gamma: f64,
    pub lr_step_epochs: usize,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub epoch_pairs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            lr_gamma: 1e-3,
            lr_step_epochs: 15,
            micro_batch: 4,
            accum_steps: 8,
            epoch_pairs: 5000,
            epochs: 30,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn virtual_batch(&self) -> usize {
        self.micro_batch * self.accum_steps
    }

    /// Logged steps per epoch: `⌈epoch_pairs / virtual_batch⌉`.
    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_pairs.div_ceil(self.virtual_batch())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.micro_batch == 0 || self.accum_steps == 0 {
            return bad("micro_batch and accum_steps must be at least 1".into());
        }
        if self.lr_step_epochs == 0 {
            return bad("lr_step_epochs must be at least 1".into());
        }
        if !(self.lr0 >= 0.0 && self.lr_gamma > 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad(format!(
                "lr0, weight_decay must be ≥ 0 and lr_gamma, eps > 0 (got {}, {}, {}, {})",
                self.lr0, self.weight_decay, self.lr_gamma, self.eps
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        Ok(())
    }
}

/// `lr0 · lr_gamma^⌊epoch / lr_step_epochs⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_gamma.powi((epoch / cfg.lr_step_epochs) as i32)
}

/// AdamW moments per parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
    pub step: u64,
}

/// One AdamW update from the gradients accumulated in `params`.
/// Parameters without gradients are left untouched.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (name, t) in params.iter_mut() {
        let (value, grad) = t.split_value_grad();
        let Some(grad) = grad else { continue };
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        for k in 0..grad.len() {
            let g = grad[k];
            value[k] *= 1.0 - lr * cfg.weight_decay;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            value[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Runs every micro-batch with its loss scaled by `1/n` (`n` = number of
/// micro-batches), accumulating gradients, then takes one AdamW step and
/// zeroes the gradients. Returns the mean breakdown.
///
/// `loss_fn` records one micro-batch on the tape and returns its
/// mean-reduced loss and breakdown.
pub fn accumulate_and_step<M, F>(
    params: &mut ParamStore,
    state: &mut OptimizerState,
    micro_batches: &[M],
    lr: f64,
    cfg: &TrainConfig,
    mut loss_fn: F,
) -> Result<LossBreakdown>
where
    F: FnMut(&Tape, &ParamStore, &M) -> Result<(Var, LossBreakdown)>,
{
    let n = micro_batches.len();
    if n == 0 {
        return Err(Error::Contract("accumulate_and_step needs at least one micro-batch".into()));
    }
    params.zero_grad();
    let mut mean = LossBreakdown {
        l_distill: 0.0,
        l_target: 0.0,
        total: 0.0,
    };
    for mb in micro_batches {
        let tape = Tape::new();
        let (loss, parts) = loss_fn(&tape, params, mb)?;
        let scaled = tape.scale(loss, 1.0 / n as f64)?;
        tape.backward(scaled)?.accumulate_into(params);
        mean.l_distill += parts.l_distill / n as f64;
        mean.l_target += parts.l_target / n as f64;
        mean.total += parts.total / n as f64;
    }
    adamw_step(params, state, lr, cfg)?;
    params.zero_grad();
    Ok(mean)
}

/// An image pair with its ground truth, ready for training.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub key: String,
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub gt: GroundTruthMatches,
}

/// Loads every pair listed under `root` and generates its ground truth.
pub fn load_training_pairs(root: impl AsRef<Path>, gt: GtParams) -> Result<Vec<TrainPair>> {
    dataio::scan_dataset(root)?
        .iter()
        .map(|d| {
            let p = dataio::load_pair(d)?;
            let gt = generate_ground_truth(&p.depth_a, &p.depth_b, &p.cam_a, &p.cam_b, gt)?;
            Ok(TrainPair {
                key: d.key(),
                image_a: p.image_a,
                image_b: p.image_b,
                gt,
            })
        })
        .collect()
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub skipped_pairs: usize,
}

impl TrainReport {
    /// Mean MAE over the logged steps of the last epoch (NaN rows ignored).
    pub fn final_epoch_mae(&self) -> f64 {
        let Some(last) = self.rows.last().map(|r| r.epoch) else {
            return f64::NAN;
        };
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.epoch == last && r.mae.is_finite())
            .map(|r| r.mae)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.clfw")
}

pub const LATEST_CHECKPOINT: &str = "ckpt_latest.clfw";

fn checkpoint(model: &Model, out_dir: &Path, epoch: usize) -> Result<()> {
    let path = out_dir.join(checkpoint_name(epoch));
    dataio::save_weights(&path, model.params.iter())?;
    std::fs::copy(&path, out_dir.join(LATEST_CHECKPOINT)).map_err(|e| Error::io(out_dir.join(LATEST_CHECKPOINT), e))?;
    Ok(())
}

/// Per-pair loss for the student. Returns the loss, its breakdown and the
/// pair's MAE.
fn pair_loss(
    tape: &Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    pair: &TrainPair,
    teacher_scores: Option<&Tensor>,
    distill: &DistillConfig,
) -> Result<(Var, LossBreakdown, f64)> {
    let out = forward_params(cfg, tape, params, &pair.image_a, &pair.image_b)?;
    let l_target = distillation::target_loss(tape, out.prob, &pair.gt.flat_indices())?;
    let mae = matching::mae(&tape.value(out.prob), &pair.gt.dense())?;
    let (loss, l_distill) = match teacher_scores {
        Some(st) => {
            let l_d = distillation::kl_distill_loss(tape, out.scores, tape.constant(st)?, distill.t)?;
            let loss = tape.add(tape.scale(l_d, distill.c_d)?, tape.scale(l_target, distill.c_t)?)?;
            (loss, tape.item(l_d)?)
        }
        None => (tape.scale(l_target, distill.c_t)?, 0.0),
    };
    let parts = distillation::total_loss(l_distill, tape.item(l_target)?, distill);
    Ok((loss, parts, mae))
}

/// Trains `student` in place.
///
/// Each epoch samples `epoch_pairs` pairs uniformly with replacement and
/// walks them in virtual batches of `micro_batch · accum_steps`. Pairs with
/// empty ground truth are skipped; a virtual batch left without valid pairs
/// logs a NaN row and takes no step. Without a teacher `c_d` is treated as 0.
/// Writes `metrics.csv`, `ckpt_epoch{N}.clfw` (N = 0 is the initial state)
/// and `ckpt_latest.clfw` into `out_dir`.
pub fn train(
    student: &mut Model,
    teacher: Option<&Model>,
    data: &[TrainPair],
    cfg: &TrainConfig,
    distill: &DistillConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    distill.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let distill = match teacher {
        Some(_) => *distill,
        None => DistillConfig { c_d: 0.0, ..*distill },
    };
    let frozen_teacher = teacher.map(|t| {
        let mut t = t.clone();
        t.params.set_trainable(false);
        t
    });
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    dataio::init_metrics(&metrics)?;
    checkpoint(student, out_dir, 0)?;

    let valid: Vec<bool> = data.iter().map(|p| !p.gt.is_empty()).collect();
    let mut teacher_cache: HashMap<usize, Tensor> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::default();
    let mut report = TrainReport {
        rows: Vec::new(),
        skipped_pairs: 0,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let picks: Vec<usize> = (0..cfg.epoch_pairs).map(|_| rng.gen_range(0..data.len())).collect();
        for vb in picks.chunks(cfg.virtual_batch()) {
            let mut micro: Vec<Vec<usize>> = Vec::new();
            for chunk in vb.chunks(cfg.micro_batch) {
                let kept: Vec<usize> = chunk.iter().copied().filter(|&i| valid[i]).collect();
                for &i in chunk.iter().filter(|&&i| !valid[i]) {
                    warn!("skipping pair {} with empty ground truth", data[i].key);
                    report.skipped_pairs += 1;
                }
                if !kept.is_empty() {
                    micro.push(kept);
                }
            }
            if let Some(t) = &frozen_teacher {
                for &i in micro.iter().flatten() {
                    if let std::collections::hash_map::Entry::Vacant(e) = teacher_cache.entry(i) {
                        let tape = Tape::new();
                        let out = forward_params(&t.cfg, &tape, &t.params, &data[i].image_a, &data[i].image_b)?;
                        e.insert(tape.value(out.scores));
                    }
                }
            }
            let row = if micro.is_empty() {
                MetricsRow {
                    epoch,
                    step,
                    loss: f64::NAN,
                    l_distill: f64::NAN,
                    l_target: f64::NAN,
                    mae: f64::NAN,
                    lr,
                }
            } else {
                let mut mae_sum = 0.0;
                let mut mae_n = 0usize;
                let model_cfg = student.cfg.clone();
                let parts = accumulate_and_step(&mut student.params, &mut state, &micro, lr, cfg, |tape, params, mb| {
                    let mut acc: Option<Var> = None;
                    let mut sum = LossBreakdown {
                        l_distill: 0.0,
                        l_target: 0.0,
                        total: 0.0,
                    };
                    for &i in mb {
                        let (loss, parts, mae) =
                            pair_loss(tape, &model_cfg, params, &data[i], teacher_cache.get(&i), &distill)?;
                        acc = Some(match acc {
                            Some(a) => tape.add(a, loss)?,
                            None => loss,
                        });
                        sum.l_distill += parts.l_distill;
                        sum.l_target += parts.l_target;
                        sum.total += parts.total;
                        mae_sum += mae;
                        mae_n += 1;
                    }
                    let k = mb.len() as f64;
                    let mean = tape.scale(acc.expect("micro-batch is non-empty"), 1.0 / k)?;
                    Ok((
                        mean,
                        LossBreakdown {
                            l_distill: sum.l_distill / k,
                            l_target: sum.l_target / k,
                            total: sum.total / k,
                        },
                    ))
                })?;
                MetricsRow {
                    epoch,
                    step,
                    loss: parts.total,
                    l_distill: parts.l_distill,
                    l_target: parts.l_target,
                    mae: mae_sum / mae_n as f64,
                    lr,
                }
            };
            append_metrics(&metrics, &row)?;
            report.rows.push(row);
            step += 1;
        }
        checkpoint(student, out_dir, epoch + 1)?;
        info!(
            "epoch {epoch}: lr {lr:.3e}, mean MAE {:.5}",
            report.final_epoch_mae()
        );
    }
    Ok(report)
}
