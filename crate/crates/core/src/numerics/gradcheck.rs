//! Central finite-difference checks of tape gradients.
//!
//! A probe whose `±h` evaluations switch a relu or clamp branch (see
//! [`Tape::branch_signature`]) is retried with `h/10`, at most three
//! times. If the switch persists the entry sits on a kink, where no
//! derivative exists; it is counted in [`GradCheckReport::kinks`] and not
//! compared.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(tensor label, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Probes skipped because a branch switch persisted at every step.
    pub kinks: usize,
}

impl GradCheckReport {
    /// Relative error with a `1e-6` denominator floor for near-zero entries.
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
    }

    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = Self::relative_error(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.max_rel_err >= self.max_rel_err && other.worst.is_some() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

const RETRIES: usize = 3;

/// Central difference at the first step (of `step`, `step/10`, ...) whose
/// `±h` evaluations stay on the unperturbed branch; `None` at a kink.
fn central_difference(step: f64, base_sig: u64, mut eval_at: impl FnMut(f64) -> Result<(f64, u64)>) -> Result<Option<f64>> {
    let mut h = step;
    for _ in 0..=RETRIES {
        let (up, sig_up) = eval_at(h)?;
        let (down, sig_down) = eval_at(-h)?;
        if sig_up == base_sig && sig_down == base_sig {
            return Ok(Some((up - down) / (2.0 * h)));
        }
        h /= 10.0;
    }
    Ok(None)
}

fn pick(n: usize, per_tensor: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match per_tensor {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Compares `∂f/∂inputs` from the tape against central differences with
/// the given `step`. `per_tensor` limits how many entries of each input are
/// probed (chosen with `seed`); `None` probes all of them.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, step: f64, per_tensor: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let tape = Tape::new();
        let vars = xs.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        Ok((tape.item(out)?, tape.branch_signature()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    let base_sig = eval(&work)?.1;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for k in pick(inputs[i].numel(), per_tensor, &mut rng) {
            let orig = work[i].data()[k];
            let numeric = central_difference(step, base_sig, |h| {
                work[i].data_mut()[k] = orig + h;
                let r = eval(&work);
                work[i].data_mut()[k] = orig;
                r
            })?;
            match numeric {
                Some(n) => report.record(&format!("input{i}"), k, analytic.data()[k], n),
                None => report.kinks += 1,
            }
        }
    }
    Ok(report)
}

/// Same check for every parameter of a store, through a loss built with
/// [`Tape::param`]. Every parameter must receive a gradient.
pub fn check_params<F>(store: &ParamStore, f: F, step: f64, per_tensor: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.set_trainable(true);
    {
        let tape = Tape::new();
        let loss = f(&tape, &analytic_store)?;
        let grads = tape.backward(loss)?;
        grads.accumulate_into(&mut analytic_store);
    }
    let mut work = store.clone();
    work.set_trainable(false);
    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let tape = Tape::new();
        let out = f(&tape, s)?;
        Ok((tape.item(out)?, tape.branch_signature()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let base_sig = eval(&work)?.1;
    for name in names {
        let analytic = analytic_store
            .get(&name)
            .and_then(|t| t.grad().map(<[f64]>::to_vec))
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        let mut sub = GradCheckReport::default();
        for k in pick(analytic.len(), per_tensor, &mut rng) {
            let orig = work.require(&name)?.data()[k];
            let numeric = central_difference(step, base_sig, |h| {
                work.get_mut(&name).expect("listed name").data_mut()[k] = orig + h;
                let r = eval(&work);
                work.get_mut(&name).expect("listed name").data_mut()[k] = orig;
                r
            })?;
            match numeric {
                Some(n) => sub.record(&name, k, analytic[k], n),
                None => sub.kinks += 1,
            }
        }
        report.merge(sub);
    }
    Ok(report)
}
