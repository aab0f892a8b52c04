//! Wall-clock timing of the inference pipeline and the attention paths.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{linear_attention_fast, linear_attention_reference};
use crate::error::Result;
use crate::model::Model;
use crate::numerics::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub iters: usize,
    pub median_ms: f64,
    pub fps: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_ms(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let t0 = Instant::now();
    f()?;
    Ok(t0.elapsed().as_secs_f64() * 1e3)
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([1, h, w], |_| rng.gen_range(0.0..1.0))
}

/// Median time of a full pair forward pass (finite checks off).
pub fn bench_pipeline(model: &Model, height: usize, width: usize, iters: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_image(&mut rng, height, width);
    let b = random_image(&mut rng, height, width);
    let mut frozen = model.clone();
    frozen.params.set_trainable(false);
    let times = (0..iters.max(1))
        .map(|_| {
            time_ms(|| {
                let tape = Tape::new();
                tape.set_check_finite(false);
                frozen.forward(&tape, &a, &b).map(|_| ())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let median_ms = median(times);
    Ok(BenchReport {
        iters: iters.max(1),
        median_ms,
        fps: 1e3 / median_ms,
    })
}

/// Median times `(fast_ms, reference_ms)` of one attention call with
/// `heads × n × d_head` inputs.
pub fn attention_timings(n: usize, heads: usize, d_head: usize, iters: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |_| Tensor::from_fn([heads, n, d_head], |_| rng.gen_range(-1.0..1.0));
    let (q, k, v) = (rand(0), rand(1), rand(2));
    let run = |reference: bool| -> Result<f64> {
        let times = (0..iters.max(1))
            .map(|_| {
                time_ms(|| {
                    let tape = Tape::new();
                    tape.set_check_finite(false);
                    let (q, k, v) = (tape.constant(&q)?, tape.constant(&k)?, tape.constant(&v)?);
                    if reference {
                        linear_attention_reference(&tape, q, k, v)?;
                    } else {
                        linear_attention_fast(&tape, q, k, v)?;
                    }
                    Ok(())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(median(times))
    };
    Ok((run(false)?, run(true)?))
}
