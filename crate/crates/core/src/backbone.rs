//! Convolutional head producing coarse features at 1/16 resolution.
//!
//! Layout: a 3×3 stride-1 stem, then per stage one stride-2 residual block
//! and one stride-1 residual block, then a 1×1 projection (with bias) to
//! `d_model`. Blocks are `conv3×3 → GN → relu → conv3×3 → GN` plus a 1×1
//! shortcut conv when the channel count or stride changes. Convolutions
//! carry no bias.
//!
//! Parameter names:
//!
//! | name | shape |
//! |---|---|
//! | `backbone.stem.w` | `[initial_dim, 1, 3, 3]` |
//! | `backbone.stem.norm.{gamma,beta}` | `[initial_dim]` |
//! | `backbone.stage{i}.block{j}.conv{k}.w` | `[c_out, c_in, 3, 3]`, `k ∈ {1, 2}` |
//! | `backbone.stage{i}.block{j}.norm{k}.{gamma,beta}` | `[c_out]` |
//! | `backbone.stage{i}.block{j}.shortcut.w` | `[c_out, c_in, 1, 1]` |
//! | `backbone.proj.w` | `[d_model, c_last, 1, 1]` |
//! | `backbone.proj.b` | `[d_model]` |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub initial_dim: usize,
    pub block_dims: Vec<usize>,
    /// Channels of the projected output.
    pub d_model: usize,
}

impl BackboneConfig {
    /// Reduced student head: initial 8, stages 8/16/32/32, output 32.
    pub fn reduced() -> Self {
        BackboneConfig {
            initial_dim: 8,
            block_dims: vec![8, 16, 32, 32],
            d_model: 32,
        }
    }

    /// Head used for the teacher: twice the reduced widths, output 256.
    pub fn teacher() -> Self {
        BackboneConfig {
            initial_dim: 16,
            block_dims: vec![16, 32, 64, 64],
            d_model: 256,
        }
    }

    pub fn output_stride(&self) -> usize {
        1 << self.block_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_dim == 0 || self.d_model == 0 || self.block_dims.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.output_stride() != 16 {
            return Err(Error::Config(format!(
                "backbone needs 4 stages for output stride 16, got {} (stride {})",
                self.block_dims.len(),
                self.output_stride()
            )));
        }
        Ok(())
    }
}

/// Number of groups for group norm over `c` channels: the largest divisor
/// of `c` not exceeding 8 (so `min(8, c)` for the usual widths).
pub fn norm_groups(c: usize) -> usize {
    (1..=c.min(8)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Coarse features of one image, flattened row-major over cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// `[height · width, dim]`.
    pub values: Tensor,
}

impl FeatureGrid {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub params: ParamStore,
}

/// He-uniform conv weight: `U(−b, b)` with `b = √(6 / fan_in)`.
pub(crate) fn he_uniform(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let b = (6.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-b..b))
}

fn insert_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones([c]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros([c]))
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("backbone.stage{stage}.block{block}")
}

/// Adds freshly initialized backbone parameters to `store`.
pub fn init_params(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    store.insert("backbone.stem.w", he_uniform(rng, [cfg.initial_dim, 1, 3, 3]))?;
    insert_norm(store, "backbone.stem.norm", cfg.initial_dim)?;
    let mut c_in = cfg.initial_dim;
    for (i, &c) in cfg.block_dims.iter().enumerate() {
        for j in 0..2 {
            let p = block_prefix(i, j);
            let (cin, stride) = if j == 0 { (c_in, 2) } else { (c, 1) };
            store.insert(format!("{p}.conv1.w"), he_uniform(rng, [c, cin, 3, 3]))?;
            insert_norm(store, &format!("{p}.norm1"), c)?;
            store.insert(format!("{p}.conv2.w"), he_uniform(rng, [c, c, 3, 3]))?;
            insert_norm(store, &format!("{p}.norm2"), c)?;
            if cin != c || stride != 1 {
                store.insert(format!("{p}.shortcut.w"), he_uniform(rng, [c, cin, 1, 1]))?;
            }
        }
        c_in = c;
    }
    store.insert("backbone.proj.w", he_uniform(rng, [cfg.d_model, c_in, 1, 1]))?;
    store.insert("backbone.proj.b", Tensor::zeros([cfg.d_model]))
}

/// Deterministic backbone initialization from `seed`.
pub fn build_backbone(cfg: BackboneConfig, seed: u64) -> Result<Backbone> {
    let mut params = ParamStore::new();
    init_params(&cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(Backbone { cfg, params })
}

/// Number of learnable scalars.
pub fn param_count(backbone: &Backbone) -> usize {
    backbone.params.scalar_count()
}

fn norm(tape: &Tape, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let c = tape.shape(x)[1];
    let g = tape.param(store, &format!("{prefix}.gamma"))?;
    let b = tape.param(store, &format!("{prefix}.beta"))?;
    tape.group_norm(x, g, b, norm_groups(c), NORM_EPS)
}

fn block(tape: &Tape, store: &ParamStore, x: Var, prefix: &str, stride: usize) -> Result<Var> {
    let h = tape.conv2d(x, tape.param(store, &format!("{prefix}.conv1.w"))?, stride, 1)?;
    let h = tape.relu(norm(tape, store, h, &format!("{prefix}.norm1"))?)?;
    let h = tape.conv2d(h, tape.param(store, &format!("{prefix}.conv2.w"))?, 1, 1)?;
    let h = norm(tape, store, h, &format!("{prefix}.norm2"))?;
    let shortcut = format!("{prefix}.shortcut.w");
    let skip = if store.get(&shortcut).is_some() {
        tape.conv2d(x, tape.param(store, &shortcut)?, stride, 0)?
    } else {
        x
    };
    tape.relu(tape.add(h, skip)?)
}

/// Records the backbone on `tape` for an image `[1, h, w]` (or `[h, w]`).
/// Returns the `[h/16 · w/16, d_model]` features and the grid size.
pub fn forward(cfg: &BackboneConfig, tape: &Tape, store: &ParamStore, image: Var) -> Result<(Var, usize, usize)> {
    let shape = tape.shape(image);
    let (h, w) = match shape.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::dim(format!("expected a single-channel image [1, h, w], got {shape:?}"))),
    };
    let s = cfg.output_stride();
    if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
        let pad = format!("pad it to {}x{}", h.div_ceil(s).max(1) * s, w.div_ceil(s).max(1) * s);
        let fix = if h >= s && w >= s {
            format!("crop it to {}x{} or {pad}", h / s * s, w / s * s)
        } else {
            pad
        };
        return Err(Error::dim(format!("image size {h}x{w} is not a multiple of {s}; {fix}")));
    }
    let x = tape.reshape(image, &[1, 1, h, w])?;
    let x = tape.conv2d(x, tape.param(store, "backbone.stem.w")?, 1, 1)?;
    let mut x = tape.relu(norm(tape, store, x, "backbone.stem.norm")?)?;
    for i in 0..cfg.block_dims.len() {
        x = block(tape, store, x, &block_prefix(i, 0), 2)?;
        x = block(tape, store, x, &block_prefix(i, 1), 1)?;
    }
    let x = tape.conv2d(x, tape.param(store, "backbone.proj.w")?, 1, 0)?;
    let bias = tape.reshape(tape.param(store, "backbone.proj.b")?, &[1, cfg.d_model, 1, 1])?;
    let x = tape.add(x, bias)?;
    let (gh, gw) = (h / s, w / s);
    let x = tape.reshape(x, &[cfg.d_model, gh * gw])?;
    Ok((tape.transpose(x)?, gh, gw))
}

impl Backbone {
    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureGrid> {
        let tape = Tape::new();
        let img = tape.constant(image)?;
        let (f, height, width) = forward(&self.cfg, &tape, &self.params, img)?;
        Ok(FeatureGrid {
            height,
            width,
            dim: self.cfg.d_model,
            values: tape.value(f),
        })
    }
}
