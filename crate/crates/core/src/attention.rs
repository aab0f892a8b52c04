//! Coarse linear-attention transformer.
//!
//! Attention uses the kernel `φ(x) = elu(x) + 1`:
//! `out_i = φ(q_i)·Σ_s φ(k_s) v_sᵀ / (φ(q_i)·Σ_s φ(k_s))`.
//!
//! Layer layout (per `loftr.layer{i}`):
//! `q, k, v` linears on `x`/`source`, multi-head attention, `merge` linear,
//! `norm1`; then `ffn1` on `concat(x, merged)` (2d → ffn_dim), relu,
//! `ffn2` (ffn_dim → d), `norm2`; output `x + ffn`.
//!
//! Linear weights are stored `[in, out]` and applied as `x·w + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureGrid;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const Z_MIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    SelfAttn,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub layer_pattern: Vec<LayerKind>,
}

impl AttentionConfig {
    /// d_model 32, ffn 32, one head, `[self, cross, self, cross]`.
    pub fn reduced() -> Self {
        AttentionConfig {
            d_model: 32,
            n_heads: 1,
            ffn_dim: 32,
            layer_pattern: Self::alternating(4),
        }
    }

    /// d_model 256, ffn 256, eight heads, eight alternating layers.
    pub fn teacher() -> Self {
        AttentionConfig {
            d_model: 256,
            n_heads: 8,
            ffn_dim: 256,
            layer_pattern: Self::alternating(8),
        }
    }

    /// `[self, cross, self, cross, ...]` of length `n`.
    pub fn alternating(n: usize) -> Vec<LayerKind> {
        (0..n)
            .map(|i| if i % 2 == 0 { LayerKind::SelfAttn } else { LayerKind::Cross })
            .collect()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("attention sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by 4", self.d_model)));
        }
        if self.layer_pattern.is_empty() {
            return Err(Error::Config("layer pattern is empty".into()));
        }
        Ok(())
    }
}

/// Transformer outputs for both images.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedFeatures {
    pub feat_a: Tensor,
    pub feat_b: Tensor,
}

/// `elu(x) + 1`.
pub fn phi(tape: &Tape, x: Var) -> Result<Var> {
    tape.add_scalar(tape.elu(x)?, 1.0)
}

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Var) -> Result<(usize, usize, usize, usize)> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    match (qs.as_slice(), ks.as_slice(), vs.as_slice()) {
        ([h, n, d], [h2, m, d2], [h3, m2, dv]) if h == h2 && h == h3 && d == d2 && m == m2 => Ok((*h, *n, *m, *d.max(dv))),
        _ => Err(Error::dim(format!("attention shapes Q {qs:?}, K {ks:?}, V {vs:?} disagree"))),
    }
}

/// O(N²) oracle: materializes `A = φ(Q)·φ(K)ᵀ` per head.
pub fn linear_attention_reference(tape: &Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (h, n, _, _) = check_qkv(tape, q, k, v)?;
    let a = tape.bmm(phi(tape, q)?, tape.permute(phi(tape, k)?, &[0, 2, 1])?)?;
    let num = tape.bmm(a, v)?;
    let den = tape.reshape(tape.sum(a, 2)?, &[h, n, 1])?;
    tape.div(num, den)
}

/// `O(N·d²)` path built from reshape, batched matmul and sum only.
pub fn linear_attention_fast(tape: &Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (h, _, m, _) = check_qkv(tape, q, k, v)?;
    let (dk, dv) = (tape.shape(k)[2], tape.shape(v)[2]);
    let fq = phi(tape, q)?;
    let fk = phi(tape, k)?;
    // KV = Σ_s φ(k_s) ⊗ v_s via [h·m, dk, 1] × [h·m, 1, dv].
    let outer = tape.bmm(tape.reshape(fk, &[h * m, dk, 1])?, tape.reshape(v, &[h * m, 1, dv])?)?;
    let kv = tape.reshape(tape.sum(tape.reshape(outer, &[h, m, dk * dv])?, 1)?, &[h, dk, dv])?;
    let ksum = tape.reshape(tape.sum(fk, 1)?, &[h, dk, 1])?;
    let z = tape.clamp(tape.bmm(fq, ksum)?, Z_MIN, f64::INFINITY)?;
    tape.div(tape.bmm(fq, kv)?, z)
}

/// 2-D sinusoidal encoding `[h·w, d]`, rows in row-major cell order.
///
/// With `f_k = exp(−2k·ln(10⁴)/(d/2))` and 1-based cell coordinates
/// `(x, y)`, channel `4k` is `sin(x·f_k)`, `4k+1` is `cos(x·f_k)`, `4k+2` is
/// `sin(y·f_k)` and `4k+3` is `cos(y·f_k)`.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("positional encoding needs d_model divisible by 4, got {d}")));
    }
    let half = (d / 2) as f64;
    let freqs: Vec<f64> = (0..d / 4)
        .map(|k| (-((2 * k) as f64) * 10000f64.ln() / half).exp())
        .collect();
    Ok(Tensor::from_fn([h * w, d], |idx| {
        let (cell, c) = (idx / d, idx % d);
        let (y, x) = ((cell / w + 1) as f64, (cell % w + 1) as f64);
        let f = freqs[c / 4];
        match c % 4 {
            0 => (x * f).sin(),
            1 => (x * f).cos(),
            2 => (y * f).sin(),
            _ => (y * f).cos(),
        }
    }))
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| rng.gen_range(-b..b))
}

pub fn layer_prefix(i: usize) -> String {
    format!("loftr.layer{i}")
}

/// Adds freshly initialized transformer parameters to `store`.
pub fn init_params(cfg: &AttentionConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    for i in 0..cfg.layer_pattern.len() {
        let p = layer_prefix(i);
        for (name, fi, fo) in [
            ("q", d, d),
            ("k", d, d),
            ("v", d, d),
            ("merge", d, d),
            ("ffn1", 2 * d, cfg.ffn_dim),
            ("ffn2", cfg.ffn_dim, d),
        ] {
            store.insert(format!("{p}.{name}.w"), glorot(rng, fi, fo))?;
            store.insert(format!("{p}.{name}.b"), Tensor::zeros([fo]))?;
        }
        for norm in ["norm1", "norm2"] {
            store.insert(format!("{p}.{norm}.gamma"), Tensor::ones([d]))?;
            store.insert(format!("{p}.{norm}.beta"), Tensor::zeros([d]))?;
        }
    }
    Ok(())
}

/// Deterministic transformer parameters from `seed`.
pub fn build_params(cfg: &AttentionConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_params(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(store)
}

fn linear(tape: &Tape, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.add(tape.matmul(x, w)?, b)
}

fn layer_norm(tape: &Tape, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gamma"))?;
    let b = tape.param(store, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, NORM_EPS)
}

/// `[n, d]` → `[heads, n, d/heads]`.
fn split_heads(tape: &Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x);
    tape.permute(tape.reshape(x, &[s[0], heads, s[1] / heads])?, &[1, 0, 2])
}

/// One encoder layer: `x` attends to `source` (`source = x` for self mode).
pub fn encoder_layer(cfg: &AttentionConfig, tape: &Tape, store: &ParamStore, layer: usize, x: Var, source: Var) -> Result<Var> {
    let (xs, ss) = (tape.shape(x), tape.shape(source));
    let d = cfg.d_model;
    if xs.len() != 2 || ss.len() != 2 || xs[1] != d || ss[1] != d {
        return Err(Error::dim(format!(
            "encoder layer expects [N, {d}] and [M, {d}], got {xs:?} and {ss:?}"
        )));
    }
    let p = layer_prefix(layer);
    let heads = cfg.n_heads;
    let q = split_heads(tape, linear(tape, store, x, &format!("{p}.q"))?, heads)?;
    let k = split_heads(tape, linear(tape, store, source, &format!("{p}.k"))?, heads)?;
    let v = split_heads(tape, linear(tape, store, source, &format!("{p}.v"))?, heads)?;
    let msg = linear_attention_fast(tape, q, k, v)?;
    let msg = tape.reshape(tape.permute(msg, &[1, 0, 2])?, &[xs[0], d])?;
    let merged = layer_norm(tape, store, linear(tape, store, msg, &format!("{p}.merge"))?, &format!("{p}.norm1"))?;
    let h = linear(tape, store, tape.concat(&[x, merged], 1)?, &format!("{p}.ffn1"))?;
    let h = linear(tape, store, tape.relu(h)?, &format!("{p}.ffn2"))?;
    let h = layer_norm(tape, store, h, &format!("{p}.norm2"))?;
    tape.add(x, h)
}

/// Adds positional encodings and runs the layer pattern on both images.
/// Cross layers update both sides from the pre-layer features.
pub fn forward(
    cfg: &AttentionConfig,
    tape: &Tape,
    store: &ParamStore,
    feat_a: Var,
    grid_a: (usize, usize),
    feat_b: Var,
    grid_b: (usize, usize),
) -> Result<(Var, Var)> {
    let pe_a = tape.constant(&positional_encoding(grid_a.0, grid_a.1, cfg.d_model)?)?;
    let pe_b = tape.constant(&positional_encoding(grid_b.0, grid_b.1, cfg.d_model)?)?;
    let mut a = tape.add(feat_a, pe_a)?;
    let mut b = tape.add(feat_b, pe_b)?;
    for (i, kind) in cfg.layer_pattern.iter().enumerate() {
        (a, b) = match kind {
            LayerKind::SelfAttn => (
                encoder_layer(cfg, tape, store, i, a, a)?,
                encoder_layer(cfg, tape, store, i, b, b)?,
            ),
            LayerKind::Cross => (
                encoder_layer(cfg, tape, store, i, a, b)?,
                encoder_layer(cfg, tape, store, i, b, a)?,
            ),
        };
    }
    Ok((a, b))
}

/// Inference convenience over two feature grids.
pub fn loftr_module(feat_a: &FeatureGrid, feat_b: &FeatureGrid, cfg: &AttentionConfig, store: &ParamStore) -> Result<TransformedFeatures> {
    if feat_a.dim != cfg.d_model || feat_b.dim != cfg.d_model {
        return Err(Error::dim(format!(
            "feature dims {} / {} differ from d_model {}",
            feat_a.dim, feat_b.dim, cfg.d_model
        )));
    }
    let tape = Tape::new();
    let a = tape.constant(&feat_a.values)?;
    let b = tape.constant(&feat_b.values)?;
    let (a, b) = forward(cfg, &tape, store, a, (feat_a.height, feat_a.width), b, (feat_b.height, feat_b.width))?;
    Ok(TransformedFeatures {
        feat_a: tape.value(a),
        feat_b: tape.value(b),
    })
}
