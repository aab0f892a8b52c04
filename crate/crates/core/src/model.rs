//! Full coarse matcher: backbone, transformer, score matrix, dual-softmax.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionConfig};
use crate::backbone::{self, BackboneConfig};
use crate::error::{Error, Result};
use crate::geometry::GridDims;
use crate::matching::{self, MatchProbability, ScoreMatrix, DEFAULT_TAU};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    /// Score temperature τ.
    pub tau: f64,
}

impl ModelConfig {
    pub fn reduced() -> Self {
        ModelConfig {
            backbone: BackboneConfig::reduced(),
            attention: AttentionConfig::reduced(),
            tau: DEFAULT_TAU,
        }
    }

    pub fn teacher() -> Self {
        ModelConfig {
            backbone: BackboneConfig::teacher(),
            attention: AttentionConfig::teacher(),
            tau: DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention.validate()?;
        if self.backbone.d_model != self.attention.d_model {
            return Err(Error::Config(format!(
                "backbone output {} differs from transformer d_model {}",
                self.backbone.d_model, self.attention.d_model
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Tape handles of one image pair's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PairForward {
    /// `[N_A, N_B]` scores.
    pub scores: Var,
    /// `[N_A, N_B]` dual-softmax probabilities.
    pub prob: Var,
    pub grid_a: GridDims,
    pub grid_b: GridDims,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: ScoreMatrix,
    pub prob: MatchProbability,
    pub grid_a: GridDims,
    pub grid_b: GridDims,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Backbone then transformer parameters, drawn from one seeded stream.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&cfg.backbone, &mut params, &mut rng)?;
        attention::init_params(&cfg.attention, &mut params, &mut rng)?;
        Ok(Model { cfg, params })
    }

    /// Model with the given architecture and exactly these weights.
    pub fn from_weights(cfg: ModelConfig, weights: &IndexMap<String, Tensor>) -> Result<Model> {
        let mut model = Model::new(cfg, 0)?;
        model.params.load_from(weights)?;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records the pair on `tape`. Images are `[1, h, w]`.
    pub fn forward(&self, tape: &Tape, image_a: &Tensor, image_b: &Tensor) -> Result<PairForward> {
        forward_params(&self.cfg, tape, &self.params, image_a, image_b)
    }

    pub fn predict(&self, image_a: &Tensor, image_b: &Tensor) -> Result<Prediction> {
        let tape = Tape::new();
        let out = self.forward(&tape, image_a, image_b)?;
        Ok(Prediction {
            scores: ScoreMatrix {
                s: tape.value(out.scores),
                tau: self.cfg.tau,
            },
            prob: MatchProbability { p: tape.value(out.prob) },
            grid_a: out.grid_a,
            grid_b: out.grid_b,
        })
    }
}

/// Forward pass with an explicit parameter store laid out for `cfg`.
pub fn forward_params(cfg: &ModelConfig, tape: &Tape, params: &ParamStore, image_a: &Tensor, image_b: &Tensor) -> Result<PairForward> {
    let (fa, ha, wa) = backbone::forward(&cfg.backbone, tape, params, tape.constant(image_a)?)?;
    let (fb, hb, wb) = backbone::forward(&cfg.backbone, tape, params, tape.constant(image_b)?)?;
    let (ta, tb) = attention::forward(&cfg.attention, tape, params, fa, (ha, wa), fb, (hb, wb))?;
    // Each side is divided by √d before the τ-scaled inner product.
    let norm = 1.0 / (cfg.attention.d_model as f64).sqrt();
    let scores = matching::score_matrix_var(tape, tape.scale(ta, norm)?, tape.scale(tb, norm)?, cfg.tau)?;
    let prob = matching::dual_softmax_var(tape, scores)?;
    Ok(PairForward {
        scores,
        prob,
        grid_a: (ha, wa),
        grid_b: (hb, wb),
    })
}
