//! Transformer building blocks shared by every model.
//!
//! Blocks are free functions over a [`Graph`](crate::tensor::Graph) and a
//! [`Scope`](crate::params::Scope) naming their parameters. Layer
//! normalisation follows each residual addition (post-norm).

mod attention;
mod layers;

pub use attention::{
    causal_mask, multi_head_attention, scaled_dot_attention, AttentionMask, Attended,
    MultiHeadOutput,
};
pub use layers::{
    decoder_layer, embed, encoder_layer, feed_forward, init_attention, init_decoder_layer,
    init_embeddings, init_encoder_layer, init_feed_forward, init_layer_norm, init_linear, layer_norm, linear,
    CrossInput,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Seeded generator threaded through every stochastic operation.
pub type Rng64 = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard deviation of the normal initialiser for projections and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Token id reserved for padding.
pub const PAD_ID: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_len: 100,
            dropout: 0.1,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config("d_ff and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Per-head width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Training mode carries the dropout generator; evaluation is deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng64),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }

    pub fn rng(&mut self) -> Option<&mut Rng64> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        }
    }

    /// Dropout in training mode, identity in evaluation mode.
    pub fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Var {
        match self {
            Mode::Train(rng) if rate > 0.0 => g.dropout(x, rate, *rng),
            _ => x,
        }
    }
}
