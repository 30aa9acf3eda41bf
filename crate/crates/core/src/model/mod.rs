//! The decomposition network: input adapter, sinusoidal positions, a
//! post-norm transformer encoder, and a convolution + shared-linear head.

pub mod checkpoint;
mod config;
mod forward;
mod params;

use rand::Rng;

pub use config::{Adapter, ModelConfig};
pub use forward::{
    embed, encoder_layer, encoder_stack, input_adapter, multi_head_attention, output_head,
    positional_encoding, tsd_forward, LayerVars, ParamVars,
};
pub use params::{param_count, param_specs, Init, ModelParams, ParamSpec};

use crate::error::Result;
use crate::tensor::{Real, Tape};

/// Output channel order of the head.
pub const COMPONENTS: [&str; 4] = ["c", "s", "o", "n"];

/// Four predicted components of one signal, in `(c, s, o, n)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T> {
    pub components: [Vec<T>; 4],
}

impl<T: Real> Decomposition<T> {
    /// Splits an `[M, 4]` row-major head output into its columns.
    pub fn from_rows(rows: &[T]) -> Self {
        let col = |j: usize| rows.chunks_exact(4).map(|r| r[j]).collect();
        Decomposition {
            components: [col(0), col(1), col(2), col(3)],
        }
    }
}

/// A configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdModel<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> TsdModel<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(TsdModel { config, params })
    }

    /// Deterministic evaluation-mode decomposition.
    pub fn predict(&self, f: &[T]) -> Result<Decomposition<T>> {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &self.params, false);
        let out = tsd_forward::<T, rand_chacha::ChaCha8Rng>(&mut tape, &self.config, &pv, f, None)?;
        Ok(Decomposition::from_rows(tape.value(out).data()))
    }
}
