use std::fmt;
use std::str::FromStr;

use crate::error::{Result, TsdError};

/// How input samples become tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Adapter {
    /// One token per sample.
    NoChunks,
    /// Per-sample `D`-wide embeddings summed within each chunk.
    Sum,
    /// Per-sample `D/S`-wide embeddings concatenated within each chunk.
    Cat,
    /// The signal reshaped to `S` channels of `L` samples, then convolved to `D`.
    Conv,
}

impl Adapter {
    pub const ALL: [Adapter; 4] = [Adapter::NoChunks, Adapter::Sum, Adapter::Cat, Adapter::Conv];

    pub fn code(self) -> u8 {
        match self {
            Adapter::NoChunks => 0,
            Adapter::Sum => 1,
            Adapter::Cat => 2,
            Adapter::Conv => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Adapter::NoChunks => "no_chunks",
            Adapter::Sum => "sum",
            Adapter::Cat => "cat",
            Adapter::Conv => "conv",
        }
    }
}

impl fmt::Display for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Adapter {
    type Err = TsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_chunks" | "no" | "none" => Ok(Adapter::NoChunks),
            "sum" => Ok(Adapter::Sum),
            "cat" => Ok(Adapter::Cat),
            "conv" => Ok(Adapter::Conv),
            other => Err(TsdError::config(format!(
                "unknown adapter {other:?} (expected no_chunks, sum, cat or conv)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Input length `M`.
    pub m: usize,
    /// Token width `D`.
    pub d: usize,
    /// Encoder layers `N`.
    pub layers: usize,
    /// Attention heads `h`.
    pub heads: usize,
    /// Chunk size `S`; the encoder sees `L = M / S` tokens.
    pub chunk: usize,
    pub adapter: Adapter,
    pub dropout: f64,
    /// Start the final `D → 4` map at exactly zero.
    pub zero_init_head: bool,
    /// Kernel size of the output-head convolution.
    pub output_kernel: usize,
    /// Scale attention logits by `1/√(D/h)` instead of `1/√D`.
    pub scale_dk: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper_chunks()
    }
}

impl ModelConfig {
    /// Conv adapter, `S = 4`, four layers.
    pub fn paper_chunks() -> Self {
        ModelConfig {
            m: 512,
            d: 512,
            layers: 4,
            heads: 8,
            chunk: 4,
            adapter: Adapter::Conv,
            dropout: 0.1,
            zero_init_head: false,
            output_kernel: 3,
            scale_dk: false,
        }
    }

    /// One token per sample with a zero-initialised head.
    pub fn paper_no_chunks() -> Self {
        ModelConfig {
            chunk: 1,
            adapter: Adapter::NoChunks,
            zero_init_head: true,
            ..Self::paper_chunks()
        }
    }

    /// Token count `L`.
    pub fn tokens(&self) -> usize {
        self.m / self.chunk
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TsdError::Config(msg));
        if self.m == 0 || self.d == 0 || self.layers == 0 || self.heads == 0 || self.chunk == 0 {
            return fail(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.m.is_multiple_of(self.chunk) {
            return fail(format!("M = {} is not divisible by chunk size {}", self.m, self.chunk));
        }
        if !self.d.is_multiple_of(self.heads) {
            return fail(format!("D = {} is not divisible by {} heads", self.d, self.heads));
        }
        if !self.d.is_multiple_of(2) || self.d < 2 {
            return fail(format!("D = {} must be even for sinusoidal encodings", self.d));
        }
        if self.adapter == Adapter::Cat && !self.d.is_multiple_of(self.chunk) {
            return fail(format!(
                "cat adapter needs D = {} divisible by S = {}",
                self.d, self.chunk
            ));
        }
        if self.adapter == Adapter::NoChunks && self.chunk != 1 {
            return fail(format!("no_chunks adapter needs S = 1, got {}", self.chunk));
        }
        if self.output_kernel.is_multiple_of(2) {
            return fail(format!("output kernel size {} must be odd", self.output_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }
}
