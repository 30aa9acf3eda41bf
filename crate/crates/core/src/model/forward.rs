use rand::Rng;

use super::params::PER_LAYER;
use super::{Adapter, ModelConfig, ModelParams};
use crate::error::{Result, TsdError};
use crate::tensor::{Real, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Tape handles for every parameter tensor, in storage order.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

/// Tape handles of one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

impl ParamVars {
    /// Places every parameter on `tape` as a leaf.
    pub fn register<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, requires_grad: bool) -> Self {
        ParamVars(
            params
                .tensors()
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        )
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    fn adapter(&self) -> (Var, Var) {
        (self.0[0], self.0[1])
    }

    pub fn layer(&self, i: usize) -> LayerVars {
        let v = &self.0[2 + i * PER_LAYER..2 + (i + 1) * PER_LAYER];
        LayerVars {
            q: v[0],
            k: v[1],
            v: v[2],
            o: v[3],
            norm1_gain: v[4],
            norm1_bias: v[5],
            w1: v[6],
            b1: v[7],
            w2: v[8],
            b2: v[9],
            norm2_gain: v[10],
            norm2_bias: v[11],
        }
    }

    fn head(&self) -> [Var; 4] {
        let n = self.0.len();
        [self.0[n - 4], self.0[n - 3], self.0[n - 2], self.0[n - 1]]
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/D))`, `PE[pos, 2i+1] = cos(·)`.
pub fn positional_encoding<T: Real>(l: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[l, d], |idx| {
        let (pos, j) = (idx / d, idx % d);
        let pair = (j / 2) * 2;
        let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Projects a `[1, M]` signal to `[L, D]` tokens, before positional encoding.
pub fn input_adapter<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    signal: Var,
) -> Result<Var> {
    let (w, b) = pv.adapter();
    let (m, s, l, d) = (cfg.m, cfg.chunk, cfg.tokens(), cfg.d);
    match cfg.adapter {
        Adapter::NoChunks => {
            let e = tape.conv1d(signal, w, b)?;
            tape.transpose(e)
        }
        Adapter::Sum => {
            let e = tape.conv1d(signal, w, b)?;
            let e = tape.transpose(e)?;
            tape.sum_chunks(e, s)
        }
        Adapter::Cat => {
            let e = tape.conv1d(signal, w, b)?;
            let e = tape.transpose(e)?;
            debug_assert_eq!(tape.value(e).shape(), &[m, d / s]);
            tape.reshape(e, &[l, d])
        }
        Adapter::Conv => {
            // channel j at time l holds sample l·S + j
            let chunks = tape.reshape(signal, &[l, s])?;
            let channels = tape.transpose(chunks)?;
            let e = tape.conv1d(channels, w, b)?;
            tape.transpose(e)
        }
    }
}

/// Adapter, positional encoding, and the first dropout site.
pub fn embed<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    signal: Var,
    rng: Option<&mut R>,
) -> Result<Var> {
    let tokens = input_adapter(tape, cfg, pv, signal)?;
    let pe = tape.constant(positional_encoding(cfg.tokens(), cfg.d));
    let tokens = tape.add(tokens, pe)?;
    tape.dropout(tokens, cfg.dropout, rng)
}

/// Multi-head self-attention. Also returns each head's attention matrix.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    lv: &LayerVars,
    y: Var,
) -> Result<(Var, Vec<Var>)> {
    let dk = cfg.head_dim();
    let scale = if cfg.scale_dk { dk } else { cfg.d };
    let inv = T::lit(1.0 / (scale as f64).sqrt());
    let yq = tape.matmul(y, lv.q)?;
    let yk = tape.matmul(y, lv.k)?;
    let yv = tape.matmul(y, lv.v)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (q, k, v) = if cfg.heads == 1 {
            (yq, yk, yv)
        } else {
            (
                tape.slice_cols(yq, h * dk, dk)?,
                tape.slice_cols(yk, h * dk, dk)?,
                tape.slice_cols(yv, h * dk, dk)?,
            )
        };
        let logits = tape.matmul_t(q, k)?;
        let logits = tape.scale(logits, inv);
        let p = tape.softmax_rows(logits)?;
        heads.push(tape.matmul(p, v)?);
        probs.push(p);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok((tape.matmul(joined, lv.o)?, probs))
}

/// Post-norm encoder layer: `Y₁ = LN(Y + MHSA(Y))`, `out = LN(Y₁ + FF(Y₁))`.
pub fn encoder_layer<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    lv: &LayerVars,
    y: Var,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    let p = cfg.dropout;
    let eps = T::lit(LN_EPS);
    let (attn, _) = multi_head_attention(tape, cfg, lv, y)?;
    let attn = tape.dropout(attn, p, rng.as_deref_mut())?;
    let res = tape.add(y, attn)?;
    let y1 = tape.layer_norm(res, lv.norm1_gain, lv.norm1_bias, eps)?;

    let hidden = tape.matmul_t(y1, lv.w1)?;
    let hidden = tape.add_row(hidden, lv.b1)?;
    let hidden = tape.relu(hidden);
    let hidden = tape.dropout(hidden, p, rng.as_deref_mut())?;
    let ff = tape.matmul_t(hidden, lv.w2)?;
    let ff = tape.add_row(ff, lv.b2)?;
    let ff = tape.dropout(ff, p, rng)?;
    let res = tape.add(y1, ff)?;
    tape.layer_norm(res, lv.norm2_gain, lv.norm2_bias, eps)
}

pub fn encoder_stack<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    mut y: Var,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    for i in 0..cfg.layers {
        y = encoder_layer(tape, cfg, &pv.layer(i), y, rng.as_deref_mut())?;
    }
    Ok(y)
}

/// `[L, D]` tokens to `[M, 4]` outputs with columns `(c, s, o, n)`.
///
/// The tokens are read as `L` channels of `D` samples, convolved to `M`
/// channels, then a shared `D → 4` affine map is applied to each of the `M`
/// rows.
pub fn output_head<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, z: Var) -> Result<Var> {
    let [cw, cb, lw, lb] = pv.head();
    let h = tape.conv1d(z, cw, cb)?;
    let out = tape.matmul_t(h, lw)?;
    tape.add_row(out, lb)
}

/// Full forward pass from a length-`M` signal to the `[M, 4]` decomposition.
/// `rng = None` runs in evaluation mode (no dropout).
pub fn tsd_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    f: &[T],
    mut rng: Option<&mut R>,
) -> Result<Var> {
    if f.len() != cfg.m {
        return Err(TsdError::input(format!(
            "signal has {} samples, model expects M = {}",
            f.len(),
            cfg.m
        )));
    }
    let signal = tape.constant(Tensor::new(vec![1, cfg.m], f.to_vec())?);
    let tokens = embed(tape, cfg, pv, signal, rng.as_deref_mut())?;
    let z = encoder_stack(tape, cfg, pv, tokens, rng)?;
    output_head(tape, pv, z)
}
