//! Transformer building blocks shared by the encoders and the decoder.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{GevstError, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Tensor, Var, MASK_FILL};

/// Affine map `x·W (+ b)` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.xavier(rng, format!("{name}.w"), d_in, d_out);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[d_out]));
        Linear { w, b }
    }

    pub fn forward<'t>(&self, g: &Graph<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(g.p(self.w))?;
        match self.b {
            Some(b) => y.add_row(g.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.ones(format!("{name}.gain"), &[d]),
            bias: store.zeros(format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward<'t>(&self, g: &Graph<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(g.p(self.gain), g.p(self.bias))
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d, true),
        }
    }

    pub fn forward<'t>(&self, g: &Graph<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(g, x)?.relu();
        self.fc2.forward(g, h)
    }
}

/// `[N×d] → [h×N×d/h]`
pub fn split_heads(x: Var<'_>, heads: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 2 || s[1] % heads != 0 {
        return Err(GevstError::Config(format!(
            "cannot split {s:?} into {heads} heads"
        )));
    }
    x.reshape(&[s[0], heads, s[1] / heads])?.permute(&[1, 0, 2])
}

/// `[h×N×dh] → [N×h·dh]`
pub fn merge_heads(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    x.permute(&[1, 0, 2])?.reshape(&[s[1], s[0] * s[2]])
}

/// Scaled dot-product attention weights `softmax(Q·Kᵀ/√dh)` per head,
/// for `q: [h×T×dh]` and `k: [h×N×dh]`.
pub fn attention_weights<'t>(
    q: Var<'t>,
    k: Var<'t>,
    mask: Option<&Arc<Vec<bool>>>,
) -> Result<Var<'t>> {
    let dh = *q.shape().last().expect("rank 3");
    let mut scores = q.matmul_t(k)?.scale(1.0 / (dh as f64).sqrt());
    if let Some(mask) = mask {
        scores = scores.masked_fill(Arc::clone(mask), MASK_FILL)?;
    }
    Ok(scores.softmax())
}

/// Mask for `[heads × t × t]` scores hiding every key after its query.
pub fn causal_mask(heads: usize, t: usize) -> Arc<Vec<bool>> {
    let mut mask = Vec::with_capacity(heads * t * t);
    for _ in 0..heads {
        for i in 0..t {
            for j in 0..t {
                mask.push(j > i);
            }
        }
    }
    Arc::new(mask)
}

/// Fixed sine/cosine position table `[n × d]`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![n, d], data).expect("positive dims")
}

/// Multi-head attention with bias-free projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(GevstError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d, false),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d, false),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d, false),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d, false),
            heads,
        })
    }

    /// Returns the attended output `[T×d]` and the weights `[h×T×N]`.
    pub fn forward<'t>(
        &self,
        g: &Graph<'t>,
        query: Var<'t>,
        memory: Var<'t>,
        mask: Option<&Arc<Vec<bool>>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let q = split_heads(self.wq.forward(g, query)?, self.heads)?;
        let k = split_heads(self.wk.forward(g, memory)?, self.heads)?;
        let v = split_heads(self.wv.forward(g, memory)?, self.heads)?;
        let weights = attention_weights(q, k, mask)?;
        let out = merge_heads(weights.matmul(v)?)?;
        Ok((self.wo.forward(g, out)?, weights))
    }
}

/// Post-norm Transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, 4 * d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        })
    }

    pub fn forward<'t>(&self, g: &Graph<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (a, _) = self.attn.forward(g, x, x, None)?;
        let x = self.ln1.forward(g, x.add(a)?)?;
        let f = self.ffn.forward(g, x)?;
        self.ln2.forward(g, x.add(f)?)
    }
}
