//! Dense-caption encoder: a small Transformer encoder over the caption's
//! tokens, mean-pooled and projected to the model width.

use rand_chacha::ChaCha8Rng;

use crate::error::{GevstError, Result};
use crate::nn::{sinusoidal_positions, EncoderLayer, Linear};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const MAX_DENSE_CAPTION_TOKENS: usize = 16;

#[derive(Clone, Debug)]
pub struct DenseCaptionEncoder {
    pub embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub out: Linear,
    positions: Tensor,
    vocab: usize,
}

impl DenseCaptionEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab: usize,
        width: usize,
        heads: usize,
        depth: usize,
        d_model: usize,
    ) -> Result<Self> {
        let embedding = store.xavier(rng, "dc.embed", vocab, width);
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, rng, &format!("dc.layer{i}"), width, heads))
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::new(store, rng, "dc.out", width, d_model, true);
        Ok(DenseCaptionEncoder {
            embedding,
            layers,
            out,
            positions: sinusoidal_positions(MAX_DENSE_CAPTION_TOKENS, width),
            vocab,
        })
    }

    /// One caption to a `[d_model]` content feature.
    pub fn encode<'t>(&self, g: &Graph<'t>, tokens: &[usize]) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Err(GevstError::Input("empty dense caption".into()));
        }
        if tokens.len() > MAX_DENSE_CAPTION_TOKENS {
            return Err(GevstError::Input(format!(
                "dense caption of {} tokens exceeds {MAX_DENSE_CAPTION_TOKENS}",
                tokens.len()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(GevstError::Vocabulary {
                id,
                size: self.vocab,
            });
        }
        let width = self.positions.last_dim();
        let pos = Tensor::new(
            vec![tokens.len(), width],
            self.positions.data()[..tokens.len() * width].to_vec(),
        )?;
        let mut x = g
            .tape()
            .embedding(g.p(self.embedding), tokens)?
            .add(g.constant(pos))?;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        let pooled = x.mean(0)?.reshape(&[1, width])?;
        self.out.forward(g, pooled)?.reshape(&[self.out_dim(g)])
    }

    /// Every caption to one row of a `[N × d_model]` matrix.
    pub fn encode_all<'t>(&self, g: &Graph<'t>, captions: &[Vec<usize>]) -> Result<Var<'t>> {
        if captions.is_empty() {
            return Err(GevstError::Input("no dense captions".into()));
        }
        let d = self.out_dim(g);
        let rows = captions
            .iter()
            .map(|c| self.encode(g, c)?.reshape(&[1, d]))
            .collect::<Result<Vec<_>>>()?;
        g.tape().concat(&rows, 0)
    }

    fn out_dim(&self, g: &Graph<'_>) -> usize {
        g.store().get(self.out.w).shape()[1]
    }
}
