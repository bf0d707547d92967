//! Caption decoder: masked self-attention, branch-modulated cross-attention
//! over the encoder branches, and greedy / beam decoding.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::{BranchId, Modulation};
use crate::error::{GevstError, Result};
use crate::nn::{
    causal_mask, sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::vocab::BOS;

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    /// Cross-attention projections, shared by every branch.
    pub cross: MultiHeadAttention,
    /// One `[2d × d]` gate per active branch.
    pub gates: Vec<(BranchId, Linear)>,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

impl DecoderLayerParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        branches: &[BranchId],
    ) -> Result<Self> {
        Ok(DecoderLayerParams {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, heads)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            cross: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, heads)?,
            gates: branches
                .iter()
                .map(|&b| {
                    (
                        b,
                        Linear::new(
                            store,
                            rng,
                            &format!("{name}.gate.{}", b.name()),
                            2 * d,
                            d,
                            true,
                        ),
                    )
                })
                .collect(),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, 4 * d),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
        })
    }
}

/// `C(X, Y) = Attention(Y·W_Q, X·W_K, X·W_V)`, unmasked.
pub fn cross_attend<'t>(
    g: &Graph<'t>,
    y: Var<'t>,
    branch_out: Var<'t>,
    attn: &MultiHeadAttention,
) -> Result<Var<'t>> {
    Ok(attn.forward(g, y, branch_out, None)?.0)
}

/// Modulated sum and the per-branch gates `α_i` (each `[T×d]`).
pub fn modulated_multi_input<'t>(
    g: &Graph<'t>,
    y: Var<'t>,
    branches: &[(BranchId, Var<'t>)],
    layer: &DecoderLayerParams,
    modulation: Modulation,
) -> Result<(Var<'t>, Vec<(BranchId, Var<'t>)>)> {
    if layer.gates.is_empty() {
        return Err(GevstError::Config("no active encoder branch".into()));
    }
    let mut contributions = Vec::with_capacity(layer.gates.len());
    let mut logits = Vec::with_capacity(layer.gates.len());
    for (id, gate) in &layer.gates {
        let x = branches
            .iter()
            .find(|(b, _)| b == id)
            .map(|(_, x)| *x)
            .ok_or_else(|| {
                GevstError::Config(format!("branch {} has no encoder output", id.name()))
            })?;
        let c = cross_attend(g, y, x, &layer.cross)?;
        let joined = g.tape().concat(&[y, c], 1)?;
        logits.push(gate.forward(g, joined)?);
        contributions.push(c);
    }
    let alphas: Vec<Var<'t>> = match modulation {
        Modulation::Sigmoid => logits.into_iter().map(Var::sigmoid).collect(),
        Modulation::Softmax => {
            let s = logits[0].shape();
            let stacked = logits
                .iter()
                .map(|l| l.reshape(&[s[0], s[1], 1]))
                .collect::<Result<Vec<_>>>()?;
            let weights = g.tape().concat(&stacked, 2)?.softmax();
            (0..stacked.len())
                .map(|i| weights.slice(2, i, 1)?.reshape(&s))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut total = alphas[0].mul(contributions[0])?;
    for (a, c) in alphas.iter().zip(&contributions).skip(1) {
        total = total.add(a.mul(*c)?)?;
    }
    let named = layer.gates.iter().map(|(b, _)| *b).zip(alphas).collect();
    Ok((total, named))
}

/// Per-layer branch gates of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct DecoderTrace<'t> {
    pub gates: Vec<Vec<(BranchId, Var<'t>)>>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub out: Linear,
    pub modulation: Modulation,
    pub heads: usize,
    positions: Tensor,
    vocab: usize,
}

impl Decoder {
    /// `max_len` generated tokens plus BOS fit the position table.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab: usize,
        d: usize,
        heads: usize,
        depth: usize,
        branches: &[BranchId],
        modulation: Modulation,
        max_len: usize,
    ) -> Result<Self> {
        if branches.is_empty() {
            return Err(GevstError::Config("no active encoder branch".into()));
        }
        let embedding = store.xavier(rng, "dec.embed", vocab, d);
        let layers = (0..depth)
            .map(|i| {
                DecoderLayerParams::new(store, rng, &format!("dec.layer{i}"), d, heads, branches)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::new(store, rng, "dec.out", d, vocab, true);
        Ok(Decoder {
            embedding,
            layers,
            out,
            modulation,
            heads,
            positions: sinusoidal_positions(max_len + 1, d),
            vocab,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// Longest accepted input, BOS included.
    pub fn max_positions(&self) -> usize {
        self.positions.rows()
    }

    /// Logits `[T × V]` for every prefix of `tokens` (which starts with BOS).
    pub fn forward<'t>(
        &self,
        g: &Graph<'t>,
        tokens: &[usize],
        branches: &[(BranchId, Var<'t>)],
    ) -> Result<Var<'t>> {
        Ok(self.forward_traced(g, tokens, branches)?.0)
    }

    pub fn forward_traced<'t>(
        &self,
        g: &Graph<'t>,
        tokens: &[usize],
        branches: &[(BranchId, Var<'t>)],
    ) -> Result<(Var<'t>, DecoderTrace<'t>)> {
        if tokens.first() != Some(&BOS) {
            return Err(GevstError::Input(
                "decoder input must start with BOS".into(),
            ));
        }
        let t = tokens.len();
        if t > self.max_positions() {
            return Err(GevstError::Input(format!(
                "decoder input of {t} tokens exceeds {}",
                self.max_positions()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.vocab) {
            return Err(GevstError::Vocabulary {
                id,
                size: self.vocab,
            });
        }
        let d = self.positions.last_dim();
        let pos = Tensor::new(vec![t, d], self.positions.data()[..t * d].to_vec())?;
        let mut y = g
            .tape()
            .embedding(g.p(self.embedding), tokens)?
            .add(g.constant(pos))?;
        let mask: Arc<Vec<bool>> = causal_mask(self.heads, t);
        let mut trace = DecoderTrace::default();
        for layer in &self.layers {
            let (a, _) = layer.self_attn.forward(g, y, y, Some(&mask))?;
            y = layer.ln1.forward(g, y.add(a)?)?;
            let (m, gates) = modulated_multi_input(g, y, branches, layer, self.modulation)?;
            y = layer.ln2.forward(g, y.add(m)?)?;
            let f = layer.ffn.forward(g, y)?;
            y = layer.ln3.forward(g, y.add(f)?)?;
            trace.gates.push(gates);
        }
        Ok((self.out.forward(g, y)?, trace))
    }
}

/// Next-token log-probabilities given a prefix; lets decoding run against
/// the model or against hand-built distributions.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub bos: usize,
    pub eos: usize,
    /// Generated tokens, EOS included.
    pub max_len: usize,
}

/// A decoded caption: ids start with BOS and end with EOS unless the
/// length limit was hit. `step_log_probs[t]` is the distribution the token
/// at position `t + 1` was chosen from.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionState {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub step_log_probs: Vec<Vec<f64>>,
}

impl CaptionState {
    fn start(bos: usize) -> Self {
        CaptionState {
            tokens: vec![bos],
            log_prob: 0.0,
            step_log_probs: Vec::new(),
        }
    }

    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Sum log-prob divided by generated length.
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.generated().max(1) as f64
    }

    /// Generated ids without BOS and EOS.
    pub fn words(&self, eos: usize) -> &[usize] {
        let body = &self.tokens[1..];
        match body.iter().position(|&t| t == eos) {
            Some(i) => &body[..i],
            None => body,
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(scorer: &dyn StepScorer, opts: DecodeOptions) -> Result<CaptionState> {
    let mut state = CaptionState::start(opts.bos);
    while state.generated() < opts.max_len {
        let lp = scorer.log_probs(&state.tokens)?;
        let tok = argmax(&lp);
        state.log_prob += lp[tok];
        state.tokens.push(tok);
        state.step_log_probs.push(lp);
        if tok == opts.eos {
            break;
        }
    }
    Ok(state)
}

/// Beam search keeping the `beam` best extensions over all live hypotheses
/// at each step. A hypothesis that emits EOS is finished and shrinks the
/// live beam by one, so `beam = 1` is exactly greedy decoding. The result
/// is the finished hypothesis with the best length-normalized score.
pub fn beam_search(
    scorer: &dyn StepScorer,
    beam: usize,
    opts: DecodeOptions,
) -> Result<CaptionState> {
    if beam == 0 {
        return Err(GevstError::Config("beam must be positive".into()));
    }
    let mut live = vec![CaptionState::start(opts.bos)];
    let mut finished: Vec<CaptionState> = Vec::new();
    while !live.is_empty() {
        let dists = live
            .iter()
            .map(|h| scorer.log_probs(&h.tokens))
            .collect::<Result<Vec<_>>>()?;
        // (score, hypothesis, token); ordering: higher score, then lower
        // token id, then earlier hypothesis.
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, lp) in dists.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                cands.push((live[h].log_prob + l, h, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        let width = beam - finished.len();
        let mut next = Vec::with_capacity(width);
        for &(score, h, tok) in cands.iter().take(width) {
            let mut hyp = live[h].clone();
            hyp.tokens.push(tok);
            hyp.log_prob = score;
            hyp.step_log_probs.push(dists[h].clone());
            if tok == opts.eos || hyp.generated() >= opts.max_len {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.normalized_score() > finished[best].normalized_score() {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}
