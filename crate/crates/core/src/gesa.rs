//! Geometry-entangled self-attention and the four parallel encoder branches.
//!
//! Each GESA layer builds three row-stochastic self-attention maps per head:
//! from the previous layer's content, from the elements' own geometry
//! embeddings (intra) and from the inter-geometry features produced by
//! fusion. A softmax over the token-mean of `X·W^o` yields three gate scores
//! that mix the maps before they are applied to the values.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::config::{BranchId, FusionBase, GesaVariant, ModelConfig};
use crate::error::{GevstError, Result};
use crate::fusion::{FusionOutput, FusionStack, Modality};
use crate::nn::{attention_weights, merge_heads, split_heads, FeedForward, LayerNorm, Linear};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Var, MASK_FILL};
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct GesaLayerParams {
    pub wq_content: ParamId,
    pub wk_content: ParamId,
    pub wv_content: ParamId,
    pub wq_intra: ParamId,
    pub wk_intra: ParamId,
    pub wq_inter: ParamId,
    pub wk_inter: ParamId,
    /// `d → 3` gate projection.
    pub gate: Linear,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl GesaLayerParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        let mut sq = |s: &str| store.xavier(rng, format!("{name}.{s}"), d, d);
        let (wq_content, wk_content, wv_content) = (sq("wq_c"), sq("wk_c"), sq("wv_c"));
        let (wq_intra, wk_intra) = (sq("wq_intra"), sq("wk_intra"));
        let (wq_inter, wk_inter) = (sq("wq_inter"), sq("wk_inter"));
        GesaLayerParams {
            wq_content,
            wk_content,
            wv_content,
            wq_intra,
            wk_intra,
            wq_inter,
            wk_inter,
            gate: Linear::new(store, rng, &format!("{name}.gate"), d, 3, true),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, 4 * d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }
}

fn self_map<'t>(
    g: &Graph<'t>,
    x: Var<'t>,
    wq: ParamId,
    wk: ParamId,
    heads: usize,
) -> Result<Var<'t>> {
    let q = split_heads(x.matmul(g.p(wq))?, heads)?;
    let k = split_heads(x.matmul(g.p(wk))?, heads)?;
    attention_weights(q, k, None)
}

/// The content, intra-geometry and inter-geometry maps, each `[h×N×N]`;
/// disabled maps are `None`.
pub fn gesa_attention_maps<'t>(
    g: &Graph<'t>,
    x_prev: Var<'t>,
    g_intra: Var<'t>,
    g_inter: Var<'t>,
    params: &GesaLayerParams,
    heads: usize,
    variant: GesaVariant,
) -> Result<[Option<Var<'t>>; 3]> {
    let (xs, is, es) = (x_prev.shape(), g_intra.shape(), g_inter.shape());
    if xs != is || xs != es || xs.len() != 2 {
        return Err(GevstError::Dimension(format!(
            "GESA inputs disagree: content {xs:?}, intra {is:?}, inter {es:?}"
        )));
    }
    if heads == 0 || xs[1] % heads != 0 {
        return Err(GevstError::Config(format!(
            "width {} is not divisible by {heads} heads",
            xs[1]
        )));
    }
    let [_, intra_on, inter_on] = variant.enabled();
    let content = self_map(g, x_prev, params.wq_content, params.wk_content, heads)?;
    let intra = intra_on
        .then(|| self_map(g, g_intra, params.wq_intra, params.wk_intra, heads))
        .transpose()?;
    let inter = inter_on
        .then(|| self_map(g, g_inter, params.wq_inter, params.wk_inter, heads))
        .transpose()?;
    Ok([Some(content), intra, inter])
}

/// `softmax(mean_tokens(X·W^o + b))`, with disabled maps masked out.
pub fn gate_scores<'t>(
    g: &Graph<'t>,
    x_prev: Var<'t>,
    params: &GesaLayerParams,
    variant: GesaVariant,
) -> Result<Var<'t>> {
    let logits = params.gate.forward(g, x_prev)?.mean(0)?;
    let disabled: Vec<bool> = variant.enabled().iter().map(|on| !on).collect();
    let logits = if disabled.iter().any(|&d| d) {
        logits.masked_fill(Arc::new(disabled), MASK_FILL)?
    } else {
        logits
    };
    Ok(logits.softmax())
}

/// Gated mixture `Σ c_i·ATT_i` over the enabled maps.
pub fn combined_map<'t>(maps: &[Option<Var<'t>>; 3], gates: Var<'t>) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for (i, map) in maps.iter().enumerate() {
        let Some(map) = map else { continue };
        let weighted = map.scale_by(gates.slice(0, i, 1)?)?;
        total = Some(match total {
            Some(t) => t.add(weighted)?,
            None => weighted,
        });
    }
    total.ok_or_else(|| GevstError::Config("no attention map enabled".into()))
}

#[derive(Clone, Debug)]
pub struct LayerTrace<'t> {
    pub gates: Var<'t>,
    pub combined: Var<'t>,
}

/// One GESA layer followed by the residual, layer-norm and feed-forward
/// sublayers.
pub fn gesa_layer<'t>(
    g: &Graph<'t>,
    x_prev: Var<'t>,
    g_intra: Var<'t>,
    g_inter: Var<'t>,
    params: &GesaLayerParams,
    heads: usize,
    variant: GesaVariant,
) -> Result<(Var<'t>, LayerTrace<'t>)> {
    let maps = gesa_attention_maps(g, x_prev, g_intra, g_inter, params, heads, variant)?;
    let gates = gate_scores(g, x_prev, params, variant)?;
    let combined = combined_map(&maps, gates)?;
    let values = split_heads(x_prev.matmul(g.p(params.wv_content))?, heads)?;
    let attended = merge_heads(combined.matmul(values)?)?;
    let x = params.ln1.forward(g, x_prev.add(attended)?)?;
    let f = params.ffn.forward(g, x)?;
    let out = params.ln2.forward(g, x.add(f)?)?;
    Ok((out, LayerTrace { gates, combined }))
}

/// A stack of GESA layers over one content stream.
#[derive(Clone, Debug)]
pub struct BranchEncoder {
    pub id: BranchId,
    pub layers: Vec<GesaLayerParams>,
    pub heads: usize,
    pub variant: GesaVariant,
}

impl BranchEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        id: BranchId,
        d: usize,
        heads: usize,
        depth: usize,
        variant: GesaVariant,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(GevstError::Config(
                "a branch needs at least one layer".into(),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(GevstError::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let layers = (0..depth)
            .map(|i| GesaLayerParams::new(store, rng, &format!("enc.{}.layer{i}", id.name()), d))
            .collect();
        Ok(BranchEncoder {
            id,
            layers,
            heads,
            variant,
        })
    }

    /// Geometry inputs are the same at every layer.
    pub fn forward<'t>(
        &self,
        g: &Graph<'t>,
        content: Var<'t>,
        g_intra: Var<'t>,
        g_inter: Var<'t>,
    ) -> Result<(Var<'t>, Vec<LayerTrace<'t>>)> {
        let mut x = content;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, trace) =
                gesa_layer(g, x, g_intra, g_inter, layer, self.heads, self.variant)?;
            x = next;
            traces.push(trace);
        }
        Ok((x, traces))
    }
}

/// Last-layer outputs of the active branches, plus fusion and gate traces.
#[derive(Clone, Debug)]
pub struct BranchOutputs<'t> {
    pub outputs: Vec<(BranchId, Var<'t>)>,
    pub layer_traces: Vec<(BranchId, Vec<LayerTrace<'t>>)>,
    pub vs_fusion: Option<FusionOutput<'t>>,
    pub sv_fusion: Option<FusionOutput<'t>>,
}

impl<'t> BranchOutputs<'t> {
    pub fn get(&self, id: BranchId) -> Option<Var<'t>> {
        self.outputs.iter().find(|(b, _)| *b == id).map(|(_, v)| *v)
    }
}

/// Both fusion directions and the branch encoders.
#[derive(Clone, Debug)]
pub struct MultiBranchEncoder {
    pub vs_fusion: FusionStack,
    pub sv_fusion: FusionStack,
    pub branches: BTreeMap<BranchId, BranchEncoder>,
}

impl MultiBranchEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let stack = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, base: FusionBase| {
            FusionStack::new(
                store,
                rng,
                name,
                d,
                cfg.expansion_rate,
                cfg.fusion_cells,
                base,
                cfg.renorm_fused_attention,
            )
        };
        let vs_fusion = stack(store, rng, "fusion.vs", cfg.fusion_base)?;
        let sv_fusion = stack(store, rng, "fusion.sv", cfg.fusion_base)?;
        let mut branches = BTreeMap::new();
        for id in cfg.active_branches() {
            let enc =
                BranchEncoder::new(store, rng, id, d, cfg.heads, cfg.layers, cfg.gesa_variant)?;
            branches.insert(id, enc);
        }
        Ok(MultiBranchEncoder {
            vs_fusion,
            sv_fusion,
            branches,
        })
    }

    /// Runs the fusion directions the active branches need, then each branch.
    ///
    /// Visual-side branches use the visual intra geometry and the VS
    /// inter geometry; semantic-side branches the semantic counterparts.
    pub fn encode<'t>(
        &self,
        g: &Graph<'t>,
        visual: Modality<'t>,
        semantic: Modality<'t>,
    ) -> Result<BranchOutputs<'t>> {
        if visual.content.shape()[0] == 0 || semantic.content.shape()[0] == 0 {
            return Err(GevstError::Input("empty region or caption set".into()));
        }
        let need_vs = self.branches.keys().any(|b| b.is_visual());
        let need_sv = self.branches.keys().any(|b| !b.is_visual());
        let vs_fusion = need_vs
            .then(|| self.vs_fusion.forward(g, visual, semantic))
            .transpose()?;
        let sv_fusion = need_sv
            .then(|| self.sv_fusion.forward(g, semantic, visual))
            .transpose()?;

        let mut outputs = Vec::new();
        let mut layer_traces = Vec::new();
        for (&id, enc) in &self.branches {
            let (side, fusion) = if id.is_visual() {
                (visual, vs_fusion.as_ref())
            } else {
                (semantic, sv_fusion.as_ref())
            };
            let fusion = fusion.expect("fusion computed for every active side");
            let content = if id.is_fused() {
                fusion.fused_content
            } else {
                side.content
            };
            let (out, traces) = enc.forward(g, content, side.geometry, fusion.inter_geometry)?;
            outputs.push((id, out));
            layer_traces.push((id, traces));
        }
        Ok(BranchOutputs {
            outputs,
            layer_traces,
            vs_fusion,
            sv_fusion,
        })
    }
}
