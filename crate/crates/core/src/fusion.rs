//! Geometry-content fusion across modalities.
//!
//! A fusion cell lets every element of the *primary* modality attend over the
//! *secondary* modality twice: once scored from content features and once
//! from geometry features. The two softmax maps are summed (rows sum to 2),
//! the attended secondary content is expanded together with the primary
//! content, multiplied elementwise and sum-pooled back to the model width.
//! The geometry map also mixes the secondary geometry embeddings into an
//! inter-geometry feature per primary element.
//!
//! The same code serves both directions: semantic-into-visual (VS) takes
//! regions as primary, visual-into-semantic (SV) takes dense captions.

use rand_chacha::ChaCha8Rng;

use crate::config::FusionBase;
use crate::error::{GevstError, Result};
use crate::nn::Linear;
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Var;

/// Additive attention scorer `w·tanh(key·W_s + query·W_v)`.
#[derive(Clone, Debug)]
pub struct AdditiveScorer {
    pub w_key: Linear,
    pub w_query: Linear,
    /// `[d × 1]`
    pub w: ParamId,
}

impl AdditiveScorer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        AdditiveScorer {
            w_key: Linear::new(store, rng, &format!("{name}.ws"), d, d, true),
            w_query: Linear::new(store, rng, &format!("{name}.wv"), d, d, true),
            w: store.xavier(rng, format!("{name}.w"), d, 1),
        }
    }

    /// Row-softmaxed `[N × M]` attention of `queries: [N×d]` over `keys: [M×d]`.
    pub fn attend<'t>(&self, g: &Graph<'t>, queries: Var<'t>, keys: Var<'t>) -> Result<Var<'t>> {
        let (n, m) = (queries.shape()[0], keys.shape()[0]);
        let pk = self.w_key.forward(g, keys)?;
        let pq = self.w_query.forward(g, queries)?;
        let d = pq.shape()[1];
        let hidden = g.tape().pairwise_add(pq, pk)?.tanh().reshape(&[n * m, d])?;
        let logits = hidden.matmul(g.p(self.w))?.reshape(&[n, m])?;
        Ok(logits.softmax())
    }
}

/// Parameters of one fusion cell.
#[derive(Clone, Debug)]
pub struct FusionCellParams {
    pub content: AdditiveScorer,
    pub geometry: AdditiveScorer,
    /// Primary-side expansion `[d × Er·d]` (row-vector convention).
    pub expand_primary: ParamId,
    /// Secondary-side expansion `[d × Er·d]`.
    pub expand_secondary: ParamId,
}

impl FusionCellParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        er: usize,
    ) -> Self {
        FusionCellParams {
            content: AdditiveScorer::new(store, rng, &format!("{name}.con"), d),
            geometry: AdditiveScorer::new(store, rng, &format!("{name}.geo"), d),
            expand_primary: store.xavier(rng, format!("{name}.exp_primary"), d, er * d),
            expand_secondary: store.xavier(rng, format!("{name}.exp_secondary"), d, er * d),
        }
    }

    pub fn expansion_rate(&self, store: &ParamStore) -> usize {
        let s = store.get(self.expand_primary).shape();
        s[1] / s[0]
    }
}

/// Content and geometry attention maps of one cell; a map is `None` when the
/// fusion base disables it.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPair<'t> {
    pub content: Option<Var<'t>>,
    pub geometry: Option<Var<'t>>,
}

pub fn attention_scores<'t>(
    g: &Graph<'t>,
    queries_con: Var<'t>,
    keys_con: Var<'t>,
    queries_geo: Var<'t>,
    keys_geo: Var<'t>,
    params: &FusionCellParams,
    base: FusionBase,
) -> Result<AttentionPair<'t>> {
    if keys_con.shape()[0] == 0 || keys_geo.shape()[0] == 0 {
        return Err(GevstError::Input("no secondary items to attend".into()));
    }
    let content = base
        .uses_content()
        .then(|| params.content.attend(g, queries_con, keys_con))
        .transpose()?;
    let geometry = base
        .uses_geometry()
        .then(|| params.geometry.attend(g, queries_geo, keys_geo))
        .transpose()?;
    Ok(AttentionPair { content, geometry })
}

/// Sum of the enabled maps; with `renormalize`, divided by their count so
/// rows sum to 1.
pub fn combined_weights<'t>(pair: &AttentionPair<'t>, renormalize: bool) -> Result<Var<'t>> {
    let maps: Vec<Var<'t>> = [pair.content, pair.geometry]
        .into_iter()
        .flatten()
        .collect();
    let mut total = maps[0];
    for m in &maps[1..] {
        total = total.add(*m)?;
    }
    if renormalize && maps.len() > 1 {
        total = total.scale(1.0 / maps.len() as f64);
    }
    Ok(total)
}

/// `F_i = sumpool_Er((Ŝ_i·E_s) ⊙ (q_i·E_v))` with `Ŝ = weights·keys`.
pub fn attend_and_fuse<'t>(
    g: &Graph<'t>,
    query_con: Var<'t>,
    keys_con: Var<'t>,
    weights: Var<'t>,
    params: &FusionCellParams,
) -> Result<Var<'t>> {
    let er = params.expansion_rate(g.store());
    let attended = weights.matmul(keys_con)?;
    let primary = query_con.matmul(g.p(params.expand_primary))?;
    let secondary = attended.matmul(g.p(params.expand_secondary))?;
    secondary.mul(primary)?.sum_pool_stride(er)
}

/// `inter_i = Σ_j α_{i,j}·keys_geo_j`
pub fn inter_geometry<'t>(alpha: Var<'t>, keys_geo: Var<'t>) -> Result<Var<'t>> {
    alpha.matmul(keys_geo)
}

/// Attention maps of one cell, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct CellTrace<'t> {
    pub content_attention: Option<Var<'t>>,
    pub geometry_attention: Option<Var<'t>>,
    pub fused: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct FusionOutput<'t> {
    /// Primary content after every skip-connected cell, `[N × d]`.
    pub fused_content: Var<'t>,
    /// `[N × d]`, from the last cell's geometry map.
    pub inter_geometry: Var<'t>,
    pub cells: Vec<CellTrace<'t>>,
}

impl<'t> FusionOutput<'t> {
    pub fn last(&self) -> &CellTrace<'t> {
        self.cells.last().expect("at least one cell")
    }
}

/// Primary or secondary input of a fusion stack.
#[derive(Clone, Copy, Debug)]
pub struct Modality<'t> {
    pub content: Var<'t>,
    pub geometry: Var<'t>,
}

/// `m` fusion cells with independent parameters, skip-connected on the
/// primary modality.
#[derive(Clone, Debug)]
pub struct FusionStack {
    pub cells: Vec<FusionCellParams>,
    pub base: FusionBase,
    pub renormalize: bool,
}

impl FusionStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        er: usize,
        cells: usize,
        base: FusionBase,
        renormalize: bool,
    ) -> Result<Self> {
        if cells < 1 {
            return Err(GevstError::Config(
                "a fusion stack needs at least one cell".into(),
            ));
        }
        let cells = (0..cells)
            .map(|i| FusionCellParams::new(store, rng, &format!("{name}.cell{i}"), d, er))
            .collect();
        Ok(FusionStack {
            cells,
            base,
            renormalize,
        })
    }

    /// Every cell sees the updated primary content and the original
    /// secondary features.
    pub fn forward<'t>(
        &self,
        g: &Graph<'t>,
        primary: Modality<'t>,
        secondary: Modality<'t>,
    ) -> Result<FusionOutput<'t>> {
        let mut content = primary.content;
        let mut cells = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let pair = attention_scores(
                g,
                content,
                secondary.content,
                primary.geometry,
                secondary.geometry,
                cell,
                self.base,
            )?;
            let weights = combined_weights(&pair, self.renormalize)?;
            let fused = attend_and_fuse(g, content, secondary.content, weights, cell)?;
            content = content.add(fused)?;
            cells.push(CellTrace {
                content_attention: pair.content,
                geometry_attention: pair.geometry,
                fused,
            });
        }
        let last = cells.last().expect("at least one cell");
        // Without a geometry map the content map is the only alignment left.
        let alpha = last
            .geometry_attention
            .or(last.content_attention)
            .expect("fusion base enables at least one map");
        let inter_geometry = inter_geometry(alpha, secondary.geometry)?;
        Ok(FusionOutput {
            fused_content: content,
            inter_geometry,
            cells,
        })
    }
}
