use super::*;
use gevst::config::FusionBase;
use gevst::fusion::{AdditiveScorer, FusionCellParams, FusionStack, Modality};
use gevst::params::{Graph, ParamStore};
use gevst::tensor::{Tape, Tensor};

/// Store with one cell whose biases are random too, so the oracle sees them.
pub fn cell(d: usize, er: usize, seed: u64) -> (ParamStore, FusionCellParams) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let cell = FusionCellParams::new(&mut store, &mut r, "cell", d, er);
    randomize_biases(&mut store, seed + 1);
    (store, cell)
}

pub fn randomize_biases(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).ends_with(".b"))
        .collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, uniform(&mut r, &shape)).unwrap();
    }
}

pub fn oracle_scorer(store: &ParamStore, s: &AdditiveScorer, queries: &M, keys: &M) -> M {
    let pk = add_bias(
        &mm(keys, &param(store, s.w_key.w)),
        &vec_of(store, s.w_key.b.unwrap()),
    );
    let pq = add_bias(
        &mm(queries, &param(store, s.w_query.w)),
        &vec_of(store, s.w_query.b.unwrap()),
    );
    let w = vec_of(store, s.w);
    let logits: M = pq
        .iter()
        .map(|qi| {
            pk.iter()
                .map(|kj| (0..w.len()).map(|t| w[t] * (kj[t] + qi[t]).tanh()).sum())
                .collect()
        })
        .collect();
    softmax_rows(&logits)
}

pub fn oracle_fuse(
    store: &ParamStore,
    c: &FusionCellParams,
    query: &M,
    keys: &M,
    weights: &M,
    er: usize,
) -> M {
    let s_hat = mm(weights, keys);
    let v_dot = mm(query, &param(store, c.expand_primary));
    let s_dot = mm(&s_hat, &param(store, c.expand_secondary));
    let d = query[0].len();
    (0..query.len())
        .map(|i| {
            (0..d)
                .map(|j| {
                    (0..er)
                        .map(|r| s_dot[i][j * er + r] * v_dot[i][j * er + r])
                        .sum()
                })
                .collect()
        })
        .collect()
}

pub struct Inputs {
    pub qc: Tensor,
    pub kc: Tensor,
    pub qg: Tensor,
    pub kg: Tensor,
}

pub fn inputs(n: usize, m: usize, d: usize, seed: u64) -> Inputs {
    let mut r = rng(seed);
    Inputs {
        qc: uniform(&mut r, &[n, d]),
        kc: uniform(&mut r, &[m, d]),
        qg: uniform(&mut r, &[n, d]),
        kg: uniform(&mut r, &[m, d]),
    }
}

pub fn stack(
    d: usize,
    er: usize,
    cells: usize,
    base: FusionBase,
    seed: u64,
) -> (ParamStore, FusionStack) {
    let mut store = ParamStore::new();
    let s = FusionStack::new(
        &mut store,
        &mut rng(seed),
        "fusion",
        d,
        er,
        cells,
        base,
        false,
    )
    .unwrap();
    randomize_biases(&mut store, seed + 100);
    (store, s)
}

pub fn run_stack(store: &ParamStore, s: &FusionStack, x: &Inputs) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let g = Graph::new(&tape, store);
    let primary = Modality {
        content: g.constant(x.qc.clone()),
        geometry: g.constant(x.qg.clone()),
    };
    let secondary = Modality {
        content: g.constant(x.kc.clone()),
        geometry: g.constant(x.kg.clone()),
    };
    let out = s.forward(&g, primary, secondary).unwrap();
    (
        out.fused_content.value().as_ref().clone(),
        out.inter_geometry.value().as_ref().clone(),
    )
}
