use super::*;
use gevst::config::{BranchId, GesaVariant};
use gevst::gesa::{BranchEncoder, GesaLayerParams};
use gevst::params::{Graph, ParamStore};
use gevst::tensor::{Tape, Tensor, LAYER_NORM_EPS};

pub fn layer(d: usize, seed: u64) -> (ParamStore, GesaLayerParams) {
    let mut store = ParamStore::new();
    let p = GesaLayerParams::new(&mut store, &mut rng(seed), "l", d);
    let mut r = rng(seed + 1);
    // Non-trivial biases, gains and layer-norm shifts for the oracle.
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| {
            let n = store.name(id);
            n.ends_with(".b") || n.ends_with(".gain") || n.ends_with(".bias")
        })
        .collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, uniform(&mut r, &shape)).unwrap();
    }
    (store, p)
}

pub struct X {
    pub x: Tensor,
    pub gi: Tensor,
    pub ge: Tensor,
}

pub fn xs(n: usize, d: usize, seed: u64) -> X {
    let mut r = rng(seed);
    X {
        x: uniform(&mut r, &[n, d]),
        gi: uniform(&mut r, &[n, d]),
        ge: uniform(&mut r, &[n, d]),
    }
}

/// Per-head maps `[map][head] -> N×N`.
pub fn oracle_maps(store: &ParamStore, p: &GesaLayerParams, x: &X, heads: usize) -> Vec<Vec<M>> {
    let d = x.x.last_dim();
    let dh = d / heads;
    let sources = [
        (&x.x, p.wq_content, p.wk_content),
        (&x.gi, p.wq_intra, p.wk_intra),
        (&x.ge, p.wq_inter, p.wk_inter),
    ];
    sources
        .iter()
        .map(|(src, wq, wk)| {
            let s = to_m(src);
            let q = mm(&s, &param(store, *wq));
            let k = mm(&s, &param(store, *wk));
            (0..heads)
                .map(|h| attention(&head_cols(&q, h, dh), &head_cols(&k, h, dh)))
                .collect()
        })
        .collect()
}

pub fn oracle_gates(store: &ParamStore, p: &GesaLayerParams, x: &M) -> Vec<f64> {
    let logits = add_bias(
        &mm(x, &param(store, p.gate.w)),
        &vec_of(store, p.gate.b.unwrap()),
    );
    let n = logits.len() as f64;
    let mean: Vec<f64> = (0..3)
        .map(|j| logits.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    softmax_vec(&mean)
}

pub fn oracle_layer(store: &ParamStore, p: &GesaLayerParams, x: &X, heads: usize) -> M {
    let xm = to_m(&x.x);
    let (n, d) = (xm.len(), xm[0].len());
    let dh = d / heads;
    let maps = oracle_maps(store, p, x, heads);
    let c = oracle_gates(store, p, &xm);
    let v = mm(&xm, &param(store, p.wv_content));
    let mut att = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let combined: M = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..3).map(|m| c[m] * maps[m][h][i][j]).sum())
                    .collect()
            })
            .collect();
        let out = mm(&combined, &head_cols(&v, h, dh));
        for i in 0..n {
            att[i][h * dh..(h + 1) * dh].copy_from_slice(&out[i]);
        }
    }
    let v = |id| vec_of(store, id);
    let x1 = layer_norm(
        &add(&xm, &att),
        &v(p.ln1.gain),
        &v(p.ln1.bias),
        LAYER_NORM_EPS,
    );
    let hidden = relu(&add_bias(
        &mm(&x1, &param(store, p.ffn.fc1.w)),
        &v(p.ffn.fc1.b.unwrap()),
    ));
    let f = add_bias(
        &mm(&hidden, &param(store, p.ffn.fc2.w)),
        &v(p.ffn.fc2.b.unwrap()),
    );
    layer_norm(
        &add(&x1, &f),
        &v(p.ln2.gain),
        &v(p.ln2.bias),
        LAYER_NORM_EPS,
    )
}

pub fn head_slice(t: &Tensor, h: usize) -> Tensor {
    let (n, m) = (t.shape()[1], t.shape()[2]);
    Tensor::new(vec![n, m], t.data()[h * n * m..(h + 1) * n * m].to_vec()).unwrap()
}

pub fn branch(variant: GesaVariant, depth: usize, seed: u64) -> (ParamStore, BranchEncoder) {
    let mut store = ParamStore::new();
    let b = BranchEncoder::new(
        &mut store,
        &mut rng(seed),
        BranchId::VV,
        8,
        2,
        depth,
        variant,
    )
    .unwrap();
    (store, b)
}

pub fn run_branch(store: &ParamStore, b: &BranchEncoder, x: &X) -> Tensor {
    let tape = Tape::new();
    let g = Graph::new(&tape, store);
    let (out, _) = b
        .forward(
            &g,
            g.constant(x.x.clone()),
            g.constant(x.gi.clone()),
            g.constant(x.ge.clone()),
        )
        .unwrap();
    out.value().as_ref().clone()
}
