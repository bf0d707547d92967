use super::*;
use gevst::config::{BranchId, Modulation};
use gevst::decoder::{DecodeOptions, Decoder, DecoderLayerParams, StepScorer};
use gevst::params::{Graph, ParamStore};
use gevst::tensor::{Tensor, Var};
use gevst::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Multi-head attention of `y` over `x` without masking.
pub fn oracle_cross(store: &ParamStore, layer: &DecoderLayerParams, y: &M, x: &M) -> M {
    let a = &layer.cross;
    let heads = a.heads;
    let d = y[0].len();
    let dh = d / heads;
    let q = mm(y, &param(store, a.wq.w));
    let k = mm(x, &param(store, a.wk.w));
    let v = mm(x, &param(store, a.wv.w));
    let mut merged = vec![vec![0.0; d]; y.len()];
    for h in 0..heads {
        let w = attention(&head_cols(&q, h, dh), &head_cols(&k, h, dh));
        let o = mm(&w, &head_cols(&v, h, dh));
        for (t, row) in o.iter().enumerate() {
            merged[t][h * dh..(h + 1) * dh].copy_from_slice(row);
        }
    }
    mm(&merged, &param(store, a.wo.w))
}

/// `Σ_i σ([Y; C_i]·W_i + b_i) ⊙ C_i` over the branches in `xs`, with the
/// gate maps in branch order.
pub fn oracle_sigmoid_modulation(
    store: &ParamStore,
    l: &DecoderLayerParams,
    y: &M,
    xs: &[(BranchId, Tensor)],
) -> (M, Vec<M>) {
    let d = y[0].len();
    let mut sum = vec![vec![0.0; d]; y.len()];
    let mut alphas = Vec::new();
    for (i, (_, x)) in xs.iter().enumerate() {
        let c = oracle_cross(store, l, y, &to_m(x));
        let joined: M = y
            .iter()
            .zip(&c)
            .map(|(a, b)| a.iter().chain(b).cloned().collect())
            .collect();
        let gate = &l.gates[i].1;
        let logits = add_bias(
            &mm(&joined, &param(store, gate.w)),
            &vec_of(store, gate.b.unwrap()),
        );
        let alpha: M = logits
            .iter()
            .map(|r| r.iter().map(|&v| sigmoid(v)).collect())
            .collect();
        for t in 0..y.len() {
            for j in 0..d {
                sum[t][j] += alpha[t][j] * c[t][j];
            }
        }
        alphas.push(alpha);
    }
    (sum, alphas)
}

pub fn layer(
    d: usize,
    heads: usize,
    branches: &[BranchId],
    seed: u64,
) -> (ParamStore, DecoderLayerParams) {
    let mut store = ParamStore::new();
    let l = DecoderLayerParams::new(&mut store, &mut rng(seed), "l", d, heads, branches).unwrap();
    let mut r = rng(seed + 100);
    for (_, gate) in &l.gates {
        let b = gate.b.unwrap();
        let shape = store.get(b).shape().to_vec();
        store.set(b, uniform(&mut r, &shape)).unwrap();
    }
    (store, l)
}

pub fn branch_inputs(seed: u64, d: usize, sizes: &[(BranchId, usize)]) -> Vec<(BranchId, Tensor)> {
    let mut r = rng(seed);
    sizes
        .iter()
        .map(|&(b, n)| (b, uniform(&mut r, &[n, d])))
        .collect()
}

pub fn bind<'t>(g: &Graph<'t>, xs: &[(BranchId, Tensor)]) -> Vec<(BranchId, Var<'t>)> {
    xs.iter()
        .map(|(b, t)| (*b, g.constant(t.clone())))
        .collect()
}

pub const VOCAB: usize = 7;
pub const BRANCHES: [BranchId; 2] = [BranchId::VV, BranchId::SS];

pub fn decoder(seed: u64, depth: usize) -> (ParamStore, Decoder) {
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        &mut rng(seed),
        VOCAB,
        8,
        2,
        depth,
        &BRANCHES,
        Modulation::Sigmoid,
        6,
    )
    .unwrap();
    (store, dec)
}

pub fn memory() -> Vec<(BranchId, Tensor)> {
    branch_inputs(77, 8, &[(BranchId::VV, 3), (BranchId::SS, 2)])
}

/// Log-probabilities drawn from a generator keyed by the prefix.
pub struct TableScorer {
    pub seed: u64,
    pub vocab: usize,
    pub sharpness: f64,
}

impl StepScorer for TableScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let key = prefix.iter().fold(self.seed, |h, &t| {
            h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1)
        });
        let mut r = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| self.sharpness * r.random::<f64>())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln() + top;
        Ok(logits.iter().map(|l| l - z).collect())
    }
}

pub fn opts(eos: usize, max_len: usize) -> DecodeOptions {
    DecodeOptions {
        bos: 0,
        eos,
        max_len,
    }
}

/// Every finished sequence, best length-normalized score first.
pub fn exhaustive(s: &dyn StepScorer, o: DecodeOptions) -> Vec<(Vec<usize>, f64)> {
    fn go(
        s: &dyn StepScorer,
        o: DecodeOptions,
        prefix: Vec<usize>,
        lp: f64,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        let dist = s.log_probs(&prefix).unwrap();
        for (tok, l) in dist.iter().enumerate() {
            let mut p = prefix.clone();
            p.push(tok);
            if tok == o.eos || p.len() - 1 >= o.max_len {
                let n = (p.len() - 1) as f64;
                out.push((p, (lp + l) / n));
            } else {
                go(s, o, p, lp + l, out);
            }
        }
    }
    let mut out = Vec::new();
    go(s, o, vec![o.bos], 0.0, &mut out);
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

/// Token 1 looks best first but leads nowhere; token 2 then EOS wins.
pub struct Trap;

impl StepScorer for Trap {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let p: [f64; 3] = match prefix {
            [0] => [0.0, 0.6, 0.4],
            [0, 1, ..] => [0.34, 0.33, 0.33],
            [0, 2, ..] => [0.99, 0.005, 0.005],
            _ => unreachable!(),
        };
        Ok(p.iter().map(|v| v.ln()).collect())
    }
}
