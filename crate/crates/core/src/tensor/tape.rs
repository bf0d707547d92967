use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn, split_axis};
use super::{Tensor, LAYER_NORM_EPS};
use crate::error::{dim_err, GevstError, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        a: usize,
        bias: usize,
    },
    AddScalar(usize),
    Scale(usize, f64),
    ScaleBy {
        a: usize,
        s: usize,
    },
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SumPool {
        a: usize,
        stride: usize,
    },
    SumAll(usize),
    Mean {
        a: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    MaskedFill {
        a: usize,
        mask: Arc<Vec<bool>>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    PairwiseAdd {
        q: usize,
        p: usize,
    },
    Pick {
        a: usize,
        idx: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddRow { a, bias } => vec![*a, *bias],
            ScaleBy { a, s } => vec![*a, *s],
            AddScalar(a)
            | Scale(a, _)
            | Tanh(a)
            | Sigmoid(a)
            | Relu(a)
            | Softmax(a)
            | LogSoftmax(a)
            | SumAll(a)
            | Reshape(a) => vec![*a],
            SumPool { a, .. }
            | Mean { a, .. }
            | Slice { a, .. }
            | Permute { a, .. }
            | MaskedFill { a, .. }
            | Pick { a, .. } => vec![*a],
            Concat { inputs, .. } => inputs.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Embedding { table, .. } => vec![*table],
            PairwiseAdd { q, p } => vec![*q, *p],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Linear record of operations, replayed in reverse by [`Tape::backward`].
///
/// A tape is single-threaded: it is meant to be built, differentiated and
/// dropped by one caller.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), false)
    }

    /// Leaf sharing storage with a parameter tensor.
    pub fn shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&self, value: Arc<Tensor>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return dim_err("concat of zero tensors");
        }
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rank = vals[0].shape().len();
        if axis >= rank {
            return dim_err(format!("concat axis {axis} out of range for rank {rank}"));
        }
        for v in &vals {
            let ok = v.shape().len() == rank
                && (0..rank).all(|i| i == axis || v.shape()[i] == vals[0].shape()[i]);
            if !ok {
                return dim_err(format!(
                    "concat shapes {:?} and {:?} disagree off axis {axis}",
                    vals[0].shape(),
                    v.shape()
                ));
            }
        }
        let mut shape = vals[0].shape().to_vec();
        shape[axis] = vals.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor { shape, data };
        Ok(self.push(
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Row gather from an embedding table `[vocab × d]`.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let t = table.value();
        if t.shape().len() != 2 {
            return dim_err(format!("embedding table must be 2-D, got {:?}", t.shape()));
        }
        if ids.is_empty() {
            return Err(GevstError::Input("embedding lookup of zero ids".into()));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(GevstError::Vocabulary { id, size: vocab });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.push(
            out,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `out[i, j, :] = q[i, :] + p[j, :]` for `q: [N×k]`, `p: [M×k]`.
    pub fn pairwise_add<'t>(&'t self, q: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
        let (qv, pv) = (q.value(), p.value());
        if qv.shape().len() != 2 || pv.shape().len() != 2 || qv.shape()[1] != pv.shape()[1] {
            return dim_err(format!(
                "pairwise_add needs [N×k] and [M×k], got {:?} and {:?}",
                qv.shape(),
                pv.shape()
            ));
        }
        let (n, m, k) = (qv.shape()[0], pv.shape()[0], qv.shape()[1]);
        let mut data = Vec::with_capacity(n * m * k);
        for i in 0..n {
            for j in 0..m {
                data.extend(qv.row(i).iter().zip(pv.row(j)).map(|(a, b)| a + b));
            }
        }
        let out = Tensor {
            shape: vec![n, m, k],
            data,
        };
        Ok(self.push(out, Op::PairwiseAdd { q: q.id, p: p.id }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients are kept for leaves only; intermediate buffers are released
    /// as soon as their contribution has been propagated.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(GevstError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[loss.id].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, &mut grads, node, &g);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let out = &node.value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(grads, nodes, *a) {
                for ib in 0..*batch {
                    let gs = &g[ib * m * n..(ib + 1) * m * n];
                    let bs = &bv[ib * k * n..(ib + 1) * k * n];
                    let das = &mut da[ib * m * k..(ib + 1) * m * k];
                    if *trans_b {
                        gemm_nn(gs, bs, das, m, n, k);
                    } else {
                        gemm_nt(gs, bs, das, m, n, k);
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for ib in 0..*batch {
                    let gs = &g[ib * m * n..(ib + 1) * m * n];
                    let as_ = &av[ib * m * k..(ib + 1) * m * k];
                    let dbs = &mut db[ib * k * n..(ib + 1) * k * n];
                    if *trans_b {
                        gemm_tn(gs, as_, dbs, m, n, k);
                    } else {
                        gemm_tn(as_, gs, dbs, m, k, n);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d -= gi;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * y;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * x;
                }
            }
        }
        Op::AddRow { a, bias } => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                let d = db.len();
                for row in g.chunks_exact(d) {
                    add_into(db, row);
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(grads, nodes, *a) {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }
        }
        Op::ScaleBy { a, s } => {
            let sv = val(*s).item();
            let av = val(*a).data();
            if let Some(da) = slot(grads, nodes, *a) {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi * sv;
                }
            }
            if let Some(ds) = slot(grads, nodes, *s) {
                ds[0] += g.iter().zip(av).map(|(gi, x)| gi * x).sum::<f64>();
            }
        }
        Op::Tanh(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a).data();
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, gi), x) in da.iter_mut().zip(g).zip(av) {
                    if *x > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let d = out.last_dim();
                for ((dr, gr), yr) in da
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(out.data().chunks_exact(d))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((dv, gi), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv += y * (gi - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let d = out.last_dim();
                for ((dr, gr), yr) in da
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(out.data().chunks_exact(d))
                {
                    let total: f64 = gr.iter().sum();
                    for ((dv, gi), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv += gi - y.exp() * total;
                    }
                }
            }
        }
        Op::SumPool { a, stride } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i / stride];
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean { a, axis } => {
            let shape = val(*a).shape().to_vec();
            if let Some(da) = slot(grads, nodes, *a) {
                let (outer, len, inner) = split_axis(&shape, *axis);
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            da[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = val(inp).shape()[*axis];
                if let Some(di) = slot(grads, nodes, inp) {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut di[o * len * inner..(o + 1) * len * inner], src);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let shape = val(*a).shape().to_vec();
            let len = out.shape()[*axis];
            if let Some(da) = slot(grads, nodes, *a) {
                let (outer, total, inner) = split_axis(&shape, *axis);
                for o in 0..outer {
                    let dst =
                        &mut da[(o * total + start) * inner..(o * total + start + len) * inner];
                    add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
        }
        Op::Permute { a, perm } => {
            if let Some(da) = slot(grads, nodes, *a) {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = kernels::permute(g, out.shape(), &inverse);
                add_into(da, &back);
            }
        }
        Op::MaskedFill { a, mask } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, gi), &m) in da.iter_mut().zip(g).zip(mask.iter()) {
                    if !m {
                        *d += gi;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain).data().to_vec();
            let d = gv.len();
            if let Some(dg) = slot(grads, nodes, *gain) {
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((dv, gi), xh) in dg.iter_mut().zip(gr).zip(xr) {
                        *dv += gi * xh;
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                for gr in g.chunks_exact(d) {
                    add_into(db, gr);
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                let nf = d as f64;
                for (r, ((dxr, gr), xr)) in dx
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(xhat.chunks_exact(d))
                    .enumerate()
                {
                    let dxhat: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                    let sum: f64 = dxhat.iter().sum();
                    let dot: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let s = inv_std[r] / nf;
                    for ((dv, dh), xh) in dxr.iter_mut().zip(&dxhat).zip(xr) {
                        *dv += s * (nf * dh - sum - xh * dot);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(dt) = slot(grads, nodes, *table) {
                let d = out.last_dim();
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::PairwiseAdd { q, p } => {
            let (n, m, k) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            if let Some(dq) = slot(grads, nodes, *q) {
                for i in 0..n {
                    for j in 0..m {
                        let src = &g[(i * m + j) * k..(i * m + j + 1) * k];
                        add_into(&mut dq[i * k..(i + 1) * k], src);
                    }
                }
            }
            if let Some(dp) = slot(grads, nodes, *p) {
                for i in 0..n {
                    for j in 0..m {
                        let src = &g[(i * m + j) * k..(i * m + j + 1) * k];
                        add_into(&mut dp[j * k..(j + 1) * k], src);
                    }
                }
            }
        }
        Op::Pick { a, idx } => {
            let v = val(*a).last_dim();
            if let Some(da) = slot(grads, nodes, *a) {
                for (t, &j) in idx.iter().enumerate() {
                    da[t * v + j] += g[t];
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// `self · other` for `[M×K]·[K×N]`, or batched `[B×M×K]·[B×K×N]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` for `[M×K]·[N×K]ᵀ`, or batched over a leading axis.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || {
            dim_err(format!(
                "matmul{} of {sa:?} and {sb:?}",
                if trans_b { "_t" } else { "" }
            ))
        };
        let (batch, m, k, n, kb) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (kb, n) = if trans_b {
                    (sb[1], sb[0])
                } else {
                    (sb[0], sb[1])
                };
                (1, sa[0], sa[1], n, kb)
            }
            (3, 3) if sa[0] == sb[0] => {
                let (kb, n) = if trans_b {
                    (sb[2], sb[1])
                } else {
                    (sb[1], sb[2])
                };
                (sa[0], sa[1], sa[2], n, kb)
            }
            _ => return mismatch(),
        };
        if k != kb {
            return mismatch();
        }
        let mut data = vec![0.0; batch * m * n];
        for ib in 0..batch {
            let as_ = &a.data()[ib * m * k..(ib + 1) * m * k];
            let bs = &b.data()[ib * k * n..(ib + 1) * k * n];
            let cs = &mut data[ib * m * n..(ib + 1) * m * n];
            if trans_b {
                gemm_nt(as_, bs, cs, m, k, n);
            } else {
                gemm_nn(as_, bs, cs, m, k, n);
            }
        }
        let shape = if batch == 1 && sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.tape.push(
            Tensor { shape, data },
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    fn zip_with(
        self,
        other: Var<'t>,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, what)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            op,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Adds a `[d]` row vector to every trailing-axis row of `self`.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        if b.shape().len() != 1 || b.len() != a.last_dim() {
            return dim_err(format!(
                "add_row: bias {:?} does not match rows of {:?}",
                b.shape(),
                a.shape()
            ));
        }
        let d = b.len();
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            Op::AddRow {
                a: self.id,
                bias: bias.id,
            },
        ))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = map(&self.value(), |v| v + c);
        self.tape.push(out, Op::AddScalar(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = map(&self.value(), |v| v * c);
        self.tape.push(out, Op::Scale(self.id, c))
    }

    /// Multiplies every element by the single element of `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.len() != 1 {
            return dim_err(format!(
                "scale_by expects one element, got {:?}",
                sv.shape()
            ));
        }
        let c = sv.item();
        let out = map(&self.value(), |v| v * c);
        Ok(self.tape.push(
            out,
            Op::ScaleBy {
                a: self.id,
                s: s.id,
            },
        ))
    }

    pub fn tanh(self) -> Var<'t> {
        let out = map(&self.value(), f64::tanh);
        self.tape.push(out, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = map(&self.value(), |v| 1.0 / (1.0 + (-v).exp()));
        self.tape.push(out, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let out = map(&self.value(), |v| v.max(0.0));
        self.tape.push(out, Op::Relu(self.id))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(self) -> Var<'t> {
        let v = self.value();
        let data = kernels::softmax_rows(v.data(), v.last_dim());
        self.tape.push(
            Tensor {
                shape: v.shape().to_vec(),
                data,
            },
            Op::Softmax(self.id),
        )
    }

    pub fn log_softmax(self) -> Var<'t> {
        let v = self.value();
        let data = kernels::log_softmax_rows(v.data(), v.last_dim());
        self.tape.push(
            Tensor {
                shape: v.shape().to_vec(),
                data,
            },
            Op::LogSoftmax(self.id),
        )
    }

    /// `out[..., j] = Σ_{r<stride} x[..., j·stride + r]`
    pub fn sum_pool_stride(self, stride: usize) -> Result<Var<'t>> {
        let v = self.value();
        let d = v.last_dim();
        if stride == 0 || d % stride != 0 {
            return dim_err(format!(
                "sum pooling stride {stride} does not divide trailing dimension {d}"
            ));
        }
        let data = v
            .data()
            .chunks_exact(stride)
            .map(|c| c.iter().sum())
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = d / stride;
        Ok(self
            .tape
            .push(Tensor { shape, data }, Op::SumPool { a: self.id, stride }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(total), Op::SumAll(self.id))
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.shape().len() {
            return dim_err(format!("mean axis {axis} out of range for {:?}", v.shape()));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += v.data()[(o * len + l) * inner + i];
                }
            }
        }
        for x in data.iter_mut() {
            *x /= len as f64;
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self
            .tape
            .push(Tensor { shape, data }, Op::Mean { a: self.id, axis }))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.shape().len() || len == 0 || start + len > v.shape()[axis] {
            return dim_err(format!(
                "slice [{start}, {}) on axis {axis} of {:?}",
                start + len,
                v.shape()
            ));
        }
        let (outer, total, inner) = split_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(
                &v.data()[(o * total + start) * inner..(o * total + start + len) * inner],
            );
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor { shape, data },
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let out = (*v).clone().reshaped(shape.to_vec())?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let rank = v.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return dim_err(format!("invalid permutation {perm:?} for {:?}", v.shape()));
        }
        let data = kernels::permute(v.data(), v.shape(), perm);
        let shape = perm.iter().map(|&p| v.shape()[p]).collect();
        Ok(self.tape.push(
            Tensor { shape, data },
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Matrix transpose of a 2-D value.
    pub fn transpose(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return dim_err(format!("transpose needs a matrix, got {:?}", self.shape()));
        }
        self.permute(&[1, 0])
    }

    /// Writes `value` wherever `mask` is true.
    pub fn masked_fill(self, mask: Arc<Vec<bool>>, value: f64) -> Result<Var<'t>> {
        let v = self.value();
        if mask.len() != v.len() {
            return dim_err(format!(
                "mask of {} entries for tensor {:?}",
                mask.len(),
                v.shape()
            ));
        }
        let data = v
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        Ok(self.tape.push(
            Tensor {
                shape: v.shape().to_vec(),
                data,
            },
            Op::MaskedFill { a: self.id, mask },
        ))
    }

    /// Per-row normalization to zero mean and unit population variance,
    /// followed by the affine map `gain ⊙ x̂ + bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let d = x.last_dim();
        if d < 2 || gv.shape() != [d] || bv.shape() != [d] {
            return dim_err(format!(
                "layer_norm of {:?} with gain {:?} and bias {:?}",
                x.shape(),
                gv.shape(),
                bv.shape()
            ));
        }
        let rows = x.rows();
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: x.shape().to_vec(),
                data,
            },
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// `out[t] = self[t, idx[t]]` for a `[T×V]` value.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 2 || v.shape()[0] != idx.len() {
            return dim_err(format!(
                "pick of {} indices from {:?}",
                idx.len(),
                v.shape()
            ));
        }
        let width = v.shape()[1];
        let mut data = Vec::with_capacity(idx.len());
        for (t, &j) in idx.iter().enumerate() {
            if j >= width {
                return Err(GevstError::Vocabulary { id: j, size: width });
            }
            data.push(v.at(t, j));
        }
        Ok(self.tape.push(
            Tensor {
                shape: vec![idx.len()],
                data,
            },
            Op::Pick {
                a: self.id,
                idx: idx.to_vec(),
            },
        ))
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }

    /// Gradient of a leaf, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; v.value().len()])
    }
}
