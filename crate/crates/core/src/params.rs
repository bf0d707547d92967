//! Named parameter storage and the per-forward binding of parameters to a tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GevstError, Result};
use crate::tensor::{
    max_relative_error, relative_error, ridders_derivative, Gradients, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
///
/// Registration order is the manifest order used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        ParamId(self.tensors.len() - 1)
    }

    /// Xavier-uniform `[rows × cols]` weight.
    pub fn xavier(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(
            name,
            Tensor::new(vec![rows, cols], data).expect("positive dims"),
        )
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(GevstError::Dimension(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Binds parameters of a store to leaves of one tape, lazily and at most
/// once per parameter.
pub struct Graph<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t> Graph<'t> {
    /// Graph whose parameters receive gradients.
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Graph {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: true,
        }
    }

    /// Graph for inference: parameters are constants.
    pub fn frozen(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Graph {
            trainable: false,
            ..Graph::new(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.shared(self.store.shared(id), self.trainable))
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Collects parameter gradients out of a backward pass.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let bound = self.bound.borrow();
        ParamGrads(
            bound
                .iter()
                .map(|v| v.and_then(|v| grads.get(v).map(<[f64]>::to_vec)))
                .collect(),
        )
    }
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss does not touch.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0[id.0].as_deref()
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            if let Some(src) = src {
                match dst {
                    Some(d) => {
                        for (a, b) in d.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.0.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .all(|v| v.is_finite())
    }
}

/// Central-difference check of every parameter tensor of `store` against the
/// reverse-mode gradient of `loss`. Returns `(name, max relative error)` per
/// tensor; `coords` caps how many evenly spaced coordinates of each tensor
/// are perturbed (`None` checks all of them).
pub fn param_grad_check<F>(
    store: &ParamStore,
    loss: F,
    eps: f64,
    coords: Option<usize>,
) -> Result<Vec<(String, f64)>>
where
    F: for<'t> Fn(&Graph<'t>) -> Result<Var<'t>>,
{
    check_coordinates(store, loss, coords, |f| {
        Ok((f(eps)? - f(-eps)?) / (2.0 * eps))
    })
}

/// Same report as [`param_grad_check`], with each numeric derivative taken
/// by [`ridders_derivative`] from initial step `h0`. This resolves
/// gradients far below the cancellation floor of a single central
/// difference, at roughly twelve times the cost per coordinate.
pub fn param_grad_check_ridders<F>(
    store: &ParamStore,
    loss: F,
    h0: f64,
    coords: Option<usize>,
) -> Result<Vec<(String, f64)>>
where
    F: for<'t> Fn(&Graph<'t>) -> Result<Var<'t>>,
{
    check_coordinates(store, loss, coords, |f| Ok(ridders_derivative(f, h0)?.0))
}

/// `numeric` receives the loss as a function of the offset applied to one
/// coordinate. `coords` caps the number of evenly spaced coordinates
/// checked per tensor.
fn check_coordinates<F, D>(
    store: &ParamStore,
    loss: F,
    coords: Option<usize>,
    mut numeric: D,
) -> Result<Vec<(String, f64)>>
where
    F: for<'t> Fn(&Graph<'t>) -> Result<Var<'t>>,
    D: FnMut(&mut dyn FnMut(f64) -> Result<f64>) -> Result<f64>,
{
    let tape = Tape::new();
    let g = Graph::new(&tape, store);
    let l = loss(&g)?;
    let grads = tape.backward(l)?;
    let analytic = g.param_grads(&grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, s);
        Ok(loss(&g)?.value().item())
    };
    let mut report = Vec::with_capacity(store.len());
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let picks: Vec<usize> = match coords {
            Some(c) if c < n => (0..c).map(|k| k * n / c).collect(),
            _ => (0..n).collect(),
        };
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = store.get(id).data()[i];
            let mut at = |h: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = orig + h;
                let v = eval(&probe);
                probe.get_mut(id).data_mut()[i] = orig;
                v
            };
            num.push(numeric(&mut at)?);
            a.push(analytic.get(id).map_or(0.0, |g| g[i]));
        }
        report.push((store.name(id).to_string(), max_relative_error(&a, &num)));
    }
    Ok(report)
}

/// One tensor's directional derivative, analytic and by central
/// difference.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalProbe {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl DirectionalProbe {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Directional variant: per tensor, compares `∇f·v` with
/// `(f(θ+εv) - f(θ-εv)) / 2ε` along one random unit direction `v`.
/// Unlike the per-coordinate check it cannot be dominated by coordinates
/// whose gradient sits below finite-difference resolution.
pub fn param_directional_check<F>(
    store: &ParamStore,
    loss: F,
    eps: f64,
    seed: u64,
) -> Result<Vec<(String, f64)>>
where
    F: for<'t> Fn(&Graph<'t>) -> Result<Var<'t>>,
{
    Ok(param_directional_probes(store, loss, eps, seed)?
        .into_iter()
        .map(|p| {
            let e = p.relative_error();
            (p.name, e)
        })
        .collect())
}

pub fn param_directional_probes<F>(
    store: &ParamStore,
    loss: F,
    eps: f64,
    seed: u64,
) -> Result<Vec<DirectionalProbe>>
where
    F: for<'t> Fn(&Graph<'t>) -> Result<Var<'t>>,
{
    use rand::SeedableRng;
    let tape = Tape::new();
    let g = Graph::new(&tape, store);
    let l = loss(&g)?;
    let grads = tape.backward(l)?;
    let analytic = g.param_grads(&grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, s);
        Ok(loss(&g)?.value().item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids() {
        let base = store.get(id).clone();
        let mut dir: Vec<f64> = (0..base.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let a: f64 = analytic
            .get(id)
            .map_or(0.0, |g| g.iter().zip(&dir).map(|(x, y)| x * y).sum());
        let mut probe = store.clone();
        let mut shifted = |sign: f64| -> Result<f64> {
            let t = probe.get_mut(id);
            for ((p, b), v) in t.data_mut().iter_mut().zip(base.data()).zip(&dir) {
                *p = b + sign * eps * v;
            }
            eval(&probe)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
        report.push(DirectionalProbe {
            name: store.name(id).to_string(),
            analytic: a,
            numeric,
        });
    }
    Ok(report)
}
