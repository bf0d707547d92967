use gevst::params::{Graph, ParamStore};
use gevst::tensor::Var;
use gevst::train::{sample_index, Policy};
use gevst::Result;
use rand_chacha::ChaCha8Rng;

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - z).collect()
}

/// One-step policy over two actions with logits `theta`.
pub struct Bandit {
    pub theta: gevst::params::ParamId,
}

impl Policy for Bandit {
    type Item = ();

    fn sample(&self, store: &ParamStore, _: &(), rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok(vec![
            0,
            sample_index(&log_softmax(store.get(self.theta).data()), rng),
        ])
    }

    fn greedy(&self, store: &ParamStore, _: &()) -> Result<Vec<usize>> {
        Ok(vec![
            0,
            gevst::decoder::argmax(store.get(self.theta).data()),
        ])
    }

    fn log_prob<'t>(&self, g: &Graph<'t>, _: &(), tokens: &[usize]) -> Result<Var<'t>> {
        Ok(g.p(self.theta)
            .reshape(&[1, 2])?
            .log_softmax()
            .pick(&tokens[1..])?
            .sum())
    }
}
