use super::{Tape, Tensor, Var};
use crate::error::Result;

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences and returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(leaf)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(leaf);

    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        Ok(f(v)?.value().item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Derivative of `f` at offset 0 by Ridders' method: central differences
/// on a geometric ladder of steps starting at `h0`, Richardson-extrapolated,
/// keeping the tableau entry with the smallest error estimate. Each
/// estimate's error is floored at the rounding noise of its step, so small
/// steps whose differences are all noise cannot look exact.
/// Returns `(derivative, error estimate)`.
pub fn ridders_derivative<F>(mut f: F, h0: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    const CON: f64 = 2.0;
    const NTAB: usize = 12;
    const NOISE_ULPS: f64 = 8.0;
    let mut diff = |h: f64| -> Result<(f64, f64)> {
        let (p, m) = (f(h)?, f(-h)?);
        Ok(((p - m) / (2.0 * h), p.abs().max(m.abs())))
    };
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    let mut scale;
    (a[0][0], scale) = diff(h)?;
    let (mut best, mut err) = (a[0][0], f64::INFINITY);
    for i in 1..NTAB {
        h /= CON;
        let (d, s) = diff(h)?;
        a[0][i] = d;
        scale = scale.max(s);
        let floor = NOISE_ULPS * f64::EPSILON * scale / h;
        let mut fac = CON * CON;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON * CON;
            let e = (a[j][i] - a[j - 1][i])
                .abs()
                .max((a[j][i] - a[j - 1][i - 1]).abs())
                .max(floor);
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
    }
    Ok((best, err))
}
