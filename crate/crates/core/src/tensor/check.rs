use super::{Graph, Real, Result, Tensor, TensorError, Var};

/// Outcome of comparing backward gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error.
    pub max_rel_error: f64,
    /// Coordinate where it occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative errors use `max(|analytic|, |numeric|, FLOOR)` as denominator so
/// that coordinates whose true gradient is zero compare absolutely.
const FLOOR: f64 = 1e-3;

/// Checks `f`'s backward gradient at `x` against
/// `(f(x+eps·eᵢ) - f(x-eps·eᵢ)) / (2·eps)` for every coordinate.
///
/// `f` receives a fresh graph and the leaf holding `x`; it must return a
/// one-element value.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::NotScalar(g.shape(out).to_vec()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .map(|t| t.to_f64_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(probe);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item().as_f64())
    };
    let step = T::from_f64(eps);
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        // Divide by the step actually taken, which differs from eps by rounding.
        let taken = (plus.data()[i] - minus.data()[i]).as_f64();
        numeric.push((eval(plus)? - eval(minus)?) / taken);
    }

    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}
