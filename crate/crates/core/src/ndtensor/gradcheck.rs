use crate::error::{Error, Result};
use crate::ndtensor::{Graph, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh graph and one parameter leaf per entry of `params`.
/// Returns the largest `|analytic − numeric| / (|numeric| + 1e-8)` over all
/// parameter elements.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::NonFinite("grad_check parameters".into()));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        for e in 0..p.len() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic.data()[e] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
