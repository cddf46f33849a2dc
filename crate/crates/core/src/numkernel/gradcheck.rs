use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst relative error between recorded-graph gradients and central finite differences.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must return a scalar.
/// Relative error uses `max(|a|, |b|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get_slice(*var)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for i in 0..params[pi].numel() {
            let orig = probe[pi].data()[i];
            probe[pi].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued program, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
