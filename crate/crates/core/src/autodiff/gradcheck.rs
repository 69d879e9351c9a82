use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar graph with respect to `param`
/// against central finite differences.
///
/// `build` receives a fresh graph and the parameter's node and must return a
/// scalar output. Returns `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn grad_check<F>(build: F, param: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let p = graph.param(param.clone());
    let out = build(&mut graph, p)?;
    if graph.value(out).numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("output must be scalar, got shape {:?}", graph.value(out).shape()),
        ));
    }
    graph.backward(out)?;
    let analytic = graph
        .grad(p)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; param.numel()]);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(t);
        let o = build(&mut g, v)?;
        Ok(g.value(o).item())
    };

    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = param.clone();
        plus.data_mut()[i] += step;
        let mut minus = param.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
