use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` receives a fresh graph (seeded with `seed`, so stochastic ops
/// replay identically) and one leaf per input, and must return a scalar.
/// Only inputs flagged in `requires_grad` are perturbed. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all checked
/// elements. Differences are taken in `f64` whatever the graph precision.
pub fn grad_check<T, F>(
    inputs: &[Tensor<T>],
    requires_grad: &[bool],
    eps: f64,
    seed: u64,
    build: F,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if inputs.len() != requires_grad.len() {
        return Err(Error::contract("one requires_grad flag per input"));
    }
    let eval = |values: &[Tensor<T>]| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new(seed);
        let vars: Vec<Var> = values
            .iter()
            .zip(requires_grad)
            .map(|(t, &rg)| g.leaf(t.clone(), rg))
            .collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !requires_grad[k] {
            continue;
        }
        for e in 0..input.len() {
            let base = input.data()[e];
            probe[k].data_mut()[e] = T::from_f64(base.to_f64() + eps);
            let plus = eval(&probe)?.0.item(out).to_f64();
            probe[k].data_mut()[e] = T::from_f64(base.to_f64() - eps);
            let minus = eval(&probe)?.0.item(out).to_f64();
            probe[k].data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[e].to_f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
