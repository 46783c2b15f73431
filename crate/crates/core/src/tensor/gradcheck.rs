use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central-difference estimate of ∇f at `x`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    step: f64,
) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::from_parts(x.shape(), grad).expect("same shape as x")
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries that are zero up to rounding from dominating.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}


/// Compares tape gradients with central differences for every input of a
/// scalar function built on a fresh [`Graph`]. Returns the largest relative
/// error over all inputs.
pub fn graph_gradient_error(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut failure = None;
        let numeric = finite_difference_gradient(
            |probe| {
                let mut h = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| h.leaf(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                match build(&mut h, &vs) {
                    Ok(l) => h.value(l).item(),
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            x,
            step,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    Ok(worst)
}
