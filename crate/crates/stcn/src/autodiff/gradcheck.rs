//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker never touches the backward pass: it perturbs one parameter
//! coordinate at a time and re-runs the forward evaluation, so it stays an
//! independent oracle for [`Graph::gradients`].

use std::collections::BTreeMap;

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

/// Central finite differences of `f` at `x` with step `eps`.
pub fn finite_difference<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Worst relative error between reverse-mode and finite-difference
/// gradients over every parameter leaf of `graph`.
///
/// Relative error per coordinate is |a − n| / max(1, |a|, |n|), so
/// near-zero gradients are compared absolutely.
pub fn max_relative_error(graph: &Graph, loss: NodeId, eps: f64) -> Result<f64> {
    let analytic = graph.gradients(loss)?;
    let mut worst: f64 = 0.0;

    for (name, grad) in &analytic {
        let current = graph
            .leaf_value(name)
            .expect("parameter leaves are bound at construction");
        let numeric = finite_difference(
            |xs| {
                let mut bindings = BTreeMap::new();
                bindings.insert(
                    name.clone(),
                    Tensor::new(current.shape().to_vec(), xs.to_vec()).unwrap(),
                );
                let values = graph.evaluate(&bindings).expect("forward re-evaluation");
                values[loss.index()].item()
            },
            current.data(),
            eps,
        );
        for (a, n) in grad.data().iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1.0);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let g = finite_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn small_network_gradcheck() {
        let mut g = Graph::new();
        let w1 = g
            .param("w1", Tensor::from_rows(2, 3, vec![0.3, -0.8, 0.5, 1.1, 0.2, -0.4]).unwrap());
        let w2 = g.param("w2", Tensor::from_rows(3, 1, vec![0.7, -0.2, 0.9]).unwrap());
        let b = g.param("b", Tensor::from_vec(vec![0.1, -0.3, 0.2]));
        let x = g.input("x", Tensor::from_rows(1, 2, vec![0.4, -1.2]).unwrap());

        let h = g.matmul(x, w1).unwrap();
        let h = g.add_bcast(h, b).unwrap();
        let h = g.tanh(h);
        let y = g.matmul(h, w2).unwrap();
        let loss = g.sum(y);

        let err = max_relative_error(&g, loss, 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {}", err);
    }
}
