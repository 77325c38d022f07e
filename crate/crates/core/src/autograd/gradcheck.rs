//! Central finite-difference verification of analytic gradients.

use super::tensor::{Array, Tensor};

/// Comparison of one input's analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or the absolute
    /// difference norm when both gradients vanish.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Checks the gradient of the scalar `f` with respect to every input.
pub fn check(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Array], eps: f64) -> Vec<GradCheck> {
    let leaves: Vec<Tensor> = inputs.iter().map(|a| Tensor::leaf(a.clone())).collect();
    let out = f(&leaves);
    assert_eq!(out.len(), 1, "gradcheck needs a scalar function");
    let grads = out.backward();
    let eval = |vals: &[Array]| -> f64 {
        let ts: Vec<Tensor> = vals.iter().map(|a| Tensor::constant(a.clone())).collect();
        f(&ts).item()
    };
    let mut results = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(leaf) {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; inputs[i].len()],
        };
        let mut vals: Vec<Array> = inputs.to_vec();
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = vals[i].as_slice_memory_order().unwrap()[j];
            vals[i].as_slice_memory_order_mut().unwrap()[j] = orig + eps;
            let fp = eval(&vals);
            vals[i].as_slice_memory_order_mut().unwrap()[j] = orig - eps;
            let fm = eval(&vals);
            vals[i].as_slice_memory_order_mut().unwrap()[j] = orig;
            numeric.push((fp - fm) / (2.0 * eps));
        }
        results.push(GradCheck { analytic, numeric });
    }
    results
}
