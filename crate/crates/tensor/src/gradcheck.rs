//! Central finite-difference verification of analytic parameter gradients.

use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare every parameter gradient produced by `loss_and_grad` against
/// central differences of `loss` with step `h`.
///
/// `loss_and_grad` must zero and then fill the store's gradients.
pub fn grad_check<T, L, G>(
    store: &mut ParamStore<T>,
    loss: L,
    loss_and_grad: G,
    h: f64,
) -> GradCheckReport
where
    T: Scalar,
    L: Fn(&ParamStore<T>) -> T,
    G: Fn(&mut ParamStore<T>) -> T,
{
    loss_and_grad(store);
    let analytic: Vec<Vec<f64>> = store
        .params()
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let step = T::of_f64(h);
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let original = store.params()[pi].value.data()[i];
            store.params_mut()[pi].value.data_mut()[i] = original + step;
            let up = loss(store).as_f64();
            store.params_mut()[pi].value.data_mut()[i] = original - step;
            let down = loss(store).as_f64();
            store.params_mut()[pi].value.data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.params()[pi].name.clone(), i));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{linear, linear_backward};
    use crate::Tensor;

    fn single_layer() -> (ParamStore<f64>, Tensor<f64>) {
        let mut store = ParamStore::new();
        store
            .add(
                "w",
                Tensor::from_vec(&[2, 3], vec![0.3, -0.2, 0.5, 1.1, 0.0, -0.7]).unwrap(),
            )
            .unwrap();
        store
            .add("b", Tensor::from_vec(&[2], vec![0.1, -0.4]).unwrap())
            .unwrap();
        (
            store,
            Tensor::from_vec(&[3], vec![0.9, -1.3, 0.25]).unwrap(),
        )
    }

    fn forward(store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        linear(
            x,
            store.value(crate::ParamId(0)),
            store.value(crate::ParamId(1)),
        )
        .unwrap()
    }

    #[test]
    fn linear_net_is_exact() {
        let (mut store, x) = single_layer();
        let coeffs = [0.7, -1.9];
        let loss = |s: &ParamStore<f64>| {
            forward(s, &x)
                .data()
                .iter()
                .zip(coeffs)
                .map(|(y, c)| y * c)
                .sum::<f64>()
        };
        let loss_and_grad = |s: &mut ParamStore<f64>| {
            s.zero_grad();
            let y = forward(s, &x);
            let g = Tensor::from_vec(&[2], coeffs.to_vec()).unwrap();
            let w = s.value(crate::ParamId(0)).clone();
            let mut gw = Tensor::zeros(&[2, 3]);
            let mut gb = Tensor::zeros(&[2]);
            linear_backward(&x, &w, &g, &mut gw, &mut gb).unwrap();
            *s.grad_mut(crate::ParamId(0)) = gw;
            *s.grad_mut(crate::ParamId(1)) = gb;
            y.data().iter().zip(coeffs).map(|(y, c)| y * c).sum()
        };
        let report = grad_check(&mut store, loss, loss_and_grad, DEFAULT_STEP);
        assert_eq!(report.checked, 8);
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let (mut store, x) = single_layer();
        let loss = |s: &ParamStore<f64>| forward(s, &x).sum();
        let bogus = |s: &mut ParamStore<f64>| {
            s.zero_grad();
            s.grad_mut(crate::ParamId(1)).fill(2.0);
            0.0
        };
        let report = grad_check(&mut store, loss, bogus, DEFAULT_STEP);
        assert!(!report.passes(1e-3));
    }
}
