//! Central finite differences for gradient verification.
//!
//! Independent of the tape's backward pass: it only perturbs parameter
//! values and re-evaluates a forward closure, so it can serve as the
//! oracle that backward is checked against.

use crate::autodiff::{ParamStore, Tensor};
use crate::tagger::TaggerModel;

/// Relative error with a unit floor: |a - b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Central-difference gradient of `loss` w.r.t. every element of the named
/// parameter in a bare store.
pub fn finite_diff_grad_store(
    store: &mut ParamStore,
    name: &str,
    eps: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Tensor {
    let id = store.id(name).expect("parameter exists");
    let n = store.value(id).numel();
    let shape = store.value(id).shape().to_vec();
    let mut grad = vec![0.0; n];
    for j in 0..n {
        let original = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = original + eps;
        let plus = loss(store);
        store.value_mut(id).data_mut()[j] = original - eps;
        let minus = loss(store);
        store.value_mut(id).data_mut()[j] = original;
        grad[j] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(shape, grad).expect("grad shape")
}

/// Central-difference gradient of `loss` w.r.t. every element of the named
/// parameter: (f(v + eps) - f(v - eps)) / (2 eps).
pub fn finite_diff_grad(
    model: &mut TaggerModel,
    name: &str,
    eps: f64,
    mut loss: impl FnMut(&TaggerModel) -> f64,
) -> Tensor {
    let id = model.store().id(name).expect("parameter exists");
    let n = model.store().value(id).numel();
    let shape = model.store().value(id).shape().to_vec();
    let mut grad = vec![0.0; n];
    for j in 0..n {
        let original = model.store().value(id).data()[j];
        model.store_mut().value_mut(id).data_mut()[j] = original + eps;
        let plus = loss(model);
        model.store_mut().value_mut(id).data_mut()[j] = original - eps;
        let minus = loss(model);
        model.store_mut().value_mut(id).data_mut()[j] = original;
        grad[j] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(shape, grad).expect("grad shape")
}

/// Check every parameter's analytic gradient (already accumulated in the
/// store) against finite differences of `loss`. Returns the worst relative
/// error observed.
pub fn max_grad_error(
    model: &mut TaggerModel,
    eps: f64,
    mut loss: impl FnMut(&TaggerModel) -> f64,
) -> f64 {
    let names: Vec<String> = model.all_param_names();
    let mut worst = 0.0f64;
    for name in names {
        let numeric = finite_diff_grad(model, &name, eps, &mut loss);
        let id = model.store().id(&name).expect("parameter exists");
        for (a, n) in model.store().grad(id).data().iter().zip(numeric.data()) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}
