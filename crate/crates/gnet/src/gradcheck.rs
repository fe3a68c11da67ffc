//! Finite-difference oracle for gradient verification.
//!
//! `finite_diff` estimates the gradient of a scalar-valued function of a
//! [`ParameterStore`] by central differences, one coordinate at a time.
//! Independent of the tape on purpose: it only re-evaluates the forward
//! function, so agreement with `Tape::backward` is real evidence.

use std::collections::BTreeMap;

use crate::nn::ParameterStore;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `store`, one entry per parameter.
pub fn finite_diff(
    store: &ParameterStore,
    mut f: impl FnMut(&ParameterStore) -> f64,
    step: f64,
) -> BTreeMap<String, Tensor> {
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = store.get(&name).unwrap().len();
        let mut grad = store.get(&name).unwrap().zeros_like();
        for i in 0..n {
            let orig = work.get(&name).unwrap().data[i];
            work.get_mut(&name).unwrap().data[i] = orig + step;
            let plus = f(&work);
            work.get_mut(&name).unwrap().data[i] = orig - step;
            let minus = f(&work);
            work.get_mut(&name).unwrap().data[i] = orig;
            grad.data[i] = (plus - minus) / (2.0 * step);
        }
        out.insert(name, grad);
    }
    out
}

/// Relative error with a small absolute floor, so near-zero pairs (for
/// example gradients killed by a ReLU) compare against the floor instead of
/// dividing by noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Worst relative error over every coordinate of every parameter present in
/// either map; an entry missing on one side is treated as zeros.
pub fn max_rel_error(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
) -> f64 {
    let mut worst: f64 = 0.0;
    let keys: std::collections::BTreeSet<&String> =
        analytic.keys().chain(numeric.keys()).collect();
    for key in keys {
        match (analytic.get(key), numeric.get(key)) {
            (Some(a), Some(n)) => {
                for (&x, &y) in a.data.iter().zip(n.data.iter()) {
                    worst = worst.max(relative_error(x, y));
                }
            }
            (Some(t), None) | (None, Some(t)) => {
                for &x in t.data.iter() {
                    worst = worst.max(relative_error(x, 0.0));
                }
            }
            (None, None) => unreachable!(),
        }
    }
    worst
}
