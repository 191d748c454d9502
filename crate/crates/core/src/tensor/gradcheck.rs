//! Central finite-difference gradient oracle, used by tests only. Runs in
//! f64 where truncation plus roundoff stays around 1e-10, far under the
//! 1e-5 acceptance bar.

use super::nn::LayerParams;
use super::{Element, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `loss` at `x0`: (f(x+h e_i) - f(x-h e_i)) / 2h.
/// The closure receives the full parameter vector each call.
pub fn central_differences(x0: &[f64], h: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut out = vec![0f64; x0.len()];
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let up = loss(&x);
        x[i] = x0[i] - h;
        let down = loss(&x);
        x[i] = x0[i];
        out[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Worst relative error between analytic and numeric gradients. Pairs where
/// both sides are effectively zero (< 1e-7) contribute zero error.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}

pub fn flatten_values<E: Element>(params: &[&LayerParams<E>]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| p.value.data().iter().map(|v| v.as_f64()))
        .collect()
}

pub fn flatten_grads<E: Element>(params: &[&LayerParams<E>]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| {
            p.grad
                .as_ref()
                .unwrap_or_else(|| panic!("parameter {} has no gradient", p.name))
                .iter()
                .map(|v| v.as_f64())
        })
        .collect()
}

pub fn write_values<E: Element>(params: &mut [&mut LayerParams<E>], flat: &[f64]) {
    let mut offset = 0;
    for p in params.iter_mut() {
        let n = p.value.numel();
        let shape = p.value.shape().to_vec();
        let data: Vec<E> = flat[offset..offset + n].iter().map(|&v| E::of_f64(v)).collect();
        p.set_value(Tensor::new(data, &shape));
        offset += n;
    }
    assert_eq!(offset, flat.len(), "flat vector length mismatch");
}
