//! Finite-difference gradient verification.
//!
//! Every differentiable building block in this crate is validated against
//! a central-difference oracle: perturb one scalar input by ±h, re-run the
//! forward pass, and compare the slope against the backward sweep's
//! analytic gradient. The helpers here keep those checks uniform — same
//! step size, same relative-error definition, same probe selection — so
//! test tolerances mean the same thing everywhere.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// The floor keeps the measure meaningful when both derivatives are tiny:
/// two near-zero values agree rather than dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients of a scalar objective against central
/// differences at the given flat probe indices of one input tensor.
///
/// `f` must re-evaluate the objective from scratch for a perturbed copy of
/// the tensor. Returns the worst relative error over all probes.
pub fn check_tensor_gradient(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x0: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    probes: &[usize],
    h: f64,
) -> f64 {
    assert_eq!(
        analytic.shape(),
        x0.shape(),
        "analytic gradient shape differs from the input"
    );
    let base = x0
        .as_slice()
        .expect("gradient checks require standard-layout tensors");
    let grad = analytic.as_slice().expect("standard-layout gradient");
    let mut worst = 0.0f64;
    for &i in probes {
        assert!(i < base.len(), "probe index {i} out of range");
        let mut eval = |v: f64| {
            let mut x = x0.clone();
            x.as_slice_mut().expect("standard layout")[i] = v;
            f(&x)
        };
        let numeric = central_diff(&mut eval, base[i], h);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    worst
}

/// Draw `count` distinct probe indices out of `len` slots, deterministic
/// in the RNG state. Returns every index when `count >= len`.
pub fn probe_indices(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let i = rng.random_range(0..len);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}
