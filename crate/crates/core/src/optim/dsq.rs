//! Differentiable soft quantization and the rectified sigmoid.
//!
//! `dsq` is a smooth, monotone surrogate for rounding: it fixes every
//! integer exactly, is odd-symmetric around half-integers, and converges
//! pointwise to half-away rounding as the steepness grows.

/// `clip(sigmoid(x) * 1.2 - 0.1, 0, 1)`: saturates exactly at 0 and 1.
#[inline]
pub fn rectified_sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp()) * 1.2 - 0.1).clamp(0.0, 1.0)
}

/// Derivative of [`rectified_sigmoid`]; zero in the clipped regions.
#[inline]
pub fn rectified_sigmoid_grad(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    let raw = sig * 1.2 - 0.1;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        1.2 * sig * (1.0 - sig)
    }
}

/// Rounding penalty: `lambda * sum(1 - |2 sigma(e) - 1|^beta)`; zero where
/// the rectified sigmoid saturates, maximal at 0.5.
pub fn adaround_regularizer(epsilon: &[f64], lambda: f64, beta: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for &e in epsilon {
        let q = 2.0 * rectified_sigmoid(e) - 1.0;
        acc += 1.0 - q.abs().powf(beta);
    }
    lambda * acc
}

/// Soft quantization: `tanh(beta (e - 1/2 - floor(e))) / (2 tanh(beta/2))
/// + floor(e) + 1/2`. Maps `[n, n+1]` into itself for every integer `n`.
#[inline]
pub fn dsq(epsilon: f64, beta: f64) -> f64 {
    let fl = epsilon.floor();
    let u = epsilon - 0.5 - fl;
    (beta * u).tanh() / (2.0 * (beta / 2.0).tanh()) + fl + 0.5
}

/// Analytic derivative of [`dsq`] in `epsilon` (the floor term has zero
/// derivative between integers).
#[inline]
pub fn dsq_grad(epsilon: f64, beta: f64) -> f64 {
    let fl = epsilon.floor();
    let u = epsilon - 0.5 - fl;
    let t = (beta * u).tanh();
    beta * (1.0 - t * t) / (2.0 * (beta / 2.0).tanh())
}
