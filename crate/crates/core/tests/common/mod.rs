//! Shared test oracles, independent of the library's quantization path.
//! Compiled into several test targets; not every target uses every helper.
#![allow(dead_code)]

use powq_core::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Dedicated uniform (exponent-free) quantizer: `round(x / s)` with
/// `s = max|x| / (2^{b-1}-1)`, clamped to the symmetric range. Written
/// from the definition, independent of the power pipeline.
pub fn uniform_quantize_reference(x: &Tensor, bits: u8) -> (Vec<i8>, f64) {
    let b = ((1i32 << (bits - 1)) - 1) as f64;
    let max_abs = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    let s = if max_abs == 0.0 { 1.0 } else { max_abs / b };
    let codes = x
        .data()
        .iter()
        .map(|&v| (v as f64 / s).round().clamp(-b, b) as i8)
        .collect();
    (codes, s)
}

/// Fake quantization through the dedicated uniform reference.
pub fn uniform_fake_quantize_reference(x: &Tensor, bits: u8) -> Tensor {
    let (codes, s) = uniform_quantize_reference(x, bits);
    Tensor::new(
        x.shape().to_vec(),
        codes.iter().map(|&c| (c as f64 * s) as f32).collect(),
    )
    .unwrap()
}

pub fn gaussian(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n)
        .map(|_| rand::Rng::sample::<f32, _>(&mut rng, StandardNormal))
        .collect();
    Tensor::from_vec(data).unwrap()
}

pub fn gaussian2(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rand::Rng::sample::<f32, _>(&mut rng, StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}
