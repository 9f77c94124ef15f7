//! The power operator at exponent 1 must reproduce plain uniform
//! quantization exactly, both at the tensor level and through a whole
//! quantized forward pass.

mod common;

use common::{gaussian, gaussian2, uniform_fake_quantize_reference, uniform_quantize_reference};
use powq_core::model::{
    evaluate, forward_fp, Activation, Dataset, DenseLayer, ModelSpec, QuantPolicy,
};
use powq_core::quant::{quantize, QuantConfig};
use powq_core::tensor::{Granularity, Tensor};

#[test]
fn power_at_one_is_bit_identical_to_uniform_reference() {
    let mut k = 0u64;
    for bits in 2u8..=8 {
        for seed in 0..200u64 {
            let n = 16 + ((seed * 7) % 113) as usize;
            let x = gaussian(n, 1000 + k);
            k += 1;
            let cfg = QuantConfig::new(bits, 1.0, Granularity::PerTensor).unwrap();
            let q = quantize(&x, &cfg).unwrap();
            let (ref_codes, ref_scale) = uniform_quantize_reference(&x, bits);
            assert_eq!(q.codes(), ref_codes.as_slice(), "bits={bits} seed={seed}");
            assert_eq!(q.scales()[0], ref_scale);
        }
    }
}

#[test]
fn quantized_forward_at_one_matches_uniform_forward_bit_exact() {
    // one dense layer; both routes fake-quantize weights and the input
    // activations, so the logits must agree to the bit
    let w = gaussian2(6, 4, 42);
    let bias = gaussian(4, 43);
    let model = ModelSpec::new(
        "eq".into(),
        vec![DenseLayer {
            weights: w.clone(),
            bias: bias.clone(),
            activation: Activation::Identity,
        }],
    )
    .unwrap();
    let x = gaussian2(32, 6, 44);

    let mut policy = QuantPolicy::power(1, 4, 4, 1.0, false).unwrap();
    policy.calibrate(&model, &x).unwrap();
    let got = powq_core::model::forward_quant(&model, &policy, &x).unwrap();

    // dedicated uniform route: reference fake-quant of weights and inputs
    let wq = uniform_fake_quantize_reference(&w, 4);
    let xq = uniform_fake_quantize_reference(&x, 4);
    let uniform_model = ModelSpec::new(
        "uniform".into(),
        vec![DenseLayer {
            weights: wq,
            bias,
            activation: Activation::Identity,
        }],
    )
    .unwrap();
    let want = forward_fp(&uniform_model, &xq).unwrap();
    assert_eq!(got.data(), want.data());
}

#[test]
fn pass_through_policy_accuracy_equals_full_precision() {
    let ds_feat = gaussian2(64, 5, 7);
    let labels: Vec<usize> = (0..64).map(|i| i % 3).collect();
    let ds = Dataset::new(ds_feat, labels, 3).unwrap();
    let model = ModelSpec::new(
        "acc".into(),
        vec![DenseLayer {
            weights: gaussian2(5, 3, 8),
            bias: Tensor::zeros(vec![3]),
            activation: Activation::Identity,
        }],
    )
    .unwrap();
    let fp = evaluate(&model, &ds, None).unwrap();
    let pt = evaluate(&model, &ds, Some(&QuantPolicy::disabled(1))).unwrap();
    assert_eq!(fp, pt);
}
