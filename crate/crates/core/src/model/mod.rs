//! Dense-network runtime: model structure, full-precision and
//! fake-quantized forward passes, accuracy evaluation, dataset and model
//! i/o, and a desk-scale training fixture.

mod dataset;
mod fixture;
mod io;
mod quantized;

pub use dataset::{make_blobs, Dataset};
pub use fixture::{train_fixture, FixtureSpec};
pub use io::{load_bundle, load_model, save_bundle, save_model};
pub use quantized::{ActQuant, QuantizedLayer, QuantizedModel};

use crate::quant::{fake_quantize, fake_quantize_frozen, QuantConfig, QuantError};
use crate::tensor::{matmul, relu, Granularity, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("dimension chain break at layer {layer}: expected input {expected}, got {got}")]
    DimChain {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("weight blob truncated: expected {expected} bytes, got {actual}")]
    TruncatedBlob { expected: usize, actual: usize },
    #[error("model input dimension {expected} incompatible with batch of width {got}")]
    InputDim { expected: usize, got: usize },
    #[error("policy covers {got} layers but model has {expected}")]
    PolicyLayers { expected: usize, got: usize },
    #[error("no frozen activation scales: calibrate the policy or bundle first")]
    MissingActivationScales,
    #[error("fixture training failed: {0}; try more epochs")]
    Fixture(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Layer activation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(ModelError::Manifest(format!("unknown activation {other:?}"))),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => relu(x),
            Activation::Identity => x.clone(),
        }
    }
}

/// One dense layer: weights `[in, out]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// An ordered stack of dense layers with chained dimensions; the final
/// activation is identity (logits).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<DenseLayer>,
}

impl ModelSpec {
    pub fn new(name: String, layers: Vec<DenseLayer>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Manifest("model has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(ModelError::DimChain {
                    layer: i + 1,
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                });
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != [l.out_dim()] {
                return Err(ModelError::Manifest(format!(
                    "layer {i} bias shape {:?} does not match output dim {}",
                    l.bias.shape(),
                    l.out_dim()
                )));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(ModelError::Manifest(
                "final layer activation must be identity (logits)".into(),
            ));
        }
        Ok(ModelSpec { name, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn weight_tensors(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| l.weights.clone()).collect()
    }
}

/// Dense layer forward: `matmul` then bias add, then activation.
pub(crate) fn dense_forward(x: &Tensor, layer: &DenseLayer) -> Result<Tensor, ModelError> {
    let y = matmul(x, &layer.weights)?;
    let m = layer.out_dim();
    let mut data = y.data().to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        *v += layer.bias.data()[i % m];
    }
    let pre = Tensor::new(y.shape().to_vec(), data)?;
    Ok(layer.activation.apply(&pre))
}

/// Full-precision forward pass; returns logits `[B, out]`.
pub fn forward_fp(model: &ModelSpec, x: &Tensor) -> Result<Tensor, ModelError> {
    if x.shape().len() != 2 || x.cols() != model.input_dim() {
        return Err(ModelError::InputDim {
            expected: model.input_dim(),
            got: if x.shape().len() == 2 { x.cols() } else { 0 },
        });
    }
    let mut cur = x.clone();
    for layer in &model.layers {
        cur = dense_forward(&cur, layer)?;
    }
    Ok(cur)
}

/// Per-layer quantization configuration for weights and activations, with
/// the first and last layers optionally pinned to 8 bits.
#[derive(Debug, Clone)]
pub struct QuantPolicy {
    pub weight: Vec<QuantConfig>,
    pub activation: Vec<QuantConfig>,
    /// Frozen per-layer input max-abs, set by [`QuantPolicy::calibrate`].
    pub frozen_act_max: Option<Vec<f64>>,
    /// When set the policy is a no-op and the forward equals full precision.
    pub pass_through: bool,
}

impl QuantPolicy {
    /// A disabled policy: quantized forward equals the full-precision one.
    pub fn disabled(num_layers: usize) -> Self {
        let cfg = QuantConfig::uniform(8).expect("static config");
        QuantPolicy {
            weight: vec![cfg; num_layers],
            activation: vec![cfg; num_layers],
            frozen_act_max: None,
            pass_through: true,
        }
    }

    /// Power quantization at one exponent for all layers, with the standard
    /// 8-bit override for the first and last layers when `first_last_8bit`.
    pub fn power(
        num_layers: usize,
        wbits: u8,
        abits: u8,
        exponent: f64,
        first_last_8bit: bool,
    ) -> Result<Self, QuantError> {
        let mut weight = Vec::with_capacity(num_layers);
        let mut activation = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let edge = first_last_8bit && (l == 0 || l + 1 == num_layers);
            let wb = if edge { 8 } else { wbits };
            let ab = if edge { 8 } else { abits };
            weight.push(QuantConfig::new(wb, exponent, Granularity::PerTensor)?);
            activation.push(QuantConfig::new(ab, exponent, Granularity::PerTensor)?);
        }
        Ok(QuantPolicy {
            weight,
            activation,
            frozen_act_max: None,
            pass_through: false,
        })
    }

    /// Uniform quantization (exponent 1) at the given widths.
    pub fn uniform(
        num_layers: usize,
        wbits: u8,
        abits: u8,
        first_last_8bit: bool,
    ) -> Result<Self, QuantError> {
        QuantPolicy::power(num_layers, wbits, abits, 1.0, first_last_8bit)
    }

    fn check_covers(&self, model: &ModelSpec) -> Result<(), ModelError> {
        if self.weight.len() != model.num_layers() || self.activation.len() != model.num_layers() {
            return Err(ModelError::PolicyLayers {
                expected: model.num_layers(),
                got: self.weight.len(),
            });
        }
        Ok(())
    }

    /// Freeze per-layer activation scales to the running max over the
    /// calibration set, computed through the quantized forward.
    pub fn calibrate(&mut self, model: &ModelSpec, calib: &Tensor) -> Result<(), ModelError> {
        self.check_covers(model)?;
        if self.pass_through {
            return Ok(());
        }
        let mut maxes = Vec::with_capacity(model.num_layers());
        let mut cur = calib.clone();
        for (l, layer) in model.layers.iter().enumerate() {
            let m = cur.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
            maxes.push(m);
            let acfg = &self.activation[l];
            let xq = fake_quantize_frozen(&cur, m, acfg.bits(), acfg.exponent());
            let wq = fake_quantize(&layer.weights, &self.weight[l])?;
            let fq_layer = DenseLayer {
                weights: wq,
                bias: layer.bias.clone(),
                activation: layer.activation,
            };
            cur = dense_forward(&xq, &fq_layer)?;
        }
        self.frozen_act_max = Some(maxes);
        Ok(())
    }
}

/// Fake-quantized forward pass: per layer the input activations are
/// fake-quantized against the frozen scales, weights are fake-quantized per
/// policy, and the dense forward runs in floating point.
pub fn forward_quant(
    model: &ModelSpec,
    policy: &QuantPolicy,
    x: &Tensor,
) -> Result<Tensor, ModelError> {
    policy.check_covers(model)?;
    if policy.pass_through {
        return forward_fp(model, x);
    }
    let frozen = policy
        .frozen_act_max
        .as_ref()
        .ok_or(ModelError::MissingActivationScales)?;
    let mut cur = x.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let acfg = &policy.activation[l];
        let xq = fake_quantize_frozen(&cur, frozen[l], acfg.bits(), acfg.exponent());
        let wq = fake_quantize(&layer.weights, &policy.weight[l])?;
        let fq_layer = DenseLayer {
            weights: wq,
            bias: layer.bias.clone(),
            activation: layer.activation,
        };
        cur = dense_forward(&xq, &fq_layer)?;
    }
    Ok(cur)
}

/// Top-1 accuracy of logits against labels; ties resolve to the lowest
/// class index.
pub(crate) fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.cols();
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let mut best = 0usize;
        for j in 1..k {
            if logits.get2(row, j) > logits.get2(row, best) {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Top-1 accuracy of `model` on `dataset`, full precision when `policy` is
/// `None`, fake-quantized otherwise.
pub fn evaluate(
    model: &ModelSpec,
    dataset: &Dataset,
    policy: Option<&QuantPolicy>,
) -> Result<f64, ModelError> {
    let logits = match policy {
        None => forward_fp(model, dataset.features())?,
        Some(p) => forward_quant(model, p, dataset.features())?,
    };
    Ok(accuracy_from_logits(&logits, dataset.labels()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(n: usize) -> ModelSpec {
        ModelSpec::new(
            "id".into(),
            vec![DenseLayer {
                weights: Tensor::identity(n),
                bias: Tensor::zeros(vec![n]),
                activation: Activation::Identity,
            }],
        )
        .unwrap()
    }

    #[test]
    fn identity_model_passes_input_through() {
        let model = identity_model(3);
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        assert_eq!(forward_fp(&model, &x).unwrap(), x);
    }

    #[test]
    fn single_layer_matches_matmul_plus_bias_oracle() {
        let w = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let b = Tensor::from_vec(vec![0.1, -0.2]).unwrap();
        let model = ModelSpec::new(
            "m".into(),
            vec![DenseLayer {
                weights: w.clone(),
                bias: b.clone(),
                activation: Activation::Identity,
            }],
        )
        .unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, -0.5, 0.25, 3.0, -1.0]).unwrap();
        let got = forward_fp(&model, &x).unwrap();
        let mm = matmul(&x, &w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(got.get2(i, j), mm.get2(i, j) + b.data()[j]);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = identity_model(4);
        let x = Tensor::new(vec![1, 4], vec![0.3, -0.7, 0.11, 9.0]).unwrap();
        let a = forward_fp(&model, &x).unwrap();
        let b = forward_fp(&model, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dim_chain_break_detected() {
        let err = ModelSpec::new(
            "bad".into(),
            vec![
                DenseLayer {
                    weights: Tensor::zeros(vec![2, 3]),
                    bias: Tensor::zeros(vec![3]),
                    activation: Activation::Relu,
                },
                DenseLayer {
                    weights: Tensor::zeros(vec![4, 2]),
                    bias: Tensor::zeros(vec![2]),
                    activation: Activation::Identity,
                },
            ],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::DimChain { layer: 1, expected: 3, got: 4 }));
    }

    #[test]
    fn pass_through_policy_equals_fp_bit_exact() {
        let model = identity_model(3);
        let x = Tensor::new(vec![2, 3], vec![0.7, -0.3, 2.0, 1.5, 0.0, -9.25]).unwrap();
        let policy = QuantPolicy::disabled(model.num_layers());
        let fp = forward_fp(&model, &x).unwrap();
        let q = forward_quant(&model, &policy, &x).unwrap();
        assert_eq!(fp, q);
    }

    #[test]
    fn quantized_forward_without_scales_errors() {
        let model = identity_model(2);
        let policy = QuantPolicy::uniform(1, 4, 4, false).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let err = forward_quant(&model, &policy, &x).unwrap_err();
        assert!(matches!(err, ModelError::MissingActivationScales));
        assert!(err.to_string().contains("calibrate"));
    }

    #[test]
    fn representable_model_is_bit_near_fp() {
        // Weights and activations on the uniform grid with extrema present.
        let w = Tensor::new(vec![2, 2], vec![1.75, -0.25, 0.5, -1.75]).unwrap();
        let model = ModelSpec::new(
            "grid".into(),
            vec![DenseLayer {
                weights: w,
                bias: Tensor::zeros(vec![2]),
                activation: Activation::Identity,
            }],
        )
        .unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.75, 0.25, -0.75, 1.0]).unwrap();
        let mut policy = QuantPolicy::uniform(1, 4, 4, false).unwrap();
        policy.calibrate(&model, &x).unwrap();
        let fp = forward_fp(&model, &x).unwrap();
        let q = forward_quant(&model, &policy, &x).unwrap();
        for (a, b) in fp.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn first_last_override_pins_eight_bits() {
        let policy = QuantPolicy::power(3, 4, 4, 0.5, true).unwrap();
        assert_eq!(policy.weight[0].bits(), 8);
        assert_eq!(policy.weight[1].bits(), 4);
        assert_eq!(policy.weight[2].bits(), 8);
        assert_eq!(policy.activation[0].bits(), 8);
        assert_eq!(policy.activation[2].bits(), 8);
    }

    #[test]
    fn accuracy_ties_break_to_lowest_index() {
        let logits = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(accuracy_from_logits(&logits, &[0, 1]), 1.0);
        assert_eq!(accuracy_from_logits(&logits, &[1, 2]), 0.0);
    }

    #[test]
    fn one_hot_model_scores_perfectly() {
        // weights map feature j to logit j; inputs are one-hot rows of the
        // true class
        let k = 3;
        let model = identity_model(k);
        let mut feats = vec![0.0f32; 9];
        let labels = vec![2usize, 0, 1];
        for (row, &l) in labels.iter().enumerate() {
            feats[row * k + l] = 1.0;
        }
        let ds = Dataset::new(Tensor::new(vec![3, k], feats).unwrap(), labels, k).unwrap();
        assert_eq!(evaluate(&model, &ds, None).unwrap(), 1.0);
    }

    #[test]
    fn constant_model_matches_chance_within_three_sigma() {
        use rand::prelude::*;
        let k = 4;
        let n = 10_000;
        // zero weights and bias: constant logits, ties resolve to class 0
        let model = ModelSpec::new(
            "const".into(),
            vec![DenseLayer {
                weights: Tensor::zeros(vec![2, k]),
                bias: Tensor::zeros(vec![k]),
                activation: Activation::Identity,
            }],
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(404);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let ds = Dataset::new(
            Tensor::new(vec![n, 2], vec![0.5; n * 2]).unwrap(),
            labels,
            k,
        )
        .unwrap();
        let acc = evaluate(&model, &ds, None).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "acc {acc} vs chance {p}");
    }
}
