//! Quantized model bundles: per-layer integer weight codes plus activation
//! quantizers with scales frozen from a calibration pass.

use super::{
    accuracy_from_logits, dense_forward, Activation, Dataset, DenseLayer, ModelError, ModelSpec,
    QuantPolicy,
};
use crate::quant::{dequantize, fake_quantize_frozen, quantize, QuantizedTensor};
use crate::tensor::Tensor;

/// Input-activation quantizer of one layer. `frozen_max` is the running
/// max-abs over the calibration set; absent until calibration.
#[derive(Debug, Clone)]
pub struct ActQuant {
    pub bits: u8,
    pub exponent: f64,
    pub frozen_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct QuantizedLayer {
    pub weight: QuantizedTensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// A model whose weights live as integer codes; forward passes dequantize
/// weights and fake-quantize activations against frozen scales.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub name: String,
    pub layers: Vec<QuantizedLayer>,
    pub act: Vec<ActQuant>,
}

impl QuantizedModel {
    /// Naive quantization of `model` under `policy` (no optimization).
    /// Frozen activation scales are copied from the policy when present.
    pub fn from_policy(model: &ModelSpec, policy: &QuantPolicy) -> Result<Self, ModelError> {
        if policy.weight.len() != model.num_layers() {
            return Err(ModelError::PolicyLayers {
                expected: model.num_layers(),
                got: policy.weight.len(),
            });
        }
        let mut layers = Vec::with_capacity(model.num_layers());
        let mut act = Vec::with_capacity(model.num_layers());
        for (l, layer) in model.layers.iter().enumerate() {
            layers.push(QuantizedLayer {
                weight: quantize(&layer.weights, &policy.weight[l])?,
                bias: layer.bias.clone(),
                activation: layer.activation,
            });
            act.push(ActQuant {
                bits: policy.activation[l].bits(),
                exponent: policy.activation[l].exponent(),
                frozen_max: policy.frozen_act_max.as_ref().map(|m| m[l]),
            });
        }
        Ok(QuantizedModel {
            name: model.name.clone(),
            layers,
            act,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn is_calibrated(&self) -> bool {
        self.act.iter().all(|a| a.frozen_max.is_some())
    }

    /// Freeze activation scales to the running max over `calib`, layer by
    /// layer through the quantized forward.
    pub fn calibrate(&mut self, calib: &Tensor) -> Result<(), ModelError> {
        let mut cur = calib.clone();
        for l in 0..self.layers.len() {
            let m = cur.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
            self.act[l].frozen_max = Some(m);
            cur = self.layer_forward(l, &cur)?;
        }
        Ok(())
    }

    fn layer_forward(&self, l: usize, x: &Tensor) -> Result<Tensor, ModelError> {
        let aq = &self.act[l];
        let frozen = aq.frozen_max.ok_or(ModelError::MissingActivationScales)?;
        let xq = fake_quantize_frozen(x, frozen, aq.bits, aq.exponent);
        let wq = dequantize(&self.layers[l].weight);
        let layer = DenseLayer {
            weights: wq,
            bias: self.layers[l].bias.clone(),
            activation: self.layers[l].activation,
        };
        dense_forward(&xq, &layer)
    }

    /// Quantized forward pass; requires frozen activation scales.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        if !self.is_calibrated() {
            return Err(ModelError::MissingActivationScales);
        }
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(ModelError::InputDim {
                expected: self.input_dim(),
                got: if x.shape().len() == 2 { x.cols() } else { 0 },
            });
        }
        let mut cur = x.clone();
        for l in 0..self.layers.len() {
            cur = self.layer_forward(l, &cur)?;
        }
        Ok(cur)
    }

    /// Top-1 accuracy on `dataset` through the quantized forward.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<f64, ModelError> {
        let logits = self.forward(dataset.features())?;
        Ok(accuracy_from_logits(&logits, dataset.labels()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_fp, make_blobs, train_fixture, FixtureSpec};

    fn fixture() -> (ModelSpec, Dataset) {
        let ds = make_blobs(3, 768, 6, 4.0, 31).unwrap();
        let spec = FixtureSpec {
            name: "q".into(),
            input_dim: 6,
            hidden: vec![16],
            num_classes: 3,
        };
        let model = train_fixture(&spec, &ds, 12, 3).unwrap();
        (model, ds)
    }

    #[test]
    fn uncalibrated_forward_errors() {
        let (model, ds) = fixture();
        let policy = QuantPolicy::uniform(model.num_layers(), 4, 4, true).unwrap();
        let qm = QuantizedModel::from_policy(&model, &policy).unwrap();
        assert!(matches!(
            qm.forward(ds.features()),
            Err(ModelError::MissingActivationScales)
        ));
    }

    #[test]
    fn calibrated_eval_runs_and_is_deterministic() {
        let (model, ds) = fixture();
        let policy = QuantPolicy::uniform(model.num_layers(), 8, 8, true).unwrap();
        let mut qm = QuantizedModel::from_policy(&model, &policy).unwrap();
        qm.calibrate(ds.features()).unwrap();
        let a = qm.evaluate(&ds).unwrap();
        let b = qm.evaluate(&ds).unwrap();
        assert_eq!(a, b);
        // 8-bit quantization of an easy fixture stays close to fp accuracy
        let fp = accuracy_from_logits(&forward_fp(&model, ds.features()).unwrap(), ds.labels());
        assert!((fp - a).abs() < 0.05, "fp {fp} vs q8 {a}");
    }

    #[test]
    fn row_permutation_invariance() {
        let (model, ds) = fixture();
        let policy = QuantPolicy::uniform(model.num_layers(), 4, 4, true).unwrap();
        let mut qm = QuantizedModel::from_policy(&model, &policy).unwrap();
        qm.calibrate(ds.features()).unwrap();
        let x = ds.features().select_rows(&[0, 1, 2, 3]);
        let y = qm.forward(&x).unwrap();
        let perm = ds.features().select_rows(&[3, 0, 2, 1]);
        let yp = qm.forward(&perm).unwrap();
        for (orig, p) in [(0usize, 1usize), (1, 3), (2, 2), (3, 0)] {
            for j in 0..y.cols() {
                assert_eq!(y.get2(orig, j), yp.get2(p, j));
            }
        }
    }
}
