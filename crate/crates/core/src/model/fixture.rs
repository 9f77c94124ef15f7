//! Desk-scale training fixture: a seeded MLP trained with plain mini-batch
//! gradient descent on softmax cross-entropy, standing in for a pretrained
//! model.

use super::{accuracy_from_logits, forward_fp, Activation, Dataset, DenseLayer, ModelError, ModelSpec};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Architecture of a fixture MLP: `input_dim -> hidden... -> num_classes`,
/// ReLU between layers, identity logits.
#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub name: String,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

const BATCH: usize = 32;
const LEARNING_RATE: f64 = 0.05;
const ACCURACY_FLOOR: f64 = 0.9;

struct TrainLayer {
    w: Vec<f64>, // [in, out]
    b: Vec<f64>, // [out]
    in_dim: usize,
    out_dim: usize,
    relu: bool,
}

/// Train the fixture with plain mini-batch gradient descent. Deterministic
/// for a fixed seed; errors if the final train accuracy is below 90%.
pub fn train_fixture(
    spec: &FixtureSpec,
    dataset: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<ModelSpec, ModelError> {
    if dataset.input_dim() != spec.input_dim {
        return Err(ModelError::InputDim {
            expected: spec.input_dim,
            got: dataset.input_dim(),
        });
    }
    if dataset.num_classes() > spec.num_classes {
        return Err(ModelError::Dataset(format!(
            "dataset has {} classes, fixture outputs {}",
            dataset.num_classes(),
            spec.num_classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![spec.input_dim];
    dims.extend_from_slice(&spec.hidden);
    dims.push(spec.num_classes);

    let mut layers: Vec<TrainLayer> = Vec::new();
    for i in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        layers.push(TrainLayer {
            w,
            b: vec![0.0; fan_out],
            in_dim: fan_in,
            out_dim: fan_out,
            relu: i + 2 < dims.len(),
        });
    }

    let n = dataset.len();
    let feat = dataset.features();
    let labels = dataset.labels();
    let mut order: Vec<usize> = (0..n).collect();

    for _epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH) {
            let bsz = chunk.len();
            // forward, caching pre-activation inputs of every layer
            let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
            let mut x: Vec<f64> = Vec::with_capacity(bsz * spec.input_dim);
            for &r in chunk {
                for j in 0..spec.input_dim {
                    x.push(feat.get2(r, j) as f64);
                }
            }
            acts.push(x);
            for layer in &layers {
                let x = acts.last().unwrap();
                let mut y = vec![0.0f64; bsz * layer.out_dim];
                for i in 0..bsz {
                    for j in 0..layer.out_dim {
                        let mut acc = layer.b[j];
                        for k in 0..layer.in_dim {
                            acc += x[i * layer.in_dim + k] * layer.w[k * layer.out_dim + j];
                        }
                        y[i * layer.out_dim + j] = if layer.relu { acc.max(0.0) } else { acc };
                    }
                }
                acts.push(y);
            }

            // softmax cross-entropy gradient at the logits
            let k = spec.num_classes;
            let logits = acts.last().unwrap();
            let mut grad = vec![0.0f64; bsz * k];
            for i in 0..bsz {
                let row = &logits[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..k {
                    let p = exps[j] / denom;
                    let target = if labels[chunk[i]] == j { 1.0 } else { 0.0 };
                    grad[i * k + j] = (p - target) / bsz as f64;
                }
            }

            // backward
            for li in (0..layers.len()).rev() {
                let (x, y) = (&acts[li], &acts[li + 1]);
                let layer = &layers[li];
                let mut g = grad;
                if layer.relu {
                    for (gi, &yi) in g.iter_mut().zip(y.iter()) {
                        if yi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                }
                let mut gx = vec![0.0f64; bsz * layer.in_dim];
                let mut gw = vec![0.0f64; layer.in_dim * layer.out_dim];
                let mut gb = vec![0.0f64; layer.out_dim];
                for i in 0..bsz {
                    for j in 0..layer.out_dim {
                        let gij = g[i * layer.out_dim + j];
                        gb[j] += gij;
                        for kk in 0..layer.in_dim {
                            gw[kk * layer.out_dim + j] += x[i * layer.in_dim + kk] * gij;
                            gx[i * layer.in_dim + kk] += layer.w[kk * layer.out_dim + j] * gij;
                        }
                    }
                }
                let layer = &mut layers[li];
                for (w, gwv) in layer.w.iter_mut().zip(&gw) {
                    *w -= LEARNING_RATE * gwv;
                }
                for (b, gbv) in layer.b.iter_mut().zip(&gb) {
                    *b -= LEARNING_RATE * gbv;
                }
                grad = gx;
            }
        }
    }

    let model = ModelSpec::new(
        spec.name.clone(),
        layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(DenseLayer {
                    weights: Tensor::new(
                        vec![l.in_dim, l.out_dim],
                        l.w.iter().map(|&v| v as f32).collect(),
                    )?,
                    bias: Tensor::new(vec![l.out_dim], l.b.iter().map(|&v| v as f32).collect())?,
                    activation: if i + 1 < layers.len() {
                        Activation::Relu
                    } else {
                        Activation::Identity
                    },
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?,
    )?;

    let acc = accuracy_from_logits(&forward_fp(&model, dataset.features())?, dataset.labels());
    if acc < ACCURACY_FLOOR {
        return Err(ModelError::Fixture(format!(
            "train accuracy {acc:.3} below {ACCURACY_FLOOR}"
        )));
    }
    Ok(model)
}
