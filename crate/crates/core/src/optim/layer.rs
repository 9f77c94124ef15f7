//! Layer-wise calibration optimizers.
//!
//! Both optimizers minimize the distance between the full-precision layer
//! output and the quantized layer output on a calibration set, layer by
//! layer. The soft-quantization optimizer learns the quantized weight
//! values as one real tensor in code units (and optionally the power
//! exponent); the rounding baseline learns only whether each floored code
//! rounds up or down.

use super::adam::{AdamParams, AdamScalar, AdamVec};
use super::backward::exponent_backward;
use super::dsq::{
    adaround_regularizer, dsq, dsq_grad, rectified_sigmoid, rectified_sigmoid_grad,
};
use super::scheduler::BetaScheduler;
use super::{Mode, OptConfig, OptimError};
use crate::quant::{
    dequant_value, max_code, scale_from_max, transform_value, QuantConfig, QuantizedTensor,
    EXPONENT_MAX, EXPONENT_MIN,
};
use crate::tensor::{GroupLayout, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Outcome of one layer's optimization.
#[derive(Debug, Clone)]
pub struct LayerOptResult {
    pub weight: QuantizedTensor,
    pub exponent: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_run: usize,
    /// Set when optimization failed to improve and the initial
    /// quantization was restored.
    pub reverted: bool,
}

/// Persistent soft-quantization state: one weight-shaped parameter tensor
/// (the code-domain values) plus its Adam moments, a scalar exponent with
/// scalar moments, and the step counter. No floored-weight copy is kept.
#[derive(Debug, Clone)]
pub struct NupesState {
    epsilon: Vec<f64>,
    adam_epsilon: AdamVec,
    exponent: f64,
    adam_exponent: AdamScalar,
    step: usize,
}

impl NupesState {
    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Scalar Adam state of the exponent.
    pub fn adam_exponent(&self) -> &AdamScalar {
        &self.adam_exponent
    }

    /// Weight-shaped tensors retained across steps, as (name, length):
    /// the parameter itself and the two Adam moments.
    pub fn retained_weight_shaped(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("epsilon", self.epsilon.len()),
            ("adam_m", self.adam_epsilon.first_moment_len()),
            ("adam_v", self.adam_epsilon.second_moment_len()),
        ]
    }

    /// Number of retained weight-shaped tensors that are parameters
    /// rather than optimizer moments.
    pub fn parameter_tensor_count(&self) -> usize {
        1
    }
}

/// Persistent rounding-baseline state: the floored codes and the rounding
/// parameter, both weight-shaped, plus Adam moments.
#[derive(Debug, Clone)]
pub struct AdaroundState {
    floored: Vec<f64>,
    epsilon: Vec<f64>,
    adam_epsilon: AdamVec,
    step: usize,
}

impl AdaroundState {
    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }

    pub fn floored(&self) -> &[f64] {
        &self.floored
    }

    pub fn retained_weight_shaped(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("floored_codes", self.floored.len()),
            ("epsilon", self.epsilon.len()),
            ("adam_m", self.adam_epsilon.first_moment_len()),
            ("adam_v", self.adam_epsilon.second_moment_len()),
        ]
    }

    pub fn parameter_tensor_count(&self) -> usize {
        2
    }
}

/// Shared per-layer problem data: original weights, calibration features
/// through the quantized prefix, and the full-precision layer targets.
pub(crate) struct LayerProblem {
    w: Vec<f64>,
    n: usize,
    m: usize,
    layout: GroupLayout,
    group_max: Vec<f64>,
    wbits: u8,
    abits: u8,
    x_q: Vec<f64>,
    y_fp: Vec<f64>,
    samples: usize,
}

struct BatchPass {
    x_raw: Vec<f64>,
    x_hat: Vec<f64>,
    diff: Vec<f64>,
    loss: f64,
}

impl LayerProblem {
    fn new(
        weights: &Tensor,
        x_fp: &Tensor,
        x_q: &Tensor,
        wcfg: &QuantConfig,
        abits: u8,
    ) -> Result<Self, OptimError> {
        if weights.shape().len() != 2 {
            return Err(OptimError::Config("layer weights must be 2-d".into()));
        }
        let (n, m) = (weights.shape()[0], weights.shape()[1]);
        if x_fp.shape() != x_q.shape() || x_fp.cols() != n {
            return Err(OptimError::Config(format!(
                "calibration features {:?}/{:?} incompatible with weights [{n}, {m}]",
                x_fp.shape(),
                x_q.shape()
            )));
        }
        let layout = GroupLayout::new(weights.shape(), wcfg.granularity())?;
        let w: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
        let mut group_max = vec![0.0f64; layout.num_groups()];
        for (j, &v) in w.iter().enumerate() {
            let g = layout.group_of(j);
            group_max[g] = group_max[g].max(v.abs());
        }
        let samples = x_fp.rows();
        let x_q: Vec<f64> = x_q.data().iter().map(|&v| v as f64).collect();
        // full-precision targets: X_fp * W, pre-activation, no bias (the
        // bias cancels in the difference)
        let mut y_fp = vec![0.0f64; samples * m];
        for i in 0..samples {
            for j in 0..m {
                let mut acc = 0.0f64;
                for k in 0..n {
                    acc += x_fp.get2(i, k) as f64 * w[k * m + j];
                }
                y_fp[i * m + j] = acc;
            }
        }
        Ok(LayerProblem {
            w,
            n,
            m,
            layout,
            group_max,
            wbits: wcfg.bits(),
            abits,
            x_q,
            y_fp,
            samples,
        })
    }

    fn weight_scales(&self, a: f64) -> Vec<f64> {
        self.group_max
            .iter()
            .map(|&mx| scale_from_max(mx, a, self.wbits))
            .collect()
    }

    /// Naive power quantization of the original weights at exponent `a`.
    fn hard_codes(&self, a: f64) -> Vec<f64> {
        let scales = self.weight_scales(a);
        let b = max_code(self.wbits) as f64;
        self.w
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let s = scales[self.layout.group_of(j)];
                (transform_value(v, a) / s).round().clamp(-b, b)
            })
            .collect()
    }

    fn dequant_weights(&self, codes: &[f64], a: f64) -> Vec<f64> {
        let scales = self.weight_scales(a);
        codes
            .iter()
            .enumerate()
            .map(|(j, &c)| dequant_value(c, scales[self.layout.group_of(j)], a))
            .collect()
    }

    /// Forward one batch: fake-quantize the input rows against the batch
    /// max (dynamic scale, outside the gradient), multiply by the
    /// dequantized weights, and diff against the full-precision targets.
    fn batch_forward(&self, rows: &[usize], w_hat: &[f64], a: f64) -> BatchPass {
        let (n, m) = (self.n, self.m);
        let bsz = rows.len();
        let mut x_raw = Vec::with_capacity(bsz * n);
        for &r in rows {
            x_raw.extend_from_slice(&self.x_q[r * n..(r + 1) * n]);
        }
        let batch_max = x_raw.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
        let s_x = scale_from_max(batch_max, a, self.abits);
        let b_a = max_code(self.abits) as f64;
        let x_hat: Vec<f64> = x_raw
            .iter()
            .map(|&v| {
                let c = (transform_value(v, a) / s_x).round().clamp(-b_a, b_a);
                dequant_value(c, s_x, a)
            })
            .collect();
        let mut diff = vec![0.0f64; bsz * m];
        let mut loss = 0.0f64;
        let norm = (bsz * m) as f64;
        for i in 0..bsz {
            let r = rows[i];
            for j in 0..m {
                let mut acc = 0.0f64;
                for k in 0..n {
                    acc += x_hat[i * n + k] * w_hat[k * m + j];
                }
                let d = acc - self.y_fp[r * m + j];
                diff[i * m + j] = d;
                loss += d * d;
            }
        }
        BatchPass {
            x_raw,
            x_hat,
            diff,
            loss: loss / norm,
        }
    }

    /// Mean squared layer-output error over the whole calibration set for a
    /// fixed set of codes, evaluated in sequential chunks with dynamic
    /// activation scales.
    fn calibration_loss(&self, codes: &[f64], a: f64, chunk: usize) -> f64 {
        let w_hat = self.dequant_weights(codes, a);
        let rows: Vec<usize> = (0..self.samples).collect();
        let mut sse = 0.0f64;
        for c in rows.chunks(chunk) {
            let pass = self.batch_forward(c, &w_hat, a);
            sse += pass.loss * (c.len() * self.m) as f64;
        }
        sse / (self.samples * self.m) as f64
    }

    /// `X_hat^T G`: gradient of the loss in the dequantized weights.
    fn weight_grad(&self, rows: &[usize], pass: &BatchPass) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let bsz = rows.len();
        let scale = 2.0 / (bsz * m) as f64;
        let mut gw = vec![0.0f64; n * m];
        for i in 0..bsz {
            for k in 0..n {
                let xv = pass.x_hat[i * n + k];
                if xv == 0.0 {
                    continue;
                }
                for j in 0..m {
                    gw[k * m + j] += xv * scale * pass.diff[i * m + j];
                }
            }
        }
        gw
    }

    /// `G W_hat^T`: gradient of the loss in the fake-quantized inputs.
    fn input_grad(&self, rows: &[usize], pass: &BatchPass, w_hat: &[f64]) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let bsz = rows.len();
        let scale = 2.0 / (bsz * m) as f64;
        let mut gx = vec![0.0f64; bsz * n];
        for i in 0..bsz {
            for j in 0..m {
                let g = scale * pass.diff[i * m + j];
                if g == 0.0 {
                    continue;
                }
                for k in 0..n {
                    gx[i * n + k] += g * w_hat[k * m + j];
                }
            }
        }
        gx
    }
}

fn codes_to_i8(codes: &[f64]) -> Vec<i8> {
    codes.iter().map(|&c| c as i8).collect()
}

fn quantized_from_codes(
    problem: &LayerProblem,
    codes: &[f64],
    a: f64,
    wcfg: &QuantConfig,
) -> Result<QuantizedTensor, OptimError> {
    Ok(QuantizedTensor::from_parts(
        codes_to_i8(codes),
        vec![problem.n, problem.m],
        problem.weight_scales(a),
        a,
        problem.wbits,
        wcfg.granularity(),
    )?)
}

struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(samples: usize, batch: usize, seed: u64) -> Self {
        BatchSampler {
            order: (0..samples).collect(),
            pos: usize::MAX,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos == usize::MAX || self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let rows = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        rows
    }
}

/// Chain rule of dequantization in the code value, with the magnitude
/// clipped below for stability: `d/dc (|c| s)^{1/a} = (s/a)(|c| s)^{1/a-1}`.
#[inline]
fn dequant_grad(code: f64, scale: f64, a: f64, clip_floor: f64) -> f64 {
    let mag = code.abs().max(clip_floor) * scale;
    (scale / a) * mag.powf(1.0 / a - 1.0)
}

/// Learn quantized weights (and optionally the exponent) through soft
/// quantization against the full-precision layer outputs.
pub fn optimize_layer_nupes(
    weights: &Tensor,
    x_fp: &Tensor,
    x_q: &Tensor,
    wcfg: &QuantConfig,
    abits: u8,
    cfg: &OptConfig,
    seed: u64,
) -> Result<(LayerOptResult, NupesState), OptimError> {
    if cfg.mode == Mode::AdaRound {
        return Err(OptimError::Config(
            "soft-quantization optimizer invoked with the rounding-baseline mode".into(),
        ));
    }
    cfg.validate()?;
    let problem = LayerProblem::new(weights, x_fp, x_q, wcfg, abits)?;
    if cfg.batch_size > problem.samples {
        return Err(OptimError::Config(format!(
            "batch size {} exceeds {} calibration samples",
            cfg.batch_size, problem.samples
        )));
    }

    let a0 = wcfg.exponent();
    let mut a = a0;
    let mut scales = problem.weight_scales(a);
    let b_w = max_code(problem.wbits) as f64;

    // epsilon starts at the transformed weights in code units; rounding it
    // reproduces the naive power quantization
    let mut epsilon: Vec<f64> = problem
        .w
        .iter()
        .enumerate()
        .map(|(j, &v)| transform_value(v, a) / scales[problem.layout.group_of(j)])
        .collect();
    if cfg.mode == Mode::LearnA {
        epsilon = problem.hard_codes(a);
    }

    let init_codes: Vec<f64> = epsilon
        .iter()
        .map(|&e| e.round().clamp(-b_w, b_w))
        .collect();
    let initial_loss = problem.calibration_loss(&init_codes, a0, cfg.batch_size);

    let scheduler = BetaScheduler::new(cfg.dsq_schedule, cfg.steps)?;
    let adam_p = AdamParams {
        lr: cfg.lr_epsilon,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        epsilon: cfg.adam_epsilon,
    };
    let adam_a_p = AdamParams {
        lr: cfg.lr_exponent,
        ..adam_p
    };
    let mut adam_epsilon = AdamVec::new(epsilon.len());
    let mut adam_exponent = AdamScalar::default();
    let mut sampler = BatchSampler::new(problem.samples, cfg.batch_size, seed);

    for step in 0..cfg.steps {
        let rows = sampler.next();
        let beta = scheduler.beta_at(step);
        let d: Vec<f64> = epsilon.iter().map(|&e| dsq(e, beta)).collect();
        let w_hat: Vec<f64> = d
            .iter()
            .enumerate()
            .map(|(j, &dv)| dequant_value(dv, scales[problem.layout.group_of(j)], a))
            .collect();
        let pass = problem.batch_forward(&rows, &w_hat, a);
        if !pass.loss.is_finite() {
            return Err(OptimError::Diverged { step });
        }
        let gw = problem.weight_grad(&rows, &pass);

        if cfg.mode.learns_w() {
            let g_eps: Vec<f64> = gw
                .iter()
                .enumerate()
                .map(|(j, &g)| {
                    let s = scales[problem.layout.group_of(j)];
                    g * dequant_grad(d[j], s, a, cfg.clip_floor) * dsq_grad(epsilon[j], beta)
                })
                .collect();
            adam_epsilon.step(step + 1, adam_p, &mut epsilon, &g_eps);
        }

        if cfg.mode.learns_a() {
            let gx = problem.input_grad(&rows, &pass, &w_hat);
            // chain through the straight-through dequantization: the
            // transform-domain upstream is dL/dv * (1/a) |x|^{1-a}
            let g_tx: Vec<f64> = gx
                .iter()
                .zip(&pass.x_raw)
                .map(|(&g, &x)| g * x.abs().max(cfg.clip_floor).powf(1.0 - a) / a)
                .collect();
            let g_tw: Vec<f64> = gw
                .iter()
                .zip(&problem.w)
                .map(|(&g, &w)| g * w.abs().max(cfg.clip_floor).powf(1.0 - a) / a)
                .collect();
            let grad_a = exponent_backward(
                &pass.x_raw,
                rows.len(),
                &g_tx,
                &problem.w,
                problem.n,
                &g_tw,
                a,
                cfg.clip_floor,
            )?;
            adam_exponent.step(step + 1, adam_a_p, &mut a, grad_a);
            a = a.clamp(EXPONENT_MIN, EXPONENT_MAX);
            // scales are analytic in a; recompute, never differentiate
            scales = problem.weight_scales(a);
            if cfg.mode == Mode::LearnA {
                epsilon = problem.hard_codes(a);
            }
        }
    }

    let learned_codes: Vec<f64> = epsilon
        .iter()
        .map(|&e| e.round().clamp(-b_w, b_w))
        .collect();
    let final_loss = problem.calibration_loss(&learned_codes, a, cfg.batch_size);

    let (codes, a_out, final_loss, reverted) = if final_loss <= initial_loss {
        (learned_codes, a, final_loss, false)
    } else {
        (init_codes, a0, initial_loss, true)
    };

    let state = NupesState {
        epsilon,
        adam_epsilon,
        exponent: a_out,
        adam_exponent,
        step: cfg.steps,
    };
    let result = LayerOptResult {
        weight: quantized_from_codes(&problem, &codes, a_out, wcfg)?,
        exponent: a_out,
        initial_loss,
        final_loss,
        steps_run: cfg.steps,
        reverted,
    };
    Ok((result, state))
}

/// Rounding baseline: floor the transformed weights, then learn a bounded
/// per-weight rounding term with a regularizer that pushes it to 0 or 1.
pub fn optimize_layer_adaround(
    weights: &Tensor,
    x_fp: &Tensor,
    x_q: &Tensor,
    wcfg: &QuantConfig,
    abits: u8,
    cfg: &OptConfig,
    seed: u64,
) -> Result<(LayerOptResult, AdaroundState), OptimError> {
    cfg.validate()?;
    let problem = LayerProblem::new(weights, x_fp, x_q, wcfg, abits)?;
    if cfg.batch_size > problem.samples {
        return Err(OptimError::Config(format!(
            "batch size {} exceeds {} calibration samples",
            cfg.batch_size, problem.samples
        )));
    }

    let a = wcfg.exponent();
    let scales = problem.weight_scales(a);
    let b_w = max_code(problem.wbits) as f64;

    // floored codes plus a sigmoid term initialized to reproduce the
    // weights exactly: sigma(eps) = frac(t/s)
    let mut floored = Vec::with_capacity(problem.w.len());
    let mut epsilon = Vec::with_capacity(problem.w.len());
    for (j, &v) in problem.w.iter().enumerate() {
        let u = transform_value(v, a) / scales[problem.layout.group_of(j)];
        let fl = u.floor();
        let frac = u - fl;
        let p = (frac + 0.1) / 1.2;
        floored.push(fl);
        epsilon.push((p / (1.0 - p)).ln());
    }

    let init_codes = problem.hard_codes(a);
    let initial_loss = problem.calibration_loss(&init_codes, a, cfg.batch_size);

    let reg_scheduler = BetaScheduler::new(super::BetaSchedule::AdaroundCosine, cfg.steps)?;
    let adam_p = AdamParams {
        lr: cfg.lr_epsilon,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        epsilon: cfg.adam_epsilon,
    };
    let mut adam_epsilon = AdamVec::new(epsilon.len());
    let mut sampler = BatchSampler::new(problem.samples, cfg.batch_size, seed);
    let lambda_start = (cfg.steps as f64 * cfg.lambda_zero_frac) as usize;

    for step in 0..cfg.steps {
        let rows = sampler.next();
        let beta = reg_scheduler.beta_at(step);
        let lambda = if step < lambda_start {
            0.0
        } else {
            cfg.lambda_value
        };
        let codes: Vec<f64> = floored
            .iter()
            .zip(&epsilon)
            .map(|(&fl, &e)| fl + rectified_sigmoid(e))
            .collect();
        let w_hat = problem.dequant_weights(&codes, a);
        let pass = problem.batch_forward(&rows, &w_hat, a);
        let reg = adaround_regularizer(&epsilon, lambda, beta);
        if !(pass.loss + reg).is_finite() {
            return Err(OptimError::Diverged { step });
        }
        let gw = problem.weight_grad(&rows, &pass);
        let g_eps: Vec<f64> = gw
            .iter()
            .enumerate()
            .map(|(j, &g)| {
                let s = scales[problem.layout.group_of(j)];
                let sig_grad = rectified_sigmoid_grad(epsilon[j]);
                let distill = g * dequant_grad(codes[j], s, a, cfg.clip_floor) * sig_grad;
                let q = 2.0 * rectified_sigmoid(epsilon[j]) - 1.0;
                let reg_grad = if lambda == 0.0 || q == 0.0 {
                    0.0
                } else {
                    -lambda * beta * q.abs().powf(beta - 1.0) * q.signum() * 2.0 * sig_grad
                };
                distill + reg_grad
            })
            .collect();
        adam_epsilon.step(step + 1, adam_p, &mut epsilon, &g_eps);
    }

    // binarize the rounding term
    let learned_codes: Vec<f64> = floored
        .iter()
        .zip(&epsilon)
        .map(|(&fl, &e)| (fl + rectified_sigmoid(e).round()).clamp(-b_w, b_w))
        .collect();
    let final_loss = problem.calibration_loss(&learned_codes, a, cfg.batch_size);
    let (codes, final_loss, reverted) = if final_loss <= initial_loss {
        (learned_codes, final_loss, false)
    } else {
        (init_codes, initial_loss, true)
    };

    let state = AdaroundState {
        floored,
        epsilon,
        adam_epsilon,
        step: cfg.steps,
    };
    let _ = state.step;
    let result = LayerOptResult {
        weight: quantized_from_codes(&problem, &codes, a, wcfg)?,
        exponent: a,
        initial_loss,
        final_loss,
        steps_run: cfg.steps,
        reverted,
    };
    Ok((result, state))
}
