//! The quantization operator family: uniform quantization generalized
//! through an odd power transform `x -> sign(x)|x|^a`, plus dequantization,
//! fake quantization, reconstruction error, and level-set generation.
//!
//! All scalar math runs in `f64`; tensors store `f32`. Scales are derived
//! from the group max of the *source* tensor and transformed, which equals
//! the max of the transformed tensor (the transform is monotone on
//! magnitudes) and keeps quantize/dequantize round trips stable.

mod levels;
mod serialize;

pub use levels::{generate_levels, LevelFormat};
pub use serialize::{read_quantized, write_quantized};

use crate::tensor::{reduce_max_abs, Granularity, GroupLayout, Tensor, TensorError};
use thiserror::Error;

/// Smallest learnable power exponent.
pub const EXPONENT_MIN: f64 = 0.05;
/// Largest learnable power exponent.
pub const EXPONENT_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("bit-width {0} outside supported range 2..=8")]
    Bits(u8),
    #[error("exponent {0} outside [{EXPONENT_MIN}, {EXPONENT_MAX}]")]
    Exponent(f64),
    #[error("group size {0} must be at least 2")]
    GroupTooSmall(usize),
    #[error("norm order {0} unsupported (expected 1 or 2)")]
    Norm(u8),
    #[error("unsupported level format/bits combination: {format} at {bits} bits")]
    LevelFormat { format: String, bits: u8 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed quantized-tensor header: {0}")]
    Header(String),
}

/// How to quantize one tensor: bit-width, power exponent, granularity.
/// Rounding is fixed to half-away-from-zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    bits: u8,
    exponent: f64,
    granularity: Granularity,
}

impl QuantConfig {
    pub fn new(bits: u8, exponent: f64, granularity: Granularity) -> Result<Self, QuantError> {
        if !(2..=8).contains(&bits) {
            return Err(QuantError::Bits(bits));
        }
        if !(EXPONENT_MIN..=EXPONENT_MAX).contains(&exponent) || !exponent.is_finite() {
            return Err(QuantError::Exponent(exponent));
        }
        if let Granularity::PerGroup(g) = granularity {
            if g < 2 {
                return Err(QuantError::GroupTooSmall(g));
            }
        }
        Ok(QuantConfig {
            bits,
            exponent,
            granularity,
        })
    }

    /// Per-tensor uniform quantization (exponent 1).
    pub fn uniform(bits: u8) -> Result<Self, QuantError> {
        QuantConfig::new(bits, 1.0, Granularity::PerTensor)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Largest code magnitude: `2^{b-1} - 1` (symmetric range, no zero point).
    pub fn max_code(&self) -> i32 {
        max_code(self.bits)
    }
}

pub fn max_code(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Integer codes plus per-group scales; the serialized low-bit form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i8>,
    shape: Vec<usize>,
    /// One positive scale per group, kept in f64; serialized as f32.
    scales: Vec<f64>,
    exponent: f64,
    bits: u8,
    granularity: Granularity,
}

impl QuantizedTensor {
    /// Assemble from already-computed parts, validating the invariants:
    /// codes inside the symmetric range, positive finite scales, matching
    /// group count.
    pub(crate) fn from_parts(
        codes: Vec<i8>,
        shape: Vec<usize>,
        scales: Vec<f64>,
        exponent: f64,
        bits: u8,
        granularity: Granularity,
    ) -> Result<Self, QuantError> {
        if !(2..=8).contains(&bits) {
            return Err(QuantError::Bits(bits));
        }
        let layout = GroupLayout::new(&shape, granularity)?;
        if layout.num_groups() != scales.len() {
            return Err(QuantError::Header(format!(
                "{} scales for {} groups",
                scales.len(),
                layout.num_groups()
            )));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(QuantError::Header("non-positive scale".into()));
        }
        let b = max_code(bits) as i8;
        if codes.iter().any(|&c| c < -b || c > b) {
            return Err(QuantError::Header(format!(
                "code outside symmetric range for {bits} bits"
            )));
        }
        Ok(QuantizedTensor {
            codes,
            shape,
            scales,
            exponent,
            bits,
            granularity,
        })
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn numel(&self) -> usize {
        self.codes.len()
    }

    pub fn layout(&self) -> GroupLayout {
        // Shape/granularity were validated at construction.
        GroupLayout::new(&self.shape, self.granularity).expect("validated at construction")
    }
}

/// `sign(x) |x|^a` for one scalar.
#[inline]
pub fn transform_value(x: f64, exponent: f64) -> f64 {
    if x == 0.0 {
        return x; // preserves signed zero
    }
    let t = x.abs().powf(exponent);
    if x < 0.0 {
        -t
    } else {
        t
    }
}

/// Scale of a group whose source max-abs is `max_abs`: `max_abs^a / (2^{b-1}-1)`.
/// All-zero groups get the degenerate scale 1.
#[inline]
pub fn scale_from_max(max_abs: f64, exponent: f64, bits: u8) -> f64 {
    if max_abs == 0.0 {
        1.0
    } else {
        max_abs.powf(exponent) / max_code(bits) as f64
    }
}

/// Inverse of the power operator for one code: `sign(c) (|c| s)^{1/a}`.
#[inline]
pub fn dequant_value(code: f64, scale: f64, exponent: f64) -> f64 {
    if code == 0.0 {
        return 0.0;
    }
    let mag = (code.abs() * scale).powf(1.0 / exponent);
    if code < 0.0 {
        -mag
    } else {
        mag
    }
}

/// Elementwise `sign(x) |x|^a`. Odd, fixes 0 and ±1; the identity at `a = 1`.
pub fn power_transform(x: &Tensor, exponent: f64) -> Tensor {
    let data: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| transform_value(v as f64, exponent) as f32)
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("transform preserves shape and finiteness")
}

/// Per-group scale of `x` itself (no transform): `group max-abs / (2^{b-1}-1)`,
/// 1 for all-zero groups.
pub fn compute_scale(
    x: &Tensor,
    bits: u8,
    granularity: Granularity,
) -> Result<Vec<f64>, QuantError> {
    if !(2..=8).contains(&bits) {
        return Err(QuantError::Bits(bits));
    }
    let maxes = reduce_max_abs(x, granularity)?;
    Ok(maxes
        .iter()
        .map(|&m| {
            if m == 0.0 {
                1.0
            } else {
                m as f64 / max_code(bits) as f64
            }
        })
        .collect())
}

/// Quantize under the power operator: codes are the transformed values
/// divided by the transformed group scale, rounded half-away-from-zero and
/// clamped to the symmetric range.
pub fn quantize(x: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor, QuantError> {
    let layout = GroupLayout::new(x.shape(), cfg.granularity)?;
    let maxes = reduce_max_abs(x, cfg.granularity)?;
    let scales: Vec<f64> = maxes
        .iter()
        .map(|&m| scale_from_max(m as f64, cfg.exponent, cfg.bits))
        .collect();
    let b = cfg.max_code() as f64;
    let mut codes = vec![0i8; x.numel()];
    for (i, &v) in x.data().iter().enumerate() {
        let s = scales[layout.group_of(i)];
        let t = transform_value(v as f64, cfg.exponent);
        codes[i] = (t / s).round().clamp(-b, b) as i8;
    }
    Ok(QuantizedTensor {
        codes,
        shape: x.shape().to_vec(),
        scales,
        exponent: cfg.exponent,
        bits: cfg.bits,
        granularity: cfg.granularity,
    })
}

/// Map codes back to real values: `sign(c) (|c| s)^{1/a}`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let layout = q.layout();
    let data: Vec<f32> = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| dequant_value(c as f64, q.scales[layout.group_of(i)], q.exponent) as f32)
        .collect();
    Tensor::new(q.shape.clone(), data).expect("dequantized values are finite")
}

/// Quantize-then-dequantize: the simulated low-bit view of `x`.
pub fn fake_quantize(x: &Tensor, cfg: &QuantConfig) -> Result<Tensor, QuantError> {
    Ok(dequantize(&quantize(x, cfg)?))
}

/// Per-tensor fake quantization against a frozen max-abs instead of the
/// tensor's own max; values beyond the frozen range clamp to it.
pub fn fake_quantize_frozen(x: &Tensor, max_abs: f64, bits: u8, exponent: f64) -> Tensor {
    let s = scale_from_max(max_abs, exponent, bits);
    let b = max_code(bits) as f64;
    let data: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| {
            let t = transform_value(v as f64, exponent);
            let c = (t / s).round().clamp(-b, b);
            dequant_value(c, s, exponent) as f32
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("finite by construction")
}

/// p-norm (p in {1, 2}) of `x - fake_quantize(x)`, accumulated in f64.
pub fn reconstruction_error(x: &Tensor, cfg: &QuantConfig, p: u8) -> Result<f64, QuantError> {
    if p != 1 && p != 2 {
        return Err(QuantError::Norm(p));
    }
    let y = fake_quantize(x, cfg)?;
    let mut acc = 0.0f64;
    for (&xv, &yv) in x.data().iter().zip(y.data()) {
        let d = xv as f64 - yv as f64;
        acc += if p == 1 { d.abs() } else { d * d };
    }
    Ok(if p == 1 { acc } else { acc.sqrt() })
}
