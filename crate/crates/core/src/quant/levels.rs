//! Representable level sets on [-1, 1] at unit scale, for comparing the
//! geometry of quantization formats.

use super::{max_code, QuantError};

/// Level-set family to enumerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelFormat {
    Uniform,
    Power(f64),
    Log2,
    /// 1 sign, 2 exponent, 1 mantissa bit, with subnormals.
    Fp4E2m1,
}

impl std::fmt::Display for LevelFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LevelFormat::Uniform => write!(f, "uniform"),
            LevelFormat::Power(a) => write!(f, "power({a})"),
            LevelFormat::Log2 => write!(f, "log2"),
            LevelFormat::Fp4E2m1 => write!(f, "fp4-e2m1"),
        }
    }
}

/// All dequantized values representable on [-1, 1] under unit scale,
/// sorted ascending and deduplicated.
pub fn generate_levels(format: LevelFormat, bits: u8) -> Result<Vec<f64>, QuantError> {
    if !(2..=8).contains(&bits) {
        return Err(QuantError::Bits(bits));
    }
    let mut levels: Vec<f64> = match format {
        LevelFormat::Uniform => {
            let b = max_code(bits);
            (-b..=b).map(|k| k as f64 / b as f64).collect()
        }
        LevelFormat::Power(a) => {
            if !(super::EXPONENT_MIN..=super::EXPONENT_MAX).contains(&a) {
                return Err(QuantError::Exponent(a));
            }
            let b = max_code(bits);
            (-b..=b)
                .map(|k| {
                    let mag = (k.abs() as f64 / b as f64).powf(1.0 / a);
                    if k < 0 {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect()
        }
        LevelFormat::Log2 => {
            // Sign bit + exponent field over 2^0 .. 2^-(2^{b-1}-2), plus an
            // explicit zero encoding.
            let exponents = max_code(bits);
            let mut v = vec![0.0];
            for k in 0..exponents {
                let mag = (2.0f64).powi(-k);
                v.push(mag);
                v.push(-mag);
            }
            v
        }
        LevelFormat::Fp4E2m1 => {
            if bits != 4 {
                return Err(QuantError::LevelFormat {
                    format: format.to_string(),
                    bits,
                });
            }
            let mut v = vec![0.0];
            for exp in 0u32..4 {
                for mant in 0u32..2 {
                    let mag = if exp == 0 {
                        // subnormal: 0.m * 2^(1-bias), bias = 1
                        mant as f64 * 0.5
                    } else {
                        (1.0 + mant as f64 * 0.5) * (2.0f64).powi(exp as i32 - 1)
                    };
                    if mag != 0.0 {
                        v.push(mag / 6.0);
                        v.push(-mag / 6.0);
                    }
                }
            }
            v
        }
    };
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    Ok(levels)
}
