//! Stabilized backward pass for the power exponent.
//!
//! The per-element sensitivity of the transform to the exponent is
//! `|x|^a ln|x|`, clipped below at a small floor so near-zero values do not
//! blow up the logarithm. Contributions from the inputs and from the
//! weights are averaged separately before being combined, which makes the
//! input term invariant under batch duplication. Row contributions reduce
//! through a bottom-up pairwise tree so that invariance holds to the last
//! bit.

use super::OptimError;

/// Bottom-up pairwise sum: adjacent pairs reduce first, odd tails carry.
pub(crate) fn pairwise_sum(mut vals: Vec<f64>) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    while vals.len() > 1 {
        let mut next = Vec::with_capacity(vals.len().div_ceil(2));
        let mut i = 0;
        while i + 1 < vals.len() {
            next.push(vals[i] + vals[i + 1]);
            i += 2;
        }
        if i < vals.len() {
            next.push(vals[i]);
        }
        vals = next;
    }
    vals[0]
}

fn mean_contribution(
    values: &[f64],
    grads: &[f64],
    rows: usize,
    exponent: f64,
    clip_floor: f64,
    name: &'static str,
) -> Result<f64, OptimError> {
    debug_assert_eq!(values.len() % rows, 0);
    debug_assert_eq!(values.len(), grads.len());
    let cols = values.len() / rows;
    let mut row_sums = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut acc = 0.0f64;
        for c in 0..cols {
            let i = r * cols + c;
            let clipped = values[i].abs().max(clip_floor);
            acc += grads[i] * clipped.powf(exponent) * clipped.ln();
        }
        row_sums.push(acc);
    }
    let mean = pairwise_sum(row_sums) / values.len() as f64;
    if !mean.is_finite() {
        return Err(OptimError::NonFiniteGradient { tensor: name });
    }
    Ok(mean)
}

/// Gradient of the loss in the power exponent, from the input and weight
/// transforms, with upstream gradients chained against the clipped
/// Jacobian `|x|^a ln|x|`. Scale recomputation stays outside this path.
#[allow(clippy::too_many_arguments)]
pub fn exponent_backward(
    inputs: &[f64],
    input_rows: usize,
    input_grads: &[f64],
    weights: &[f64],
    weight_rows: usize,
    weight_grads: &[f64],
    exponent: f64,
    clip_floor: f64,
) -> Result<f64, OptimError> {
    if inputs.len() != input_grads.len()
        || weights.len() != weight_grads.len()
        || input_rows == 0
        || weight_rows == 0
        || !inputs.len().is_multiple_of(input_rows)
        || !weights.len().is_multiple_of(weight_rows)
    {
        return Err(OptimError::Config(format!(
            "exponent_backward: inconsistent shapes ({} inputs / {} rows, {} weights / {} rows)",
            inputs.len(),
            input_rows,
            weights.len(),
            weight_rows
        )));
    }
    let from_inputs = mean_contribution(
        inputs,
        input_grads,
        input_rows,
        exponent,
        clip_floor,
        "inputs",
    )?;
    let from_weights = mean_contribution(
        weights,
        weight_grads,
        weight_rows,
        exponent,
        clip_floor,
        "weights",
    )?;
    Ok(from_inputs + from_weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FLOOR: f64 = 1e-6;

    #[test]
    fn all_ones_give_zero_gradient() {
        let x = vec![1.0; 8];
        let g = vec![1.0; 8];
        let w = vec![1.0; 4];
        let gw = vec![1.0; 4];
        let grad = exponent_backward(&x, 2, &g, &w, 2, &gw, 1.0, FLOOR).unwrap();
        assert_eq!(grad, 0.0);
    }

    #[test]
    fn single_element_e_at_a_one() {
        // x = e, a = 1, unit upstream: e^1 * ln(e) = e; weight side silent.
        let e = std::f64::consts::E;
        let grad =
            exponent_backward(&[e], 1, &[1.0], &[1.0], 1, &[1.0], 1.0, FLOOR).unwrap();
        assert!((grad - e).abs() < 1e-14, "{grad}");
    }

    #[test]
    fn zero_input_uses_clipped_closed_form() {
        // clip(|0|) = 1e-6: (1e-6)^0.5 * ln(1e-6), negative.
        let grad =
            exponent_backward(&[0.0], 1, &[1.0], &[1.0], 1, &[1.0], 0.5, FLOOR).unwrap();
        let expect = FLOOR.powf(0.5) * FLOOR.ln();
        assert_eq!(grad, expect);
        assert!(grad < 0.0);
        assert!((grad - (-0.013815510557964274)).abs() < 1e-12, "{grad}");
    }

    #[test]
    fn batch_duplication_is_bit_exact() {
        let x: Vec<f64> = (0..24).map(|i| ((i * 37 % 17) as f64 - 8.0) / 3.0).collect();
        let g: Vec<f64> = (0..24).map(|i| ((i * 13 % 11) as f64 - 5.0) / 7.0).collect();
        let w: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) / 4.0).collect();
        let gw: Vec<f64> = (0..6).map(|i| (i as f64) / 11.0).collect();
        let rows = 4;
        let cols = 6;

        let mut x2 = Vec::new();
        let mut g2 = Vec::new();
        for r in 0..rows {
            for _ in 0..2 {
                x2.extend_from_slice(&x[r * cols..(r + 1) * cols]);
                g2.extend_from_slice(&g[r * cols..(r + 1) * cols]);
            }
        }

        let a = 0.63;
        let once = exponent_backward(&x, rows, &g, &w, 2, &gw, a, FLOOR).unwrap();
        let twice = exponent_backward(&x2, rows * 2, &g2, &w, 2, &gw, a, FLOOR).unwrap();
        assert_eq!(once.to_bits(), twice.to_bits());
    }

    #[test]
    fn matches_finite_differences_of_clipped_transform() {
        // d/da mean(g * clip|x|^a) = mean(g * clip|x|^a ln clip|x|)
        let x: Vec<f64> = (0..32).map(|i| ((i as f64) - 16.0) / 5.0).collect();
        let g: Vec<f64> = (0..32).map(|i| ((i as f64) * 0.07 - 1.0).sin()).collect();
        let a = 0.5;
        let h = 1e-6;
        let eval = |aa: f64| -> f64 {
            x.iter()
                .zip(&g)
                .map(|(&v, &gv)| gv * v.abs().max(FLOOR).powf(aa))
                .sum::<f64>()
                / x.len() as f64
        };
        let fd = (eval(a + h) - eval(a - h)) / (2.0 * h);
        let grad =
            exponent_backward(&x, 4, &g, &[1.0], 1, &[0.0], a, FLOOR).unwrap();
        let rel = (grad - fd).abs() / fd.abs().max(1e-30);
        assert!(rel < 1e-3, "grad {grad} vs fd {fd}");
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let err = exponent_backward(&[1.0], 1, &[f64::INFINITY], &[1.0], 1, &[1.0], 0.5, FLOOR)
            .unwrap_err();
        assert!(err.to_string().contains("inputs"));
        let err = exponent_backward(&[1.0], 1, &[1.0], &[2.0], 1, &[f64::NAN], 0.5, FLOOR)
            .unwrap_err();
        assert!(err.to_string().contains("weights"));
    }

    #[test]
    fn pairwise_sum_matches_naive_for_small_inputs() {
        let vals = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let naive: f64 = vals.iter().sum();
        assert!((pairwise_sum(vals) - naive).abs() < 1e-12);
        assert_eq!(pairwise_sum(vec![]), 0.0);
        assert_eq!(pairwise_sum(vec![7.0]), 7.0);
    }
}
