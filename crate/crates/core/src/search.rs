//! Data-free search for the shared power exponent: derivative-free
//! minimization of the summed weight reconstruction error over `a`, plus a
//! grid probe used to sanity-check local convexity and uniqueness of the
//! minimum numerically.

use crate::model::{ModelSpec, QuantizedModel};
use crate::quant::{
    quantize, reconstruction_error, QuantConfig, QuantError, EXPONENT_MAX, EXPONENT_MIN,
};
use crate::tensor::{Granularity, Tensor};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("objective returned a non-finite value at a = {a}")]
    NonFiniteObjective { a: f64 },
    #[error("search bounds [{lo}, {hi}] do not contain the initial point {init}")]
    BadBounds { lo: f64, hi: f64, init: f64 },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("grid step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Configuration of the one-dimensional exponent search.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Initial exponent; 0.5 works well for bell-shaped weights.
    pub init: f64,
    /// Offset of the second simplex point from `init`.
    pub simplex_step: f64,
    /// Stop once the simplex width on `a` falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Search interval; candidates are projected into it.
    pub bounds: (f64, f64),
    pub bits: u8,
    /// Reconstruction-error norm order, 1 or 2.
    pub norm: u8,
    /// Bracketing scan step used to seed the simplex in the right basin;
    /// the reconstruction-error curve can have near-tied local dips, and
    /// a simplex started blind may settle in the wrong one. `None` starts
    /// from `init` directly.
    pub bracket_step: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            init: 0.5,
            simplex_step: 0.5,
            tolerance: 1e-4,
            max_iterations: 200,
            bounds: (EXPONENT_MIN, EXPONENT_MAX),
            bits: 4,
            norm: 2,
            bracket_step: Some(0.005),
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<(), SearchError> {
        let (lo, hi) = self.bounds;
        if !(lo <= self.init && self.init <= hi) {
            return Err(SearchError::BadBounds {
                lo,
                hi,
                init: self.init,
            });
        }
        if !self.tolerance.is_finite() || self.tolerance <= 0.0 {
            return Err(SearchError::BadTolerance(self.tolerance));
        }
        Ok(())
    }
}

/// One search iteration as recorded in the trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub simplex: [f64; 2],
    pub best_a: f64,
    pub best_error: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub a: f64,
    pub error: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub trace: Vec<TraceStep>,
}

/// Summed per-tensor reconstruction error of `weights` at exponent `a`.
pub fn objective(weights: &[Tensor], a: f64, bits: u8, p: u8) -> Result<f64, SearchError> {
    let cfg = QuantConfig::new(bits, a, Granularity::PerTensor)?;
    let mut total = 0.0f64;
    for w in weights {
        total += reconstruction_error(w, &cfg, p)?;
    }
    Ok(total)
}

/// Minimize `f` over the search interval with a two-point Nelder-Mead
/// simplex (reflection 1.0, contraction 0.5). Returns the best point ever
/// evaluated; the result is never worse than the initial point.
pub fn nelder_mead_min(
    mut f: impl FnMut(f64) -> f64,
    cfg: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let (lo, hi) = cfg.bounds;
    let project = |a: f64| a.clamp(lo, hi);
    let mut evaluations = 0usize;
    let mut eval = |a: f64, evals: &mut usize| -> Result<f64, SearchError> {
        let v = f(a);
        *evals += 1;
        if !v.is_finite() {
            return Err(SearchError::NonFiniteObjective { a });
        }
        Ok(v)
    };

    // seed the simplex: either a bracketing scan over the interval (always
    // including the configured init) or the raw init point
    let (x0, f0, step) = match cfg.bracket_step {
        Some(scan_step) if scan_step > 0.0 => {
            let mut best = (project(cfg.init), eval(project(cfg.init), &mut evaluations)?);
            let n = ((hi - lo) / scan_step).round() as usize;
            for i in 0..=n {
                let a = project(lo + i as f64 * scan_step);
                let v = eval(a, &mut evaluations)?;
                if v < best.1 {
                    best = (a, v);
                }
            }
            (best.0, best.1, scan_step)
        }
        _ => (
            project(cfg.init),
            eval(project(cfg.init), &mut evaluations)?,
            cfg.simplex_step,
        ),
    };
    let mut x1 = project(x0 + step);
    if x1 == x0 {
        x1 = project(x0 - step);
    }
    let f1 = eval(x1, &mut evaluations)?;
    let mut simplex = [(x0, f0), (x1, f1)];
    let (mut best_a, mut best_f) = if f0 <= f1 { (x0, f0) } else { (x1, f1) };

    let mut trace = Vec::new();
    let mut iterations = 0usize;
    for iteration in 0..cfg.max_iterations {
        iterations = iteration + 1;
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let (xb, fb) = simplex[0];
        let (xw, fw) = simplex[1];
        if (xb - xw).abs() < cfg.tolerance {
            break;
        }
        let xr = project(xb + (xb - xw));
        let fr = eval(xr, &mut evaluations)?;
        if fr < best_f {
            best_a = xr;
            best_f = fr;
        }
        if fr < fw {
            simplex[1] = (xr, fr);
        } else {
            // contract the worst point toward the best
            let xc = xb + 0.5 * (xw - xb);
            let fc = eval(xc, &mut evaluations)?;
            if fc < best_f {
                best_a = xc;
                best_f = fc;
            }
            simplex[1] = (xc, fc);
        }
        let _ = fb;
        trace.push(TraceStep {
            iteration,
            simplex: [simplex[0].0.min(simplex[1].0), simplex[0].0.max(simplex[1].0)],
            best_a,
            best_error: best_f,
        });
    }

    Ok(SearchResult {
        a: best_a,
        error: best_f,
        iterations,
        evaluations,
        trace,
    })
}

/// Dense sampling of `f` over `range`: the curve, its argmin, and two
/// local-convexity statistics around the argmin. The error curve is
/// piecewise smooth with kinks wherever a code flips, so fine-step second
/// differences carry kink noise; the window-scale second difference
/// measures the bowl shape at the ±0.05 scale directly.
#[derive(Debug, Clone)]
pub struct GridProbe {
    pub points: Vec<(f64, f64)>,
    pub argmin: f64,
    pub min_error: f64,
    /// Fraction of positive step-scale second differences within ±0.05 of
    /// the argmin.
    pub convex_fraction: f64,
    /// `f(a*+0.05) + f(a*-0.05) - 2 f(a*)` (edges projected into range).
    pub window_second_difference: f64,
    /// Number of grid points attaining the minimum within 1e-12.
    pub min_multiplicity: usize,
}

pub fn grid_probe(
    mut f: impl FnMut(f64) -> f64,
    range: (f64, f64),
    step: f64,
) -> Result<GridProbe, SearchError> {
    if !step.is_finite() || step <= 0.0 {
        return Err(SearchError::BadStep(step));
    }
    let (lo, hi) = range;
    let n = ((hi - lo) / step).round() as usize;
    let mut points = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let a = lo + i as f64 * step;
        let a = if a > hi { hi } else { a };
        let v = f(a);
        if !v.is_finite() {
            return Err(SearchError::NonFiniteObjective { a });
        }
        points.push((a, v));
    }
    let (mut argmin, mut min_error) = points[0];
    for &(a, v) in &points {
        if v < min_error {
            argmin = a;
            min_error = v;
        }
    }
    let min_multiplicity = points
        .iter()
        .filter(|(_, v)| (v - min_error).abs() <= 1e-12)
        .count();

    let mut positive = 0usize;
    let mut total = 0usize;
    for i in 1..points.len().saturating_sub(1) {
        if (points[i].0 - argmin).abs() <= 0.05 {
            total += 1;
            let d2 = points[i + 1].1 - 2.0 * points[i].1 + points[i - 1].1;
            if d2 > 0.0 {
                positive += 1;
            }
        }
    }
    let convex_fraction = if total == 0 {
        1.0
    } else {
        positive as f64 / total as f64
    };

    let wlo = (argmin - 0.05).max(lo);
    let whi = (argmin + 0.05).min(hi);
    let window_second_difference = f(whi) + f(wlo) - 2.0 * min_error;

    Ok(GridProbe {
        points,
        argmin,
        min_error,
        convex_fraction,
        window_second_difference,
        min_multiplicity,
    })
}

/// Search one exponent shared by every layer, over the weights only.
pub fn search_shared_exponent(
    model: &ModelSpec,
    cfg: &SearchConfig,
) -> Result<SearchResult, SearchError> {
    if cfg.norm != 1 && cfg.norm != 2 {
        return Err(SearchError::Quant(QuantError::Norm(cfg.norm)));
    }
    let weights = model.weight_tensors();
    let (bits, p) = (cfg.bits, cfg.norm);
    // Bounds keep `a` inside the valid config range, so per-call config
    // construction cannot fail; any failure surfaces as a non-finite value.
    nelder_mead_min(
        |a| objective(&weights, a, bits, p).unwrap_or(f64::NAN),
        cfg,
    )
}

/// Data-free power quantization: search the shared exponent, then quantize
/// every layer's weights with it at `cfg.bits`, per tensor.
pub fn powerquant_datafree(
    model: &ModelSpec,
    cfg: &SearchConfig,
) -> Result<(QuantizedModel, SearchResult), SearchError> {
    let result = search_shared_exponent(model, cfg)?;
    let qcfg = QuantConfig::new(cfg.bits, result.a, Granularity::PerTensor)?;
    let layers = model
        .layers
        .iter()
        .map(|l| {
            Ok(crate::model::QuantizedLayer {
                weight: quantize(&l.weights, &qcfg)?,
                bias: l.bias.clone(),
                activation: l.activation,
            })
        })
        .collect::<Result<Vec<_>, QuantError>>()?;
    let act = (0..model.num_layers())
        .map(|_| crate::model::ActQuant {
            bits: cfg.bits,
            exponent: result.a,
            frozen_max: None,
        })
        .collect();
    Ok((
        QuantizedModel {
            name: model.name.clone(),
            layers,
            act,
        },
        result,
    ))
}
