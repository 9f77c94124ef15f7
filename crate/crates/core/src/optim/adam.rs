//! Adam with bias correction, for a parameter vector and for a scalar.

#[derive(Debug, Clone, Copy)]
pub(crate) struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct AdamVec {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamVec {
    pub(crate) fn new(n: usize) -> Self {
        AdamVec {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One update; `t` is 1-based for bias correction.
    pub(crate) fn step(&mut self, t: usize, p: AdamParams, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let c1 = 1.0 - p.beta1.powi(t as i32);
        let c2 = 1.0 - p.beta2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * g;
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= p.lr * m_hat / (v_hat.sqrt() + p.epsilon);
        }
    }

    pub fn first_moment_len(&self) -> usize {
        self.m.len()
    }

    pub fn second_moment_len(&self) -> usize {
        self.v.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamScalar {
    m: f64,
    v: f64,
}

impl AdamScalar {
    pub(crate) fn step(&mut self, t: usize, p: AdamParams, param: &mut f64, grad: f64) {
        self.m = p.beta1 * self.m + (1.0 - p.beta1) * grad;
        self.v = p.beta2 * self.v + (1.0 - p.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - p.beta1.powi(t as i32));
        let v_hat = self.v / (1.0 - p.beta2.powi(t as i32));
        *param -= p.lr * m_hat / (v_hat.sqrt() + p.epsilon);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: AdamParams = AdamParams {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };

    #[test]
    fn converges_on_quadratic() {
        let mut x = vec![5.0f64, -3.0];
        let mut adam = AdamVec::new(2);
        for t in 1..=2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.step(t, P, &mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn scalar_converges() {
        let mut a = 2.0f64;
        let mut adam = AdamScalar::default();
        for t in 1..=2000 {
            let g = 2.0 * (a - 0.5);
            adam.step(t, P, &mut a, g);
        }
        assert!((a - 0.5).abs() < 1e-3, "{a}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first step is ~lr * sign(grad)
        let mut x = vec![1.0f64];
        let mut adam = AdamVec::new(1);
        adam.step(1, P, &mut x, &[0.3]);
        assert!((x[0] - (1.0 - P.lr)).abs() < 1e-6);
    }
}
