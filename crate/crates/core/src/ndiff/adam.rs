use super::DenseMatrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken so far.
    pub t: u64,
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
}

impl AdamState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new<'a>(lr: f64, params: impl IntoIterator<Item = &'a DenseMatrix>) -> Self {
        let m: Vec<DenseMatrix> = params
            .into_iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one update in place. `params` and `grads` must be in the same
    /// order as the tensors the state was created from.
    pub fn step(&mut self, params: &mut [&mut DenseMatrix], grads: &[&DenseMatrix]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient count mismatch");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(p.shape(), g.shape(), "adam: gradient shape mismatch");
            let ps = p.as_mut_slice();
            let gs = g.as_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for i in 0..ps.len() {
                let gi = gs[i];
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gi;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = DenseMatrix::from_fn(2, 2, |r, c| (r + c) as f64);
        let before = p.clone();
        let g = DenseMatrix::zeros(2, 2);
        let mut st = AdamState::new(0.1, [&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[&g]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_on_unit_gradient() {
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let mut p = DenseMatrix::scalar(1.0);
        let g = DenseMatrix::scalar(1.0);
        let mut st = AdamState::new(0.1, [&p]);
        st.step(&mut [&mut p], &[&g]);
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = DenseMatrix::from_fn(3, 1, |r, _| r as f64);
            let mut st = AdamState::new(0.05, [&p]);
            for k in 0..20 {
                let g = p.map(|x| (x * 1.7 + k as f64).sin());
                st.step(&mut [&mut p], &[&g]);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
