//! Adam optimizer over a flat list of parameter matrices.

use crate::mat::Mat;
use crate::Scalar;

pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step_count: u64,
    m: Vec<Mat<S>>,
    v: Vec<Mat<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Adam {
            lr,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// One update. `grads` must line up with `params`; moment buffers are
    /// allocated on first use and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [Mat<S>], grads: &[Mat<S>]) {
        let mut refs: Vec<&mut Mat<S>> = params.iter_mut().collect();
        self.step_refs(&mut refs, grads);
    }

    /// Same update through mutable references, for parameters that live
    /// inside larger structures.
    pub fn step_refs(&mut self, params: &mut [&mut Mat<S>], grads: &[Mat<S>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
            self.v = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        }
        assert_eq!(self.m.len(), params.len());
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let one = S::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!((p.rows, p.cols), (g.rows, g.cols));
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (one - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (one - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] = p.data[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
