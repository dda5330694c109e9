//! Adam with bias correction.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`, with the usual defaults.
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every parameter; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        ensure!(lr > 0.0, "learning rate must be positive, got {lr}");
        ensure!(
            params.len() == grads.len() && params.len() == self.m.len(),
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            self.m.len()
        );
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure!(
                p.shape() == g.shape() && p.shape() == self.m[i].shape(),
                "adam: shape mismatch at slot {i}: param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            );
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gv = gv as f64;
                let m_new = b1 * *mv as f64 + (1.0 - b1) * gv;
                let v_new = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
                *mv = m_new as f32;
                *vv = v_new as f32;
                let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + self.eps);
                *pv = (*pv as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[Tensor::vector(vec![1.0])], 0.1).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = −0.1·1/(1+1e-8)
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![Tensor::vector(vec![2.0, -3.0])];
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[Tensor::vector(vec![1.0, 1.0])], 0.01).unwrap();
        let m_before = s.m[0].data()[0];
        let snapshot = p.clone();
        s.step(&mut p, &[Tensor::zeros(&[2])], 0.01).unwrap();
        assert!(s.m[0].data()[0].abs() < m_before.abs());
        // the moment still carries momentum, so the step is not zero here;
        // from a fresh state a zero gradient is a no-op
        let mut q = snapshot.clone();
        let mut fresh = AdamState::new(&q);
        fresh.step(&mut q, &[Tensor::zeros(&[2])], 0.01).unwrap();
        assert_eq!(q, snapshot);
    }

    #[test]
    fn constant_gradient_approaches_lr_sign() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut s = AdamState::new(&p);
        let g = [Tensor::vector(vec![-0.3])];
        let mut last = 0.0;
        for _ in 0..200 {
            let before = p[0].data()[0];
            s.step(&mut p, &g, 0.01).unwrap();
            last = p[0].data()[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-4, "{last}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::vector(vec![0.0, 1.0])];
        let mut s = AdamState::new(&p);
        assert!(s.step(&mut p, &[Tensor::vector(vec![1.0])], 0.1).is_err());
        assert_eq!(s.step, 0);
    }
}
