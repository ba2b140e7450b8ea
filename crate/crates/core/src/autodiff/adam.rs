//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    /// Fresh state for parameters with the given shapes (β1 0.9, β2 0.999, ε 1e-8).
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self::with_betas(shapes, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(shapes: &[&[usize]], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &[Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Invalid(format!("adam: learning rate must be positive, got {lr}")));
        }
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: state tracks {} tensors but got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "adam: tensor {i} has parameter shape {:?}, gradient shape {:?}, state shape {:?}",
                    p.shape(),
                    g.shape(),
                    self.first[i].shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut st = AdamState::for_params(&p);
        st.step(&mut p, &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + ε)
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::for_params(&p);
        st.step(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        assert!((p[0].item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::for_params(&p);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * (p[0].item() - 3.0));
            st.step(&mut p, &[g], 0.1).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 0.1, "p = {}", p[0].item());
    }

    #[test]
    fn rejects_mismatched_shapes_and_bad_lr() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::for_params(&p);
        assert!(st.step(&mut p, &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(st.step(&mut p, &[Tensor::zeros(&[2])], 0.0).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
