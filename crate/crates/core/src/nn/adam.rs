//! Adam optimizer with L2 weight decay folded into the gradient.

use super::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied as an additive `wd * w` term on the gradient before the
    /// moment updates.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment accumulators aligned with a flat parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.shape().to_vec()).collect();
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all parameters. `lr` overrides the base rate so
    /// schedules can drive it per step.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], hyper: &AdamHyper, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state is for {} params, got {}", self.m.len(), params.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .map(|p| &mut **p)
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert!(
                p.same_shape(g) && p.same_shape(m),
                "adam shape mismatch: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            );
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = gd[i] + hyper.weight_decay * pd[i];
                md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gi;
                vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + hyper.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut params = vec![Tensor::row(&[1.0, -2.0])];
        let grads = vec![Tensor::zeros(&[1, 2])];
        let mut state = AdamState::new(params.iter());
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        state.step(&mut refs, &grads, &hyper, hyper.lr);
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // w=1, g=1, no decay: m=0.1, v=0.001, mhat=1, vhat=1,
        // update = lr * 1 / (1 + eps) ~= lr
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(params.iter());
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        state.step(&mut refs, &grads, &hyper, 1e-3);
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((params[0].item() - expect).abs() < 1e-15);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // minimize (w - 3)^2 from w = 0; the descent phase (before the
        // iterate reaches the optimum's neighborhood) must be monotone
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(params.iter());
        let hyper = AdamHyper { weight_decay: 0.0, lr: 5e-2, ..AdamHyper::default() };
        let mut prev = f64::INFINITY;
        let mut descending = true;
        for step in 0..1000 {
            let w = params[0].item();
            let loss = (w - 3.0) * (w - 3.0);
            if loss < 1e-4 {
                descending = false;
            }
            let grads = vec![Tensor::scalar(2.0 * (w - 3.0))];
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            state.step(&mut refs, &grads, &hyper, hyper.lr);
            if step > 20 && descending {
                assert!(loss <= prev + 1e-9, "loss rose at step {step}: {prev} -> {loss}");
            }
            prev = loss;
        }
        assert!((params[0].item() - 3.0).abs() < 1e-2);
    }
}
