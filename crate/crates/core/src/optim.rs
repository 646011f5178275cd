//! Adaptive first-order optimizer (Adam) over flat parameter stores.

use crate::backbone::ParamStore;
use crate::real::Scalar;

/// Adam with bias correction. Weight decay is not applied here; the L2
/// penalty is part of the loss, so its gradient (2 * lambda_reg * theta)
/// arrives through the gradient buffer and finite-difference checks see it.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    t: i32,
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr: F::c(lr),
            beta1: F::c(0.9),
            beta2: F::c(0.999),
            eps: F::c(1e-8),
            t: 0,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &ParamStore<F>) {
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t);
        let bc2 = F::one() - self.beta2.powi(self.t);
        let one = F::one();
        for ((p, &g), (m, v)) in params
            .data_mut()
            .iter_mut()
            .zip(grads.data().iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
