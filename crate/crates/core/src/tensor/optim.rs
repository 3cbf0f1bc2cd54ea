use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

/// Hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    /// SGD velocity or Adam first moment, one buffer per parameter.
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

/// Updates a fixed, ordered list of parameters from their gradients.
///
/// Gradients are left in place; call [`Optimizer::zero_grad`] between steps.
pub struct Optimizer<T: Scalar> {
    params: Vec<Tensor<T>>,
    state: OptimizerState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(params: Vec<Tensor<T>>, kind: OptimizerKind, learning_rate: f64) -> Self {
        let buffers = |p: &Vec<Tensor<T>>| p.iter().map(|t| vec![T::zero(); t.numel()]).collect();
        let state = OptimizerState {
            kind,
            learning_rate,
            step: 0,
            first_moment: buffers(&params),
            second_moment: match kind {
                OptimizerKind::Adam { .. } => buffers(&params),
                OptimizerKind::Sgd { .. } => Vec::new(),
            },
        };
        Optimizer { params, state }
    }

    pub fn adam(params: Vec<Tensor<T>>, learning_rate: f64) -> Self {
        Self::new(params, OptimizerKind::adam(), learning_rate)
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    pub fn step(&mut self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|p| p.grad_ref().is_none()) {
            return Err(Error::Usage(format!(
                "optimizer step: parameter {i} (shape {:?}) has no gradient",
                self.params[i].shape()
            )));
        }
        self.state.step += 1;
        let lr = T::from_f64_lossy(self.state.learning_rate);
        match self.state.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = T::from_f64_lossy(momentum);
                for (param, velocity) in self.params.iter().zip(&mut self.state.first_moment) {
                    let grad = param.grad_ref();
                    let grad = grad.as_ref().expect("checked above");
                    let mut data = param.data_mut();
                    for ((p, v), &g) in data.iter_mut().zip(velocity.iter_mut()).zip(grad) {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.state.step as i32;
                let (b1, b2, eps) = (
                    T::from_f64_lossy(beta1),
                    T::from_f64_lossy(beta2),
                    T::from_f64_lossy(eps),
                );
                let correction1 = T::one() - b1.powi(t);
                let correction2 = T::one() - b2.powi(t);
                let moments = self
                    .state
                    .first_moment
                    .iter_mut()
                    .zip(&mut self.state.second_moment);
                for (param, (m, v)) in self.params.iter().zip(moments) {
                    let grad = param.grad_ref();
                    let grad = grad.as_ref().expect("checked above");
                    let mut data = param.data_mut();
                    for (((p, mi), vi), &g) in data
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(grad)
                    {
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let m_hat = *mi / correction1;
                        let v_hat = *vi / correction2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
