use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `a = m·a + g; w -= lr·(g + m·a)`.
    Nesterov { learning_rate: f64, momentum: f64 },
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn nesterov() -> Self {
        OptimizerKind::Nesterov {
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerKind::Nesterov { learning_rate, .. } | OptimizerKind::Adam { learning_rate, .. } => learning_rate,
        }
    }
}

/// Optimizer state over a list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    slots: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Optimizer {
            kind,
            slots: zeros(),
            second: match kind {
                OptimizerKind::Adam { .. } => zeros(),
                OptimizerKind::Nesterov { .. } => Vec::new(),
            },
            steps: 0,
        }
    }

    pub fn for_params<T: Scalar>(kind: OptimizerKind, params: &[Tensor<T>]) -> Self {
        Self::new(kind, &params.iter().map(Tensor::len).collect::<Vec<_>>())
    }

    /// One update with learning rate `lr` (the schedule lives outside).
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Nesterov { momentum, .. } => {
                for ((p, g), a) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    for ((w, &g), a) in p.iter_mut().zip(g.iter()).zip(a.iter_mut()) {
                        let g = g.f64();
                        *a = momentum * *a + g;
                        *w = T::of(w.f64() - lr * (g + momentum * *a));
                    }
                }
            }
            OptimizerKind::Adam {
                beta1, beta2, epsilon, ..
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.slots).zip(&mut self.second) {
                    for (((w, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g.f64();
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w = T::of(w.f64() - lr * mh / (vh.sqrt() + epsilon));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let g = vec![0.5f64, 0.25];
        for kind in [OptimizerKind::nesterov(), OptimizerKind::adam()] {
            let mut opt = Optimizer::new(kind, &[2]);
            opt.step(&mut [p.as_mut_slice()], &[g.as_slice()], 0.0);
            assert_eq!(p, vec![1.0, -2.0]);
        }
    }
}
