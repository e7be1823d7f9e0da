use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam keeping the running maximum of the second moment.
    Amsgrad,
    /// Adam with decoupled weight decay.
    Adamw,
}

impl OptimizerKind {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Self::Amsgrad => 1e-3,
            Self::Adamw => 3e-4,
        }
    }

    pub fn default_weight_decay(self) -> f64 {
        match self {
            Self::Amsgrad => 0.0,
            Self::Adamw => 0.01,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "amsgrad" => Ok(Self::Amsgrad),
            "adamw" => Ok(Self::Adamw),
            other => Err(format!("unknown optimizer `{other}` (expected amsgrad or adamw)")),
        }
    }
}

/// Adam-family optimizer state over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    v_max: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
            v_max: if kind == OptimizerKind::Amsgrad { zeros() } else { vec![] },
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Running maxima of the second moment (empty for AdamW).
    pub fn second_moment_max(&self) -> &[Vec<f64>] {
        &self.v_max
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = self.lr / bc1;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                match self.kind {
                    OptimizerKind::Adamw => *w *= decay,
                    // L2 penalty folded into the gradient, as classic Adam does
                    OptimizerKind::Amsgrad => {}
                }
                let gi = match self.kind {
                    OptimizerKind::Amsgrad => gi + self.weight_decay * *w,
                    OptimizerKind::Adamw => gi,
                };
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let second = match self.kind {
                    OptimizerKind::Amsgrad => {
                        let vm = &mut self.v_max[k][i];
                        *vm = vm.max(v[i]);
                        *vm
                    }
                    OptimizerKind::Adamw => v[i],
                };
                let denom = second.sqrt() / bc2_sqrt + self.eps;
                *w -= step_size * m[i] / denom;
            }
        }
    }
}
