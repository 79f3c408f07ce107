//! Plain SGD and decoupled-weight-decay Adam over named parameter blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A model whose parameters are a fixed, ordered list of named matrices.
pub trait ParamSet: Clone {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)>;
    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    /// Same shapes, all zeros.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, b) in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.as_slice().len()).sum()
    }

    /// Fails with the first block that holds a NaN or infinity.
    fn check_finite(&self) -> Result<()> {
        for (name, b) in self.blocks() {
            if let Some(pos) = b.as_slice().iter().position(|x| !x.is_finite()) {
                return Err(Error::numerical(
                    name,
                    format!("non-finite value {} at flat index {pos}", b.as_slice()[pos]),
                ));
            }
        }
        Ok(())
    }

    /// `self += s · other`, block by block.
    fn axpy(&mut self, s: f64, other: &Self) {
        let src = other.blocks();
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(src) {
            for (d, x) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *d += s * x;
            }
        }
    }

    fn dot(&self, other: &Self) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|((_, a), (_, b))| crate::linalg::dot(a.as_slice(), b.as_slice()))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::Adamw),
            other => Err(format!("unknown optimizer '{other}' (expected sgd or adamw)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adamw => "adamw",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..OptimizerConfig::sgd()
        }
    }
}

/// Optimizer state. Moment buffers are allocated lazily on the first AdamW step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One descent step `params ← params − lr · update(grads)`. Gradients are
    /// validated first; a non-finite entry aborts the step and names its block.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate {lr} must be finite and >= 0")));
        }
        grads.check_finite()?;
        if lr == 0.0 {
            return Ok(());
        }
        self.step += 1;
        let cfg = self.config;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in params.blocks_mut().into_iter().zip(grads.blocks()) {
                    for (x, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *x -= lr * (d + cfg.weight_decay * *x);
                    }
                }
            }
            OptimizerKind::Adamw => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.blocks().iter().map(|(_, g)| zeros(g)).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                let blocks = params.blocks_mut().into_iter().zip(grads.blocks());
                for (bi, ((_, p), (_, g))) in blocks.enumerate() {
                    let m = self.first_moment[bi].as_mut_slice();
                    let v = self.second_moment[bi].as_mut_slice();
                    for (((x, d), mi), vi) in p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *x -= lr * cfg.weight_decay * *x;
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * d;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * d * d;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *x -= lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn zeros(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Quad {
        x: Matrix,
    }

    impl ParamSet for Quad {
        fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
            vec![("x", &self.x)]
        }
        fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
            vec![("x", &mut self.x)]
        }
    }

    // f(x) = ½ Σ a_i (x_i − c_i)²
    fn grad(q: &Quad, a: &[f64], c: &[f64]) -> Quad {
        let g: Vec<f64> = (0..a.len()).map(|i| a[i] * (q.x.as_slice()[i] - c[i])).collect();
        Quad {
            x: Matrix::from_vec(1, a.len(), g),
        }
    }

    #[test]
    fn sgd_step_on_quadratic_matches_closed_form() {
        let a = [2.0, 0.5];
        let c = [1.0, -3.0];
        let mut q = Quad {
            x: Matrix::from_vec(1, 2, vec![0.0, 0.0]),
        };
        let g = grad(&q, &a, &c);
        Optimizer::new(OptimizerConfig::sgd()).step(&mut q, &g, 0.1).unwrap();
        // x − η a (x − c) = 0.1 · a · c
        assert_eq!(q.x.as_slice(), &[0.2, -0.15000000000000002]);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut q = Quad {
            x: Matrix::from_vec(1, 2, vec![1.0, 1.0]),
        };
        let g = Quad {
            x: Matrix::from_vec(1, 2, vec![3.0, -0.25]),
        };
        Optimizer::new(OptimizerConfig::adamw(0.0)).step(&mut q, &g, 0.01).unwrap();
        let x = q.x.as_slice();
        assert!((x[0] - 0.99).abs() < 1e-8);
        assert!((x[1] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut q = Quad {
            x: Matrix::from_vec(1, 2, vec![0.3, 0.7]),
        };
        let before = q.clone();
        let g = grad(&q, &[1.0, 1.0], &[0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.02));
        opt.step(&mut q, &g, 0.0).unwrap();
        assert_eq!(q, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut q = Quad {
            x: Matrix::from_vec(1, 1, vec![0.0]),
        };
        let g = Quad {
            x: Matrix::from_vec(1, 1, vec![f64::NAN]),
        };
        let err = Optimizer::new(OptimizerConfig::sgd()).step(&mut q, &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numerical { ref block, .. } if block == "x"), "{err}");
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        let a = [2.0, 0.5, 5.0];
        let c = [1.0, -3.0, 0.25];
        let mut q = Quad {
            x: Matrix::zeros(1, 3),
        };
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.0));
        for _ in 0..3000 {
            let g = grad(&q, &a, &c);
            opt.step(&mut q, &g, 0.01).unwrap();
        }
        for (x, c) in q.x.as_slice().iter().zip(c) {
            assert!((x - c).abs() < 1e-3);
        }
    }
}
