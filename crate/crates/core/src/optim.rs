//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamBlock, ParamFile};

pub const OPTIMIZER_MAGIC: [u8; 4] = *b"POPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    #[default]
    #[serde(alias = "adam")]
    AdaptiveMoments,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::AdaptiveMoments => "adaptive-moments",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    /// Velocity (momentum) or first moment (adam), one buffer per slice.
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, momentum: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, first: Vec::new(), second: Vec::new() }
    }

    /// One update. `params` and `grads` must keep the same slice order and
    /// lengths across calls.
    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient slice count");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.t += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.iter_mut().zip(g.iter()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((x, d), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *vi = self.momentum * *vi + d;
                        *x -= lr * *vi;
                    }
                }
            }
            OptimizerKind::AdaptiveMoments => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((x, d), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *vi = b2 * *vi + (1.0 - b2) * d * d;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }

    pub fn to_param_file(&self) -> ParamFile {
        let mut blocks = Vec::new();
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            blocks.push(ParamBlock::new(format!("first.{i}"), vec![m.len()], m.clone()));
            blocks.push(ParamBlock::new(format!("second.{i}"), vec![v.len()], v.clone()));
        }
        ParamFile { magic: OPTIMIZER_MAGIC, architecture: self.kind.name().into(), parts: 0, step: self.t, blocks }
    }

    /// Restores moment buffers written by [`Optimizer::to_param_file`].
    pub fn restore(&mut self, file: &ParamFile) -> Result<()> {
        if file.architecture != self.kind.name() {
            return Err(Error::Architecture(format!(
                "optimizer state is for `{}`, configuration uses `{}`",
                file.architecture,
                self.kind.name()
            )));
        }
        let n = file.blocks.len() / 2;
        self.first = (0..n).map(|i| file.blocks[2 * i].data.clone()).collect();
        self.second = (0..n).map(|i| file.blocks[2 * i + 1].data.clone()).collect();
        self.t = file.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(kind: OptimizerKind, steps: usize) -> Vec<f64> {
        // Minimise ½‖x − c‖².
        let c = [1.0, -2.0, 0.5];
        let mut x = vec![0.0; 3];
        let mut opt = Optimizer::new(kind, 0.1);
        for _ in 0..steps {
            let g: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
            opt.step(vec![&mut x[..]], &[&g[..]]);
        }
        x
    }

    #[test]
    fn each_kind_converges_on_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::SgdMomentum, OptimizerKind::AdaptiveMoments] {
            let x = run(kind, 400);
            assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 2.0).abs() < 1e-3, "{kind:?}: {x:?}");
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut x = vec![3.0, -1.0];
        let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoments, 0.01);
        opt.step(vec![&mut x[..]], &[&[5.0, -1e-3][..]]);
        assert!((x[0] - 2.99).abs() < 1e-9 && (x[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::SgdMomentum, OptimizerKind::AdaptiveMoments] {
            let mut x = vec![0.3, -0.7];
            let mut opt = Optimizer::new(kind, 0.5);
            opt.step(vec![&mut x[..]], &[&[0.0, 0.0][..]]);
            assert_eq!(x, vec![0.3, -0.7]);
        }
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let mut x = vec![0.0; 2];
        let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoments, 0.05);
        let grad = |x: &[f64]| vec![x[0] - 1.0, 2.0 * (x[1] + 1.0)];
        for _ in 0..3 {
            let g = grad(&x);
            opt.step(vec![&mut x[..]], &[&g[..]]);
        }
        let mut resumed = Optimizer::new(OptimizerKind::AdaptiveMoments, 0.05);
        resumed.restore(&opt.to_param_file()).unwrap();
        let mut y = x.clone();
        for _ in 0..3 {
            let g = grad(&x);
            opt.step(vec![&mut x[..]], &[&g[..]]);
            let g = grad(&y);
            resumed.step(vec![&mut y[..]], &[&g[..]]);
        }
        assert_eq!(x, y);
    }
}
