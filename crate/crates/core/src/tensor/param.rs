use std::sync::Arc;

use super::tape::{Grads, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Adam optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamCfg {
    pub fn with_lr(lr: f64) -> Self {
        AdamCfg {
            lr,
            ..AdamCfg::default()
        }
    }
}

impl Default for AdamCfg {
    fn default() -> Self {
        AdamCfg {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// An optimizable tensor with its accumulated gradient and Adam state.
///
/// Values are shared copy-on-write with any tape that read them, so pushing a
/// parameter onto a tape is free and the first update after the tapes are
/// dropped mutates in place. Moment estimates and the step counter persist
/// across calls to [`Param::adam_step`].
pub struct Param {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Param {
    pub fn new(init: Tensor) -> Self {
        let (rows, cols) = init.shape();
        let n = init.len();
        Param {
            rows,
            cols,
            data: init.shared(),
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn value(&self) -> Tensor {
        Tensor::from_shared(self.rows, self.cols, Arc::clone(&self.data))
    }

    /// Record this parameter as a leaf on `tape` (no copy).
    pub fn push(&self, tape: &Tape) -> Var {
        tape.leaf(self.value())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    /// Add a gradient buffer (e.g. one chunk's contribution) into the
    /// accumulator.
    pub fn accumulate(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.grad.len() {
            return Err(Error::shape(
                "grad accumulate",
                (self.rows, self.cols),
                (g.len(), 1),
            ));
        }
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    /// Accumulate the gradient that `backward` produced for `var`, if any.
    pub fn accumulate_from(&mut self, grads: &Grads, var: Var) -> Result<()> {
        if let Some(g) = grads.get(var) {
            self.accumulate(g)?;
        }
        Ok(())
    }

    /// Scale the accumulated gradient (used to average over chunks).
    pub fn scale_grad(&mut self, s: f64) {
        for g in self.grad.iter_mut() {
            *g *= s;
        }
    }

    /// One Adam update from the accumulated gradient. Does not clear it.
    pub fn adam_step(&mut self, cfg: &AdamCfg) -> Result<()> {
        if !(cfg.lr > 0.0) {
            return Err(Error::InvalidParam(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let x = Arc::make_mut(&mut self.data);
        for i in 0..x.len() {
            let g = self.grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            x[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        Ok(())
    }

    /// Optimizer state for serialization: (value, m, v, step count).
    pub fn state(&self) -> (&[f64], &[f64], &[f64], u64) {
        (&self.data, &self.m, &self.v, self.t)
    }

    /// Restore from serialized state; shapes must match the construction
    /// shape.
    pub fn restore(&mut self, value: &[f64], m: &[f64], v: &[f64], t: u64) -> Result<()> {
        let n = self.len();
        if value.len() != n || m.len() != n || v.len() != n {
            return Err(Error::InvalidParam(format!(
                "restore length mismatch: param has {} values, got {}/{}/{}",
                n,
                value.len(),
                m.len(),
                v.len()
            )));
        }
        self.data = Arc::new(value.to_vec());
        self.m = m.to_vec();
        self.v = v.to_vec();
        self.t = t;
        self.grad.fill(0.0);
        Ok(())
    }
}
