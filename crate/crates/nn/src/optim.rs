//! Optimizers with serializable state so training can resume bit-exactly.

use crate::error::{NnError, Result};
use crate::params::{read_tensors, write_tensors, ParamSet, Reader};
use crate::tensor::Tensor;

fn check_grads(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(NnError::Invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.tensors().iter().zip(grads) {
        p.check_same(g, "optimizer step")?;
    }
    Ok(())
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        let first = self.velocity.is_empty();
        if first {
            self.velocity = grads
                .iter()
                .map(|g| Tensor::zeros(g.shape().to_vec()))
                .collect();
        }
        for ((p, g), buf) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            for ((pv, gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                let d = gv + self.weight_decay * *pv;
                *bv = if first { d } else { self.momentum * *bv + d };
                *pv -= lr * *bv;
            }
        }
        Ok(())
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.momentum, self.weight_decay] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let names = vec![String::new(); self.velocity.len()];
        write_tensors(&mut out, &names, &self.velocity);
        out
    }

    pub fn from_state_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let momentum = r.f64()?;
        let weight_decay = r.f64()?;
        let (_, velocity) = read_tensors(&mut r)?;
        Ok(Self {
            momentum,
            weight_decay,
            velocity,
        })
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|g| Tensor::zeros(g.shape().to_vec()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let denom = (*vv / bc2).sqrt() + self.eps;
                *pv -= lr * (*mv / bc1) / denom;
            }
        }
        Ok(())
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.beta1, self.beta2, self.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let names = vec![String::new(); self.m.len()];
        write_tensors(&mut out, &names, &self.m);
        write_tensors(&mut out, &names, &self.v);
        out
    }

    pub fn from_state_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let step = r.u64()?;
        let (_, m) = read_tensors(&mut r)?;
        let (_, v) = read_tensors(&mut r)?;
        Ok(Self {
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        match self {
            Self::Sgd(o) => o.step(params, grads, lr),
            Self::Adam(o) => o.step(params, grads, lr),
        }
    }

    /// Tagged state: one leading byte names the variant.
    pub fn state_bytes(&self) -> Vec<u8> {
        let (tag, body) = match self {
            Self::Sgd(o) => (0u8, o.state_bytes()),
            Self::Adam(o) => (1u8, o.state_bytes()),
        };
        let mut out = vec![tag];
        out.extend(body);
        out
    }

    pub fn from_state_bytes(bytes: &[u8]) -> Result<Self> {
        match bytes.split_first() {
            Some((0, rest)) => Ok(Self::Sgd(Sgd::from_state_bytes(rest)?)),
            Some((1, rest)) => Ok(Self::Adam(Adam::from_state_bytes(rest)?)),
            _ => Err(NnError::Blob("unknown optimizer tag".into())),
        }
    }
}
