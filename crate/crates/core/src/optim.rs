//! First-order optimizers over a [`ParamSet`]. Frozen tensors are skipped.

use crate::error::{invalid, Result};
use crate::tensor::{ParamGrads, ParamSet, Tensor};

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        check(params, grads)?;
        for (p, g) in params.tensors_mut().iter_mut().zip(&grads.0) {
            if !p.requires_grad() {
                continue;
            }
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * d;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        check(params, grads)?;
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return invalid("optimizer state does not match parameter set");
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let g = grads.0[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors, suitable for a checkpoint. The step
    /// count is stored as a scalar under `adam.step`.
    pub fn state(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as f64))];
        for (i, name) in params.names().iter().enumerate() {
            if let (Some(m), Some(v)) = (self.m.get(i), self.v.get(i)) {
                out.push((format!("adam.m.{name}"), m.clone()));
                out.push((format!("adam.v.{name}"), v.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, params: &ParamSet, state: &[(String, Tensor)]) -> Result<()> {
        let find = |key: &str| state.iter().find(|(n, _)| n == key).map(|(_, t)| t);
        let step = find("adam.step").ok_or_else(|| crate::Error::Format("missing adam.step".into()))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in params.iter() {
            let (Some(mt), Some(vt)) = (find(&format!("adam.m.{name}")), find(&format!("adam.v.{name}"))) else {
                return invalid(format!("optimizer state missing for {name}"));
            };
            if mt.shape() != t.shape() || vt.shape() != t.shape() {
                return invalid(format!("optimizer state shape mismatch for {name}"));
            }
            m.push(mt.clone());
            v.push(vt.clone());
        }
        self.step = step.item()? as u64;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

fn check(params: &ParamSet, grads: &ParamGrads) -> Result<()> {
    if grads.0.len() != params.len() {
        return invalid(format!("{} gradients for {} parameters", grads.0.len(), params.len()));
    }
    for ((name, p), g) in params.iter().zip(&grads.0) {
        if p.shape() != g.shape() {
            return invalid(format!("gradient for {name} has shape {:?}, expected {:?}", g.shape(), p.shape()));
        }
    }
    if !grads.is_finite() {
        return Err(crate::Error::NonFinite("gradient".into()));
    }
    Ok(())
}
