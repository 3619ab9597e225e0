use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter
/// position and checked against names on every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let names = params.iter().map(|(n, _)| n.to_string()).collect();
        let m: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = m.clone();
        Self { config, step: 0, names, m, v }
    }

    /// Rebuilds optimizer state from serialized parts.
    pub fn from_parts(config: AdamConfig, step: u64, names: Vec<String>, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<Self> {
        if names.len() != m.len() || names.len() != v.len() {
            return Err(Error::Format("optimizer state has inconsistent entry counts".into()));
        }
        if m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Format("optimizer moment lengths differ".into()));
        }
        Ok(Self { config, step, names, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn first_moment(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// One update of every parameter from its gradient; gradients are
    /// cleared afterward. Fails without touching any value if a gradient is
    /// missing.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.names.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if name != self.names[i] || t.numel() != self.m[i].len() {
                return Err(Error::shape(format!("optimizer slot {i} is `{}`, got `{name}`", self.names[i])));
            }
            if t.grad().is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let (b1, b2) = (beta1 as f64, beta2 as f64);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let update = lr as f64 * m_hat / (v_hat.sqrt() + eps as f64);
                *theta = (*theta as f64 - update) as f32;
            }
            t.clear_grad();
        }
        Ok(())
    }
}
