//! Magnitude-based parameter importance and the boundary-weighted penalty
//! that keeps important parameters close to their previous values.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Copy of every parameter value taken at the previous step, with the
/// importances `omega = |theta_prev|`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceSnapshot {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    theta_prev: Vec<Vec<f32>>,
    omega: Vec<Vec<f32>>,
}

impl ImportanceSnapshot {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn theta_prev(&self) -> &[Vec<f32>] {
        &self.theta_prev
    }

    pub fn omega(&self) -> &[Vec<f32>] {
        &self.omega
    }

    /// Replaces the stored values with the current ones from `params`.
    pub fn refresh(&mut self, params: &ParamSet) -> Result<()> {
        self.check(params)?;
        for (i, (_, t)) in params.iter().enumerate() {
            self.theta_prev[i].copy_from_slice(t.data());
            for (o, &v) in self.omega[i].iter_mut().zip(t.data()) {
                *o = v.abs();
            }
        }
        Ok(())
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::shape(format!(
                "snapshot holds {} parameters, got {}",
                self.names.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if name != self.names[i] || t.shape() != self.shapes[i].as_slice() {
                return Err(Error::shape(format!(
                    "snapshot slot {i} is `{}` {:?}, got `{name}` {:?}",
                    self.names[i],
                    self.shapes[i],
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn snapshot(params: &ParamSet) -> ImportanceSnapshot {
    let mut names = Vec::with_capacity(params.len());
    let mut shapes = Vec::with_capacity(params.len());
    let mut theta_prev = Vec::with_capacity(params.len());
    let mut omega = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        names.push(name.to_string());
        shapes.push(t.shape().to_vec());
        theta_prev.push(t.data().to_vec());
        omega.push(t.data().iter().map(|v| v.abs()).collect());
    }
    ImportanceSnapshot { names, shapes, theta_prev, omega }
}

/// `sum_i omega_i·|theta_i - theta_prev_i|` over parameters registered on
/// the tape as `vars` (in `ParamSet` order).
pub fn reg_loss(tape: &mut Tape, vars: &[Var], snap: &ImportanceSnapshot) -> Result<Var> {
    if vars.len() != snap.names.len() {
        return Err(Error::shape(format!("snapshot holds {} parameters, got {}", snap.names.len(), vars.len())));
    }
    let mut total: Option<Var> = None;
    for (i, &v) in vars.iter().enumerate() {
        let shape = tape.shape(v).to_vec();
        if shape != snap.shapes[i] {
            return Err(Error::shape(format!(
                "parameter `{}` has shape {shape:?}, snapshot {:?}",
                snap.names[i], snap.shapes[i]
            )));
        }
        let prev = tape.constant(Tensor::new(shape.clone(), snap.theta_prev[i].clone())?);
        let omega = tape.constant(Tensor::new(shape, snap.omega[i].clone())?);
        let diff = tape.sub(v, prev)?;
        let abs = tape.abs(diff);
        let weighted = tape.mul(abs, omega)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// `task + gamma·distance·reg`.
pub fn total_loss(tape: &mut Tape, task: Var, distance: f64, reg: Var, gamma: f64) -> Result<Var> {
    let weight = (gamma * distance) as f32;
    if weight == 0.0 {
        return Ok(task);
    }
    let scaled = tape.scale(reg, weight);
    tape.add(task, scaled)
}
