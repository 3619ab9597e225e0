//! Directional central-difference checks of tape gradients.
//!
//! For inputs `x`, direction `v` and step `h`, the outputs at `x ± h·v` give
//! a numerical Jacobian-vector product `j`. The analytic side is the tape
//! gradient of `r·F(x)` with `r = j/|j|`, dotted with the perturbation that
//! was actually applied after rounding the perturbed inputs to `f32`.
//!
//! A scalar output is rounded to `f32` once, so its central differences carry
//! an absolute error near `ulp(f)/h` regardless of the direction. For scalar
//! outputs the direction is therefore first oriented along the signs of the
//! per-coordinate central differences, which keeps the directional
//! derivative `sum |g_i|·|v_i|` well above that floor.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Check {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Checks `f` at `inputs` along `direction` (one slice per input; an empty
/// slice keeps that input fixed). `f` receives the inputs as tape leaves.
pub fn check_directional<F>(inputs: &[Tensor], direction: &[Vec<f32>], step: f64, f: F) -> Result<Check>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if direction.len() != inputs.len() {
        return Err(Error::shape(format!("{} directions for {} inputs", direction.len(), inputs.len())));
    }
    for (x, v) in inputs.iter().zip(direction) {
        if !v.is_empty() && v.len() != x.numel() {
            return Err(Error::shape(format!("direction has {} values, input {}", v.len(), x.numel())));
        }
    }
    let eval = |xs: &[Tensor]| -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).to_vec())
    };
    let mut direction = direction.to_vec();
    if eval(inputs)?.len() == 1 {
        orient(inputs, &mut direction, step, &eval)?;
    }
    let shifted = |sign: f64| -> Result<Vec<Tensor>> {
        inputs
            .iter()
            .zip(&direction)
            .map(|(x, v)| {
                let mut t = x.clone();
                for (a, &d) in t.data_mut().iter_mut().zip(v) {
                    *a = (*a as f64 + sign * step * d as f64) as f32;
                }
                Ok(t)
            })
            .collect()
    };
    let (plus, minus) = (shifted(1.0)?, shifted(-1.0)?);
    let (op, om) = (eval(&plus)?, eval(&minus)?);
    let jvp: Vec<f64> = op.iter().zip(&om).map(|(&a, &b)| (a as f64 - b as f64) / (2.0 * step)).collect();
    let norm = jvp.iter().map(|j| j * j).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::invalid("numerical directional derivative vanishes; pick another instance"));
    }
    let r: Vec<f32> = jvp.iter().map(|j| (j / norm) as f32).collect();
    let numeric: f64 = jvp.iter().zip(&r).map(|(&j, &w)| j * w as f64).sum();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape, r)?);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;
    let mut analytic = 0.0f64;
    for (i, v) in direction.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let Some(g) = grads.get(vars[i]) else { continue };
        for k in 0..g.len() {
            let applied = (plus[i].data()[k] as f64 - minus[i].data()[k] as f64) / (2.0 * step);
            analytic += g[k] as f64 * applied;
        }
    }
    let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
    Ok(Check { analytic, numeric, rel_err })
}

/// Flips each direction component to the sign of the central difference
/// along its own coordinate.
fn orient<E>(inputs: &[Tensor], direction: &mut [Vec<f32>], step: f64, eval: &E) -> Result<()>
where
    E: Fn(&[Tensor]) -> Result<Vec<f32>>,
{
    let mut xs = inputs.to_vec();
    for (i, v) in direction.iter_mut().enumerate() {
        for (k, vk) in v.iter_mut().enumerate() {
            let x0 = xs[i].data()[k];
            xs[i].data_mut()[k] = (x0 as f64 + step) as f32;
            let up = eval(&xs)?[0];
            xs[i].data_mut()[k] = (x0 as f64 - step) as f32;
            let down = eval(&xs)?[0];
            xs[i].data_mut()[k] = x0;
            if up < down {
                *vk = -vk.abs();
            } else {
                *vk = vk.abs();
            }
        }
    }
    Ok(())
}
