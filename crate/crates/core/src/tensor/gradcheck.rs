use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Central-difference step.
pub const FD_STEP: f32 = 1e-3;

/// Random directions probed per input tensor.
const DIRECTIONS: usize = 4;

/// Errors are measured relative to the larger of the two directional
/// derivatives and the gradient's L2 norm (the typical magnitude of a ±1
/// directional derivative), with this absolute floor below that.
const ABS_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error over every probe.
    pub max_rel_error: f64,
    /// Max relative error per input tensor, in input order.
    pub per_param: Vec<f64>,
    /// Number of directional probes evaluated.
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences at `params`.
///
/// Each tensor is probed along a few random ±1 directions `u`: the analytic
/// directional derivative `⟨∇f, u⟩` is checked against
/// `(f(x + hu) − f(x − hu)) / 2h`. Probing whole directions instead of single
/// coordinates keeps the f32 rounding noise of the loss small relative to the
/// quantity being compared.
pub fn grad_check<F>(f: F, params: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let y = g.scalar(out);
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "grad_check objective" });
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite { op: "grad_check objective" });
    }
    let grads = g.backward(out)?;

    let seeds = SeedTree::new(0x6772_6164);
    let mut per_param = Vec::with_capacity(params.len());
    let mut checked = 0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        let base = params[pi].data();
        let grad_norm = analytic
            .data()
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        let mut worst = 0.0f64;
        for dir in 0..DIRECTIONS {
            let mut rng = seeds.stream("direction", (pi * DIRECTIONS + dir) as u64);
            let u: Vec<f32> = (0..base.len())
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let plus: Vec<f32> = base.iter().zip(&u).map(|(x, d)| x + FD_STEP * d).collect();
            let minus: Vec<f32> = base.iter().zip(&u).map(|(x, d)| x - FD_STEP * d).collect();
            // Perturbations as actually represented in f32, per coordinate.
            let mut dir_dot = 0.0f64;
            let mut scale = 0.0f64;
            for i in 0..base.len() {
                let step = plus[i] as f64 - minus[i] as f64;
                dir_dot += analytic.data()[i] as f64 * step;
                scale += step * u[i] as f64;
            }
            let step_len = scale / base.len().max(1) as f64;
            work[pi].data_mut().copy_from_slice(&plus);
            let fp = eval(&work)?;
            work[pi].data_mut().copy_from_slice(&minus);
            let fm = eval(&work)?;
            work[pi].data_mut().copy_from_slice(base);

            let numeric = (fp - fm) / step_len;
            let analytic_dir = dir_dot / step_len;
            let rel = (analytic_dir - numeric).abs()
                / analytic_dir
                    .abs()
                    .max(numeric.abs())
                    .max(grad_norm)
                    .max(ABS_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
        checked,
    })
}
