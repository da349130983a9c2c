//! Central finite-difference verification of [`Graph::backward`].

use crate::error::{Result, TensorError};
use crate::graph::{BackwardFault, Graph, Var};
use crate::par::{self, Parallelism};
use crate::tensor::Tensor;

/// Relative-error floor used in the denominator.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares backward gradients of `loss_fn` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h`, one coordinate at a time.
///
/// `loss_fn` receives a graph and one variable per entry of `params`, and
/// must return a scalar.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    grad_check_with(loss_fn, params, step, None, Parallelism::Auto)
}

pub fn grad_check_with<F>(
    loss_fn: F,
    params: &[Tensor],
    step: f64,
    fault: Option<BackwardFault>,
    parallelism: Parallelism,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    if !(step > 0.0) {
        return Err(TensorError::contract(format!("step must be > 0, got {step}")));
    }
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    check_finite(g.value(loss).item())?;
    let analytic = g.backward(loss)?.into_tensors();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::evaluation();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        let v = g.value(loss).item();
        check_finite(v)?;
        Ok(v)
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |j| (p, j)))
        .collect();
    let errors = par::map(&coords, parallelism, |&(p, j)| -> Result<f64> {
        let mut shifted = params.to_vec();
        let base = params[p].data()[j];
        shifted[p].data_mut()[j] = base + step;
        let plus = eval(&shifted)?;
        shifted[p].data_mut()[j] = base - step;
        let minus = eval(&shifted)?;
        let numeric = (plus - minus) / (2.0 * step);
        Ok(relative_error(analytic[p].data()[j], numeric))
    });

    let mut per_param = vec![0.0f64; params.len()];
    for (&(p, _), e) in coords.iter().zip(errors) {
        per_param[p] = per_param[p].max(e?);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        step,
    })
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(format!("loss evaluated to {v}")))
    }
}
