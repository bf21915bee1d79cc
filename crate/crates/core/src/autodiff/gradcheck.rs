//! Central-difference gradient verification.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::NonScalarBackward(t.shape().to_vec()));
    }
    if !t.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(t.item())
}

/// Largest per-coordinate error between the analytic gradient of the scalar function
/// `f` at `point` and a central difference with step `eps`, measured as
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone().with_requires_grad())?;
    let loss = f(&mut g, x)?;
    eval_scalar(&g, loss)?;
    g.backward(loss)?;
    let analytic = g.grad(x).expect("leaf gradient").to_vec();

    let eval_at = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t)?;
        let y = f(&mut g, x)?;
        eval_scalar(&g, y)
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * eps);
        worst = worst.max(rel_error(a, numeric));
    }
    Ok(worst)
}

/// Same measure as [`grad_check`], over selected `(parameter, flat index)` coordinates
/// of a scalar function of a whole parameter store.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    eval_scalar(&g, loss)?;
    g.backward(loss)?;
    let grads: std::collections::HashMap<ParamId, Vec<f64>> =
        g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect();

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &(id, i) in coords {
        let analytic = grads.get(&id).map_or(0.0, |gr| gr[i]);
        let orig = store.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let mut gp = Graph::new();
        let up = f(&mut gp, &probe).and_then(|v| eval_scalar(&gp, v))?;
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let mut gm = Graph::new();
        let down = f(&mut gm, &probe).and_then(|v| eval_scalar(&gm, v))?;
        probe.get_mut(id).data_mut()[i] = orig;
        worst = worst.max(rel_error(analytic, (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}
