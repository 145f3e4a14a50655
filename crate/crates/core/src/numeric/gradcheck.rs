use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - central| / max(1, |central|)
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_element: usize,
    pub elements_checked: usize,
}

/// Compares tape gradients of `loss_fn` against central differences for
/// every element of every trainable tensor in `params`.
pub fn grad_check<F>(params: &mut [Tensor], eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(params, eps, usize::MAX, loss_fn)
}

/// Like [`grad_check`] but probes at most `per_param` evenly spaced
/// elements of each tensor.
pub fn grad_check_sampled<F>(
    params: &mut [Tensor],
    eps: f64,
    per_param: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let analytic = analytic_grads(params, &loss_fn)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_element: 0,
        elements_checked: 0,
    };
    for pi in 0..params.len() {
        let Some(grad) = &analytic[pi] else { continue };
        let n = params[pi].numel();
        let stride = n.div_ceil(per_param.min(n).max(1)).max(1);
        for ei in (0..n).step_by(stride) {
            let original = params[pi].data()[ei];
            params[pi].data_mut()[ei] = original + eps;
            let plus = evaluate(params, &loss_fn);
            params[pi].data_mut()[ei] = original - eps;
            let minus = evaluate(params, &loss_fn);
            params[pi].data_mut()[ei] = original;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(Error::GradCheck {
                        param: pi,
                        element: ei,
                        detail: e.to_string(),
                    })
                }
            };
            let central = (plus - minus) / (2.0 * eps);
            if !central.is_finite() {
                return Err(Error::GradCheck {
                    param: pi,
                    element: ei,
                    detail: "non-finite central difference".into(),
                });
            }
            let err = (grad[ei] - central).abs() / central.abs().max(1.0);
            report.elements_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = pi;
                report.worst_element = ei;
            }
        }
    }
    Ok(report)
}

fn bind<'t>(tape: &mut Tape<'t>, params: &'t [Tensor]) -> Result<Vec<Var>> {
    params.iter().map(|p| tape.param(p)).collect()
}

fn evaluate<F>(params: &[Tensor], loss_fn: &F) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params)?;
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

fn analytic_grads<F>(params: &[Tensor], loss_fn: &F) -> Result<Vec<Option<Vec<f64>>>>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params)?;
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(params
        .iter()
        .zip(&vars)
        .map(|(p, &v)| {
            p.requires_grad
                .then(|| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        })
        .collect())
}
