use crate::error::{Error, Result};

use super::Tensor;

/// Plain SGD: `p <- p - lr * grad` for every trainable tensor holding a
/// gradient. Frozen tensors and tensors without a gradient are untouched.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    for p in params {
        if !p.requires_grad {
            continue;
        }
        let Some(grad) = p.grad.take() else { continue };
        for (v, g) in p.data_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
        p.check_finite("sgd_step")?;
        p.grad = Some(grad);
    }
    Ok(())
}

/// Rescales all gradients of trainable tensors so their joint L2 norm is
/// at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0 && max_norm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "clip norm must be > 0, got {max_norm}"
        )));
    }
    let mut grads: Vec<&mut Vec<f64>> = params
        .into_iter()
        .filter(|p| p.requires_grad)
        .filter_map(|p| p.grad.as_mut())
        .collect();
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
    }
    Ok(norm)
}

pub fn zero_grad<'a>(params: impl IntoIterator<Item = &'a mut Tensor>) {
    params.into_iter().for_each(Tensor::zero_grad);
}
