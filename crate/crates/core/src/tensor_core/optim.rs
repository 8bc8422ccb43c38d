use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Plain (non-Nesterov) momentum SGD:
/// `v <- momentum * v + grad + weight_decay * w`, `w <- w - lr * v`.
///
/// Every parameter must carry a gradient; gradients are cleared afterwards.
/// Nothing is modified if any gradient is missing.
pub fn sgd_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    config: &SgdConfig,
) -> Result<()> {
    config.validate()?;
    let mut params: Vec<&mut Parameter<T>> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    let lr = T::of(config.lr);
    let mu = T::of(config.momentum);
    let wd = T::of(config.weight_decay);
    for p in params.iter_mut() {
        let grad = p.tensor.take_grad().expect("checked above");
        let n = grad.len();
        let buf = p.momentum_buffer.get_or_insert_with(|| vec![T::zero(); n]);
        let w = p.tensor.data_mut();
        for ((w, v), g) in w.iter_mut().zip(buf.iter_mut()).zip(grad) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}
