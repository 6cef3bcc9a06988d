use flexibit_tensor::{Scalar, Tensor};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub steps: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            steps: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified; `names` labels the offending tensor.
pub fn adam_step<F: Scalar>(
    params: &mut [Tensor<F>],
    grads: &[&[F]],
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
    names: &[String],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument("gradient count differs from parameter count".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if g.len() != p.numel() {
            return Err(Error::InvalidArgument(format!("gradient {i} has the wrong length")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                step: state.steps as usize,
            });
        }
    }
    state.steps += 1;
    let t = state.steps as i32;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (one, eps) = (F::one(), F::lit(cfg.eps));
    let c1 = F::lit(1.0 - cfg.beta1.powi(t));
    let c2 = F::lit(1.0 - cfg.beta2.powi(t));
    let lr = F::lit(cfg.lr);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
