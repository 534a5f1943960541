use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(numel: usize) -> Self {
        Self {
            m: vec![T::zero(); numel],
            v: vec![T::zero(); numel],
            t: 0,
        }
    }
}

/// Adam over an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            states: params.iter().map(|p| AdamState::new(p.numel())).collect(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        names: &[String],
    ) -> Result<()> {
        adam_step(params, grads, names, self)
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite; the error names the first offending parameter.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    opt: &mut Adam<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.states.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len(), opt.states.len()],
            &[grads.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || opt.states[i].m.len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFinite(name));
        }
    }
    let c = opt.config;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let eps = T::lit(c.eps);
    for ((p, g), st) in params.iter_mut().zip(grads).zip(opt.states.iter_mut()) {
        st.t += 1;
        let bc1 = T::lit(1.0 - c.beta1.powi(st.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(st.t as i32));
        let lr = T::lit(c.lr);
        for (((w, &d), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = b1 * *m + one_b1 * d;
            *v = b2 * *v + one_b2 * d * d;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
