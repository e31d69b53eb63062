use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyper-parameters.
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update of a single tensor at step `t` (1-based).
/// Returns the new `(param, m, v)`.
pub fn adam_step<T: Scalar>(
    param: &Tensor<T>,
    grad: &Tensor<T>,
    m: &Tensor<T>,
    v: &Tensor<T>,
    t: u64,
    cfg: &AdamConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if param.shape() != grad.shape() || m.shape() != grad.shape() || v.shape() != grad.shape() {
        return shape_err("adam_step", param.shape(), grad.shape());
    }
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::c(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::c(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::c(cfg.lr), T::c(cfg.eps));
    let n = param.numel();
    let (mut p2, mut m2, mut v2) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let g = grad.data()[i];
        let mi = b1 * m.data()[i] + (T::one() - b1) * g;
        let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
        let mhat = mi / c1;
        let vhat = vi / c2;
        p2.push(param.data()[i] - lr * mhat / (vhat.sqrt() + eps));
        m2.push(mi);
        v2.push(vi);
    }
    let shape = param.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), p2),
        Tensor::from_parts(shape.clone(), m2),
        Tensor::from_parts(shape, v2),
    ))
}

/// Adam state over an entire [`ParamStore`], keyed by store order.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update; `grads` must follow store order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return shape_err("Adam::step", params.len(), grads.len());
        }
        self.step += 1;
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for (i, name) in names.iter().enumerate() {
            let p = params.get(name).expect("name from store");
            let (p2, m2, v2) = adam_step(p, &grads[i], &self.m[i], &self.v[i], self.step, &self.config)?;
            params.set(name, p2)?;
            self.m[i] = m2;
            self.v[i] = v2;
        }
        Ok(())
    }
}

/// `avg <- decay * avg + (1 - decay) * params`, entry by entry.
pub fn polyak_update<T: Scalar>(avg: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    let d = T::c(decay);
    let keep = T::one() - d;
    for (name, p) in params.iter() {
        let Some(a) = avg.get(name) else {
            avg.insert(name, p.clone());
            continue;
        };
        let next = a.zip_map(p, |a, p| d * a + keep * p)?;
        avg.set(name, next)?;
    }
    Ok(())
}
