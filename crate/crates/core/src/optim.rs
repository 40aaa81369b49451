//! Adam with coupled L2 decay, gradient value clipping, the one-cycle
//! learning-rate schedule and inverse-frequency class weights.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::blocks::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_CLIP: f64 = 0.1;

/// Clamp every element into `[-clip, clip]`.
pub fn clip_values<T: Scalar>(grad: &mut [T], clip: f64) {
    let hi = T::from_f64_lossy(clip);
    let lo = -hi;
    for g in grad {
        *g = g.max(lo).min(hi);
    }
}

/// Elementwise value clipping of every accumulated parameter gradient.
pub fn clip_gradients<T: Scalar>(params: &mut [Parameter<T>], clip: f64) -> Result<()> {
    if !(clip > 0.0) || !clip.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "clip value must be positive, got {clip}"
        )));
    }
    for p in params {
        if let Some(g) = p.grad.as_mut() {
            clip_values(g.data_mut(), clip);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments for each parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>], config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update of every parameter. Gradients should already be clipped;
    /// a parameter without a gradient is treated as having a zero one.
    pub fn step(&mut self, params: &mut [Parameter<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters for {} moment slots", params.len(), self.m.len()),
            ));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            let grad_ok = p.grad.as_ref().is_none_or(|g| g.shape() == p.value.shape());
            if !grad_ok || m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter '{}' {:?}", p.name, p.value.shape()),
                ));
            }
        }
        self.t += 1;
        let cfg = self.config;
        let t = self.t;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take();
            let zero;
            let g = match &grad {
                Some(g) => g.data(),
                None => {
                    zero = vec![T::zero(); p.value.numel()];
                    &zero[..]
                }
            };
            adam_update(p.value_mut().data_mut(), g, m.data_mut(), v.data_mut(), t, &cfg, lr);
            p.grad = grad;
        }
        Ok(())
    }
}

/// The scalar Adam-L2 rule for step `t` (1-based), applied elementwise.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
    lr: f64,
) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..param.len() {
        let p = param[i].to_f64_lossy();
        let g = grad[i].to_f64_lossy() + cfg.weight_decay * p;
        let mi = cfg.beta1 * m[i].to_f64_lossy() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].to_f64_lossy() + (1.0 - cfg.beta2) * g * g;
        m[i] = T::from_f64_lossy(mi);
        v[i] = T::from_f64_lossy(vi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        param[i] = T::from_f64_lossy(p - lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleConfig {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

pub const MAX_LR_RANGE: (f64, f64) = (1e-3, 1e-1);

impl OneCycleConfig {
    pub fn new(max_lr: f64, total_steps: usize) -> Result<Self> {
        let cfg = OneCycleConfig {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = MAX_LR_RANGE;
        if !(self.max_lr >= lo && self.max_lr <= hi) {
            return Err(Error::Config(format!(
                "max_lr {} outside [{lo}, {hi}]",
                self.max_lr
            )));
        }
        if self.total_steps < 2 {
            return Err(Error::Config(format!(
                "one-cycle schedule needs at least 2 steps, got {}",
                self.total_steps
            )));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(Error::Config(format!(
                "pct_start {} outside (0, 1)",
                self.pct_start
            )));
        }
        if !(self.div_factor > 0.0 && self.final_div_factor > 0.0) {
            return Err(Error::Config("division factors must be positive".into()));
        }
        Ok(())
    }

    /// Index of the peak step, `floor(pct_start * total_steps)`.
    pub fn warmup_steps(&self) -> usize {
        (self.pct_start * self.total_steps as f64).floor() as usize
    }

    pub fn anneal_steps(&self) -> usize {
        self.total_steps - 1 - self.warmup_steps()
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / (self.div_factor * self.final_div_factor)
    }
}

// start at p = 0, end at p = 1, exactly
fn cosine(start: f64, end: f64, p: f64) -> f64 {
    let w = (1.0 + (PI * p).cos()) / 2.0;
    start * w + end * (1.0 - w)
}

/// Learning rate at `step` (0-based). Cosine warmup from `max_lr/div` to
/// `max_lr` at the peak step, then cosine anneal to
/// `max_lr/(div*final_div)` at the last step.
pub fn one_cycle_lr(step: usize, cfg: &OneCycleConfig) -> Result<f64> {
    cfg.validate()?;
    if step >= cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    let peak = cfg.warmup_steps();
    Ok(if step < peak {
        cosine(cfg.initial_lr(), cfg.max_lr, step as f64 / peak as f64)
    } else if step == peak {
        cfg.max_lr
    } else {
        let p = (step - peak) as f64 / cfg.anneal_steps() as f64;
        cosine(cfg.max_lr, cfg.final_lr(), p)
    })
}

/// `w_i = N / (K * n_i)` for `K` classes and `N` samples.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateClass(i));
    }
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|&n| total as f64 / (k * n as f64))
        .collect())
}
