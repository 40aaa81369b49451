use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether batch norm uses batch statistics (and updates running ones) or
/// the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        RunningStats {
            mean: conv(&self.mean),
            var: conv(&self.var),
        }
    }
}

/// Statistics saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormContext<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

fn layout(x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    let [n, c, t, h, w] = x.dims5("batchnorm3d")?;
    Ok((n, c, t * h * w))
}

pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    cfg: BatchNormConfig,
    mode: Mode,
) -> Result<(Tensor<T>, NormContext<T>)> {
    let (n, c, m) = layout(x)?;
    if gamma.numel() != c || beta.numel() != c || running.channels() != c {
        return Err(Error::shape(
            "batchnorm3d",
            format!(
                "input has {c} channels; gamma {}, beta {}, running stats {}",
                gamma.numel(),
                beta.numel(),
                running.channels()
            ),
        ));
    }
    if !(cfg.eps > 0.0) {
        return Err(Error::InvalidArgument("batch-norm eps must be positive".into()));
    }
    let count = n * m;
    let xs = x.data();
    let (mean, inv_std, batch_stats) = match mode {
        Mode::Training => {
            if count < 2 {
                return Err(Error::DegenerateBatch {
                    op: "batchnorm3d",
                    detail: format!("{count} value(s) per channel in training mode"),
                });
            }
            let mut mean = Vec::with_capacity(c);
            let mut inv_std = Vec::with_capacity(c);
            let mom = cfg.momentum;
            for ch in 0..c {
                let planes = (0..n).map(|b| &xs[(b * c + ch) * m..(b * c + ch + 1) * m]);
                let sum: f64 = planes.clone().flatten().map(|v| v.to_f64_lossy()).sum();
                let mu = sum / count as f64;
                let sq: f64 = planes
                    .flatten()
                    .map(|v| {
                        let d = v.to_f64_lossy() - mu;
                        d * d
                    })
                    .sum();
                let var = sq / count as f64;
                mean.push(T::from_f64_lossy(mu));
                inv_std.push(T::from_f64_lossy(1.0 / (var + cfg.eps).sqrt()));
                let unbiased = var * count as f64 / (count - 1) as f64;
                let rm = running.mean[ch].to_f64_lossy();
                let rv = running.var[ch].to_f64_lossy();
                running.mean[ch] = T::from_f64_lossy((1.0 - mom) * rm + mom * mu);
                running.var[ch] = T::from_f64_lossy((1.0 - mom) * rv + mom * unbiased);
            }
            (mean, inv_std, true)
        }
        Mode::Inference => {
            let inv_std = running
                .var
                .iter()
                .map(|v| T::from_f64_lossy(1.0 / (v.to_f64_lossy() + cfg.eps).sqrt()))
                .collect();
            (running.mean.clone(), inv_std, false)
        }
    };

    let mut out = Vec::with_capacity(xs.len());
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * inv_std[ch];
            let shift = beta.data()[ch];
            let mu = mean[ch];
            let plane = &xs[(b * c + ch) * m..(b * c + ch + 1) * m];
            out.extend(plane.iter().map(|&v| (v - mu) * scale + shift));
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        NormContext {
            mean,
            inv_std,
            batch_stats,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    ctx: &NormContext<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, m) = layout(x)?;
    let count = (n * m) as f64;
    let (xs, dys) = (x.data(), dy.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); xs.len()];
    for ch in 0..c {
        let mu = ctx.mean[ch].to_f64_lossy();
        let inv = ctx.inv_std[ch].to_f64_lossy();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * m;
            for i in off..off + m {
                let g = dys[i].to_f64_lossy();
                sum_dy += g;
                sum_dy_xhat += g * (xs[i].to_f64_lossy() - mu) * inv;
            }
        }
        dgamma[ch] = T::from_f64_lossy(sum_dy_xhat);
        dbeta[ch] = T::from_f64_lossy(sum_dy);
        let gm = gamma.data()[ch].to_f64_lossy();
        for b in 0..n {
            let off = (b * c + ch) * m;
            for i in off..off + m {
                let g = dys[i].to_f64_lossy();
                let v = if ctx.batch_stats {
                    let xhat = (xs[i].to_f64_lossy() - mu) * inv;
                    gm * inv / count * (count * g - sum_dy - xhat * sum_dy_xhat)
                } else {
                    g * gm * inv
                };
                dx[i] = T::from_f64_lossy(v);
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(gamma.shape().to_vec(), dgamma)?,
        Tensor::new(gamma.shape().to_vec(), dbeta)?,
    ))
}
