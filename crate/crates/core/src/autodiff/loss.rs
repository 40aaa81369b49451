use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch reduction of per-sample weighted cross-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// `sum_i loss_i / sum_i weight[class_i]`. Used for training.
    WeightedMean,
    /// `sum_i loss_i`; for a single sample this is the bare per-sample loss.
    Sum,
}

pub(crate) struct CrossEntropyContext<T> {
    pub probs: Vec<T>,
    pub targets: Vec<usize>,
    pub sample_weights: Vec<f64>,
    pub denom: f64,
}

/// `weight[y] * (-x[y] + log sum_j exp(x[j]))` per row, with max-shifted
/// log-sum-exp.
pub(crate) fn cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    weights: &[f64],
    reduction: Reduction,
) -> Result<(Tensor<T>, CrossEntropyContext<T>)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("logits must be (N, classes), got {:?}", logits.shape()),
            ))
        }
    };
    if targets.len() != n {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!("{} targets for {} rows", targets.len(), n),
        ));
    }
    if weights.len() != k {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!("{} class weights for {} classes", weights.len(), k),
        ));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "class weights must be finite and positive, got {w}"
        )));
    }
    if n == 0 {
        return Err(Error::EmptySplit("loss batch"));
    }
    let mut total = 0.0f64;
    let mut probs = Vec::with_capacity(n * k);
    let mut sample_weights = Vec::with_capacity(n);
    for (row, &y) in logits.data().chunks(k).zip(targets) {
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "class index {y} out of range 0..{k}"
            )));
        }
        let xs: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let w = weights[y];
        total += w * (lse - xs[y]);
        sample_weights.push(w);
        probs.extend(xs.iter().map(|v| T::from_f64_lossy((v - lse).exp())));
    }
    let denom = match reduction {
        Reduction::WeightedMean => sample_weights.iter().sum(),
        Reduction::Sum => 1.0,
    };
    Ok((
        Tensor::scalar(T::from_f64_lossy(total / denom)),
        CrossEntropyContext {
            probs,
            targets: targets.to_vec(),
            sample_weights,
            denom,
        },
    ))
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    upstream: T,
    shape: &[usize],
    ctx: &CrossEntropyContext<T>,
) -> Tensor<T> {
    let k = shape[1];
    let up = upstream.to_f64_lossy();
    let mut grad = Vec::with_capacity(ctx.probs.len());
    for (i, row) in ctx.probs.chunks(k).enumerate() {
        let scale = up * ctx.sample_weights[i] / ctx.denom;
        for (j, p) in row.iter().enumerate() {
            let onehot = if j == ctx.targets[i] { 1.0 } else { 0.0 };
            grad.push(T::from_f64_lossy(scale * (p.to_f64_lossy() - onehot)));
        }
    }
    Tensor::new(shape.to_vec(), grad).expect("loss grad shape")
}

/// Stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
