//! Dense tensors, a recorded graph with reverse-mode gradients, and a finite-difference checker.

pub mod flops;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::{BoolMatrix, DType, Element, Tensor};

use crate::error::Result;

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::matmul_fwd(a, b)
}

/// Row-wise softmax where masked entries get exactly zero probability.
pub fn masked_softmax_rows<T: Element>(scores: &Tensor<T>, mask: &BoolMatrix) -> Result<Tensor<T>> {
    kernels::masked_softmax_fwd(scores, mask)
}

/// Mean of `-log p(target)` over included rows.
pub fn cross_entropy_mean<T: Element>(logits: &Tensor<T>, targets: &[usize], include: &[bool]) -> Result<T> {
    kernels::cross_entropy_fwd(logits, targets, include).map(|(loss, _, _)| loss)
}

/// Per-position negative log-likelihoods of `targets` under `logits` rows.
pub fn nll_rows<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<f64>> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(crate::error::Error::dim(
            "nll_rows",
            format!("{:?} logits for {} targets", logits.shape(), targets.len()),
        ));
    }
    let v = logits.cols();
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            if t >= v {
                return Err(crate::error::Error::Contract(format!("target {t} outside vocabulary {v}")));
            }
            let row = logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            Ok(max + sum.ln() - row[t].as_f64())
        })
        .collect()
}

/// Divides each last-axis slice by `sqrt(mean(x²) + eps)` and scales by `gain`.
pub fn rms_normalize<T: Element>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    kernels::rms_norm_fwd(x, gain, eps).map(|(t, _)| t)
}
