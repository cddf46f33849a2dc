//! Forward kernels shared by the free-standing ops and the recorded graph.

use super::flops;
use super::tensor::{BoolMatrix, Element, Tensor};
use crate::error::{Error, Result};

/// `c (+)= a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        T::gemm(
            m, k, n,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            acc,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (+)= a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    unsafe {
        T::gemm(
            m, k, n,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            acc,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (+)= a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        T::gemm(
            m, k, n,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            acc,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn as_matrix<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

pub(crate) fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn matmul_fwd<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix("matmul", a)?;
    let (k2, n) = as_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out, false);
    flops::add_matmul(m, k, n);
    check_finite("matmul", &out)?;
    Tensor::matrix(m, n, out)
}

pub(crate) fn matmul_nt_fwd<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix("matmul_nt", a)?;
    let (n, k2) = as_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", format!("[{m}x{k}] · [{n}x{k2}]ᵀ")));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nt(m, k, n, a.data(), b.data(), &mut out, false);
    flops::add_matmul(m, k, n);
    check_finite("matmul_nt", &out)?;
    Tensor::matrix(m, n, out)
}

/// Row-wise softmax over unmasked entries; returns probabilities.
pub(crate) fn masked_softmax_fwd<T: Element>(scores: &Tensor<T>, mask: &BoolMatrix) -> Result<Tensor<T>> {
    let (q, kv) = as_matrix("masked_softmax_rows", scores)?;
    if mask.rows() != q || mask.cols() != kv {
        return Err(Error::dim(
            "masked_softmax_rows",
            format!("scores {q}x{kv} vs mask {}x{}", mask.rows(), mask.cols()),
        ));
    }
    let mut out = vec![T::zero(); q * kv];
    for r in 0..q {
        let row = scores.row(r);
        let bits = mask.row(r);
        let mut max = T::neg_infinity();
        for (v, &b) in row.iter().zip(bits) {
            if b && *v > max {
                max = *v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::DegenerateRow { row: r });
        }
        let dst = &mut out[r * kv..(r + 1) * kv];
        let mut sum = T::zero();
        for ((d, v), &b) in dst.iter_mut().zip(row).zip(bits) {
            if b {
                let e = (*v - max).exp();
                *d = e;
                sum = sum + e;
            }
        }
        let inv = T::one() / sum;
        for (d, &b) in dst.iter_mut().zip(bits) {
            if b {
                *d = *d * inv;
            }
        }
    }
    check_finite("masked_softmax_rows", &out)?;
    Tensor::matrix(q, kv, out)
}

/// Returns `(normalized, 1/rms per row)`.
pub(crate) fn rms_norm_fwd<T: Element>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.cols();
    if gain.numel() != d {
        return Err(Error::dim("rms_normalize", format!("gain has {} values for width {d}", gain.numel())));
    }
    let eps = T::from_f64(eps);
    let dn = T::from_f64(d as f64);
    let rows = x.rows();
    let mut out = vec![T::zero(); x.numel()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = x.row(r);
        let ms = src.iter().fold(T::zero(), |acc, v| acc + *v * *v) / dn;
        let denom = (ms + eps).sqrt();
        let ir = if denom > T::zero() { T::one() / denom } else { T::zero() };
        inv.push(ir);
        for ((o, v), g) in out[r * d..(r + 1) * d].iter_mut().zip(src).zip(gain.data()) {
            *o = *v * ir * *g;
        }
    }
    check_finite("rms_normalize", &out)?;
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}

/// Returns `(mean nll, probabilities of included rows, included count)`.
pub(crate) fn cross_entropy_fwd<T: Element>(
    logits: &Tensor<T>,
    targets: &[usize],
    include: &[bool],
) -> Result<(T, Vec<T>, usize)> {
    let (rows, v) = as_matrix("cross_entropy_mean", logits)?;
    if targets.len() != rows || include.len() != rows {
        return Err(Error::dim(
            "cross_entropy_mean",
            format!("{rows} rows, {} targets, {} include flags", targets.len(), include.len()),
        ));
    }
    let count = include.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let mut probs = vec![T::zero(); rows * v];
    let mut total = 0.0f64;
    for r in 0..rows {
        if !include[r] {
            continue;
        }
        let t = targets[r];
        if t >= v {
            return Err(Error::Contract(format!("target {t} outside vocabulary {v}")));
        }
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, x| if *x > m { *x } else { m });
        let dst = &mut probs[r * v..(r + 1) * v];
        let mut sum = T::zero();
        for (d, x) in dst.iter_mut().zip(row) {
            let e = (*x - max).exp();
            *d = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
        let lse = max + sum.ln();
        total += (lse - row[t]).as_f64();
    }
    let loss = T::from_f64(total / count as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy_mean" });
    }
    Ok((loss, probs, count))
}

/// Per-row cos/sin tables for rotary rotation, `rows × half` each.
pub(crate) fn rope_tables<T: Element>(positions: &[usize], head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = p as f64 * freq;
            cos.push(T::from_f64(angle.cos()));
            sin.push(T::from_f64(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates each head's half-split pairs; `sign = -1` applies the inverse rotation.
pub(crate) fn rope_apply<T: Element>(
    x: &[T],
    out: &mut [T],
    width: usize,
    head_dim: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = head_dim / 2;
    let heads = width / head_dim;
    for (r, (src, dst)) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)).enumerate() {
        let c = &cos[r * half..(r + 1) * half];
        let s = &sin[r * half..(r + 1) * half];
        for h in 0..heads {
            let base = h * head_dim;
            for i in 0..half {
                let x1 = src[base + i];
                let x2 = src[base + i + half];
                let (ci, si) = if inverse { (c[i], -s[i]) } else { (c[i], s[i]) };
                dst[base + i] = x1 * ci - x2 * si;
                dst[base + i + half] = x1 * si + x2 * ci;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
