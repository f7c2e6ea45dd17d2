use rand::Rng;

use crate::error::{Error, Result};

use super::real::Real;
use super::rng::SeededRng;
use super::tensor::Tensor;

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&aip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if aip == T::zero() {
                continue;
            }
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += aip * bpj;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` with `a` stored as `[k×m]` and `b` as `[k×n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&api, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if api == T::zero() {
                continue;
            }
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += api * bpj;
            }
        }
    }
}

pub(crate) fn transpose_slice<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    Ok(Tensor::from_parts_unchecked(vec![c, r], transpose_slice(a.data(), r, c)))
}

/// `C = A·B`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul inner extents {m}x{k} · {k2}x{n}")));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// `C = Aᵀ·B`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_tn row extents {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_tn_acc(a.data(), b.data(), &mut out, k, m, n);
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// `C = A·Bᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_nt column extents {k} vs {k2}")));
    }
    let bt = transpose_slice(b.data(), n, k);
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), &bt, &mut out, m, k, n);
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// Gradients of `C = A·B`: `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, _) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if dc.dims2()? != (m, n) {
        return Err(Error::dim(format!("upstream gradient {:?} vs {m}x{n}", dc.shape())));
    }
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes `dy` where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::dim("relu_backward shape mismatch"));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), data))
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::tanh)
}

/// Max-shifted softmax of a slice.
pub fn softmax_slice<T: Real>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::dim("softmax of an empty input"));
    }
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax over all elements of `x`, keeping its shape.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), softmax_slice(x.data())?))
}

/// `dx_i = y_i · (dy_i − Σ_j y_j dy_j)` for `y = softmax(x)`.
pub fn softmax_backward<T: Real>(y: &[T], dy: &[T]) -> Vec<T> {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    y.iter().zip(dy).map(|(&yi, &gi)| yi * (gi - dot)).collect()
}

/// Per-element keep/scale factors drawn by [`dropout`]. `None` means identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T> {
    factors: Option<Vec<T>>,
}

impl<T: Real> DropoutMask<T> {
    pub fn identity() -> Self {
        Self { factors: None }
    }

    /// Draws an inverted-dropout mask of `n` elements: zero with probability `p`,
    /// `1/(1-p)` otherwise.
    pub fn sample(n: usize, p: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(Self::identity());
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let factors = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        Ok(Self { factors: Some(factors) })
    }

    pub fn is_identity(&self) -> bool {
        self.factors.is_none()
    }

    pub fn apply_in_place(&self, values: &mut [T]) {
        if let Some(f) = &self.factors {
            debug_assert_eq!(f.len(), values.len());
            values.iter_mut().zip(f).for_each(|(v, &m)| *v *= m);
        }
    }
}

/// Inverted dropout. Evaluation mode (or `p == 0`) is the exact identity.
pub fn dropout<T: Real>(
    x: &Tensor<T>,
    p: f64,
    rng: &mut SeededRng,
    training: bool,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::param(format!("dropout probability {p} not in [0, 1)")));
    }
    let mask = if training { DropoutMask::sample(x.len(), p, rng)? } else { DropoutMask::identity() };
    let mut y = x.clone();
    mask.apply_in_place(y.data_mut());
    Ok((y, mask))
}

pub fn dropout_backward<T: Real>(mask: &DropoutMask<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    mask.apply_in_place(dx.data_mut());
    dx
}
