//! Dense real-valued tensors with row-major layout.
//!
//! Everything the MPS machinery needs lives here: pairwise contraction,
//! reshaping, Frobenius norms and truncated SVD. All operations are pure
//! functions over immutable inputs.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape product {expected} does not match data length {actual}")]
    ElementCountMismatch { expected: usize, actual: usize },
    #[error("non-finite value in tensor data")]
    NonFinite,
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("duplicate axis {0} in contraction list")]
    DuplicateAxis(usize),
    #[error("contracted axes differ in size: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("expected rank-2 tensor, got rank {0}")]
    NotRank2(usize),
    #[error("max_rank must be at least 1")]
    ZeroRank,
}

/// Dense tensor. `data` is row-major: the last index varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCountMismatch {
                expected,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// 2x2, 3x3, ... identity as a rank-2 tensor.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let expected: usize = new_shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ElementCountMismatch {
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: new_shape,
            data: self.data.clone(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Row-major strides for this shape.
    fn strides(shape: &[usize]) -> Vec<usize> {
        let mut strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        strides
    }

    /// Reorder axes; `perm[i]` names the source axis that becomes axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        if perm.len() != rank {
            return Err(TensorError::AxisOutOfRange {
                axis: perm.len(),
                rank,
            });
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank {
                return Err(TensorError::AxisOutOfRange { axis: p, rank });
            }
            if seen[p] {
                return Err(TensorError::DuplicateAxis(p));
            }
            seen[p] = true;
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let old_strides = Self::strides(&self.shape);
        let new_strides = Self::strides(&new_shape);
        let mut data = vec![0.0; self.data.len()];
        for (new_idx, slot) in data.iter_mut().enumerate() {
            let mut rem = new_idx;
            let mut old_idx = 0;
            for d in 0..rank {
                let coord = rem / new_strides[d];
                rem %= new_strides[d];
                old_idx += coord * old_strides[perm[d]];
            }
            *slot = self.data[old_idx];
        }
        Ok(Tensor {
            shape: new_shape,
            data,
        })
    }
}

/// Pairwise contraction over the listed axis pairs.
///
/// Result shape is the free axes of `a` (in order) followed by the free
/// axes of `b`. Contracting every axis of both operands yields a rank-0
/// tensor holding the scalar result.
pub fn contract(
    a: &Tensor,
    b: &Tensor,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<Tensor, TensorError> {
    if axes_a.len() != axes_b.len() {
        return Err(TensorError::DimMismatch {
            a: axes_a.len(),
            b: axes_b.len(),
        });
    }
    check_axes(axes_a, a.rank())?;
    check_axes(axes_b, b.rank())?;
    for (&ia, &ib) in axes_a.iter().zip(axes_b) {
        if a.shape[ia] != b.shape[ib] {
            return Err(TensorError::DimMismatch {
                a: a.shape[ia],
                b: b.shape[ib],
            });
        }
    }

    let free_a: Vec<usize> = (0..a.rank()).filter(|i| !axes_a.contains(i)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|i| !axes_b.contains(i)).collect();

    // Move free axes to the front of `a` and to the back of `b`, then
    // contract as an (m x k) * (k x n) matrix product.
    let perm_a: Vec<usize> = free_a.iter().chain(axes_a.iter()).copied().collect();
    let perm_b: Vec<usize> = axes_b.iter().chain(free_b.iter()).copied().collect();
    let ta = a.permute(&perm_a)?;
    let tb = b.permute(&perm_b)?;

    let m: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let k: usize = axes_a.iter().map(|&i| a.shape[i]).product();
    let n: usize = free_b.iter().map(|&i| b.shape[i]).product();

    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = ta.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &tb.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }

    let mut shape: Vec<usize> = free_a.iter().map(|&i| a.shape[i]).collect();
    shape.extend(free_b.iter().map(|&i| b.shape[i]));
    Ok(Tensor { shape, data: out })
}

fn check_axes(axes: &[usize], rank: usize) -> Result<(), TensorError> {
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= rank {
            return Err(TensorError::AxisOutOfRange { axis: ax, rank });
        }
        if axes[..i].contains(&ax) {
            return Err(TensorError::DuplicateAxis(ax));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left factor with orthonormal columns, shape (rows, rank).
    pub u: Tensor,
    /// Retained singular values, descending.
    pub s: Vec<f64>,
    /// Right factor with orthonormal rows, shape (rank, cols).
    pub vt: Tensor,
    /// Truncated squared weight relative to the total squared weight.
    pub discarded_weight: f64,
}

/// Truncated SVD of a rank-2 tensor.
///
/// Keeps singular values with `s[i]/s[0] > tol`, capped at `max_rank`.
/// An all-zero input yields a rank-1 result with s = [0] and unit basis
/// factors so callers never see an empty decomposition.
pub fn svd_truncate(m: &Tensor, max_rank: usize, tol: f64) -> Result<SvdResult, TensorError> {
    if m.rank() != 2 {
        return Err(TensorError::NotRank2(m.rank()));
    }
    if max_rank == 0 {
        return Err(TensorError::ZeroRank);
    }
    if !m.data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite);
    }
    let (rows, cols) = (m.shape[0], m.shape[1]);
    let mat = DMatrix::from_row_slice(rows, cols, &m.data);
    let svd = mat.svd(true, true);
    let u_full = svd.u.expect("u requested");
    let vt_full = svd.v_t.expect("v_t requested");

    // nalgebra does not guarantee ordering; sort descending.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap()
    });
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let total_sq: f64 = sv.iter().map(|s| s * s).sum();
    let s0 = sv.first().copied().unwrap_or(0.0);
    if s0 == 0.0 {
        // Degenerate input: emit a rank-1 placeholder.
        let mut u = Tensor::zeros(vec![rows, 1]);
        u.data_mut()[0] = 1.0;
        let mut vt = Tensor::zeros(vec![1, cols]);
        vt.data_mut()[0] = 1.0;
        return Ok(SvdResult {
            u,
            s: vec![0.0],
            vt,
            discarded_weight: 0.0,
        });
    }

    let significant = sv.iter().filter(|&&s| s / s0 > tol).count().max(1);
    let rank = significant.min(max_rank).min(rows.min(cols));

    let kept_sq: f64 = sv[..rank].iter().map(|s| s * s).sum();
    let discarded_weight = ((total_sq - kept_sq) / total_sq).max(0.0);

    let mut u = Tensor::zeros(vec![rows, rank]);
    for r in 0..rows {
        for c in 0..rank {
            u.data_mut()[r * rank + c] = u_full[(r, order[c])];
        }
    }
    let mut vt = Tensor::zeros(vec![rank, cols]);
    for r in 0..rank {
        for c in 0..cols {
            vt.data_mut()[r * cols + c] = vt_full[(order[r], c)];
        }
    }
    Ok(SvdResult {
        u,
        s: sv[..rank].to_vec(),
        vt,
        discarded_weight,
    })
}
