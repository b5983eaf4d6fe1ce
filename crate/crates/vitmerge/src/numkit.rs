//! Dense numeric kernels: tensors, matrix products, linear solves, softmax,
//! and cosine similarity.
//!
//! Values are stored as `f64` but model weights are kept on the `f32` grid
//! (see [`Tensor::quantize_f32`]): initialization, optimizer steps, and
//! checkpoint I/O round through `f32`, while every accumulation (matmul sums,
//! gram sums, reductions) runs in full `f64`. That split keeps checkpoints at
//! 32-bit precision and bit-exact across round trips without poisoning the
//! gradient checks and closed-form solves with single-precision noise.

use crate::{Error, Result};

/// Row-major dense tensor of rank 1..=4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Zero-filled tensor with the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    /// Wraps existing data; `data.len()` must equal the shape's volume.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Dimension {
                op: "from_vec",
                detail: format!("shape {:?} wants {} values, got {}", shape, len, data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// Element of a rank-2 tensor.
    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Reinterprets the data under a new shape of equal volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                detail: format!("cannot view {} values as {:?}", self.data.len(), shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rounds every value to the nearest `f32` (stored back as `f64`).
    ///
    /// Persisted tensors are 32-bit; keeping in-memory weights on the same
    /// grid makes save/load an identity and re-runs bit-comparable.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `out = a · b` for row-major slices: `a` is `m x k`, `b` is `k x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    gemm_acc(m, k, n, a, b, out);
}

/// `out += a · b`; the i-k-j loop order keeps the inner loop contiguous.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    }
}

/// `out (+)= aᵀ · b` where `a` is `r x m` and `b` is `r x n`.
///
/// This is the gradient kernel `dW = Xᵀ·dY`; accumulation order is fixed by
/// the row order of `a`/`b`, so results are deterministic.
pub(crate) fn gemm_at_b(
    r: usize,
    m: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(0.0);
    }
    for row in 0..r {
        let a_row = &a[row * m..(row + 1) * m];
        let b_row = &b[row * n..(row + 1) * n];
        for (i, &a_ri) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_rj) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * b_rj;
            }
        }
    }
}

/// `out (+)= a · bᵀ` where `a` is `m x k` and `b` is `n x k`.
pub(crate) fn gemm_a_bt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(0.0);
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::Dimension {
            op: "matmul",
            detail: format!("expected rank-2 operands, got {:?} and {:?}", a.shape, b.shape),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            detail: format!("inner dimensions disagree: {:?} x {:?}", a.shape, b.shape),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, &a.data, &b.data, &mut out.data);
    Ok(out)
}

/// Output of [`solve`]: the solution and whether the ridge fallback fired.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solution: Tensor,
    pub regularized: bool,
}

/// Solves `a · x = b` for `x` by LU factorization with partial pivoting.
///
/// `a` is `d x d`, `b` is `d x c`. A pivot with magnitude below
/// `1e-10 * max|a|` marks the system singular; the solve is then retried once
/// on `a + eps·I` with `eps = 1e-6 * trace(a) / d` and the outcome flagged
/// `regularized`. If the ridge copy is still singular the call fails.
pub fn solve(a: &Tensor, b: &Tensor) -> Result<SolveOutcome> {
    if a.shape.len() != 2 || a.shape[0] != a.shape[1] {
        return Err(Error::Dimension {
            op: "solve",
            detail: format!("coefficient matrix must be square, got {:?}", a.shape),
        });
    }
    let d = a.shape[0];
    if b.shape.len() != 2 || b.shape[0] != d {
        return Err(Error::Dimension {
            op: "solve",
            detail: format!("rhs shape {:?} does not match system of size {}", b.shape, d),
        });
    }
    if d == 0 {
        return Err(Error::Dimension { op: "solve", detail: "empty system".into() });
    }

    match lu_solve(d, &a.data, b) {
        Some(solution) => Ok(SolveOutcome { solution, regularized: false }),
        None => {
            let trace: f64 = (0..d).map(|i| a.data[i * d + i]).sum();
            let eps = 1e-6 * trace / d as f64;
            let mut ridged = a.data.clone();
            for i in 0..d {
                ridged[i * d + i] += eps;
            }
            match lu_solve(d, &ridged, b) {
                Some(solution) => Ok(SolveOutcome { solution, regularized: true }),
                None => Err(Error::Singular {
                    op: "solve",
                    detail: format!(
                        "pivot below 1e-10 * max|a| persists after ridge eps={eps:.3e}"
                    ),
                }),
            }
        }
    }
}

/// One LU factorization + back-substitution attempt; `None` marks a pivot
/// breakdown against the `1e-10 * max|a|` threshold.
fn lu_solve(d: usize, a: &[f64], b: &Tensor) -> Option<Tensor> {
    let max_abs = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let threshold = 1e-10 * max_abs;
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..d).collect();

    for col in 0..d {
        let mut pivot_row = col;
        let mut pivot_mag = lu[col * d + col].abs();
        for r in col + 1..d {
            let mag = lu[r * d + col].abs();
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = r;
            }
        }
        if pivot_mag < threshold || pivot_mag == 0.0 {
            return None;
        }
        if pivot_row != col {
            for c in 0..d {
                lu.swap(col * d + c, pivot_row * d + c);
            }
            perm.swap(col, pivot_row);
        }
        let pivot = lu[col * d + col];
        for r in col + 1..d {
            let factor = lu[r * d + col] / pivot;
            lu[r * d + col] = factor;
            for c in col + 1..d {
                lu[r * d + c] -= factor * lu[col * d + c];
            }
        }
    }

    let c = b.shape[1];
    let mut x = Tensor::zeros(&[d, c]);
    // Forward substitution on the permuted rhs, then backward substitution.
    for (i, &src) in perm.iter().enumerate() {
        let (dst, from) = (i * c, src * c);
        for j in 0..c {
            x.data[dst + j] = b.data[from + j];
        }
    }
    for i in 0..d {
        for l in 0..i {
            let factor = lu[i * d + l];
            let (head, tail) = x.data.split_at_mut(i * c);
            let row_l = &head[l * c..(l + 1) * c];
            for (xv, &lv) in tail[..c].iter_mut().zip(row_l) {
                *xv -= factor * lv;
            }
        }
    }
    for i in (0..d).rev() {
        for l in i + 1..d {
            let factor = lu[i * d + l];
            let (head, tail) = x.data.split_at_mut(l * c);
            let row_i = &mut head[i * c..(i + 1) * c];
            for (xv, &lv) in row_i.iter_mut().zip(&tail[..c]) {
                *xv -= factor * lv;
            }
        }
        let pivot = lu[i * d + i];
        for xv in &mut x.data[i * c..(i + 1) * c] {
            *xv /= pivot;
        }
    }
    Some(x)
}

/// Numerically stable softmax over a slice, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a rank-1 tensor; subtracts the max before exponentiating.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.shape.len() != 1 || v.is_empty() {
        return Err(Error::Dimension {
            op: "softmax",
            detail: format!("expected non-empty rank-1 input, got {:?}", v.shape),
        });
    }
    let mut out = v.clone();
    softmax_in_place(&mut out.data);
    Ok(out)
}

/// Result of [`cosine_similarity`]; `degenerate` marks a near-zero operand.
#[derive(Debug, Clone, Copy)]
pub struct CosineSim {
    pub value: f64,
    pub degenerate: bool,
}

/// Cosine similarity of two tensors viewed as flat vectors.
///
/// Computed as `dot(a,b) / sqrt(dot(a,a) * dot(b,b))`, which returns exactly
/// 1.0 for identical inputs. If either norm falls below `1e-12` the value is
/// 0.0 with the `degenerate` flag set.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<CosineSim> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension {
            op: "cosine_similarity",
            detail: format!("expected equal non-zero lengths, got {} and {}", a.len(), b.len()),
        });
    }
    let mut dot_ab = 0.0;
    let mut dot_aa = 0.0;
    let mut dot_bb = 0.0;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        dot_ab += x * y;
        dot_aa += x * x;
        dot_bb += y * y;
    }
    // norm < 1e-12 <=> squared norm < 1e-24
    if dot_aa < 1e-24 || dot_bb < 1e-24 {
        return Ok(CosineSim { value: 0.0, degenerate: true });
    }
    let value = (dot_ab / (dot_aa * dot_bb).sqrt()).clamp(-1.0, 1.0);
    Ok(CosineSim { value, degenerate: false })
}
