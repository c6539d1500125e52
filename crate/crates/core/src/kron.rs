//! Kronecker products: materialization, structured application, and
//! numerical rank.
//!
//! Layout convention. For `M = c ⊗ d` with `c: p1×q1`, `d: p2×q2`, row
//! `i1·p2 + i2` and column `j1·q2 + j2` of `M` hold `c[i1,j1]·d[i2,j2]`.
//! A vector `x` of length `p1·p2` is the column-major `vec` of a
//! `p2 × p1` matrix `X`, which is the same memory as the row-major
//! `p1 × p2` matrix `Xᵀ`. With that reading the identity
//! `(cᵀ ⊗ dᵀ)·vec(X) = vec(dᵀ X c)` becomes `Mᵀx = rowvec(cᵀ · Xᵀ · d)`,
//! which is what [`KronPair::apply_transpose`] evaluates.

use crate::error::{KarstError, Result};
use crate::numerics::{DenseMatrix, DenseVector};

/// Default relative tolerance for [`rank_of`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// The right-hand factor of a Kronecker product, either dense or as a
/// low-rank product `a · b`.
#[derive(Debug, Clone, Copy)]
pub enum RightFactor<'a> {
    Dense(&'a DenseMatrix),
    LowRank {
        a: &'a DenseMatrix,
        b: &'a DenseMatrix,
    },
}

impl RightFactor<'_> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            RightFactor::Dense(d) => d.shape(),
            RightFactor::LowRank { a, b } => (a.rows(), b.cols()),
        }
    }

    fn rank(&self) -> Option<usize> {
        match self {
            RightFactor::Dense(_) => None,
            RightFactor::LowRank { a, .. } => Some(a.cols()),
        }
    }

    /// `lhs · d`
    fn right_mul(&self, lhs: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            RightFactor::Dense(d) => lhs.matmul(d),
            RightFactor::LowRank { a, b } => lhs.matmul(a)?.matmul(b),
        }
    }

    /// `lhs · dᵀ`
    fn right_mul_t(&self, lhs: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            RightFactor::Dense(d) => lhs.matmul(&d.transpose()),
            RightFactor::LowRank { a, b } => lhs.matmul(&b.transpose())?.matmul(&a.transpose()),
        }
    }

    pub fn to_dense(&self) -> Result<DenseMatrix> {
        match self {
            RightFactor::Dense(d) => Ok((*d).clone()),
            RightFactor::LowRank { a, b } => a.matmul(b),
        }
    }
}

/// `c ⊗ d` kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct KronPair {
    pub c: DenseMatrix,
    pub d: DenseMatrix,
}

impl KronPair {
    pub fn new(c: DenseMatrix, d: DenseMatrix) -> Self {
        Self { c, d }
    }

    /// Shape of the materialized product, `(p1·p2, q1·q2)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.c.rows() * self.d.rows(), self.c.cols() * self.d.cols())
    }

    pub fn materialize(&self) -> DenseMatrix {
        kron_materialize(&self.c, &self.d)
    }

    /// `(c ⊗ d)ᵀ · x` without forming the product.
    pub fn apply_transpose(&self, x: &DenseVector) -> Result<DenseVector> {
        kron_apply_transpose(&self.c, RightFactor::Dense(&self.d), x)
    }

    /// `(c ⊗ d) · v` without forming the product.
    pub fn apply(&self, v: &DenseVector) -> Result<DenseVector> {
        kron_apply(&self.c, RightFactor::Dense(&self.d), v)
    }

    /// Multiply count of [`Self::apply_transpose`]; with `low_rank_r`, the
    /// count for the same product when `d` is held as `a·b` of rank r.
    pub fn flops(&self, low_rank_r: Option<usize>) -> usize {
        let (p1, q1) = self.c.shape();
        let (p2, q2) = self.d.shape();
        structured_flops(p1, q1, p2, q2, low_rank_r)
    }

    /// Multiply count of `Mᵀx` against the materialized product.
    pub fn materialized_flops(&self) -> usize {
        let (rows, cols) = self.shape();
        rows * cols
    }
}

/// Block matrix whose `(i, j)` block is `c[i, j] · d`.
pub fn kron_materialize(c: &DenseMatrix, d: &DenseMatrix) -> DenseMatrix {
    let (p1, q1) = c.shape();
    let (p2, q2) = d.shape();
    let mut out = DenseMatrix::zeros(p1 * p2, q1 * q2);
    for i1 in 0..p1 {
        for j1 in 0..q1 {
            let cij = c.get(i1, j1);
            for i2 in 0..p2 {
                let row = out.row_mut(i1 * p2 + i2);
                let d_row = d.row(i2);
                let block = &mut row[j1 * q2..(j1 + 1) * q2];
                for (o, &dv) in block.iter_mut().zip(d_row) {
                    *o = cij * dv;
                }
            }
        }
    }
    out
}

/// `(c ⊗ d)ᵀ · x`, evaluated as `cᵀ · Xᵀ · d` with `Xᵀ = reshape(x, p1, p2)`.
pub fn kron_apply_transpose(c: &DenseMatrix, d: RightFactor<'_>, x: &DenseVector) -> Result<DenseVector> {
    let (p1, q1) = c.shape();
    let (p2, q2) = d.shape();
    if x.len() != p1 * p2 {
        return Err(KarstError::KronLength {
            p1,
            p2,
            expected: p1 * p2,
            got: x.len(),
        });
    }
    let xt = DenseMatrix::new(p1, p2, x.as_slice().to_vec())?;
    let xd = d.right_mul(&xt)?;
    let out = c.transpose().matmul(&xd)?;
    debug_assert_eq!(out.shape(), (q1, q2));
    Ok(DenseVector::from_vec(out.into_vec()))
}

/// `(c ⊗ d) · v`, evaluated as `c · Vᵀ · dᵀ` with `Vᵀ = reshape(v, q1, q2)`.
pub fn kron_apply(c: &DenseMatrix, d: RightFactor<'_>, v: &DenseVector) -> Result<DenseVector> {
    let (p1, q1) = c.shape();
    let (p2, q2) = d.shape();
    if v.len() != q1 * q2 {
        return Err(KarstError::KronLength {
            p1: q1,
            p2: q2,
            expected: q1 * q2,
            got: v.len(),
        });
    }
    let vt = DenseMatrix::new(q1, q2, v.as_slice().to_vec())?;
    let vd = d.right_mul_t(&vt)?;
    let out = c.matmul(&vd)?;
    debug_assert_eq!(out.shape(), (p1, p2));
    Ok(DenseVector::from_vec(out.into_vec()))
}

/// Multiply count of [`kron_apply_transpose`] for `c: p1×q1`, `d: p2×q2`.
///
/// Dense `d`: `p1·p2·q2 + q1·p1·q2`. Low rank `d = a·b` (rank r):
/// `p1·p2·r + p1·r·q2 + q1·p1·q2`.
pub fn structured_flops(p1: usize, q1: usize, p2: usize, q2: usize, low_rank_r: Option<usize>) -> usize {
    let d_part = match low_rank_r {
        None => p1 * p2 * q2,
        Some(r) => p1 * r * (p2 + q2),
    };
    d_part + q1 * p1 * q2
}

pub fn flops_for(c: &DenseMatrix, d: RightFactor<'_>) -> usize {
    let (p1, q1) = c.shape();
    let (p2, q2) = d.shape();
    structured_flops(p1, q1, p2, q2, d.rank())
}

/// Singular values in descending order, by one-sided Jacobi rotation.
///
/// The wider side is transposed away first, so the iteration always runs
/// over at most `min(rows, cols)` columns.
pub fn singular_values(mat: &DenseMatrix) -> Vec<f64> {
    if mat.is_empty() {
        return Vec::new();
    }
    let work = if mat.rows() >= mat.cols() {
        mat.clone()
    } else {
        mat.transpose()
    };
    let (m, n) = work.shape();
    // Column-major copy so each column is contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| work.get(i, j)).collect()).collect();

    const MAX_SWEEPS: usize = 60;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (alpha, beta, gamma) = cols[i]
                    .iter()
                    .zip(&cols[j])
                    .fold((0.0, 0.0, 0.0), |(a, b, g), (x, y)| (a + x * x, b + y * y, g + x * y));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = cols.split_at_mut(j);
                for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = cs * xi - sn * yj;
                    *y = sn * xi + cs * yj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values greater than `tol · σ_max`.
pub fn rank_of(mat: &DenseMatrix, tol: f64) -> Result<usize> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(KarstError::InvalidArgument(format!("rank tolerance must be positive, got {tol}")));
    }
    let sv = singular_values(mat);
    let Some(&max) = sv.first() else {
        return Ok(0);
    };
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * max).count())
}
