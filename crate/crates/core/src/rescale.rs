//! Channel-wise re-scaling of a layer's affine output:
//! `y = (1 + s1) ⊙ z + s2`, where `z = Wᵀx + b` already includes the base
//! bias. Because the map is affine per channel it folds into the preceding
//! weight and bias.

use crate::error::{KarstError, Result};
use crate::numerics::{DenseMatrix, DenseVector};

#[derive(Debug, Clone, PartialEq)]
pub struct RescaleParams {
    s1: DenseVector,
    s2: DenseVector,
}

impl RescaleParams {
    /// Zero scale and shift, i.e. the identity map.
    pub fn zeros(d_out: usize) -> Self {
        Self {
            s1: DenseVector::zeros(d_out),
            s2: DenseVector::zeros(d_out),
        }
    }

    pub fn new(s1: DenseVector, s2: DenseVector) -> Result<Self> {
        if s1.len() != s2.len() {
            return Err(KarstError::LengthMismatch {
                op: "rescale params",
                expected: s1.len(),
                got: s2.len(),
            });
        }
        Ok(Self { s1, s2 })
    }

    pub fn len(&self) -> usize {
        self.s1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s1.is_empty()
    }

    pub fn s1(&self) -> &DenseVector {
        &self.s1
    }

    pub fn s2(&self) -> &DenseVector {
        &self.s2
    }

    pub fn s1_mut(&mut self) -> &mut DenseVector {
        &mut self.s1
    }

    pub fn s2_mut(&mut self) -> &mut DenseVector {
        &mut self.s2
    }

    pub fn is_identity(&self) -> bool {
        self.s1.as_slice().iter().chain(self.s2.as_slice()).all(|&v| v == 0.0)
    }

    pub fn apply(&self, z: &DenseVector) -> Result<DenseVector> {
        rescale_apply(self, z)
    }

    /// Params equivalent to applying `self` first and then `next`.
    pub fn then(&self, next: &RescaleParams) -> Result<RescaleParams> {
        if self.len() != next.len() {
            return Err(KarstError::LengthMismatch {
                op: "rescale compose",
                expected: self.len(),
                got: next.len(),
            });
        }
        let mut s1 = Vec::with_capacity(self.len());
        let mut s2 = Vec::with_capacity(self.len());
        for j in 0..self.len() {
            let (a1, a2) = (self.s1.as_slice()[j], self.s2.as_slice()[j]);
            let (b1, b2) = (next.s1.as_slice()[j], next.s2.as_slice()[j]);
            s1.push((1.0 + a1) * (1.0 + b1) - 1.0);
            s2.push((1.0 + b1) * a2 + b2);
        }
        Ok(Self {
            s1: s1.into(),
            s2: s2.into(),
        })
    }
}

pub fn rescale_apply(p: &RescaleParams, z: &DenseVector) -> Result<DenseVector> {
    if z.len() != p.len() {
        return Err(KarstError::LengthMismatch {
            op: "rescale_apply",
            expected: p.len(),
            got: z.len(),
        });
    }
    let out = z
        .as_slice()
        .iter()
        .zip(p.s1.as_slice().iter().zip(p.s2.as_slice()))
        .map(|(&zj, (&s1, &s2))| (1.0 + s1) * zj + s2)
        .collect();
    Ok(DenseVector::from_vec(out))
}

/// Folds the re-scaling into an affine layer stored as `w: d_in × d_out`,
/// returning `(w · diag(1 + s1), (1 + s1) ⊙ bias + s2)`. A missing bias is
/// treated as zero, so the returned bias is always present.
pub fn rescale_fold(
    p: &RescaleParams,
    w: &DenseMatrix,
    bias: Option<&DenseVector>,
) -> Result<(DenseMatrix, DenseVector)> {
    if w.cols() != p.len() {
        return Err(KarstError::ShapeMismatch {
            op: "rescale_fold",
            left: w.shape(),
            right: (1, p.len()),
        });
    }
    if let Some(b) = bias {
        if b.len() != p.len() {
            return Err(KarstError::LengthMismatch {
                op: "rescale_fold bias",
                expected: p.len(),
                got: b.len(),
            });
        }
    }
    let s1 = p.s1.as_slice();
    let s2 = p.s2.as_slice();
    let mut folded = w.clone();
    if s1.iter().any(|&v| v != 0.0) {
        for r in 0..folded.rows() {
            for (v, &s) in folded.row_mut(r).iter_mut().zip(s1) {
                *v *= 1.0 + s;
            }
        }
    }
    let out_bias = (0..p.len())
        .map(|j| {
            let b = bias.map_or(0.0, |b| b.as_slice()[j]);
            if s1[j] == 0.0 && s2[j] == 0.0 {
                b
            } else {
                (1.0 + s1[j]) * b + s2[j]
            }
        })
        .collect();
    Ok((folded, DenseVector::from_vec(out_bias)))
}
