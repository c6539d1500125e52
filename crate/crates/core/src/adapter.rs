//! Multi-kernel Kronecker adapter and the adapted linear layer.
//!
//! The weight update is `ΔW = Σᵢ cᵢ ⊗ (aᵢ bᵢ)` with `cᵢ: m×m`,
//! `aᵢ: (d_in/m)×r` and `bᵢ: r×(d_out/m)`. `ΔW` is stored `d_in × d_out`
//! like the frozen weight, and a layer maps a column input `x` to
//! `(W₀ + ΔW)ᵀ x + b₀`, followed by channel-wise re-scaling.

use serde::{Deserialize, Serialize};

use crate::error::{KarstError, Result};
use crate::kron::{self, RightFactor};
use crate::numerics::{gaussian_matrix, DenseMatrix, DenseVector, SeededRng};
use crate::rescale::{rescale_fold, RescaleParams};

/// Default standard deviation for the Gaussian-initialized factors.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Dimensions shared by every kernel of an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterShape {
    pub d_in: usize,
    pub d_out: usize,
    pub m: usize,
    pub r: usize,
    pub n_kernels: usize,
}

impl AdapterShape {
    pub fn new(d_in: usize, d_out: usize, m: usize, r: usize, n_kernels: usize) -> Result<Self> {
        let shape = Self {
            d_in,
            d_out,
            m,
            r,
            n_kernels,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || !self.d_in.is_multiple_of(self.m) || !self.d_out.is_multiple_of(self.m) {
            return Err(KarstError::Divisibility {
                d_in: self.d_in,
                d_out: self.d_out,
                m: self.m,
            });
        }
        if self.r == 0 {
            return Err(KarstError::InvalidArgument("adapter rank r must be at least 1".into()));
        }
        if self.n_kernels == 0 {
            return Err(KarstError::InvalidArgument("adapter needs at least one kernel".into()));
        }
        Ok(())
    }

    /// Row count of each `aᵢ`.
    pub fn block_in(&self) -> usize {
        self.d_in / self.m
    }

    /// Column count of each `bᵢ`.
    pub fn block_out(&self) -> usize {
        self.d_out / self.m
    }

    /// `N · (m² + r·d_in/m + r·d_out/m)`
    pub fn trainable_count(&self) -> usize {
        self.n_kernels * (self.m * self.m + self.r * self.block_in() + self.r * self.block_out())
    }

    /// Upper bound on the rank of the materialized update.
    pub fn rank_bound(&self) -> usize {
        (self.n_kernels * self.m * self.r).min(self.d_in).min(self.d_out)
    }
}

/// One `c ⊗ (a b)` term.
#[derive(Debug, Clone, PartialEq)]
pub struct KronKernel {
    pub c: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl KronKernel {
    fn check(&self, shape: &AdapterShape) -> Result<()> {
        let expect = [
            ("c", self.c.shape(), (shape.m, shape.m)),
            ("a", self.a.shape(), (shape.block_in(), shape.r)),
            ("b", self.b.shape(), (shape.r, shape.block_out())),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(KarstError::InvalidArgument(format!(
                    "kernel factor {name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(())
    }

    fn right(&self) -> RightFactor<'_> {
        RightFactor::LowRank {
            a: &self.a,
            b: &self.b,
        }
    }

    /// `(c ⊗ ab)ᵀ x` through the low-rank two-step path.
    pub fn apply_transpose(&self, x: &DenseVector) -> Result<DenseVector> {
        kron::kron_apply_transpose(&self.c, self.right(), x)
    }

    /// `(c ⊗ ab) g`
    pub fn apply(&self, g: &DenseVector) -> Result<DenseVector> {
        kron::kron_apply(&self.c, self.right(), g)
    }

    pub fn materialize(&self) -> Result<DenseMatrix> {
        Ok(kron::kron_materialize(&self.c, &self.a.matmul(&self.b)?))
    }
}

/// `ΔW` held as N Kronecker kernels; never materialized on the forward path.
#[derive(Debug, Clone, PartialEq)]
pub struct KarstAdapter {
    shape: AdapterShape,
    seed: u64,
    kernels: Vec<KronKernel>,
}

impl KarstAdapter {
    /// Gaussian `cᵢ`, `aᵢ` and zero `bᵢ`, so the update starts at exactly 0.
    pub fn init(rng: &mut SeededRng, shape: AdapterShape, std: f64) -> Result<Self> {
        shape.validate()?;
        let seed = rng.seed();
        let mut kernels = Vec::with_capacity(shape.n_kernels);
        for _ in 0..shape.n_kernels {
            let c = gaussian_matrix(rng, shape.m, shape.m, std)?;
            let a = gaussian_matrix(rng, shape.block_in(), shape.r, std)?;
            let b = DenseMatrix::zeros(shape.r, shape.block_out());
            kernels.push(KronKernel { c, a, b });
        }
        Ok(Self { shape, seed, kernels })
    }

    pub fn from_parts(shape: AdapterShape, seed: u64, kernels: Vec<KronKernel>) -> Result<Self> {
        shape.validate()?;
        if kernels.len() != shape.n_kernels {
            return Err(KarstError::InvalidArgument(format!(
                "expected {} kernels, got {}",
                shape.n_kernels,
                kernels.len()
            )));
        }
        for k in &kernels {
            k.check(&shape)?;
        }
        Ok(Self { shape, seed, kernels })
    }

    pub fn shape(&self) -> &AdapterShape {
        &self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kernels(&self) -> &[KronKernel] {
        &self.kernels
    }

    /// Mutable factor access for optimizers. Factor shapes must not change.
    pub fn kernels_mut(&mut self) -> &mut [KronKernel] {
        &mut self.kernels
    }

    /// `ΔWᵀ x`, kernel outputs accumulated in kernel order.
    pub fn apply(&self, x: &DenseVector) -> Result<DenseVector> {
        if x.len() != self.shape.d_in {
            return Err(KarstError::LengthMismatch {
                op: "adapter_apply",
                expected: self.shape.d_in,
                got: x.len(),
            });
        }
        let mut out = DenseVector::zeros(self.shape.d_out);
        for k in &self.kernels {
            out.add_assign(&k.apply_transpose(x)?)?;
        }
        Ok(out)
    }

    /// `ΔW g`, the input-side gradient contribution.
    pub fn apply_forward(&self, g: &DenseVector) -> Result<DenseVector> {
        if g.len() != self.shape.d_out {
            return Err(KarstError::LengthMismatch {
                op: "adapter_apply_forward",
                expected: self.shape.d_out,
                got: g.len(),
            });
        }
        let mut out = DenseVector::zeros(self.shape.d_in);
        for k in &self.kernels {
            out.add_assign(&k.apply(g)?)?;
        }
        Ok(out)
    }

    /// `Σᵢ cᵢ ⊗ (aᵢ bᵢ)`, shape `d_in × d_out`.
    pub fn materialize(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.shape.d_in, self.shape.d_out);
        for k in &self.kernels {
            // shapes are validated at construction
            out.add_assign(&k.materialize().expect("kernel shapes"))
                .expect("kernel shapes");
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.shape.trainable_count()
    }

    /// Multiply count of [`Self::apply`].
    pub fn apply_flops(&self) -> usize {
        let s = &self.shape;
        s.n_kernels * kron::structured_flops(s.m, s.m, s.block_in(), s.block_out(), Some(s.r))
    }

    /// Adapter holding only the given kernels (by index), for linearity checks.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let kernels: Vec<_> = idx.iter().map(|&i| self.kernels[i].clone()).collect();
        let shape = AdapterShape {
            n_kernels: kernels.len(),
            ..self.shape
        };
        Self::from_parts(shape, self.seed, kernels)
    }
}

pub fn init_adapter(rng: &mut SeededRng, d_in: usize, d_out: usize, m: usize, r: usize, n_kernels: usize, std: f64) -> Result<KarstAdapter> {
    KarstAdapter::init(rng, AdapterShape::new(d_in, d_out, m, r, n_kernels)?, std)
}

/// Plain affine layer `Wᵀx + b`, the result of merging.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedLinear {
    pub weight: DenseMatrix,
    pub bias: Option<DenseVector>,
}

impl MergedLinear {
    pub fn forward(&self, x: &DenseVector) -> Result<DenseVector> {
        let z = self.weight.t_matvec(x)?;
        match &self.bias {
            Some(b) => z.add(b),
            None => Ok(z),
        }
    }
}

/// Frozen base layer plus a trainable adapter and re-scaling.
///
/// `w0` and `bias0` have no mutable accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    w0: DenseMatrix,
    bias0: Option<DenseVector>,
    adapter: KarstAdapter,
    rescale: RescaleParams,
}

/// Intermediate values of one layer's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    /// `(W₀ + ΔW)ᵀ x + b₀`
    pub z: DenseVector,
    /// `(1 + s1) ⊙ z + s2`
    pub y: DenseVector,
}

impl AdaptedLinear {
    pub fn new(w0: DenseMatrix, bias0: Option<DenseVector>, adapter: KarstAdapter, rescale: RescaleParams) -> Result<Self> {
        let s = adapter.shape();
        if w0.shape() != (s.d_in, s.d_out) {
            return Err(KarstError::ShapeMismatch {
                op: "adapted linear",
                left: w0.shape(),
                right: (s.d_in, s.d_out),
            });
        }
        if let Some(b) = &bias0 {
            if b.len() != s.d_out {
                return Err(KarstError::LengthMismatch {
                    op: "adapted linear bias",
                    expected: s.d_out,
                    got: b.len(),
                });
            }
        }
        if rescale.len() != s.d_out {
            return Err(KarstError::LengthMismatch {
                op: "adapted linear rescale",
                expected: s.d_out,
                got: rescale.len(),
            });
        }
        Ok(Self {
            w0,
            bias0,
            adapter,
            rescale,
        })
    }

    /// Fresh adapter and zero re-scaling around a frozen base.
    pub fn wrap(rng: &mut SeededRng, w0: DenseMatrix, bias0: Option<DenseVector>, m: usize, r: usize, n_kernels: usize, std: f64) -> Result<Self> {
        let adapter = init_adapter(rng, w0.rows(), w0.cols(), m, r, n_kernels, std)?;
        let rescale = RescaleParams::zeros(w0.cols());
        Self::new(w0, bias0, adapter, rescale)
    }

    pub fn d_in(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w0.cols()
    }

    pub fn w0(&self) -> &DenseMatrix {
        &self.w0
    }

    pub fn bias0(&self) -> Option<&DenseVector> {
        self.bias0.as_ref()
    }

    pub fn adapter(&self) -> &KarstAdapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut KarstAdapter {
        &mut self.adapter
    }

    pub fn rescale(&self) -> &RescaleParams {
        &self.rescale
    }

    pub fn rescale_mut(&mut self) -> &mut RescaleParams {
        &mut self.rescale
    }

    /// Frozen-only path `W₀ᵀx + b₀`.
    pub fn base_forward(&self, x: &DenseVector) -> Result<DenseVector> {
        let z = self.w0.t_matvec(x)?;
        match &self.bias0 {
            Some(b) => z.add(b),
            None => Ok(z),
        }
    }

    pub fn forward_parts(&self, x: &DenseVector) -> Result<LayerOutput> {
        let mut z = self.base_forward(x)?;
        z.add_assign(&self.adapter.apply(x)?)?;
        let y = self.rescale.apply(&z)?;
        Ok(LayerOutput { z, y })
    }

    /// Training-time forward: `(1 + s1) ⊙ ((W₀ + ΔW)ᵀx + b₀) + s2`.
    pub fn forward(&self, x: &DenseVector) -> Result<DenseVector> {
        Ok(self.forward_parts(x)?.y)
    }

    /// Folds the adapter and the re-scaling into one affine layer.
    ///
    /// The bias is `None` only when the base has no bias and `s2 == 0`.
    pub fn merge(&self) -> Result<MergedLinear> {
        let delta = self.adapter.materialize();
        let w = self.w0.add(&delta)?;
        let (weight, bias) = rescale_fold(&self.rescale, &w, self.bias0.as_ref())?;
        let keep_bias = self.bias0.is_some() || self.rescale.s2().as_slice().iter().any(|&v| v != 0.0);
        Ok(MergedLinear {
            weight,
            bias: keep_bias.then_some(bias),
        })
    }

    /// Trainable parameters: adapter factors plus `s1` and `s2`.
    pub fn param_count(&self) -> usize {
        self.adapter.trainable_count() + 2 * self.d_out()
    }
}

pub fn merge(layer: &AdaptedLinear) -> Result<MergedLinear> {
    layer.merge()
}

pub fn param_count(layer: &AdaptedLinear) -> usize {
    layer.param_count()
}
