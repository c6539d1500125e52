//! Loss and analytic reverse-mode gradients for [`ToyModel`].
//!
//! Per layer, with `g = ∂L/∂z` and `G = Σ x gᵀ` (shape `d_in × d_out`)
//! split into `m × m` blocks `G(p,q)` of shape `(d_in/m) × (d_out/m)`:
//!
//! ```text
//! ∂L/∂cᵢ[p,q] = ⟨G(p,q), aᵢbᵢ⟩
//! ∂L/∂Dᵢ      = Σ_{p,q} cᵢ[p,q] · G(p,q)
//! ∂L/∂aᵢ      = (∂L/∂Dᵢ) bᵢᵀ
//! ∂L/∂bᵢ      = aᵢᵀ (∂L/∂Dᵢ)
//! ∂L/∂s1      = Σ ∂L/∂y ⊙ z
//! ∂L/∂s2      = Σ ∂L/∂y
//! ```

use crate::error::{KarstError, Result};
use crate::numerics::{dot, DenseMatrix, DenseVector};

use super::model::{ForwardCache, ToyModel};

#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrads {
    pub c: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub kernels: Vec<KernelGrads>,
    pub s1: DenseVector,
    pub s2: DenseVector,
}

/// Gradients for every trainable tensor, shape-congruent with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrads>,
}

impl GradientSet {
    pub fn zeros_like(model: &ToyModel) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| LayerGrads {
                kernels: l
                    .adapter()
                    .kernels()
                    .iter()
                    .map(|k| KernelGrads {
                        c: DenseMatrix::zeros(k.c.rows(), k.c.cols()),
                        a: DenseMatrix::zeros(k.a.rows(), k.a.cols()),
                        b: DenseMatrix::zeros(k.b.rows(), k.b.cols()),
                    })
                    .collect(),
                s1: DenseVector::zeros(l.d_out()),
                s2: DenseVector::zeros(l.d_out()),
            })
            .collect();
        Self { layers }
    }

    /// Same traversal order as [`ToyModel::visit_params_mut`].
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, kg) in layer.kernels.iter().enumerate() {
                f(&format!("layer{l}.kernel{k}.c"), kg.c.as_slice());
                f(&format!("layer{l}.kernel{k}.a"), kg.a.as_slice());
                f(&format!("layer{l}.kernel{k}.b"), kg.b.as_slice());
            }
            f(&format!("layer{l}.s1"), layer.s1.as_slice());
            f(&format!("layer{l}.s2"), layer.s2.as_slice());
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (k, kg) in layer.kernels.iter_mut().enumerate() {
                f(&format!("layer{l}.kernel{k}.c"), kg.c.as_mut_slice());
                f(&format!("layer{l}.kernel{k}.a"), kg.a.as_mut_slice());
                f(&format!("layer{l}.kernel{k}.b"), kg.b.as_mut_slice());
            }
            f(&format!("layer{l}.s1"), layer.s1.as_mut_slice());
            f(&format!("layer{l}.s2"), layer.s2.as_mut_slice());
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.visit(|_, d| m = d.iter().fold(m, |acc, v| acc.max(v.abs())));
        m
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Mean softmax cross-entropy over the rows of `logits`, with its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    if labels.len() != logits.rows() {
        return Err(KarstError::LengthMismatch {
            op: "cross entropy labels",
            expected: logits.rows(),
            got: labels.len(),
        });
    }
    let n = logits.rows().max(1) as f64;
    let mut grad = DenseMatrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(KarstError::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                logits.cols()
            )));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(r);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() / n;
        }
        g[label] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

pub fn loss(model: &ToyModel, x: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    let (logits, _) = model.forward(x)?;
    Ok(softmax_cross_entropy(&logits, labels)?.0)
}

/// Loss and gradients for a labelled batch.
pub fn backward(model: &ToyModel, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, GradientSet)> {
    model.check_cache(cache)?;
    if labels.len() != cache.batch_size() {
        return Err(KarstError::StaleCache(format!(
            "cache holds {} samples, got {} labels",
            cache.batch_size(),
            labels.len()
        )));
    }
    let last = cache.layers.len() - 1;
    let ys = &cache.layers[last].y;
    let mut data = Vec::with_capacity(ys.len() * model.n_classes());
    for y in ys {
        data.extend_from_slice(y.as_slice());
    }
    let logits = DenseMatrix::new(ys.len(), model.n_classes(), data)?;
    let (l, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let upstream = (0..dlogits.rows())
        .map(|r| DenseVector::from_vec(dlogits.row(r).to_vec()))
        .collect();
    Ok((l, backward_from(model, cache, upstream)?))
}

/// Propagates `∂L/∂logits` (one vector per sample) back through the model.
pub fn backward_from(model: &ToyModel, cache: &ForwardCache, dlogits: Vec<DenseVector>) -> Result<GradientSet> {
    model.check_cache(cache)?;
    if dlogits.len() != cache.batch_size() {
        return Err(KarstError::StaleCache("upstream gradient batch size differs from cache".into()));
    }
    let mut grads = GradientSet::zeros_like(model);
    let n_layers = model.layers().len();
    // ∂L/∂y of the current layer, per sample
    let mut dy = dlogits;
    for li in (0..n_layers).rev() {
        let layer = &model.layers()[li];
        let lc = &cache.layers[li];
        let (d_in, d_out) = (layer.d_in(), layer.d_out());
        let s1 = layer.rescale().s1().as_slice();
        let lg = &mut grads.layers[li];

        let mut big_g = DenseMatrix::zeros(d_in, d_out);
        let mut dz_all = Vec::with_capacity(dy.len());
        for (n, dyn_) in dy.iter().enumerate() {
            let z = lc.z[n].as_slice();
            let dyv = dyn_.as_slice();
            for j in 0..d_out {
                lg.s1.as_mut_slice()[j] += dyv[j] * z[j];
                lg.s2.as_mut_slice()[j] += dyv[j];
            }
            let dz: Vec<f64> = dyv.iter().zip(s1).map(|(g, s)| (1.0 + s) * g).collect();
            let x = lc.x[n].as_slice();
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (gv, &dzj) in big_g.row_mut(i).iter_mut().zip(&dz) {
                    *gv += xi * dzj;
                }
            }
            dz_all.push(DenseVector::from_vec(dz));
        }

        let shape = *layer.adapter().shape();
        let (bi, bo) = (shape.block_in(), shape.block_out());
        for (kernel, kg) in layer.adapter().kernels().iter().zip(lg.kernels.iter_mut()) {
            let ab = kernel.a.matmul(&kernel.b)?;
            let mut d_grad = DenseMatrix::zeros(bi, bo);
            for p in 0..shape.m {
                for q in 0..shape.m {
                    let cpq = kernel.c.get(p, q);
                    let mut inner = 0.0;
                    for i in 0..bi {
                        let g_row = &big_g.row(p * bi + i)[q * bo..(q + 1) * bo];
                        inner += dot(g_row, ab.row(i));
                        if cpq != 0.0 {
                            for (dv, &gv) in d_grad.row_mut(i).iter_mut().zip(g_row) {
                                *dv += cpq * gv;
                            }
                        }
                    }
                    kg.c.set(p, q, inner);
                }
            }
            kg.a = d_grad.matmul(&kernel.b.transpose())?;
            kg.b = kernel.a.transpose().matmul(&d_grad)?;
        }

        if li == 0 {
            break;
        }
        // Back through this layer's input and the preceding tanh.
        let prev_out = &cache.layers[li].x;
        let mut next_dy = Vec::with_capacity(dz_all.len());
        for (n, dz) in dz_all.iter().enumerate() {
            let mut dx = layer.w0().matvec(dz)?;
            dx.add_assign(&layer.adapter().apply_forward(dz)?)?;
            let h = prev_out[n].as_slice();
            let d = dx.as_slice().iter().zip(h).map(|(g, a)| g * (1.0 - a * a)).collect();
            next_dy.push(DenseVector::from_vec(d));
        }
        dy = next_dy;
    }
    if !grads.is_finite() {
        return Err(KarstError::NonFinite("backward"));
    }
    Ok(grads)
}
