use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedLinear, AdapterShape, KarstAdapter, KronKernel, MergedLinear};
use crate::error::{KarstError, Result};
use crate::format::{Archive, ArchiveKind};
use crate::numerics::{gaussian_matrix, gaussian_vector, DenseMatrix, DenseVector, SeededRng};
use crate::rescale::RescaleParams;

/// Which parameter groups of a layer the optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub adapter: bool,
    pub rescale: bool,
}

impl LayerMask {
    pub const ALL: LayerMask = LayerMask {
        adapter: true,
        rescale: true,
    };
    pub const NONE: LayerMask = LayerMask {
        adapter: false,
        rescale: false,
    };
}

/// Stack of adapted linear layers with `tanh` between them; the last layer
/// produces logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<AdaptedLinear>,
    masks: Vec<LayerMask>,
    /// Bumped on every mutable parameter access; caches remember it.
    generation: u64,
}

/// Per-layer values kept by [`ToyModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Layer inputs, one per sample.
    pub x: Vec<DenseVector>,
    /// Pre-rescale affine outputs.
    pub z: Vec<DenseVector>,
    /// Post-rescale outputs (logits for the last layer).
    pub y: Vec<DenseVector>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    generation: u64,
    batch: usize,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

impl ToyModel {
    pub fn new(layers: Vec<AdaptedLinear>) -> Result<Self> {
        let masks = vec![LayerMask::ALL; layers.len()];
        Self::with_masks(layers, masks)
    }

    pub fn with_masks(layers: Vec<AdaptedLinear>, masks: Vec<LayerMask>) -> Result<Self> {
        if layers.is_empty() {
            return Err(KarstError::InvalidArgument("model needs at least one layer".into()));
        }
        if masks.len() != layers.len() {
            return Err(KarstError::InvalidArgument("one mask per layer required".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(KarstError::ShapeMismatch {
                    op: "model layers",
                    left: pair[0].w0().shape(),
                    right: pair[1].w0().shape(),
                });
            }
        }
        Ok(Self {
            layers,
            masks,
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[AdaptedLinear] {
        &self.layers
    }

    /// Mutable layer access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [AdaptedLinear] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn masks(&self) -> &[LayerMask] {
        &self.masks
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    /// Count of parameters the optimizer updates under the current masks.
    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.masks)
            .map(|(l, mask)| {
                let a = if mask.adapter { l.adapter().trainable_count() } else { 0 };
                let s = if mask.rescale { 2 * l.d_out() } else { 0 };
                a + s
            })
            .sum()
    }

    /// Logits for a single input.
    pub fn predict_one(&self, x: &DenseVector) -> Result<DenseVector> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            h = if i < last { tanh(&y) } else { y };
        }
        Ok(h)
    }

    /// Batched forward over the rows of `x`, returning logits and the cache
    /// the backward pass needs.
    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        if x.cols() != self.d_in() {
            return Err(KarstError::LengthMismatch {
                op: "model forward",
                expected: self.d_in(),
                got: x.cols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs: Vec<DenseVector> = (0..x.rows()).map(|r| DenseVector::from_vec(x.row(r).to_vec())).collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut zs = Vec::with_capacity(inputs.len());
            let mut ys = Vec::with_capacity(inputs.len());
            for h in &inputs {
                let out = layer.forward_parts(h)?;
                zs.push(out.z);
                ys.push(out.y);
            }
            let next: Vec<DenseVector> = if i < last { ys.iter().map(tanh).collect() } else { Vec::new() };
            caches.push(LayerCache {
                x: std::mem::replace(&mut inputs, next),
                z: zs,
                y: ys,
            });
        }
        let logits_rows = &caches[last].y;
        let mut data = Vec::with_capacity(x.rows() * self.n_classes());
        for row in logits_rows {
            data.extend_from_slice(row.as_slice());
        }
        let logits = DenseMatrix::new(x.rows(), self.n_classes(), data)?;
        Ok((
            logits,
            ForwardCache {
                layers: caches,
                generation: self.generation,
                batch: x.rows(),
            },
        ))
    }

    pub(crate) fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.generation != self.generation {
            return Err(KarstError::StaleCache(format!(
                "cache built at generation {}, model is at {}",
                cache.generation, self.generation
            )));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(KarstError::StaleCache("layer count differs".into()));
        }
        Ok(())
    }

    /// Frozen-only network (no adapter, no re-scaling) logits.
    pub fn base_predict_one(&self, x: &DenseVector) -> Result<DenseVector> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.base_forward(&h)?;
            h = if i < last { tanh(&y) } else { y };
        }
        Ok(h)
    }

    pub fn merge(&self) -> Result<MergedModel> {
        Ok(MergedModel {
            layers: self.layers.iter().map(AdaptedLinear::merge).collect::<Result<_>>()?,
        })
    }

    /// Visits every trainable tensor in a fixed order:
    /// per layer, kernels `c, a, b` in kernel order, then `s1`, `s2`.
    /// The flag reports whether the tensor's group is unmasked.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [f64], bool)) {
        self.generation += 1;
        for (l, (layer, mask)) in self.layers.iter_mut().zip(&self.masks).enumerate() {
            for (k, kernel) in layer.adapter_mut().kernels_mut().iter_mut().enumerate() {
                f(&format!("layer{l}.kernel{k}.c"), kernel.c.as_mut_slice(), mask.adapter);
                f(&format!("layer{l}.kernel{k}.a"), kernel.a.as_mut_slice(), mask.adapter);
                f(&format!("layer{l}.kernel{k}.b"), kernel.b.as_mut_slice(), mask.adapter);
            }
            let rescale = layer.rescale_mut();
            f(&format!("layer{l}.s1"), rescale.s1_mut().as_mut_slice(), mask.rescale);
            f(&format!("layer{l}.s2"), rescale.s2_mut().as_mut_slice(), mask.rescale);
        }
    }

    /// Fills every trainable tensor (including `b`) with Gaussian noise.
    /// Useful for gradient checks, where a zero `b` makes `c` and `a`
    /// gradients vanish identically.
    pub fn randomize_trainable(&mut self, rng: &mut SeededRng, std: f64) -> Result<()> {
        let mut err = None;
        self.visit_params_mut(|_, data, _| {
            match gaussian_vector(rng, data.len(), std) {
                Ok(v) => data.copy_from_slice(v.as_slice()),
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Serializes frozen and trainable tensors plus per-layer metadata.
    pub fn to_archive(&self, provenance: serde_json::Value) -> Archive {
        let layer_meta: Vec<_> = self
            .layers
            .iter()
            .zip(&self.masks)
            .map(|(l, mask)| {
                serde_json::json!({
                    "shape": l.adapter().shape(),
                    "seed": l.adapter().seed(),
                    "has_bias": l.bias0().is_some(),
                    "mask": mask,
                })
            })
            .collect();
        let header = serde_json::json!({
            "activation": "tanh",
            "layers": layer_meta,
            "provenance": provenance,
        });
        let mut archive = Archive::new(ArchiveKind::Adapted, header);
        for (l, layer) in self.layers.iter().enumerate() {
            archive.push(format!("layer{l}.w0"), layer.w0().clone());
            if let Some(b) = layer.bias0() {
                archive.push(format!("layer{l}.bias0"), b.to_row_matrix());
            }
            for (k, kernel) in layer.adapter().kernels().iter().enumerate() {
                archive.push(format!("layer{l}.kernel{k}.c"), kernel.c.clone());
                archive.push(format!("layer{l}.kernel{k}.a"), kernel.a.clone());
                archive.push(format!("layer{l}.kernel{k}.b"), kernel.b.clone());
            }
            archive.push(format!("layer{l}.s1"), layer.rescale().s1().to_row_matrix());
            archive.push(format!("layer{l}.s2"), layer.rescale().s2().to_row_matrix());
        }
        archive
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.kind != ArchiveKind::Adapted {
            return Err(KarstError::Format("expected an adapted-model archive".into()));
        }
        #[derive(Deserialize)]
        struct Meta {
            shape: AdapterShape,
            seed: u64,
            has_bias: bool,
            mask: LayerMask,
        }
        let metas: Vec<Meta> = serde_json::from_value(
            archive
                .header
                .get("layers")
                .cloned()
                .ok_or_else(|| KarstError::Format("header has no `layers`".into()))?,
        )
        .map_err(|e| KarstError::Format(format!("bad layer metadata: {e}")))?;
        let mut layers = Vec::with_capacity(metas.len());
        let mut masks = Vec::with_capacity(metas.len());
        for (l, meta) in metas.iter().enumerate() {
            let w0 = archive.require(&format!("layer{l}.w0"))?.clone();
            let bias0 = if meta.has_bias {
                Some(row_vector(archive.require(&format!("layer{l}.bias0"))?)?)
            } else {
                None
            };
            let kernels = (0..meta.shape.n_kernels)
                .map(|k| {
                    Ok(KronKernel {
                        c: archive.require(&format!("layer{l}.kernel{k}.c"))?.clone(),
                        a: archive.require(&format!("layer{l}.kernel{k}.a"))?.clone(),
                        b: archive.require(&format!("layer{l}.kernel{k}.b"))?.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let adapter = KarstAdapter::from_parts(meta.shape, meta.seed, kernels)?;
            let rescale = RescaleParams::new(
                row_vector(archive.require(&format!("layer{l}.s1"))?)?,
                row_vector(archive.require(&format!("layer{l}.s2"))?)?,
            )?;
            layers.push(AdaptedLinear::new(w0, bias0, adapter, rescale)?);
            masks.push(meta.mask);
        }
        Self::with_masks(layers, masks)
    }
}

/// Plain affine network obtained by merging every adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub layers: Vec<MergedLinear>,
}

impl MergedModel {
    pub fn predict_one(&self, x: &DenseVector) -> Result<DenseVector> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            h = if i < last { tanh(&y) } else { y };
        }
        Ok(h)
    }

    pub fn to_archive(&self, provenance: serde_json::Value) -> Archive {
        let meta: Vec<_> = self
            .layers
            .iter()
            .map(|l| serde_json::json!({"d_in": l.weight.rows(), "d_out": l.weight.cols(), "has_bias": l.bias.is_some()}))
            .collect();
        let header = serde_json::json!({"activation": "tanh", "layers": meta, "provenance": provenance});
        let mut archive = Archive::new(ArchiveKind::Merged, header);
        for (l, layer) in self.layers.iter().enumerate() {
            archive.push(format!("layer{l}.weight"), layer.weight.clone());
            if let Some(b) = &layer.bias {
                archive.push(format!("layer{l}.bias"), b.to_row_matrix());
            }
        }
        archive
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.kind != ArchiveKind::Merged {
            return Err(KarstError::Format("expected a merged-model archive".into()));
        }
        let n = archive
            .header
            .get("layers")
            .and_then(|v| v.as_array())
            .map(Vec::len)
            .ok_or_else(|| KarstError::Format("header has no `layers`".into()))?;
        let layers = (0..n)
            .map(|l| {
                let weight = archive.require(&format!("layer{l}.weight"))?.clone();
                let bias = archive.get(&format!("layer{l}.bias")).map(row_vector).transpose()?;
                Ok(MergedLinear { weight, bias })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

fn row_vector(m: &DenseMatrix) -> Result<DenseVector> {
    if m.rows() != 1 {
        return Err(KarstError::Format(format!("expected a 1-row tensor, got {:?}", m.shape())));
    }
    Ok(DenseVector::from_vec(m.as_slice().to_vec()))
}

pub(crate) fn tanh(v: &DenseVector) -> DenseVector {
    DenseVector::from_vec(v.as_slice().iter().map(|x| x.tanh()).collect())
}

/// Gaussian frozen layer with `N(0, 1/d_in)` weights and small bias.
pub fn random_base_layer(rng: &mut SeededRng, d_in: usize, d_out: usize) -> Result<(DenseMatrix, DenseVector)> {
    let w = gaussian_matrix(rng, d_in, d_out, (1.0 / d_in as f64).sqrt())?;
    let b = gaussian_vector(rng, d_out, 0.1)?;
    Ok((w, b))
}
