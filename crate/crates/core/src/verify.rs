//! Self-contained property suite behind `karst verify`.

use std::time::Instant;

use serde::Serialize;

use crate::adapter::{AdaptedLinear, AdapterShape, KarstAdapter, KronKernel};
use crate::error::Result;
use crate::format::Archive;
use crate::kron::{kron_materialize, rank_of, KronPair, DEFAULT_RANK_TOL};
use crate::numerics::{gaussian_matrix, gaussian_vector, rel_err, DenseMatrix, DenseVector, SeededRng};
use crate::rescale::{rescale_fold, RescaleParams};
use crate::training::gradcheck::gradcheck_batch;
use crate::training::model::{random_base_layer, ToyModel};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub family: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

type CheckFn = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("kron", "materialize matches block entries", kron_blocks),
    ("kron", "structured apply matches materialized", kron_apply),
    ("kron", "mixed-product identity", kron_mixed_product),
    ("zero-init", "fresh layer reproduces frozen base", zero_init),
    ("merge", "merged affine matches training forward", merge_equivalence),
    ("rescale", "fold matches two-step path", rescale_fold_check),
    ("gradcheck", "analytic vs central differences", gradients),
    ("rank", "rank(c⊗d) = rank(c)·rank(d)", kron_rank),
    ("rank", "adapter rank attains min(N·m·r, d_in, d_out)", adapter_rank),
    ("params", "param_count matches serialized trainable tensors", param_count),
    ("format", "binary round trip is bit-exact", round_trip),
];

pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(family, name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                family,
                name,
                passed,
                detail,
                millis: start.elapsed().as_millis(),
            }
        })
        .collect()
}

pub fn families(outcomes: &[CheckOutcome]) -> Vec<&'static str> {
    let mut f: Vec<_> = outcomes.iter().map(|o| o.family).collect();
    f.dedup();
    f
}

fn random_layer(rng: &mut SeededRng, shape: AdapterShape) -> Result<AdaptedLinear> {
    let (w0, b0) = random_base_layer(rng, shape.d_in, shape.d_out)?;
    let kernels = (0..shape.n_kernels)
        .map(|_| {
            Ok(KronKernel {
                c: gaussian_matrix(rng, shape.m, shape.m, 1.0)?,
                a: gaussian_matrix(rng, shape.block_in(), shape.r, 1.0)?,
                b: gaussian_matrix(rng, shape.r, shape.block_out(), 1.0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let adapter = KarstAdapter::from_parts(shape, rng.seed(), kernels)?;
    let rescale = RescaleParams::new(gaussian_vector(rng, shape.d_out, 0.3)?, gaussian_vector(rng, shape.d_out, 0.3)?)?;
    AdaptedLinear::new(w0, Some(b0), adapter, rescale)
}

fn kron_blocks() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(1);
    for _ in 0..100 {
        let (p1, q1, p2, q2) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let c = gaussian_matrix(&mut rng, p1, q1, 1.0)?;
        let d = gaussian_matrix(&mut rng, p2, q2, 1.0)?;
        let k = kron_materialize(&c, &d);
        for i in 0..p1 * p2 {
            for j in 0..q1 * q2 {
                if k.get(i, j) != c.get(i / p2, j / q2) * d.get(i % p2, j % q2) {
                    return Ok((false, format!("entry ({i},{j}) differs for {p1}x{q1} ⊗ {p2}x{q2}")));
                }
            }
        }
    }
    Ok((true, "100 random pairs exact".into()))
}

fn kron_apply() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (p1, q1, p2, q2) = (1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(5));
        let pair = KronPair::new(gaussian_matrix(&mut rng, p1, q1, 1.0)?, gaussian_matrix(&mut rng, p2, q2, 1.0)?);
        let x = gaussian_vector(&mut rng, p1 * p2, 1.0)?;
        let got = pair.apply_transpose(&x)?;
        let want = pair.materialize().t_matvec(&x)?;
        worst = worst.max(rel_err(got.as_slice(), want.as_slice()));
    }
    Ok((worst <= 1e-12, format!("max rel err {worst:.2e} (tol 1e-12)")))
}

fn kron_mixed_product() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let c1 = gaussian_matrix(&mut rng, 2, 3, 1.0)?;
        let d1 = gaussian_matrix(&mut rng, 3, 2, 1.0)?;
        let c2 = gaussian_matrix(&mut rng, 3, 4, 1.0)?;
        let d2 = gaussian_matrix(&mut rng, 2, 2, 1.0)?;
        let lhs = kron_materialize(&c1, &d1).matmul(&kron_materialize(&c2, &d2))?;
        let rhs = kron_materialize(&c1.matmul(&c2)?, &d1.matmul(&d2)?);
        worst = worst.max(rel_err(lhs.as_slice(), rhs.as_slice()));
    }
    Ok((worst <= 1e-12, format!("max rel err {worst:.2e} (tol 1e-12)")))
}

fn zero_init() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(4);
    let (w0, b0) = random_base_layer(&mut rng, 24, 16)?;
    let layer = AdaptedLinear::wrap(&mut rng, w0, Some(b0), 8, 8, 2, 0.02)?;
    for i in 0..1000 {
        let x = gaussian_vector(&mut rng, 24, 1.0)?;
        if layer.forward(&x)? != layer.base_forward(&x)? {
            return Ok((false, format!("input {i} differs")));
        }
    }
    Ok((true, "1000 inputs bitwise equal".into()))
}

fn merge_equivalence() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let layer = random_layer(&mut rng, AdapterShape::new(32, 16, 4, 2, 2)?)?;
        let merged = layer.merge()?;
        for _ in 0..100 {
            let x = gaussian_vector(&mut rng, 32, 1.0)?;
            let a = merged.forward(&x)?;
            let b = layer.forward(&x)?;
            worst = worst.max(rel_err(a.as_slice(), b.as_slice()));
        }
    }
    Ok((worst <= 1e-10, format!("max rel err {worst:.2e} (tol 1e-10)")))
}

fn rescale_fold_check() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(6);
    let w = gaussian_matrix(&mut rng, 12, 8, 1.0)?;
    let b = gaussian_vector(&mut rng, 8, 1.0)?;
    let p = RescaleParams::new(gaussian_vector(&mut rng, 8, 0.5)?, gaussian_vector(&mut rng, 8, 0.5)?)?;
    let (fw, fb) = rescale_fold(&p, &w, Some(&b))?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = gaussian_vector(&mut rng, 12, 1.0)?;
        let folded = fw.t_matvec(&x)?.add(&fb)?;
        let two_step = p.apply(&w.t_matvec(&x)?.add(&b)?)?;
        worst = worst.max(rel_err(folded.as_slice(), two_step.as_slice()));
    }
    Ok((worst <= 1e-12, format!("max rel err {worst:.2e} (tol 1e-12)")))
}

fn gradients() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(7);
    let (w1, b1) = random_base_layer(&mut rng, 8, 8)?;
    let (w2, b2) = random_base_layer(&mut rng, 8, 4)?;
    let l1 = AdaptedLinear::wrap(&mut rng, w1, Some(b1), 2, 2, 2, 0.3)?;
    let l2 = AdaptedLinear::wrap(&mut rng, w2, Some(b2), 2, 1, 2, 0.3)?;
    let mut model = ToyModel::new(vec![l1, l2])?;
    model.randomize_trainable(&mut rng, 0.3)?;
    let x = gaussian_matrix(&mut rng, 8, 8, 1.0)?;
    let y: Vec<usize> = (0..8).map(|_| rng.below(4)).collect();
    let report = gradcheck_batch(&model, &x, &y, 1e-4)?;
    Ok((
        report.passed(),
        format!("{} tensors, max rel err {:.2e} (tol 1e-4)", report.tensors.len(), report.max_rel_err()),
    ))
}

fn kron_rank() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(8);
    for (rc, rd) in [(1, 1), (2, 3), (3, 2), (4, 4)] {
        let c = gaussian_matrix(&mut rng, 4, rc, 1.0)?.matmul(&gaussian_matrix(&mut rng, rc, 5, 1.0)?)?;
        let d = gaussian_matrix(&mut rng, 5, rd, 1.0)?.matmul(&gaussian_matrix(&mut rng, rd, 4, 1.0)?)?;
        let (kc, kd) = (rank_of(&c, DEFAULT_RANK_TOL)?, rank_of(&d, DEFAULT_RANK_TOL)?);
        let k = rank_of(&kron_materialize(&c, &d), DEFAULT_RANK_TOL)?;
        if k != kc * kd {
            return Ok((false, format!("rank {k} != {kc}·{kd}")));
        }
    }
    Ok((true, "4 factor pairs".into()))
}

fn adapter_rank() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(9);
    for (d_in, d_out, m, r, n) in [(12, 8, 2, 1, 1), (12, 8, 2, 1, 2), (12, 8, 2, 1, 4), (16, 16, 4, 1, 2), (16, 16, 4, 2, 3)] {
        let shape = AdapterShape::new(d_in, d_out, m, r, n)?;
        let layer = random_layer(&mut rng, shape)?;
        let rank = rank_of(&layer.adapter().materialize(), DEFAULT_RANK_TOL)?;
        if rank != shape.rank_bound() {
            return Ok((false, format!("{shape:?}: rank {rank}, bound {}", shape.rank_bound())));
        }
    }
    Ok((true, "5 shapes at the bound".into()))
}

fn param_count() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(10);
    let layer = AdaptedLinear::wrap(&mut rng, DenseMatrix::zeros(768, 768), None, 8, 8, 2, 0.02)?;
    let model = ToyModel::new(vec![layer])?;
    let archive = model.to_archive(serde_json::Value::Null);
    let enumerated: usize = archive
        .tensors
        .iter()
        .filter(|(name, _)| !name.ends_with(".w0") && !name.ends_with(".bias0"))
        .map(|(_, t)| t.len())
        .sum();
    let counted = model.layers()[0].param_count();
    Ok((
        enumerated == counted && counted == 4_736,
        format!("enumerated {enumerated}, formula {counted}, expected 4736"),
    ))
}

fn round_trip() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(11);
    let layer = random_layer(&mut rng, AdapterShape::new(8, 4, 2, 2, 2)?)?;
    let model = ToyModel::new(vec![layer])?;
    let archive = model.to_archive(serde_json::json!({"seed": 11}));
    let mut bytes = Vec::new();
    archive.write_to(&mut bytes)?;
    let back = ToyModel::from_archive(&Archive::read_from(&bytes[..])?)?;
    let mut again = Vec::new();
    back.to_archive(serde_json::json!({"seed": 11})).write_to(&mut again)?;
    let x = DenseVector::from_vec(vec![0.5; 8]);
    let same = back.predict_one(&x)? == model.predict_one(&x)?;
    Ok((bytes == again && same, format!("{} bytes", bytes.len())))
}
