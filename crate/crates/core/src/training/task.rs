//! Deterministic synthetic transfer tasks.
//!
//! Every task ships the frozen "pre-trained" base network it is meant to be
//! adapted from. The teacher recipes label inputs with a shifted copy of that
//! base, so closing the gap requires changing the first layer's weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KarstError, Result};
use crate::numerics::{gaussian_matrix, DenseMatrix, DenseVector, SeededRng};

use super::model::{random_base_layer, tanh};

pub const RECIPES: &[&str] = &["gaussian-blobs", "rotated-base", "low-rank-shift"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Well-separated class blobs; labels are independent of the base.
    GaussianBlobs,
    /// Teacher first layer is the base with inputs rotated in a random plane.
    RotatedBase,
    /// Teacher first layer is the base plus a random rank-k matrix.
    LowRankShift,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::GaussianBlobs => RECIPES[0],
            Recipe::RotatedBase => RECIPES[1],
            Recipe::LowRankShift => RECIPES[2],
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = KarstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(Recipe::GaussianBlobs),
            "rotated-base" => Ok(Recipe::RotatedBase),
            "low-rank-shift" => Ok(Recipe::LowRankShift),
            other => Err(KarstError::UnknownRecipe {
                got: other.to_string(),
                known: RECIPES,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub recipe: Recipe,
    pub seed: u64,
    /// Layer widths of the base network, input first, classes last.
    pub widths: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    /// Rank of the teacher shift (low-rank-shift only).
    pub shift_rank: usize,
    /// Shift size: norm relative to the base weights for low-rank-shift,
    /// rotation angle in radians for rotated-base.
    pub shift_scale: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            recipe: Recipe::LowRankShift,
            seed: 0,
            widths: vec![16, 16, 4],
            n_train: 256,
            n_test: 256,
            shift_rank: 4,
            shift_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLayer {
    pub w: DenseMatrix,
    pub bias: DenseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub base: Vec<BaseLayer>,
    pub train_x: DenseMatrix,
    pub train_y: Vec<usize>,
    pub test_x: DenseMatrix,
    pub test_y: Vec<usize>,
}

impl SyntheticTask {
    pub fn classes(&self) -> usize {
        *self.spec.widths.last().expect("validated widths")
    }

    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn train_batch(&self, idx: &[usize]) -> Result<(DenseMatrix, Vec<usize>)> {
        gather(&self.train_x, &self.train_y, idx)
    }
}

fn gather(x: &DenseMatrix, y: &[usize], idx: &[usize]) -> Result<(DenseMatrix, Vec<usize>)> {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(x.row(i));
        labels.push(y[i]);
    }
    Ok((DenseMatrix::new(idx.len(), x.cols(), data)?, labels))
}

pub fn make_task(recipe: &str, seed: u64) -> Result<SyntheticTask> {
    make_task_from(&TaskSpec {
        recipe: recipe.parse()?,
        seed,
        ..TaskSpec::default()
    })
}

pub fn make_task_from(spec: &TaskSpec) -> Result<SyntheticTask> {
    if spec.widths.len() < 2 || spec.widths.contains(&0) {
        return Err(KarstError::InvalidArgument(format!(
            "task widths need at least two positive entries, got {:?}",
            spec.widths
        )));
    }
    if spec.recipe == Recipe::LowRankShift && spec.shift_rank == 0 {
        return Err(KarstError::InvalidArgument("shift_rank must be at least 1".into()));
    }
    let mut rng = SeededRng::new(spec.seed);
    let base = spec
        .widths
        .windows(2)
        .map(|w| random_base_layer(&mut rng, w[0], w[1]).map(|(w, bias)| BaseLayer { w, bias }))
        .collect::<Result<Vec<_>>>()?;
    let d_in = spec.widths[0];
    let classes = *spec.widths.last().unwrap();
    let n = spec.n_train + spec.n_test;

    let (x, y) = match spec.recipe {
        Recipe::GaussianBlobs => {
            let centers = gaussian_matrix(&mut rng, classes, d_in, 3.0)?;
            let noise = gaussian_matrix(&mut rng, n, d_in, 1.0)?;
            let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
            let x = DenseMatrix::from_fn(n, d_in, |r, c| centers.get(y[r], c) + noise.get(r, c));
            (x, y)
        }
        Recipe::RotatedBase | Recipe::LowRankShift => {
            let shift = match spec.recipe {
                Recipe::RotatedBase => plane_rotation(&mut rng, d_in, spec.shift_scale)?
                    .sub(&DenseMatrix::identity(d_in))?
                    .matmul(&base[0].w)?,
                _ => {
                    let k = spec.shift_rank;
                    let u = gaussian_matrix(&mut rng, d_in, k, 1.0)?;
                    let v = gaussian_matrix(&mut rng, k, spec.widths[1], 1.0)?;
                    u.matmul(&v)?.scale(spec.shift_scale / ((k * d_in) as f64).sqrt())
                }
            };
            let mut teacher = base.clone();
            teacher[0].w = teacher[0].w.add(&shift)?;
            let x = gaussian_matrix(&mut rng, n, d_in, 1.0)?;
            let y = (0..n)
                .map(|r| Ok(argmax(teacher_forward(&teacher, x.row(r))?.as_slice())))
                .collect::<Result<Vec<_>>>()?;
            (x, y)
        }
    };

    let train_idx: Vec<usize> = (0..spec.n_train).collect();
    let test_idx: Vec<usize> = (spec.n_train..n).collect();
    let (train_x, train_y) = gather(&x, &y, &train_idx)?;
    let (test_x, test_y) = gather(&x, &y, &test_idx)?;
    Ok(SyntheticTask {
        spec: spec.clone(),
        base,
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

fn teacher_forward(layers: &[BaseLayer], x: &[f64]) -> Result<DenseVector> {
    let mut h = DenseVector::from_vec(x.to_vec());
    for (i, l) in layers.iter().enumerate() {
        let y = l.w.t_matvec(&h)?.add(&l.bias)?;
        h = if i + 1 < layers.len() { tanh(&y) } else { y };
    }
    Ok(h)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Rotation by `angle` in the plane spanned by two random orthonormal
/// vectors; identity elsewhere. `Q − I` therefore has rank 2.
fn plane_rotation(rng: &mut SeededRng, d: usize, angle: f64) -> Result<DenseMatrix> {
    if d < 2 {
        return Ok(DenseMatrix::identity(d));
    }
    let raw = gaussian_matrix(rng, 2, d, 1.0)?;
    let u: Vec<f64> = normalize(raw.row(0));
    let mut v: Vec<f64> = raw.row(1).to_vec();
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    for (vi, ui) in v.iter_mut().zip(&u) {
        *vi -= proj * ui;
    }
    let v = normalize(&v);
    let (c, s) = (angle.cos(), angle.sin());
    // Q = I + (c−1)(uuᵀ + vvᵀ) + s(vuᵀ − uvᵀ)
    Ok(DenseMatrix::from_fn(d, d, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id + (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j])
    }))
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| v / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron::{rank_of, DEFAULT_RANK_TOL};

    #[test]
    fn same_recipe_and_seed_is_identical() {
        for r in RECIPES {
            assert_eq!(make_task(r, 5).unwrap(), make_task(r, 5).unwrap());
        }
        assert_ne!(make_task("low-rank-shift", 5).unwrap().train_y, make_task("low-rank-shift", 6).unwrap().train_y);
    }

    #[test]
    fn unknown_recipe_lists_choices() {
        let err = make_task("mnist", 0).unwrap_err();
        let msg = err.to_string();
        for r in RECIPES {
            assert!(msg.contains(r), "{msg}");
        }
    }

    #[test]
    fn labels_in_range() {
        for r in RECIPES {
            let t = make_task(r, 1).unwrap();
            assert!(t.train_y.iter().chain(&t.test_y).all(|&y| y < t.classes()));
            assert_eq!(t.train_x.shape(), (256, 16));
            assert_eq!(t.test_x.rows(), 256);
        }
    }

    #[test]
    fn plane_rotation_is_orthogonal_rank_two_shift() {
        let q = plane_rotation(&mut SeededRng::new(3), 6, 0.7).unwrap();
        let qtq = q.transpose().matmul(&q).unwrap();
        let id = DenseMatrix::identity(6);
        assert!(qtq.sub(&id).unwrap().max_abs() < 1e-14);
        assert_eq!(rank_of(&q.sub(&id).unwrap(), DEFAULT_RANK_TOL).unwrap(), 2);
    }

    #[test]
    fn teacher_shift_changes_labels() {
        let t = make_task("low-rank-shift", 2).unwrap();
        let base_labels: Vec<usize> = (0..t.train_len())
            .map(|r| argmax(teacher_forward(&t.base, t.train_x.row(r)).unwrap().as_slice()))
            .collect();
        let changed = base_labels.iter().zip(&t.train_y).filter(|(a, b)| a != b).count();
        assert!(changed > t.train_len() / 10, "only {changed} labels moved");
    }
}
