//! Central finite-difference check of the analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::numerics::DenseMatrix;

use super::grad::{backward, loss, GradientSet};
use super::model::ToyModel;
use super::task::SyntheticTask;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn nudge(model: &mut ToyModel, tensor: usize, elem: usize, delta: f64) {
    let mut t = 0;
    model.visit_params_mut(|_, data, _| {
        if t == tensor {
            data[elem] += delta;
        }
        t += 1;
    });
}

/// Central-difference gradient of the batch loss for every trainable scalar.
pub fn numeric_gradients(model: &ToyModel, x: &DenseMatrix, labels: &[usize], step: f64) -> Result<GradientSet> {
    let mut probe = model.clone();
    let mut out = GradientSet::zeros_like(model);
    let mut sizes = Vec::new();
    out.visit(|_, d| sizes.push(d.len()));
    let mut values = Vec::with_capacity(sizes.len());
    for (t, &len) in sizes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for e in 0..len {
            nudge(&mut probe, t, e, step);
            let plus = loss(&probe, x, labels)?;
            nudge(&mut probe, t, e, -2.0 * step);
            let minus = loss(&probe, x, labels)?;
            nudge(&mut probe, t, e, step);
            g.push((plus - minus) / (2.0 * step));
        }
        values.push(g);
    }
    let mut t = 0;
    out.visit_mut(|_, d| {
        d.copy_from_slice(&values[t]);
        t += 1;
    });
    Ok(out)
}

/// Compares a supplied gradient set against central differences.
pub fn check_gradients(
    model: &ToyModel,
    x: &DenseMatrix,
    labels: &[usize],
    analytic: &GradientSet,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let numeric = numeric_gradients(model, x, labels, step)?;
    let mut num_tensors = Vec::new();
    numeric.visit(|_, d| num_tensors.push(d.to_vec()));
    let mut tensors = Vec::new();
    let mut t = 0;
    analytic.visit(|name, a| {
        let n = &num_tensors[t];
        let max_rel_err = a
            .iter()
            .zip(n)
            .map(|(&av, &nv)| relative_error(av, nv))
            .fold(0.0, f64::max);
        tensors.push(TensorCheck {
            name: name.to_string(),
            len: a.len(),
            max_rel_err,
            passed: max_rel_err <= tolerance,
        });
        t += 1;
    });
    Ok(GradcheckReport {
        tolerance,
        step,
        tensors,
    })
}

/// Analytic backward pass vs central differences on one batch.
pub fn gradcheck_batch(model: &ToyModel, x: &DenseMatrix, labels: &[usize], tolerance: f64) -> Result<GradcheckReport> {
    let (_, cache) = model.forward(x)?;
    let (_, analytic) = backward(model, &cache, labels)?;
    check_gradients(model, x, labels, &analytic, DEFAULT_STEP, tolerance)
}

/// Gradient check on the first 16 training samples of `task`.
pub fn gradcheck(model: &ToyModel, task: &SyntheticTask, tolerance: f64) -> Result<GradcheckReport> {
    let (x, y) = task.train_batch(&(0..task.train_len().min(16)).collect::<Vec<_>>())?;
    gradcheck_batch(model, &x, &y, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdaptedLinear;
    use crate::numerics::{gaussian_matrix, SeededRng};
    use crate::training::model::random_base_layer;

    fn two_layer(seed: u64) -> (ToyModel, DenseMatrix, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let (w1, b1) = random_base_layer(&mut rng, 8, 8).unwrap();
        let (w2, _) = random_base_layer(&mut rng, 8, 4).unwrap();
        let l1 = AdaptedLinear::wrap(&mut rng, w1, Some(b1), 2, 2, 2, 0.3).unwrap();
        let l2 = AdaptedLinear::wrap(&mut rng, w2, None, 2, 1, 2, 0.3).unwrap();
        let mut model = ToyModel::new(vec![l1, l2]).unwrap();
        model.randomize_trainable(&mut rng, 0.3).unwrap();
        let x = gaussian_matrix(&mut rng, 6, 8, 1.0).unwrap();
        let y = (0..6).map(|_| rng.below(4)).collect();
        (model, x, y)
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let (model, x, y) = two_layer(1);
        let report = gradcheck_batch(&model, &x, &y, 1e-4).unwrap();
        assert!(report.passed(), "{report:#?}");
        assert_eq!(report.tensors.len(), 2 * (3 * 2 + 2));
    }

    #[test]
    fn corrupted_s1_is_the_only_failure() {
        let (model, x, y) = two_layer(2);
        let (_, cache) = model.forward(&x).unwrap();
        let (_, mut grads) = backward(&model, &cache, &y).unwrap();
        for layer in &mut grads.layers {
            layer.s1 = layer.s1.scale(-1.0);
        }
        let report = check_gradients(&model, &x, &y, &grads, DEFAULT_STEP, 1e-4).unwrap();
        let failed: Vec<_> = report.failures().map(|t| t.name.as_str()).collect();
        assert_eq!(failed, vec!["layer0.s1", "layer1.s1"]);
    }

    #[test]
    fn zero_tolerance_fails() {
        let (model, x, y) = two_layer(3);
        assert!(!gradcheck_batch(&model, &x, &y, 0.0).unwrap().passed());
    }
}
