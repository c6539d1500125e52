use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedLinear, DEFAULT_INIT_STD};
use crate::error::{KarstError, Result};
use crate::numerics::{DenseMatrix, DenseVector, SeededRng};

use super::grad::{backward, softmax_cross_entropy};
use super::model::{LayerMask, ToyModel};
use super::optim::{Optimizer, OptimizerKind};
use super::task::{argmax, SyntheticTask};

/// Stacking dimension used when the config leaves `m` unset; scaled down per
/// layer to the largest divisor of both widths.
pub const DEFAULT_M: usize = 8;
pub const DEFAULT_R: usize = 8;
pub const DEFAULT_KERNELS: usize = 2;

/// Which parameters a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Kronecker adapters and re-scaling on every layer.
    Karst,
    /// Kronecker adapters only; re-scaling stays at identity.
    KronAdapter,
    /// Backbone frozen; only the last layer is refit with a dense (m = 1,
    /// full rank) update and a bias shift.
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `None` picks [`DEFAULT_M`] scaled down to fit each layer; an explicit
    /// value must divide every adapted layer's widths.
    pub m: Option<usize>,
    pub r: usize,
    pub n_kernels: usize,
    pub init_std: f64,
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: None,
            r: DEFAULT_R,
            n_kernels: DEFAULT_KERNELS,
            init_std: DEFAULT_INIT_STD,
            method: Method::Karst,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(KarstError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(KarstError::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }

    /// Stacking dimension for a `d_in × d_out` layer.
    pub fn m_for(&self, d_in: usize, d_out: usize) -> usize {
        match self.m {
            Some(m) => m,
            None => scaled_m(DEFAULT_M, d_in, d_out),
        }
    }
}

/// Largest `m' ≤ m` dividing both widths.
pub fn scaled_m(m: usize, d_in: usize, d_out: usize) -> usize {
    (1..=m.max(1))
        .rev()
        .find(|&k| d_in.is_multiple_of(k) && d_out.is_multiple_of(k))
        .unwrap_or(1)
}

/// Wraps the task's frozen base network with fresh adapters.
pub fn build_model(task: &SyntheticTask, cfg: &TrainConfig) -> Result<ToyModel> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let last = task.base.len() - 1;
    let mut layers = Vec::with_capacity(task.base.len());
    let mut masks = Vec::with_capacity(task.base.len());
    for (l, base) in task.base.iter().enumerate() {
        let (d_in, d_out) = base.w.shape();
        let mut layer_rng = rng.fork();
        let (m, r, n, mask) = match cfg.method {
            Method::Karst => (cfg.m_for(d_in, d_out), cfg.r, cfg.n_kernels, LayerMask::ALL),
            Method::KronAdapter => (
                cfg.m_for(d_in, d_out),
                cfg.r,
                cfg.n_kernels,
                LayerMask {
                    adapter: true,
                    rescale: false,
                },
            ),
            Method::LinearProbe if l == last => (1, d_in.min(d_out), 1, LayerMask::ALL),
            Method::LinearProbe => (cfg.m_for(d_in, d_out), cfg.r, cfg.n_kernels, LayerMask::NONE),
        };
        layers.push(AdaptedLinear::wrap(
            &mut layer_rng,
            base.w.clone(),
            Some(base.bias.clone()),
            m,
            r,
            n,
            cfg.init_std,
        )?);
        masks.push(mask);
    }
    ToyModel::with_masks(layers, masks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub param_count: usize,
    pub seed: u64,
}

impl History {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("history has the epoch-0 record")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(model: &ToyModel, x: &DenseMatrix, y: &[usize]) -> Result<Evaluation> {
    let (logits, _) = model.forward(x)?;
    let (loss, _) = softmax_cross_entropy(&logits, y)?;
    let correct = (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == y[r]).count();
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / y.len().max(1) as f64,
    })
}

/// Predicted class for every row of `x`.
pub fn predictions(model: &ToyModel, x: &DenseMatrix) -> Result<Vec<usize>> {
    (0..x.rows())
        .map(|r| Ok(argmax(model.predict_one(&DenseVector::from_vec(x.row(r).to_vec()))?.as_slice())))
        .collect()
}

fn record(model: &ToyModel, task: &SyntheticTask, epoch: usize) -> Result<EpochRecord> {
    let train = evaluate(model, &task.train_x, &task.train_y)?;
    let test = evaluate(model, &task.test_x, &task.test_y)?;
    if !train.loss.is_finite() {
        return Err(KarstError::Diverged { epoch, loss: train.loss });
    }
    Ok(EpochRecord {
        epoch,
        train_loss: train.loss,
        train_acc: train.accuracy,
        test_acc: test.accuracy,
    })
}

/// Mini-batch training. Records epoch 0 (before any update) and every epoch
/// after; the sample order is reshuffled each epoch from `cfg.seed`.
pub fn train(model: &mut ToyModel, task: &SyntheticTask, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr);
    // Separate stream from the one used for adapter init.
    let mut order_rng = SeededRng::new(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..task.train_len()).collect();
    let mut records = vec![record(model, task, 0)?];
    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = task.train_batch(chunk)?;
            let (_, cache) = model.forward(&x)?;
            let (loss, grads) = backward(model, &cache, &y)?;
            if !loss.is_finite() {
                return Err(KarstError::Diverged { epoch, loss });
            }
            optimizer.step(model, &grads);
        }
        records.push(record(model, task, epoch)?);
    }
    Ok(History {
        records,
        param_count: model.trainable_count(),
        seed: cfg.seed,
    })
}
