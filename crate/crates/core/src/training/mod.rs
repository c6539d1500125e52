//! Desk-scale training of adapted layers: a small tanh network, analytic
//! gradients with a finite-difference check, optimizers and synthetic tasks.

pub mod grad;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod task;
pub mod train;

pub use grad::{backward, GradientSet};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use model::{LayerMask, MergedModel, ToyModel};
pub use optim::{Optimizer, OptimizerKind};
pub use task::{make_task, make_task_from, Recipe, SyntheticTask, TaskSpec};
pub use train::{build_model, evaluate, train, History, Method, TrainConfig};
