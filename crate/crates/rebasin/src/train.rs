//! SGD-with-momentum training of dense and masked networks.
//!
//! Update rule per step, with coupled L2 weight decay folded into the
//! gradient before momentum:
//!
//! ```text
//! g' = g + weight_decay * w
//! v  = momentum * v + g'
//! w  = w - lr * v
//! ```
//!
//! When a mask is active, masked weights are re-zeroed after every step so
//! they stay exactly zero for the whole run.
//!
//! Mini-batch order is a pure function of `(seed, epoch)`. Training that
//! starts from a rewind checkpoint at epoch `k` therefore replays the data
//! order of epochs `k..T`, matching the weight-rewinding protocol, but with
//! a fresh (zero) momentum buffer. [`resume`] instead restores the saved
//! momentum state and continues the original trajectory bitwise.

use serde::{Deserialize, Serialize};

use crate::data::{batches, BatchPlan, Dataset};
use crate::engine::{evaluate, loss_and_grad, Evaluation, Mask, ModelSpec, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    CosineToZero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs at which parameter snapshots are taken; 0 means the
    /// initialization itself.
    pub rewind_epochs: Vec<usize>,
    pub lr_schedule: LrSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::ConfigMismatch("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::ConfigMismatch("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::ConfigMismatch("batch_size must be >= 1".into()));
        }
        if let Some(&k) = self.rewind_epochs.iter().find(|&&k| k > self.epochs) {
            return Err(TrainError::ConfigMismatch(format!(
                "rewind epoch {} exceeds total epochs {}",
                k, self.epochs
            )));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::CosineToZero => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity<S> {
    pub weights: Vec<Tensor<S>>,
    pub biases: Vec<Tensor<S>>,
}

impl<S: Scalar> Velocity<S> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let p = ParamSet::<S>::zeros(spec);
        Velocity {
            weights: p.weights,
            biases: p.biases,
        }
    }
}

/// Persisted training state at some epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub params: ParamSet<S>,
    pub epoch: usize,
    pub seed: u64,
    /// Per-epoch stream derivations consumed so far; equals `epoch` by
    /// construction and is validated on resume.
    pub rng_counter: u64,
    pub mask: Option<Mask>,
    pub velocity: Option<Velocity<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.params.spec
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

pub struct TrainOutcome<S> {
    pub final_checkpoint: Checkpoint<S>,
    pub rewinds: Vec<Checkpoint<S>>,
    pub report: TrainReport,
}

/// One SGD step over all parameters. Masked weights are re-zeroed after the
/// update so they remain exactly zero regardless of momentum history.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &ParamSet<S>,
    velocity: &mut Velocity<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mask: Option<&Mask>,
) -> Result<()> {
    let lr = S::from_f64(lr);
    let mom = S::from_f64(momentum);
    let wd = S::from_f64(weight_decay);
    for l in 0..params.num_layers() {
        step_tensor(
            &mut params.weights[l],
            &grads.weights[l],
            &mut velocity.weights[l],
            lr,
            mom,
            wd,
        );
        step_tensor(
            &mut params.biases[l],
            &grads.biases[l],
            &mut velocity.biases[l],
            lr,
            mom,
            wd,
        );
        if let Some(m) = mask {
            for (w, &keep) in params.weights[l].data_mut().iter_mut().zip(m.layers[l].data()) {
                if keep == 0 {
                    *w = S::ZERO;
                }
            }
        }
    }
    Ok(())
}

fn step_tensor<S: Scalar>(
    w: &mut Tensor<S>,
    g: &Tensor<S>,
    v: &mut Tensor<S>,
    lr: S,
    mom: S,
    wd: S,
) {
    for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        let g = g + wd * *w;
        *v = mom * *v + g;
        *w -= lr * *v;
    }
}

/// Either a fresh parameter set or a checkpoint to start from.
pub enum TrainInit<'a, S> {
    Params(&'a ParamSet<S>),
    Checkpoint(&'a Checkpoint<S>),
}

/// Train for the configured number of epochs, snapshotting at every rewind
/// epoch. Starting from a checkpoint at epoch `k` runs epochs `k..T` with a
/// fresh momentum buffer (see module docs); use [`resume`] for a bitwise
/// continuation instead.
pub fn train<S: Scalar>(
    init: TrainInit<'_, S>,
    mask: Option<&Mask>,
    config: &TrainConfig,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    let (params, start_epoch) = match init {
        TrainInit::Params(p) => (p.clone(), 0),
        TrainInit::Checkpoint(c) => (c.params.clone(), c.epoch),
    };
    run_epochs(params, None, start_epoch, mask, config, train_set, test_set)
}

/// Continue an interrupted run from its saved state. Reproduces the
/// uninterrupted trajectory bitwise under an identical config.
pub fn resume<S: Scalar>(
    checkpoint: &Checkpoint<S>,
    config: &TrainConfig,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if checkpoint.rng_counter != checkpoint.epoch as u64 {
        return Err(TrainError::ConfigMismatch(format!(
            "rng counter {} inconsistent with epoch {}",
            checkpoint.rng_counter, checkpoint.epoch
        )));
    }
    if checkpoint.seed != config.seed {
        return Err(TrainError::ConfigMismatch(format!(
            "checkpoint seed {} does not match config seed {}",
            checkpoint.seed, config.seed
        )));
    }
    let velocity = checkpoint
        .velocity
        .clone()
        .unwrap_or_else(|| Velocity::zeros(&checkpoint.params.spec));
    run_epochs(
        checkpoint.params.clone(),
        Some(velocity),
        checkpoint.epoch,
        checkpoint.mask.as_ref(),
        config,
        train_set,
        test_set,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_epochs<S: Scalar>(
    mut params: ParamSet<S>,
    velocity: Option<Velocity<S>>,
    start_epoch: usize,
    mask: Option<&Mask>,
    config: &TrainConfig,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
) -> Result<TrainOutcome<S>> {
    if train_set.is_empty() {
        return Err(TrainError::ConfigMismatch("empty training set".into()));
    }
    if start_epoch > config.epochs {
        return Err(TrainError::ConfigMismatch(format!(
            "start epoch {} beyond total epochs {}",
            start_epoch, config.epochs
        )));
    }
    if let Some(m) = mask {
        if !m.matches_spec(&params.spec) {
            return Err(TrainError::ConfigMismatch("mask does not match model spec".into()));
        }
        params.apply_mask(m);
    }
    let mut velocity = velocity.unwrap_or_else(|| Velocity::zeros(&params.spec));
    let mut rewinds = Vec::new();
    let mut report = TrainReport::default();

    let snapshot = |params: &ParamSet<S>, velocity: &Velocity<S>, epoch: usize| Checkpoint {
        params: params.clone(),
        epoch,
        seed: config.seed,
        rng_counter: epoch as u64,
        mask: mask.cloned(),
        velocity: Some(velocity.clone()),
    };

    for epoch in start_epoch..config.epochs {
        if config.rewind_epochs.contains(&epoch) {
            rewinds.push(snapshot(&params, &velocity, epoch));
        }
        let lr = config.lr_at(epoch);
        let plan = BatchPlan {
            batch_size: config.batch_size,
            seed: config.seed,
            epoch,
        };
        for (bi, batch) in batches(train_set.len(), &plan).iter().enumerate() {
            let (x, labels) = train_set.gather(batch);
            let (loss, grads) = loss_and_grad(&params, mask, &x, &labels)?;
            if !loss.to_f64().is_finite() {
                return Err(TrainError::Diverged { epoch, batch: bi });
            }
            sgd_step(
                &mut params,
                &grads,
                &mut velocity,
                lr,
                config.momentum,
                config.weight_decay,
                mask,
            )?;
        }
        if !params.all_finite() {
            return Err(TrainError::Diverged {
                epoch,
                batch: usize::MAX,
            });
        }
        let train_eval = evaluate(&params, mask, train_set)?;
        report.train_loss.push(train_eval.loss);
        report.train_accuracy.push(train_eval.accuracy);
    }
    if config.rewind_epochs.contains(&config.epochs) {
        rewinds.push(snapshot(&params, &velocity, config.epochs));
    }

    let test_eval: Evaluation = evaluate(&params, mask, test_set)?;
    report.test_loss = test_eval.loss;
    report.test_accuracy = test_eval.accuracy;

    Ok(TrainOutcome {
        final_checkpoint: snapshot(&params, &velocity, config.epochs),
        rewinds,
        report,
    })
}
