//! Experiment plan: the TOML-backed configuration for the sweep pipeline.
//!
//! Every field has an explicit default; a plan file only needs to override
//! what it changes. The plan is hashed (64-bit FNV-1a over its canonical
//! JSON form) into the run manifest so reruns can be tied to an exact
//! configuration.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::ModelSpec;
use crate::rng::fnv1a64;
use crate::scalar::Scalar;
use crate::train::LrSchedule;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("toml parse error: {0}")]
    Toml(String),
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T> = std::result::Result<T, PlanError>;

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub prune: PruneParams,
    pub sweep: SweepParams,
    pub matching: MatchingParams,
    pub barrier: BarrierParams,
    pub plane: PlaneParams,
    pub diversity: DiversityParams,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub seed: u64,
    pub train_n: usize,
    pub test_n: usize,
    pub classes: usize,
    pub dim: usize,
    /// Per-coordinate noise std for blobs.
    pub spread: f64,
    /// Arm noise std for spirals.
    pub noise: f64,
    /// IDX image/label paths (train and test) when `kind = "idx"`.
    pub train_images: Option<String>,
    pub train_labels: Option<String>,
    pub test_images: Option<String>,
    pub test_labels: Option<String>,
    /// CSV paths when `kind = "csv"`.
    pub train_path: Option<String>,
    pub test_path: Option<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Blobs,
            seed: 1,
            train_n: 8000,
            test_n: 2000,
            classes: 10,
            dim: 64,
            spread: 0.25,
            noise: 0.04,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Spirals,
    Idx,
    Csv,
}

impl DatasetConfig {
    /// Build the train and test datasets. Synthetic data is generated as one
    /// pool of `train_n + test_n` points and split deterministically, with
    /// test points interleaved inside each class block so both splits cover
    /// the same distribution (for spirals, the same stretch of every arm).
    pub fn load<S: Scalar>(&self) -> Result<(Dataset<S>, Dataset<S>)> {
        match self.kind {
            DatasetKind::Blobs => {
                let pool = crate::data::make_blobs(
                    self.seed,
                    self.train_n + self.test_n,
                    self.classes,
                    self.dim,
                    self.spread,
                )?;
                Ok(split_pool(&pool, self.train_n, self.test_n, self.classes))
            }
            DatasetKind::Spirals => {
                let pool = crate::data::make_spirals(
                    self.seed,
                    self.train_n + self.test_n,
                    self.classes,
                    self.noise,
                    self.dim,
                )?;
                Ok(split_pool(&pool, self.train_n, self.test_n, self.classes))
            }
            DatasetKind::Idx => {
                let need = |f: &Option<String>, what: &str| {
                    f.clone()
                        .ok_or_else(|| PlanError::Invalid(format!("idx dataset needs {}", what)))
                };
                let train = crate::data::load_idx(
                    need(&self.train_images, "train_images")?.as_ref(),
                    need(&self.train_labels, "train_labels")?.as_ref(),
                )?;
                let test = crate::data::load_idx(
                    need(&self.test_images, "test_images")?.as_ref(),
                    need(&self.test_labels, "test_labels")?.as_ref(),
                )?;
                Ok((train, test))
            }
            DatasetKind::Csv => {
                let need = |f: &Option<String>, what: &str| {
                    f.clone()
                        .ok_or_else(|| PlanError::Invalid(format!("csv dataset needs {}", what)))
                };
                let train = crate::data::load_csv(need(&self.train_path, "train_path")?.as_ref())?;
                let test = crate::data::load_csv(need(&self.test_path, "test_path")?.as_ref())?;
                Ok((train, test))
            }
        }
    }
}

/// Split a generated pool into train/test, taking every k-th point of each
/// class block for the test side.
fn split_pool<S: Scalar>(
    pool: &Dataset<S>,
    train_n: usize,
    test_n: usize,
    classes: usize,
) -> (Dataset<S>, Dataset<S>) {
    let per_class = (train_n + test_n) / classes;
    let test_per_class = test_n / classes;
    let mut train_idx = Vec::with_capacity(train_n);
    let mut test_idx = Vec::with_capacity(test_n);
    for c in 0..classes {
        let base = c * per_class;
        let mut marker = 0usize;
        for j in 0..per_class {
            let next = (j + 1) * test_per_class / per_class;
            if next > marker {
                test_idx.push(base + j);
                marker = next;
            } else {
                train_idx.push(base + j);
            }
        }
    }
    let (ftr, ltr) = pool.gather(&train_idx);
    let (fte, lte) = pool.gather(&test_idx);
    (
        Dataset::from_parts(&pool.name.clone(), ftr, ltr, pool.class_count),
        Dataset::from_parts(&format!("{}-test", pool.name), fte, lte, pool.class_count),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Base hidden sizes, scaled by each width multiplier in `widths`.
    pub hidden: Vec<usize>,
    pub widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128, 128, 128],
            widths: vec![4],
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, classes: usize, width: usize) -> Result<ModelSpec> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(classes);
        ModelSpec::new(sizes, width).map_err(|e| PlanError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub dense_lr: f64,
    pub sparse_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            dense_lr: 0.05,
            sparse_lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 60,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainParams {
    pub fn config(&self, lr: f64, seed: u64, rewind_epochs: Vec<usize>) -> crate::train::TrainConfig {
        crate::train::TrainConfig {
            learning_rate: lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            rewind_epochs,
            lr_schedule: self.lr_schedule,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PruneParams {
    pub per_round_fraction: f64,
    pub train_epochs_per_prune: usize,
    pub prune_lr: f64,
    /// Rewind epoch the IMP rounds restart from.
    pub rewind_epoch: usize,
}

impl Default for PruneParams {
    fn default() -> Self {
        PruneParams {
            per_round_fraction: 0.2,
            train_epochs_per_prune: 12,
            prune_lr: 0.01,
            rewind_epoch: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lth,
    Naive,
    Permuted,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lth => "lth",
            Method::Naive => "naive",
            Method::Permuted => "permuted",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub sparsities: Vec<f64>,
    pub rewind_epochs: Vec<usize>,
    pub seed_pairs: usize,
    pub methods: Vec<Method>,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            sparsities: vec![0.9],
            rewind_epochs: vec![0, 2, 5, 10, 20],
            seed_pairs: 3,
            methods: vec![Method::Lth, Method::Naive, Method::Permuted],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingParams {
    pub sample_count: usize,
    /// Match against model B at this epoch instead of its final state.
    pub early_epoch: Option<usize>,
    /// Mean-center activations per unit before the inner product.
    pub center: bool,
}

impl Default for MatchingParams {
    fn default() -> Self {
        MatchingParams {
            sample_count: 2048,
            early_epoch: None,
            center: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierParams {
    pub grid_size: usize,
    /// Also emit repaired curves for the matched pair.
    pub repair: bool,
    pub calibration_count: usize,
    /// Evaluate the train side of barrier curves on a seeded subsample of
    /// this size (0 = full training set).
    pub eval_train_subset: usize,
}

impl Default for BarrierParams {
    fn default() -> Self {
        BarrierParams {
            grid_size: 25,
            repair: true,
            calibration_count: 2048,
            eval_train_subset: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneParams {
    pub enabled: bool,
    pub resolution: usize,
    pub margin: f64,
}

impl Default for PlaneParams {
    fn default() -> Self {
        PlaneParams {
            enabled: false,
            resolution: 25,
            margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityParams {
    pub enabled: bool,
    pub model_count: usize,
    pub sparsity: f64,
    pub rewind_epoch: usize,
}

impl Default for DiversityParams {
    fn default() -> Self {
        DiversityParams {
            enabled: false,
            model_count: 5,
            sparsity: 0.9,
            rewind_epoch: 5,
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: ExperimentPlan =
            toml::from_str(text).map_err(|e| PlanError::Toml(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.widths.is_empty() {
            return Err(PlanError::Invalid("need at least one width".into()));
        }
        if self.sweep.seed_pairs == 0 {
            return Err(PlanError::Invalid("seed_pairs must be >= 1".into()));
        }
        if matches!(self.dataset.kind, DatasetKind::Blobs | DatasetKind::Spirals) {
            let c = self.dataset.classes.max(1);
            if self.dataset.train_n % c != 0 || self.dataset.test_n % c != 0 {
                return Err(PlanError::Invalid(
                    "train_n and test_n must be multiples of the class count".into(),
                ));
            }
        }
        for &s in &self.sweep.sparsities {
            if !(0.0 < s && s < 1.0) {
                return Err(PlanError::Invalid(format!("sparsity {} outside (0, 1)", s)));
            }
        }
        for &k in &self.sweep.rewind_epochs {
            if k > self.train.epochs {
                return Err(PlanError::Invalid(format!(
                    "rewind epoch {} exceeds epochs {}",
                    k, self.train.epochs
                )));
            }
        }
        if self.prune.rewind_epoch > self.train.epochs {
            return Err(PlanError::Invalid("prune rewind epoch exceeds epochs".into()));
        }
        if let Some(i) = self.matching.early_epoch {
            if i > self.train.epochs {
                return Err(PlanError::Invalid("early matching epoch exceeds epochs".into()));
            }
        }
        if self.barrier.grid_size < 2 {
            return Err(PlanError::Invalid("barrier grid_size must be >= 2".into()));
        }
        if self.diversity.enabled && self.diversity.model_count < 2 {
            return Err(PlanError::Invalid("diversity model_count must be >= 2".into()));
        }
        Ok(())
    }

    /// Stable content hash of the plan.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plan serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}
