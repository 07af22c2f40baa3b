//! End-to-end sweep pipeline.
//!
//! Per width and seed pair: train dense model A (saving rewind snapshots),
//! derive masks at every requested sparsity by IMP from A's rewind, train
//! dense model B, match A against B (optionally at an early epoch of B) to
//! obtain the permutation, then sparse-train every (sparsity, rewind,
//! method) cell:
//!
//! - `lth`:      A's rewind weights + A's mask
//! - `naive`:    B's rewind weights + A's mask, unpermuted
//! - `permuted`: B's rewind weights + A's mask carried through the
//!   permutation
//!
//! Barrier curves between the two dense models (unmatched, matched, matched
//! + repaired) are emitted per pair. Every cell draws its RNG streams by
//! hashing the master seed with the cell key, so results are identical at
//! any worker count; failures are recorded per cell and do not stop other
//! cells.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::align::{
    apply_permutation_mask, apply_permutation_params, collect_activations, match_activations,
    PermutationMap,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::Dataset;
use crate::engine::{evaluate, init_params, Mask, ParamSet};
use crate::lmc::{barrier, plane_eval, BarrierCurve, Metric};
use crate::metrics::{diversity_report, predict_probs, DiversityReport, PredictionSet};
use crate::plan::{ExperimentPlan, Method, PlanError};
use crate::prune::{imp_waypoints, PruneConfig};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::train::{train, Checkpoint, TrainInit};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Prune(#[from] crate::prune::PruneError),
    #[error(transparent)]
    Align(#[from] crate::align::AlignError),
    #[error(transparent)]
    Lmc(#[from] crate::lmc::LmcError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("pipeline: {0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// One row of `results.csv`.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub experiment_id: String,
    pub dataset: String,
    pub width: usize,
    pub sparsity: f64,
    pub rewind_epoch: usize,
    pub method: Method,
    pub seed: u64,
    pub test_acc: f64,
    pub train_acc: f64,
    pub final_train_loss: f64,
    pub wall_time_s: f64,
    pub checkpoint_path: String,
    pub config_hash: String,
}

/// One row of `barrier.csv`.
#[derive(Debug, Clone)]
pub struct BarrierRow {
    pub pair_id: String,
    pub width: usize,
    pub alpha: f64,
    pub repaired: bool,
    pub metric: Metric,
    pub train_value: f64,
    pub test_value: f64,
}

/// One row of `plane.csv`.
#[derive(Debug, Clone)]
pub struct PlaneRow {
    pub grid_x: f64,
    pub grid_y: f64,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CellStatus {
    pub id: String,
    pub status: String,
}

pub struct PipelineOutput {
    pub records: Vec<RunRecord>,
    pub barrier_rows: Vec<BarrierRow>,
    pub plane_rows: Vec<PlaneRow>,
    pub diversity: Vec<DiversityReport>,
    pub statuses: Vec<CellStatus>,
}

struct PairArtifacts<S> {
    width: usize,
    pair: usize,
    dense_a: Checkpoint<S>,
    a_rewinds: Vec<Checkpoint<S>>,
    dense_b: Checkpoint<S>,
    b_rewinds: Vec<Checkpoint<S>>,
    masks: Vec<(f64, Mask)>,
    perm: PermutationMap,
}

impl<S: Scalar> PairArtifacts<S> {
    fn rewind_a(&self, k: usize) -> Result<&Checkpoint<S>> {
        self.a_rewinds
            .iter()
            .find(|c| c.epoch == k)
            .ok_or_else(|| PipelineError::Other(format!("no A rewind at epoch {}", k)))
    }

    fn rewind_b(&self, k: usize) -> Result<&Checkpoint<S>> {
        self.b_rewinds
            .iter()
            .find(|c| c.epoch == k)
            .ok_or_else(|| PipelineError::Other(format!("no B rewind at epoch {}", k)))
    }

    fn mask_at(&self, sparsity: f64) -> Result<&Mask> {
        self.masks
            .iter()
            .find(|(s, _)| (s - sparsity).abs() < 1e-9)
            .map(|(_, m)| m)
            .ok_or_else(|| PipelineError::Other(format!("no mask at sparsity {}", sparsity)))
    }
}

pub fn cell_id(width: usize, pair: usize, sparsity: f64, k: usize, method: Method) -> String {
    format!("w{}-p{}-s{}-k{}-{}", width, pair, sparsity, k, method.name())
}

/// Run the full plan. Checkpoints land under `out_dir/checkpoints`; CSV
/// emission is a separate step (see [`crate::results`]).
pub fn pipeline<S: Scalar>(
    plan: &ExperimentPlan,
    master_seed: u64,
    out_dir: &Path,
) -> Result<PipelineOutput> {
    plan.validate()?;
    let (train_set, test_set) = plan.dataset.load::<S>()?;
    let config_hash = plan.config_hash();
    let ckpt_dir = out_dir.join("checkpoints");

    let pairs: Vec<(usize, usize)> = plan
        .model
        .widths
        .iter()
        .flat_map(|&w| (0..plan.sweep.seed_pairs).map(move |p| (w, p)))
        .collect();

    let pair_outputs: Vec<(Vec<RunRecord>, Vec<BarrierRow>, Vec<CellStatus>)> = pairs
        .par_iter()
        .map(|&(width, pair)| {
            run_pair::<S>(
                plan,
                master_seed,
                width,
                pair,
                &train_set,
                &test_set,
                &ckpt_dir,
                &config_hash,
            )
        })
        .collect();

    let mut records = Vec::new();
    let mut barrier_rows = Vec::new();
    let mut statuses = Vec::new();
    for (r, b, s) in pair_outputs {
        records.extend(r);
        barrier_rows.extend(b);
        statuses.extend(s);
    }

    let mut plane_rows = Vec::new();
    if plan.plane.enabled {
        match plane_stage::<S>(plan, &records, &ckpt_dir, &test_set) {
            Ok(rows) => {
                plane_rows = rows;
                statuses.push(CellStatus {
                    id: "plane".into(),
                    status: "ok".into(),
                });
            }
            Err(e) => statuses.push(CellStatus {
                id: "plane".into(),
                status: format!("failed: {}", e),
            }),
        }
    }

    let mut diversity = Vec::new();
    if plan.diversity.enabled {
        match diversity_protocol::<S>(plan, master_seed, &train_set, &test_set) {
            Ok(reports) => {
                diversity = reports;
                statuses.push(CellStatus {
                    id: "diversity".into(),
                    status: "ok".into(),
                });
            }
            Err(e) => statuses.push(CellStatus {
                id: "diversity".into(),
                status: format!("failed: {}", e),
            }),
        }
    }

    records.sort_by(|a, b| a.experiment_id.cmp(&b.experiment_id));
    barrier_rows.sort_by(|a, b| {
        (&a.pair_id, a.repaired, format!("{:?}", a.metric))
            .cmp(&(&b.pair_id, b.repaired, format!("{:?}", b.metric)))
            .then(a.alpha.partial_cmp(&b.alpha).unwrap())
    });
    statuses.sort_by(|a, b| a.id.cmp(&b.id));

    Ok(PipelineOutput {
        records,
        barrier_rows,
        plane_rows,
        diversity,
        statuses,
    })
}

/// Dense runs, IMP, matching and all sparse cells for one (width, pair).
#[allow(clippy::too_many_arguments)]
fn run_pair<S: Scalar>(
    plan: &ExperimentPlan,
    master_seed: u64,
    width: usize,
    pair: usize,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
    ckpt_dir: &Path,
    config_hash: &str,
) -> (Vec<RunRecord>, Vec<BarrierRow>, Vec<CellStatus>) {
    let pair_id = format!("w{}-p{}", width, pair);
    let mut statuses = Vec::new();
    let artifacts = match build_pair_artifacts::<S>(
        plan,
        master_seed,
        width,
        pair,
        train_set,
        test_set,
        ckpt_dir,
    ) {
        Ok(a) => {
            statuses.push(CellStatus {
                id: format!("{}:prepare", pair_id),
                status: "ok".into(),
            });
            a
        }
        Err(e) => {
            statuses.push(CellStatus {
                id: format!("{}:prepare", pair_id),
                status: format!("failed: {}", e),
            });
            return (Vec::new(), Vec::new(), statuses);
        }
    };

    let mut records = Vec::new();
    for &sparsity in &plan.sweep.sparsities {
        for &k in &plan.sweep.rewind_epochs {
            for &method in &plan.sweep.methods {
                let id = cell_id(width, pair, sparsity, k, method);
                match run_cell(plan, master_seed, &artifacts, sparsity, k, method, train_set, test_set, ckpt_dir, config_hash) {
                    Ok(record) => {
                        records.push(record);
                        statuses.push(CellStatus {
                            id,
                            status: "ok".into(),
                        });
                    }
                    Err(e) => statuses.push(CellStatus {
                        id,
                        status: format!("failed: {}", e),
                    }),
                }
            }
        }
    }

    let barrier_rows = match pair_barriers(plan, &artifacts, train_set, test_set) {
        Ok(rows) => {
            statuses.push(CellStatus {
                id: format!("{}:barriers", pair_id),
                status: "ok".into(),
            });
            rows
        }
        Err(e) => {
            statuses.push(CellStatus {
                id: format!("{}:barriers", pair_id),
                status: format!("failed: {}", e),
            });
            Vec::new()
        }
    };

    (records, barrier_rows, statuses)
}

#[allow(clippy::too_many_arguments)]
fn build_pair_artifacts<S: Scalar>(
    plan: &ExperimentPlan,
    master_seed: u64,
    width: usize,
    pair: usize,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
    ckpt_dir: &Path,
) -> Result<PairArtifacts<S>> {
    let spec = plan
        .model
        .spec(train_set.dim(), train_set.class_count, width)?;
    let wp = [width as u64, pair as u64];
    let pair_dir = ckpt_dir.join(format!("w{}-p{}", width, pair));

    // Dense model A with rewind snapshots for the sweep and for IMP.
    let mut a_rewind_epochs = plan.sweep.rewind_epochs.clone();
    a_rewind_epochs.push(plan.prune.rewind_epoch);
    a_rewind_epochs.sort_unstable();
    a_rewind_epochs.dedup();
    let init_a = init_params::<S>(&spec, derive_seed(master_seed, "init-a", &wp));
    let config_a = plan.train.config(
        plan.train.dense_lr,
        derive_seed(master_seed, "order-a", &wp),
        a_rewind_epochs,
    );
    let out_a = train(TrainInit::Params(&init_a), None, &config_a, train_set, test_set)?;
    save_checkpoint(&out_a.final_checkpoint, &pair_dir.join("dense-a-final.sprb"))?;
    for ck in &out_a.rewinds {
        save_checkpoint(ck, &pair_dir.join(format!("dense-a-k{}.sprb", ck.epoch)))?;
    }

    // Dense model B; an early-matching epoch is captured as an extra snapshot.
    let mut b_rewind_epochs = plan.sweep.rewind_epochs.clone();
    if let Some(i) = plan.matching.early_epoch {
        b_rewind_epochs.push(i);
    }
    b_rewind_epochs.sort_unstable();
    b_rewind_epochs.dedup();
    let init_b = init_params::<S>(&spec, derive_seed(master_seed, "init-b", &wp));
    let config_b = plan.train.config(
        plan.train.dense_lr,
        derive_seed(master_seed, "order-b", &wp),
        b_rewind_epochs,
    );
    let out_b = train(TrainInit::Params(&init_b), None, &config_b, train_set, test_set)?;
    save_checkpoint(&out_b.final_checkpoint, &pair_dir.join("dense-b-final.sprb"))?;
    for ck in &out_b.rewinds {
        save_checkpoint(ck, &pair_dir.join(format!("dense-b-k{}.sprb", ck.epoch)))?;
    }

    // IMP from A's rewind, landing on every requested sparsity.
    let mut masks = Vec::new();
    if !plan.sweep.sparsities.is_empty() {
        let mut targets = plan.sweep.sparsities.clone();
        targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let prune_config = PruneConfig {
            target_sparsity: *targets.last().unwrap(),
            per_round_fraction: plan.prune.per_round_fraction,
            train_epochs_per_prune: plan.prune.train_epochs_per_prune,
            prune_lr: plan.prune.prune_lr,
        };
        let rewind = out_a
            .rewinds
            .iter()
            .find(|c| c.epoch == plan.prune.rewind_epoch)
            .ok_or_else(|| PipelineError::Other("missing IMP rewind snapshot".into()))?;
        let imp_out = imp_waypoints(
            rewind,
            (train_set, test_set),
            &prune_config,
            &config_a,
            &targets,
        )?;
        let total = imp_out.final_mask.total() as f64;
        for &s in &plan.sweep.sparsities {
            let entry = imp_out
                .sequence
                .entries
                .iter()
                .find(|e| (e.sparsity - s).abs() <= 1.0 / total)
                .ok_or_else(|| PipelineError::Other(format!("IMP produced no mask at {}", s)))?;
            masks.push((s, entry.mask.clone()));
            let mask_ck = Checkpoint {
                params: entry.solution.clone(),
                epoch: rewind.epoch + plan.prune.train_epochs_per_prune,
                seed: config_a.seed,
                rng_counter: (rewind.epoch + plan.prune.train_epochs_per_prune) as u64,
                mask: Some(entry.mask.clone()),
                velocity: None,
            };
            save_checkpoint(&mask_ck, &pair_dir.join(format!("imp-s{}.sprb", s)))?;
        }
    }

    // Activation matching on a shared seeded subsample.
    let match_seed = derive_seed(master_seed, "match-sample", &wp);
    let b_for_match = match plan.matching.early_epoch {
        Some(i) => out_b
            .rewinds
            .iter()
            .find(|c| c.epoch == i)
            .ok_or_else(|| PipelineError::Other("missing early-matching snapshot".into()))?,
        None => &out_b.final_checkpoint,
    };
    let acts_a = collect_activations(
        &out_a.final_checkpoint.params,
        train_set,
        plan.matching.sample_count,
        match_seed,
    )?;
    let acts_b = collect_activations(
        &b_for_match.params,
        train_set,
        plan.matching.sample_count,
        match_seed,
    )?;
    let perm = match_activations(&spec, &acts_a, &acts_b, plan.matching.center)?;
    std::fs::create_dir_all(&pair_dir)?;
    std::fs::write(pair_dir.join("perm.json"), perm.to_json())?;

    Ok(PairArtifacts {
        width,
        pair,
        dense_a: out_a.final_checkpoint,
        a_rewinds: out_a.rewinds,
        dense_b: out_b.final_checkpoint,
        b_rewinds: out_b.rewinds,
        masks,
        perm,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell<S: Scalar>(
    plan: &ExperimentPlan,
    master_seed: u64,
    artifacts: &PairArtifacts<S>,
    sparsity: f64,
    k: usize,
    method: Method,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
    ckpt_dir: &Path,
    config_hash: &str,
) -> Result<RunRecord> {
    let start = Instant::now();
    let mask_a = artifacts.mask_at(sparsity)?;
    let (init, mask, order_tag): (&Checkpoint<S>, Mask, &str) = match method {
        Method::Lth => (artifacts.rewind_a(k)?, mask_a.clone(), "order-a"),
        Method::Naive => (artifacts.rewind_b(k)?, mask_a.clone(), "order-b"),
        Method::Permuted => (
            artifacts.rewind_b(k)?,
            apply_permutation_mask(mask_a, &artifacts.perm)?,
            "order-b",
        ),
    };
    let wp = [artifacts.width as u64, artifacts.pair as u64];
    let config = plan.train.config(
        plan.train.sparse_lr,
        derive_seed(master_seed, order_tag, &wp),
        vec![],
    );
    let out = train(TrainInit::Checkpoint(init), Some(&mask), &config, train_set, test_set)?;

    let (train_acc, final_train_loss) = match (
        out.report.train_accuracy.last(),
        out.report.train_loss.last(),
    ) {
        (Some(&a), Some(&l)) => (a, l),
        // A cell with k = T runs zero epochs; evaluate the init directly.
        _ => {
            let e = evaluate(&out.final_checkpoint.params, Some(&mask), train_set)?;
            (e.accuracy, e.loss)
        }
    };

    let id = cell_id(artifacts.width, artifacts.pair, sparsity, k, method);
    let path = ckpt_dir
        .join(format!("w{}-p{}", artifacts.width, artifacts.pair))
        .join(format!("{}.sprb", id));
    save_checkpoint(&out.final_checkpoint, &path)?;

    Ok(RunRecord {
        experiment_id: id,
        dataset: train_set.name.clone(),
        width: artifacts.width,
        sparsity,
        rewind_epoch: k,
        method,
        seed: artifacts.pair as u64,
        test_acc: out.report.test_accuracy,
        train_acc,
        final_train_loss,
        wall_time_s: start.elapsed().as_secs_f64(),
        checkpoint_path: path.to_string_lossy().into_owned(),
        config_hash: config_hash.to_string(),
    })
}

fn curve_rows(curve: &BarrierCurve, pair_id: &str, width: usize) -> Vec<BarrierRow> {
    let mut rows = Vec::with_capacity(curve.alphas.len() * 2);
    for (i, &alpha) in curve.alphas.iter().enumerate() {
        for metric in [Metric::Loss, Metric::Error] {
            let pick = |e: &crate::engine::Evaluation| match metric {
                Metric::Loss => e.loss,
                Metric::Error => e.error,
            };
            rows.push(BarrierRow {
                pair_id: pair_id.to_string(),
                width,
                alpha,
                repaired: curve.repaired,
                metric,
                train_value: pick(&curve.train[i]),
                test_value: pick(&curve.test[i]),
            });
        }
    }
    rows
}

/// Barrier curves between the two dense endpoints of a pair: unmatched,
/// matched, and matched with repair.
fn pair_barriers<S: Scalar>(
    plan: &ExperimentPlan,
    artifacts: &PairArtifacts<S>,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
) -> Result<Vec<BarrierRow>> {
    let width = artifacts.width;
    let base_id = format!("w{}-p{}", width, artifacts.pair);
    let eval_train = if plan.barrier.eval_train_subset > 0 {
        train_set.subsample(
            plan.barrier.eval_train_subset,
            derive_seed(plan.dataset.seed, "barrier-train-eval", &[]),
        )
    } else {
        train_set.clone()
    };
    let calibration = train_set.subsample(
        plan.barrier.calibration_count,
        derive_seed(plan.dataset.seed, "repair-cal", &[]),
    );

    let a = &artifacts.dense_a.params;
    let b = &artifacts.dense_b.params;
    let a_matched = apply_permutation_params(a, &artifacts.perm)?;
    let mut rows = Vec::new();

    let naive = barrier(a, b, &eval_train, test_set, plan.barrier.grid_size, false, None)?;
    rows.extend(curve_rows(&naive, &format!("{}-naive", base_id), width));

    let matched = barrier(
        &a_matched,
        b,
        &eval_train,
        test_set,
        plan.barrier.grid_size,
        false,
        None,
    )?;
    rows.extend(curve_rows(&matched, &format!("{}-matched", base_id), width));

    if plan.barrier.repair {
        let repaired = barrier(
            &a_matched,
            b,
            &eval_train,
            test_set,
            plan.barrier.grid_size,
            true,
            Some(&calibration),
        )?;
        rows.extend(curve_rows(&repaired, &format!("{}-matched", base_id), width));
    }
    Ok(rows)
}

/// Loss plane through the dense A solution, the LTH solution and the
/// permuted solution carried back into A's basis.
fn plane_stage<S: Scalar>(
    plan: &ExperimentPlan,
    records: &[RunRecord],
    ckpt_dir: &Path,
    test_set: &Dataset<S>,
) -> Result<Vec<PlaneRow>> {
    let width = plan.model.widths[0];
    let sparsity = *plan
        .sweep
        .sparsities
        .first()
        .ok_or_else(|| PipelineError::Other("plane needs at least one sparsity".into()))?;
    let k = if plan.sweep.rewind_epochs.contains(&plan.prune.rewind_epoch) {
        plan.prune.rewind_epoch
    } else {
        *plan
            .sweep
            .rewind_epochs
            .first()
            .ok_or_else(|| PipelineError::Other("plane needs a rewind epoch".into()))?
    };
    let find = |method: Method| -> Result<PathBuf> {
        let id = cell_id(width, 0, sparsity, k, method);
        records
            .iter()
            .find(|r| r.experiment_id == id)
            .map(|r| PathBuf::from(&r.checkpoint_path))
            .ok_or_else(|| PipelineError::Other(format!("plane anchor cell {} missing", id)))
    };
    let dense_a: Checkpoint<S> =
        load_checkpoint(&ckpt_dir.join(format!("w{}-p0", width)).join("dense-a-final.sprb"))?;
    let lth: Checkpoint<S> = load_checkpoint(&find(Method::Lth)?)?;
    let permuted: Checkpoint<S> = load_checkpoint(&find(Method::Permuted)?)?;
    let perm = PermutationMap::from_json(&std::fs::read_to_string(
        ckpt_dir.join(format!("w{}-p0", width)).join("perm.json"),
    )?)?;
    let permuted_in_a = apply_permutation_params(&permuted.params, &perm.invert())?;

    let grid = plane_eval(
        &dense_a.params,
        &lth.params,
        &permuted_in_a,
        plan.plane.resolution,
        plan.plane.margin,
        test_set,
    )?;
    let mut rows = Vec::with_capacity(grid.loss.len() * 2);
    for (yi, &y) in grid.ys.iter().enumerate() {
        for (xi, &x) in grid.xs.iter().enumerate() {
            let idx = yi * grid.xs.len() + xi;
            rows.push(PlaneRow {
                grid_x: x,
                grid_y: y,
                metric: Metric::Loss,
                value: grid.loss[idx],
            });
            rows.push(PlaneRow {
                grid_x: x,
                grid_y: y,
                metric: Metric::Error,
                value: grid.error[idx],
            });
        }
    }
    Ok(rows)
}

/// Model-set construction for the diversity analysis, then the metric math.
///
/// - `imp`:      independent seeds, each with its own IMP mask and solution
/// - `lth`:      one mask and one init, retrained over different data orders
/// - `permuted`: one mask under per-init permutations, new random inits
/// - `naive`:    the same mask unpermuted, the same new random inits
pub fn diversity_protocol<S: Scalar>(
    plan: &ExperimentPlan,
    master_seed: u64,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
) -> Result<Vec<DiversityReport>> {
    let width = plan.model.widths[0];
    let spec = plan.model.spec(train_set.dim(), train_set.class_count, width)?;
    let count = plan.diversity.model_count;
    let s_target = plan.diversity.sparsity;
    let k = plan.diversity.rewind_epoch;

    let prune_config = PruneConfig {
        target_sparsity: s_target,
        per_round_fraction: plan.prune.per_round_fraction,
        train_epochs_per_prune: plan.prune.train_epochs_per_prune,
        prune_lr: plan.prune.prune_lr,
    };

    // Training runs used by the protocol below.
    let dense_run = |init_seed: u64, order_seed: u64| -> Result<crate::train::TrainOutcome<S>> {
        let init = init_params::<S>(&spec, init_seed);
        let config = plan.train.config(plan.train.dense_lr, order_seed, vec![k]);
        Ok(train(TrainInit::Params(&init), None, &config, train_set, test_set)?)
    };
    let sparse_run = |rewind: &Checkpoint<S>, mask: &Mask, order_seed: u64| -> Result<ParamSet<S>> {
        let config = plan.train.config(plan.train.sparse_lr, order_seed, vec![]);
        Ok(train(TrainInit::Checkpoint(rewind), Some(mask), &config, train_set, test_set)?
            .final_checkpoint
            .params)
    };
    let imp_run = |rewind: &Checkpoint<S>, order_seed: u64| -> Result<(Mask, ParamSet<S>)> {
        let config = plan.train.config(plan.train.dense_lr, order_seed, vec![]);
        let out = imp_waypoints(
            rewind,
            (train_set, test_set),
            &prune_config,
            &config,
            &[s_target],
        )?;
        Ok((out.final_mask, out.pruned_solution))
    };

    // Base model A: winning-ticket init and mask M1.
    let a_order = derive_seed(master_seed, "div-order-a", &[]);
    let out_a = dense_run(derive_seed(master_seed, "div-init-a", &[]), a_order)?;
    let a_rewind = out_a
        .rewinds
        .iter()
        .find(|c| c.epoch == k)
        .ok_or_else(|| PipelineError::Other("diversity rewind missing".into()))?;
    let (mask_m1, _) = imp_run(a_rewind, a_order)?;

    // IMP set: independent dense + IMP pipelines.
    let imp_models: Vec<ParamSet<S>> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<ParamSet<S>> {
            let order = derive_seed(master_seed, "div-imp-order", &[i as u64]);
            let out = dense_run(derive_seed(master_seed, "div-imp-init", &[i as u64]), order)?;
            let rewind = out
                .rewinds
                .iter()
                .find(|c| c.epoch == k)
                .ok_or_else(|| PipelineError::Other("diversity rewind missing".into()))?;
            Ok(imp_run(rewind, order)?.1)
        })
        .collect::<Result<_>>()?;

    // LTH set: same init, same mask, different data orders.
    let lth_models: Vec<ParamSet<S>> = (0..count)
        .into_par_iter()
        .map(|i| sparse_run(a_rewind, &mask_m1, derive_seed(master_seed, "div-lth-order", &[i as u64])))
        .collect::<Result<_>>()?;

    // Permuted and naive sets share the new random initializations.
    let b_runs: Vec<(Checkpoint<S>, PermutationMap)> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<(Checkpoint<S>, PermutationMap)> {
            let order = derive_seed(master_seed, "div-order-b", &[i as u64]);
            let out_b = dense_run(derive_seed(master_seed, "div-init-b", &[i as u64]), order)?;
            let match_seed = derive_seed(master_seed, "div-match", &[i as u64]);
            let acts_a = collect_activations(
                &out_a.final_checkpoint.params,
                train_set,
                plan.matching.sample_count,
                match_seed,
            )?;
            let acts_b = collect_activations(
                &out_b.final_checkpoint.params,
                train_set,
                plan.matching.sample_count,
                match_seed,
            )?;
            let perm = match_activations(&spec, &acts_a, &acts_b, plan.matching.center)?;
            let rewind = out_b
                .rewinds
                .into_iter()
                .find(|c| c.epoch == k)
                .ok_or_else(|| PipelineError::Other("diversity rewind missing".into()))?;
            Ok((rewind, perm))
        })
        .collect::<Result<_>>()?;

    let permuted_models: Vec<ParamSet<S>> = b_runs
        .par_iter()
        .enumerate()
        .map(|(i, (rewind, perm))| {
            let mask = apply_permutation_mask(&mask_m1, perm)?;
            sparse_run(rewind, &mask, derive_seed(master_seed, "div-order-b", &[i as u64]))
        })
        .collect::<Result<_>>()?;
    let naive_models: Vec<ParamSet<S>> = b_runs
        .par_iter()
        .enumerate()
        .map(|(i, (rewind, _))| {
            sparse_run(rewind, &mask_m1, derive_seed(master_seed, "div-order-b", &[i as u64]))
        })
        .collect::<Result<_>>()?;

    let predict_all = |models: &[ParamSet<S>]| -> Result<Vec<PredictionSet>> {
        models.iter().map(|m| Ok(predict_probs(m, test_set)?)).collect()
    };
    let mut reports = Vec::new();
    for (name, models) in [
        ("imp", &imp_models),
        ("lth", &lth_models),
        ("permuted", &permuted_models),
        ("naive", &naive_models),
    ] {
        let preds = predict_all(models)?;
        reports.push(diversity_report(name, &preds, &test_set.labels)?);
    }
    Ok(reports)
}
