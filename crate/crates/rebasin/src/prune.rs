//! Global unstructured magnitude pruning and iterative magnitude pruning.
//!
//! Pruning pools the surviving weights of all layers into one set and drops
//! the smallest fraction by absolute value, so the kept set is invariant to
//! how weights are partitioned into layers. IMP alternates short training
//! runs from a fixed rewind checkpoint with 20% pruning rounds, finishing
//! with a partial round that lands exactly on the target sparsity.

use crate::data::Dataset;
use crate::engine::{Mask, ParamSet};
use crate::scalar::Scalar;
use crate::train::{train, Checkpoint, TrainConfig, TrainInit, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("prune fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("target sparsity {0} outside (0, 1)")]
    BadTarget(f64),
    #[error("no surviving weights to prune")]
    EmptySurvivors,
    #[error("mask shape does not match parameters")]
    ShapeMismatch,
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
}

pub type Result<T> = std::result::Result<T, PruneError>;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PruneConfig {
    pub target_sparsity: f64,
    /// Fraction of surviving weights removed per full round.
    pub per_round_fraction: f64,
    pub train_epochs_per_prune: usize,
    /// Learning rate used for the short retraining runs between prunes.
    pub prune_lr: f64,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) || self.target_sparsity == 0.0 {
            return Err(PruneError::BadTarget(self.target_sparsity));
        }
        if !(0.0..1.0).contains(&self.per_round_fraction) || self.per_round_fraction == 0.0 {
            return Err(PruneError::BadFraction(self.per_round_fraction));
        }
        Ok(())
    }
}

/// Masks of strictly increasing sparsity along the IMP run, together with
/// the sparse solution trained under each mask.
pub struct MaskSequence<S> {
    pub entries: Vec<MaskSequenceEntry<S>>,
}

pub struct MaskSequenceEntry<S> {
    pub iteration: usize,
    pub mask: Mask,
    pub sparsity: f64,
    pub solution: ParamSet<S>,
}

pub struct ImpOutcome<S> {
    pub final_mask: Mask,
    pub pruned_solution: ParamSet<S>,
    pub sequence: MaskSequence<S>,
}

/// Fraction of weight-matrix entries fixed to zero.
pub fn sparsity(mask: &Mask) -> f64 {
    mask.sparsity()
}

/// Zero out the `prune_fraction` of currently unpruned weights with the
/// smallest magnitude, pooled globally across layers. The pruned count is
/// `floor(fraction * survivors)`; ties break by (layer, flat index).
pub fn global_magnitude_mask<S: Scalar>(
    params: &ParamSet<S>,
    current_mask: &Mask,
    prune_fraction: f64,
) -> Result<Mask> {
    if !(0.0..=1.0).contains(&prune_fraction) || prune_fraction == 0.0 {
        return Err(PruneError::BadFraction(prune_fraction));
    }
    if params.weights.len() != current_mask.layers.len()
        || params
            .weights
            .iter()
            .zip(&current_mask.layers)
            .any(|(w, m)| w.shape() != m.shape())
    {
        return Err(PruneError::ShapeMismatch);
    }
    let survivors = current_mask.ones_count();
    if survivors == 0 {
        return Err(PruneError::EmptySurvivors);
    }
    let count = (prune_fraction * survivors as f64).floor() as usize;
    prune_smallest(params, current_mask, count)
}

/// Remove exactly `count` surviving weights of smallest magnitude.
fn prune_smallest<S: Scalar>(params: &ParamSet<S>, current_mask: &Mask, count: usize) -> Result<Mask> {
    let mut new_mask = current_mask.clone();
    if count == 0 {
        return Ok(new_mask);
    }
    // (|w|, layer, flat index) over survivors only; sort is stable in the
    // index pair for equal magnitudes.
    let mut entries: Vec<(f64, usize, usize)> = Vec::with_capacity(current_mask.ones_count());
    for (l, (w, m)) in params.weights.iter().zip(&current_mask.layers).enumerate() {
        for (i, (&wv, &mv)) in w.data().iter().zip(m.data()).enumerate() {
            if mv == 1 {
                entries.push((wv.abs().to_f64(), l, i));
            }
        }
    }
    entries.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    for &(_, l, i) in entries.iter().take(count) {
        new_mask.layers[l].data_mut()[i] = 0;
    }
    Ok(new_mask)
}

/// Iterative magnitude pruning with weight rewinding: every round trains
/// from the same rewind checkpoint under the current mask, then prunes the
/// smallest fraction of survivors from the trained weights. A final partial
/// round prunes exactly to the target.
pub fn imp<S: Scalar>(
    rewind: &Checkpoint<S>,
    data: (&Dataset<S>, &Dataset<S>),
    prune_config: &PruneConfig,
    train_config: &TrainConfig,
) -> Result<ImpOutcome<S>> {
    let outcome = imp_waypoints(rewind, data, prune_config, train_config, &[prune_config.target_sparsity])?;
    Ok(outcome)
}

/// IMP run that lands exactly on each waypoint sparsity in ascending order,
/// returning the mask and retrained solution for every iteration. The last
/// waypoint is the final target. Used by the sweep pipeline to harvest all
/// requested sparsity levels from one run.
pub fn imp_waypoints<S: Scalar>(
    rewind: &Checkpoint<S>,
    (train_set, test_set): (&Dataset<S>, &Dataset<S>),
    prune_config: &PruneConfig,
    train_config: &TrainConfig,
    waypoints: &[f64],
) -> Result<ImpOutcome<S>> {
    prune_config.validate()?;
    let mut targets: Vec<f64> = waypoints.to_vec();
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if targets.is_empty() || targets[0] <= 0.0 || *targets.last().unwrap() >= 1.0 {
        return Err(PruneError::BadTarget(*targets.last().unwrap_or(&0.0)));
    }

    let spec = rewind.spec().clone();
    let total = ParamSet::<S>::zeros(&spec).weight_count();
    let retrain = |mask: &Mask| -> Result<TrainOutcome<S>> {
        let mut config = train_config.clone();
        config.learning_rate = prune_config.prune_lr;
        config.epochs = rewind.epoch + prune_config.train_epochs_per_prune;
        config.rewind_epochs = vec![];
        Ok(train(
            TrainInit::Checkpoint(rewind),
            Some(mask),
            &config,
            train_set,
            test_set,
        )?)
    };

    let mut mask = Mask::ones(&spec);
    let mut solution = retrain(&mask)?.final_checkpoint.params;
    let mut entries: Vec<MaskSequenceEntry<S>> = Vec::new();
    let mut iteration = 0;
    let mut remaining = targets.into_iter();
    let mut waypoint = remaining.next().unwrap();
    loop {
        let survivors = mask.ones_count();
        // ceil keeps a full fraction-f round from dense landing exactly on
        // target S = f, and stays within one weight of every target.
        let target_survivors = ((1.0 - waypoint) * total as f64).ceil() as usize;
        let to_waypoint = survivors.saturating_sub(target_survivors);
        if to_waypoint == 0 {
            match remaining.next() {
                Some(w) => {
                    waypoint = w;
                    continue;
                }
                None => break,
            }
        }
        let full_round = (prune_config.per_round_fraction * survivors as f64).floor() as usize;
        let count = full_round.max(1).min(to_waypoint);
        mask = prune_smallest(&solution, &mask, count)?;
        iteration += 1;
        solution = retrain(&mask)?.final_checkpoint.params;
        entries.push(MaskSequenceEntry {
            iteration,
            mask: mask.clone(),
            sparsity: mask.sparsity(),
            solution: solution.clone(),
        });
    }

    let final_mask = entries
        .last()
        .map(|e| e.mask.clone())
        .unwrap_or_else(|| mask.clone());
    let pruned_solution = entries
        .last()
        .map(|e| e.solution.clone())
        .unwrap_or_else(|| solution.clone());
    Ok(ImpOutcome {
        final_mask,
        pruned_solution,
        sequence: MaskSequence { entries },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::engine::ModelSpec;
    use crate::engine::init_params;
    use crate::train::LrSchedule;
    use crate::Tensor;

    fn flat_spec(total: usize) -> ModelSpec {
        ModelSpec::new(vec![total, 1], 1).unwrap()
    }

    #[test]
    fn keeps_largest_magnitudes() {
        let spec = flat_spec(4);
        let mut p: ParamSet<f64> = ParamSet::zeros(&spec);
        p.weights[0] = Tensor::from_vec(vec![1, 4], vec![0.1, -0.5, 0.3, -0.05]);
        let mask = global_magnitude_mask(&p, &Mask::ones(&spec), 0.5).unwrap();
        assert_eq!(mask.layers[0].data(), &[0, 1, 1, 0]);
    }

    #[test]
    fn tiny_fraction_prunes_nothing() {
        let spec = flat_spec(10);
        let p: ParamSet<f64> = init_params(&spec, 1);
        let mask = global_magnitude_mask(&p, &Mask::ones(&spec), 0.01).unwrap();
        assert_eq!(mask.ones_count(), 10);
    }

    #[test]
    fn repeated_rounds_decay_geometrically() {
        let spec = ModelSpec::new(vec![40, 25, 10], 1).unwrap();
        let p: ParamSet<f64> = init_params(&spec, 2);
        let mut mask = Mask::ones(&spec);
        let total = mask.total();
        let mut survivors = total as f64;
        for s in 1..=8 {
            mask = global_magnitude_mask(&p, &mask, 0.2).unwrap();
            survivors -= (0.2 * survivors).floor();
            assert_eq!(mask.ones_count(), survivors as usize, "round {}", s);
        }
        // Eight full rounds land near 1 - 0.8^8.
        let expect = 1.0 - 0.8_f64.powi(8);
        assert!((mask.sparsity() - expect).abs() < 0.01);
    }

    #[test]
    fn global_pooling_matches_flat_sort_oracle() {
        let spec = ModelSpec::new(vec![6, 9, 4], 1).unwrap();
        let p: ParamSet<f64> = init_params(&spec, 5);
        let mask = global_magnitude_mask(&p, &Mask::ones(&spec), 0.4).unwrap();

        // Oracle: flatten all weights, sort by magnitude, keep the top part.
        let mut flat: Vec<(f64, usize, usize)> = Vec::new();
        for (l, w) in p.weights.iter().enumerate() {
            for (i, &v) in w.data().iter().enumerate() {
                flat.push((v.abs(), l, i));
            }
        }
        flat.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let drop = (0.4 * flat.len() as f64).floor() as usize;
        for (rank, &(_, l, i)) in flat.iter().enumerate() {
            let kept = mask.layers[l].data()[i] == 1;
            assert_eq!(kept, rank >= drop);
        }
    }

    #[test]
    fn ties_break_by_layer_then_index() {
        let spec = ModelSpec::new(vec![2, 2, 1], 1).unwrap();
        let mut p: ParamSet<f64> = ParamSet::zeros(&spec);
        p.weights[0] = Tensor::from_vec(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]);
        p.weights[1] = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]);
        let mask = global_magnitude_mask(&p, &Mask::ones(&spec), 0.5).unwrap();
        // All magnitudes equal: the first three by (layer, index) go.
        assert_eq!(mask.layers[0].data(), &[0, 0, 0, 1]);
        assert_eq!(mask.layers[1].data(), &[1, 1]);
    }

    fn quick_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 2,
            batch_size: 32,
            seed,
            rewind_epochs: vec![1],
            lr_schedule: LrSchedule::Constant,
        }
    }

    fn rewind_fixture() -> (Checkpoint<f64>, Dataset<f64>, Dataset<f64>) {
        let spec = ModelSpec::new(vec![8, 24, 24, 4], 1).unwrap();
        let train_set: Dataset<f64> = make_blobs(1, 128, 4, 8, 0.25).unwrap();
        let test_set: Dataset<f64> = make_blobs(2, 64, 4, 8, 0.25).unwrap();
        let init = init_params(&spec, 3);
        let out = train(
            TrainInit::Params(&init),
            None,
            &quick_train_config(4),
            &train_set,
            &test_set,
        )
        .unwrap();
        (out.rewinds[0].clone(), train_set, test_set)
    }

    #[test]
    fn single_round_for_twenty_percent_target() {
        let (rewind, train_set, test_set) = rewind_fixture();
        let pc = PruneConfig {
            target_sparsity: 0.2,
            per_round_fraction: 0.2,
            train_epochs_per_prune: 1,
            prune_lr: 0.01,
        };
        let out = imp(&rewind, (&train_set, &test_set), &pc, &quick_train_config(4)).unwrap();
        assert_eq!(out.sequence.entries.len(), 1);
        let total = out.final_mask.total();
        assert!((out.final_mask.sparsity() - 0.2).abs() <= 1.0 / total as f64);
    }

    #[test]
    fn deep_target_round_count_and_exactness() {
        let (rewind, train_set, test_set) = rewind_fixture();
        let pc = PruneConfig {
            target_sparsity: 0.9,
            per_round_fraction: 0.2,
            train_epochs_per_prune: 1,
            prune_lr: 0.01,
        };
        let out = imp(&rewind, (&train_set, &test_set), &pc, &quick_train_config(4)).unwrap();
        let total = out.final_mask.total();
        assert!((out.final_mask.sparsity() - 0.9).abs() <= 1.0 / total as f64);
        // Full 20% rounds while 1 - 0.8^s < 0.9 gives s = 10, plus a top-up.
        assert_eq!(out.sequence.entries.len(), 11);

        // Monotone: later masks never restore weights.
        for pair in out.sequence.entries.windows(2) {
            for (a, b) in pair[0].mask.layers.iter().zip(&pair[1].mask.layers) {
                for (&ma, &mb) in a.data().iter().zip(b.data()) {
                    assert!(mb <= ma);
                }
            }
            assert!(pair[1].sparsity > pair[0].sparsity);
        }
    }

    #[test]
    fn waypoints_collect_all_targets() {
        let (rewind, train_set, test_set) = rewind_fixture();
        let pc = PruneConfig {
            target_sparsity: 0.95,
            per_round_fraction: 0.2,
            train_epochs_per_prune: 1,
            prune_lr: 0.01,
        };
        let targets = [0.8, 0.9, 0.95];
        let out = imp_waypoints(
            &rewind,
            (&train_set, &test_set),
            &pc,
            &quick_train_config(4),
            &targets,
        )
        .unwrap();
        let total = out.final_mask.total() as f64;
        for &t in &targets {
            assert!(
                out.sequence
                    .entries
                    .iter()
                    .any(|e| (e.sparsity - t).abs() <= 1.0 / total),
                "no entry at sparsity {}",
                t
            );
        }
        assert!((out.final_mask.sparsity() - 0.95).abs() <= 1.0 / total);
    }

    #[test]
    fn sparsity_trivials() {
        let spec = ModelSpec::new(vec![4, 4, 2], 1).unwrap();
        let ones = Mask::ones(&spec);
        assert_eq!(sparsity(&ones), 0.0);
        let zeros = Mask::from_layers(
            ones.layers
                .iter()
                .map(|t| Tensor::filled(t.shape().to_vec(), 0u8))
                .collect(),
        );
        assert_eq!(sparsity(&zeros), 1.0);
    }
}
