//! Linear mode connectivity: interpolation, variance repair, loss barriers
//! and loss-plane grids.
//!
//! The barrier between two parameter vectors is the largest excess of the
//! interpolated model's loss over the linear interpolation of the endpoint
//! losses, taken over a uniform alpha grid that includes both endpoints.
//! Naive interpolation of aligned models still suffers variance collapse in
//! the hidden activations; the repair pass restores each hidden unit's
//! pre-activation statistics to the interpolation of the endpoint statistics
//! by folding a per-unit affine correction into that unit's weight row.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::engine::{evaluate, forward_preactivations, Evaluation, ParamSet};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to interpolated-model standard deviations before division.
pub const REPAIR_SIGMA_FLOOR: f64 = 1e-6;

/// Default calibration sample count for the repair pass.
pub const REPAIR_CALIBRATION_SAMPLES: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum LmcError {
    #[error("parameter sets have different specs")]
    SpecMismatch,
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("grid size {0} must be >= 2")]
    BadGrid(usize),
    #[error("anchor models are collinear in parameter space")]
    CollinearAnchors,
    #[error("calibration data is empty")]
    EmptyCalibration,
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

pub type Result<T> = std::result::Result<T, LmcError>;

/// `(1 - alpha) * theta1 + alpha * theta2`, elementwise over all weights and
/// biases. Endpoints are returned bitwise, and interpolating a model with
/// itself is exact at every alpha.
pub fn lerp_params<S: Scalar>(
    theta1: &ParamSet<S>,
    theta2: &ParamSet<S>,
    alpha: f64,
) -> Result<ParamSet<S>> {
    if theta1.spec != theta2.spec {
        return Err(LmcError::SpecMismatch);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LmcError::BadAlpha(alpha));
    }
    if alpha == 0.0 {
        return Ok(theta1.clone());
    }
    if alpha == 1.0 {
        return Ok(theta2.clone());
    }
    let a = S::from_f64(alpha);
    let mut out = theta1.clone();
    for l in 0..out.num_layers() {
        for (o, &w2) in out.weights[l].data_mut().iter_mut().zip(theta2.weights[l].data()) {
            *o += a * (w2 - *o);
        }
        for (o, &b2) in out.biases[l].data_mut().iter_mut().zip(theta2.biases[l].data()) {
            *o += a * (b2 - *o);
        }
    }
    Ok(out)
}

/// Per-unit pre-activation means and stds of every hidden layer, computed on
/// a calibration set with f64 accumulation.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn preactivation_stats<S: Scalar>(
    params: &ParamSet<S>,
    calibration: &Dataset<S>,
) -> Result<Vec<LayerStats>> {
    if calibration.is_empty() {
        return Err(LmcError::EmptyCalibration);
    }
    let x = calibration.features_slice(0, calibration.len());
    let zs = forward_preactivations(params, None, &x)?;
    Ok(zs.iter().map(|z| column_stats(z)).collect())
}

fn column_stats<S: Scalar>(z: &Tensor<S>) -> LayerStats {
    let (n, d) = (z.rows(), z.cols());
    let mut mean = vec![0.0_f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(z.row(i)) {
            *m += v.to_f64();
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0_f64; d];
    for i in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
            let dlt = v.to_f64() - m;
            *s += dlt * dlt;
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt()).collect();
    LayerStats { mean, std }
}

/// Per-unit statistics gathered during a repair pass.
#[derive(Debug, Clone)]
pub struct RepairStats {
    /// One entry per hidden layer: endpoint and interpolated-model stats,
    /// the interpolation targets, and the unit corrections applied.
    pub layers: Vec<RepairLayerStats>,
    /// Units left uncorrected because their calibration activations were
    /// constant in both the interpolated model and the targets.
    pub skipped_units: usize,
}

#[derive(Debug, Clone)]
pub struct RepairLayerStats {
    pub mean_target: Vec<f64>,
    pub std_target: Vec<f64>,
    pub mean_interp: Vec<f64>,
    pub std_interp: Vec<f64>,
}

/// Repair an interpolated model: restore each hidden unit's pre-activation
/// mean and std on the calibration set to the interpolation of the endpoint
/// statistics, folding the affine correction into the unit's weight row and
/// bias. Layers are corrected in input-to-output order, so each layer's
/// interpolated statistics are measured after all upstream corrections.
pub fn repair<S: Scalar>(
    theta_alpha: &ParamSet<S>,
    theta1: &ParamSet<S>,
    theta2: &ParamSet<S>,
    alpha: f64,
    calibration: &Dataset<S>,
) -> Result<ParamSet<S>> {
    let stats1 = preactivation_stats(theta1, calibration)?;
    let stats2 = preactivation_stats(theta2, calibration)?;
    Ok(repair_with_stats(theta_alpha, &stats1, &stats2, alpha, calibration)?.0)
}

/// Repair against precomputed endpoint statistics; the barrier scan uses
/// this to avoid re-measuring the endpoints at every alpha.
pub fn repair_with_stats<S: Scalar>(
    theta_alpha: &ParamSet<S>,
    stats1: &[LayerStats],
    stats2: &[LayerStats],
    alpha: f64,
    calibration: &Dataset<S>,
) -> Result<(ParamSet<S>, RepairStats)> {
    if calibration.is_empty() {
        return Err(LmcError::EmptyCalibration);
    }
    let mut corrected = theta_alpha.clone();
    let hidden_layers = corrected.num_layers() - 1;
    if stats1.len() != hidden_layers || stats2.len() != hidden_layers {
        return Err(LmcError::SpecMismatch);
    }
    let n = calibration.len();
    let mut h = calibration.features_slice(0, n);
    let mut layers = Vec::with_capacity(hidden_layers);
    let mut skipped_units = 0usize;

    for l in 0..hidden_layers {
        // Pre-activation of the interpolated model given corrected upstream.
        let mut z = Tensor::zeros(vec![n, corrected.weights[l].rows()]);
        crate::tensor::matmul_nt(&h, &corrected.weights[l], &mut z);
        for i in 0..n {
            for (v, &b) in z.row_mut(i).iter_mut().zip(corrected.biases[l].data()) {
                *v += b;
            }
        }
        let interp = column_stats(&z);

        let d = interp.mean.len();
        let mut mean_target = vec![0.0; d];
        let mut std_target = vec![0.0; d];
        let mut scale = vec![1.0_f64; d];
        let mut shift = vec![0.0_f64; d];
        let mut layer_skips = 0usize;
        for u in 0..d {
            let mu_star = stats1[l].mean[u] + alpha * (stats2[l].mean[u] - stats1[l].mean[u]);
            let sd_star = stats1[l].std[u] + alpha * (stats2[l].std[u] - stats1[l].std[u]);
            mean_target[u] = mu_star;
            std_target[u] = sd_star;
            if interp.std[u] < REPAIR_SIGMA_FLOOR && sd_star < REPAIR_SIGMA_FLOOR {
                layer_skips += 1;
                continue;
            }
            scale[u] = sd_star / interp.std[u].max(REPAIR_SIGMA_FLOOR);
            shift[u] = mu_star - scale[u] * interp.mean[u];
        }
        if layer_skips > 0 {
            log::warn!(
                "repair: layer {} skipped {} unit(s) with constant calibration activations",
                l,
                layer_skips
            );
            skipped_units += layer_skips;
        }

        // Fold z -> a * z + c into the unit's weight row and bias.
        for u in 0..d {
            let a = S::from_f64(scale[u]);
            for w in corrected.weights[l].row_mut(u) {
                *w *= a;
            }
            let b = corrected.biases[l].data_mut();
            b[u] = a * b[u] + S::from_f64(shift[u]);
        }

        // Advance the calibration batch through the corrected layer.
        for i in 0..n {
            for (u, v) in z.row_mut(i).iter_mut().enumerate() {
                let zc = S::from_f64(scale[u]) * *v + S::from_f64(shift[u]);
                *v = if zc < S::ZERO { S::ZERO } else { zc };
            }
        }
        h = z;

        layers.push(RepairLayerStats {
            mean_target,
            std_target,
            mean_interp: interp.mean,
            std_interp: interp.std,
        });
    }

    Ok((
        corrected,
        RepairStats {
            layers,
            skipped_units,
        },
    ))
}

/// Loss and 0-1 error along the interpolation path, on both datasets.
#[derive(Debug, Clone, Serialize)]
pub struct BarrierCurve {
    pub alphas: Vec<f64>,
    pub train: Vec<Evaluation>,
    pub test: Vec<Evaluation>,
    pub repaired: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Loss,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl BarrierCurve {
    fn series(&self, split: Split) -> &[Evaluation] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Largest excess over the linear interpolation of the endpoint values,
    /// clamped at zero.
    pub fn barrier(&self, metric: Metric, split: Split) -> f64 {
        let series = self.series(split);
        let value = |e: &Evaluation| match metric {
            Metric::Loss => e.loss,
            Metric::Error => e.error,
        };
        let first = value(&series[0]);
        let last = value(series.last().unwrap());
        let mut best = 0.0_f64;
        for (a, e) in self.alphas.iter().zip(series) {
            let baseline = first + a * (last - first);
            let excess = value(e) - baseline;
            if excess > best {
                best = excess;
            }
        }
        best
    }
}

/// Evaluate the interpolation path between two models on a uniform alpha
/// grid (endpoints included). With `use_repair`, every interior point is
/// variance-corrected against the endpoints before evaluation; calibration
/// defaults to a seeded 2048-sample subset of the training set.
pub fn barrier<S: Scalar>(
    theta1: &ParamSet<S>,
    theta2: &ParamSet<S>,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
    grid_size: usize,
    use_repair: bool,
    calibration: Option<&Dataset<S>>,
) -> Result<BarrierCurve> {
    if grid_size < 2 {
        return Err(LmcError::BadGrid(grid_size));
    }
    if theta1.spec != theta2.spec {
        return Err(LmcError::SpecMismatch);
    }
    let owned_cal;
    let (stats1, stats2, cal) = if use_repair {
        let cal = match calibration {
            Some(c) => c,
            None => {
                owned_cal = train_set.subsample(
                    REPAIR_CALIBRATION_SAMPLES,
                    derive_seed(0x5eed, "repair-cal", &[]),
                );
                &owned_cal
            }
        };
        (
            Some(preactivation_stats(theta1, cal)?),
            Some(preactivation_stats(theta2, cal)?),
            Some(cal),
        )
    } else {
        (None, None, None)
    };

    let alphas: Vec<f64> = (0..grid_size)
        .map(|i| i as f64 / (grid_size - 1) as f64)
        .collect();
    let evals: Vec<(Evaluation, Evaluation)> = alphas
        .par_iter()
        .map(|&a| -> Result<(Evaluation, Evaluation)> {
            let mut theta = lerp_params(theta1, theta2, a)?;
            if let (Some(s1), Some(s2), Some(cal)) = (&stats1, &stats2, cal) {
                // Endpoints are left untouched: their statistics already
                // equal the targets.
                if a != 0.0 && a != 1.0 {
                    theta = repair_with_stats(&theta, s1, s2, a, cal)?.0;
                }
            }
            Ok((
                evaluate(&theta, None, train_set)?,
                evaluate(&theta, None, test_set)?,
            ))
        })
        .collect::<Result<_>>()?;

    let (train, test) = evals.into_iter().unzip();
    Ok(BarrierCurve {
        alphas,
        train,
        test,
        repaired: use_repair,
    })
}

/// Error barriers between a dense solution and each sparse solution along an
/// IMP mask sequence, with and without repair. Iteration 0 is the dense
/// solution against itself.
#[derive(Debug, Clone, Serialize)]
pub struct ImpBarrierPoint {
    pub iteration: usize,
    pub sparsity: f64,
    pub train_error_barrier: f64,
    pub test_error_barrier: f64,
    pub train_error_barrier_repaired: f64,
    pub test_error_barrier_repaired: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn barrier_vs_imp_iteration<S: Scalar>(
    dense_solution: &ParamSet<S>,
    sequence: &crate::prune::MaskSequence<S>,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
    grid_size: usize,
    calibration: Option<&Dataset<S>>,
) -> Result<Vec<ImpBarrierPoint>> {
    let mut points = vec![ImpBarrierPoint {
        iteration: 0,
        sparsity: 0.0,
        train_error_barrier: 0.0,
        test_error_barrier: 0.0,
        train_error_barrier_repaired: 0.0,
        test_error_barrier_repaired: 0.0,
    }];
    for entry in &sequence.entries {
        let plain = barrier(
            dense_solution,
            &entry.solution,
            train_set,
            test_set,
            grid_size,
            false,
            None,
        )?;
        let fixed = barrier(
            dense_solution,
            &entry.solution,
            train_set,
            test_set,
            grid_size,
            true,
            calibration,
        )?;
        points.push(ImpBarrierPoint {
            iteration: entry.iteration,
            sparsity: entry.sparsity,
            train_error_barrier: plain.barrier(Metric::Error, Split::Train),
            test_error_barrier: plain.barrier(Metric::Error, Split::Test),
            train_error_barrier_repaired: fixed.barrier(Metric::Error, Split::Train),
            test_error_barrier_repaired: fixed.barrier(Metric::Error, Split::Test),
        });
    }
    Ok(points)
}

/// Loss / error surface over the affine plane spanned by three models.
#[derive(Debug, Clone, Serialize)]
pub struct PlaneGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major `ys.len() x xs.len()` grids.
    pub loss: Vec<f64>,
    pub error: Vec<f64>,
    /// Plane coordinates of the three anchor models.
    pub anchors: [(f64, f64); 3],
    /// Direct evaluation of the anchor parameter sets.
    pub anchor_direct: [Evaluation; 3],
    /// Evaluation of the anchors reconstructed from their plane coordinates.
    pub anchor_reconstructed: [Evaluation; 3],
}

/// Evaluate a dataset over the plane through three parameter sets. The basis
/// comes from Gram-Schmidt on `(theta2 - theta1, theta3 - theta1)`; the grid
/// covers the anchor triangle extended by `margin` on every side.
pub fn plane_eval<S: Scalar>(
    theta1: &ParamSet<S>,
    theta2: &ParamSet<S>,
    theta3: &ParamSet<S>,
    resolution: usize,
    margin: f64,
    dataset: &Dataset<S>,
) -> Result<PlaneGrid> {
    if theta1.spec != theta2.spec || theta1.spec != theta3.spec {
        return Err(LmcError::SpecMismatch);
    }
    if resolution < 2 {
        return Err(LmcError::BadGrid(resolution));
    }
    let d1 = flat_diff(theta2, theta1);
    let d2 = flat_diff(theta3, theta1);
    let n1 = norm(&d1);
    if n1 < 1e-12 {
        return Err(LmcError::CollinearAnchors);
    }
    let u: Vec<f64> = d1.iter().map(|v| v / n1).collect();
    let proj = dot(&d2, &u);
    let mut v: Vec<f64> = d2.iter().zip(&u).map(|(a, b)| a - proj * b).collect();
    let n2 = norm(&v);
    if n2 < 1e-9 * norm(&d2).max(1.0) {
        return Err(LmcError::CollinearAnchors);
    }
    for x in &mut v {
        *x /= n2;
    }

    let anchors = [(0.0, 0.0), (n1, 0.0), (proj, n2)];
    let (x_lo, x_hi) = bounds(anchors.iter().map(|a| a.0), margin);
    let (y_lo, y_hi) = bounds(anchors.iter().map(|a| a.1), margin);
    let xs: Vec<f64> = (0..resolution)
        .map(|i| x_lo + (x_hi - x_lo) * i as f64 / (resolution - 1) as f64)
        .collect();
    let ys: Vec<f64> = (0..resolution)
        .map(|i| y_lo + (y_hi - y_lo) * i as f64 / (resolution - 1) as f64)
        .collect();

    let reconstruct = |x: f64, y: f64| -> ParamSet<S> {
        let mut out = theta1.clone();
        let mut i = 0;
        out.for_each_param_mut(|w| {
            *w = S::from_f64(w.to_f64() + x * u[i] + y * v[i]);
            i += 1;
        });
        out
    };

    let cells: Vec<(f64, f64)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    let evals: Vec<Evaluation> = cells
        .par_iter()
        .map(|&(x, y)| evaluate(&reconstruct(x, y), None, dataset))
        .collect::<std::result::Result<_, _>>()?;
    let loss = evals.iter().map(|e| e.loss).collect();
    let error = evals.iter().map(|e| e.error).collect();

    let anchor_direct = [
        evaluate(theta1, None, dataset)?,
        evaluate(theta2, None, dataset)?,
        evaluate(theta3, None, dataset)?,
    ];
    let anchor_reconstructed = [
        evaluate(&reconstruct(anchors[0].0, anchors[0].1), None, dataset)?,
        evaluate(&reconstruct(anchors[1].0, anchors[1].1), None, dataset)?,
        evaluate(&reconstruct(anchors[2].0, anchors[2].1), None, dataset)?,
    ];

    Ok(PlaneGrid {
        xs,
        ys,
        loss,
        error,
        anchors,
        anchor_direct,
        anchor_reconstructed,
    })
}

fn bounds(vals: impl Iterator<Item = f64>, margin: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = (hi - lo).max(1e-9);
    (lo - margin * range, hi + margin * range)
}

fn flat_diff<S: Scalar>(a: &ParamSet<S>, b: &ParamSet<S>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.flat_len());
    for l in 0..a.num_layers() {
        for (x, y) in a.weights[l].data().iter().zip(b.weights[l].data()) {
            out.push(x.to_f64() - y.to_f64());
        }
        for (x, y) in a.biases[l].data().iter().zip(b.biases[l].data()) {
            out.push(x.to_f64() - y.to_f64());
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
