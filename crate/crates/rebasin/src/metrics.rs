//! Functional diversity of model sets and probability-averaged ensembling.
//!
//! All divergences use natural log. Probabilities are floored at 1e-12 and
//! renormalized before any log-ratio, so one-hot-like outputs stay finite.
//! KL is averaged over ordered pairs (direction is not symmetrized);
//! disagreement and JS over unordered pairs.

use serde::Serialize;

use crate::data::Dataset;
use crate::engine::{argmax_row, forward, softmax_rows, ParamSet};
use crate::scalar::Scalar;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction sets disagree in shape: {0}")]
    ShapeMismatch(String),
    #[error("need at least {need} models, got {got}")]
    InsufficientModels { need: usize, got: usize },
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Per-sample softmax probability vectors of one model, stored in f64.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub samples: usize,
    pub classes: usize,
    probs: Vec<f64>,
}

impl PredictionSet {
    pub fn from_probs(samples: usize, classes: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), samples * classes);
        debug_assert!(probs.iter().all(|&p| p >= 0.0));
        PredictionSet {
            samples,
            classes,
            probs,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    fn same_shape(&self, other: &PredictionSet) -> Result<()> {
        if self.samples != other.samples || self.classes != other.classes {
            return Err(MetricsError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.samples, self.classes, other.samples, other.classes
            )));
        }
        Ok(())
    }
}

/// Softmax outputs of a model over a dataset.
pub fn predict_probs<S: Scalar>(params: &ParamSet<S>, dataset: &Dataset<S>) -> Result<PredictionSet> {
    let n = dataset.len();
    let c = params.spec.output_dim();
    let mut probs = Vec::with_capacity(n * c);
    let chunk = 1024;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let x = dataset.features_slice(start, end);
        let p = softmax_rows(&forward(params, None, &x)?);
        probs.extend(p.data().iter().map(|v| v.to_f64()));
        start = end;
    }
    Ok(PredictionSet::from_probs(n, c, probs))
}

/// Fraction of samples where the two argmax predictions differ.
pub fn disagreement(p: &PredictionSet, q: &PredictionSet) -> Result<f64> {
    p.same_shape(q)?;
    let differing = (0..p.samples)
        .filter(|&i| argmax_row(p.row(i)) != argmax_row(q.row(i)))
        .count();
    Ok(differing as f64 / p.samples as f64)
}

fn floored(row: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = row.iter().map(|&p| p.max(PROB_FLOOR)).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum()
}

/// Mean over samples of KL(p || q) in nats.
pub fn kl_divergence(p: &PredictionSet, q: &PredictionSet) -> Result<f64> {
    p.same_shape(q)?;
    let mut total = 0.0;
    for i in 0..p.samples {
        let a = floored(p.row(i));
        let b = floored(q.row(i));
        total += kl_rows(&a, &b);
    }
    Ok(total / p.samples as f64)
}

/// Mean over samples of JS(p, q) in nats; bounded by ln 2.
pub fn js_divergence(p: &PredictionSet, q: &PredictionSet) -> Result<f64> {
    p.same_shape(q)?;
    let mut total = 0.0;
    for i in 0..p.samples {
        let a = floored(p.row(i));
        let b = floored(q.row(i));
        let m: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| 0.5 * (x + y)).collect();
        total += 0.5 * kl_rows(&a, &m) + 0.5 * kl_rows(&b, &m);
    }
    Ok(total / p.samples as f64)
}

/// Accuracy of the probability-averaged ensemble.
pub fn ensemble_accuracy(predictions: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    if predictions.len() < 2 {
        return Err(MetricsError::InsufficientModels {
            need: 2,
            got: predictions.len(),
        });
    }
    for p in &predictions[1..] {
        predictions[0].same_shape(p)?;
    }
    let n = predictions[0].samples;
    let c = predictions[0].classes;
    if labels.len() != n {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            n
        )));
    }
    let mut correct = 0usize;
    let mut avg = vec![0.0_f64; c];
    for i in 0..n {
        avg.iter_mut().for_each(|v| *v = 0.0);
        for p in predictions {
            for (a, &v) in avg.iter_mut().zip(p.row(i)) {
                *a += v;
            }
        }
        if argmax_row(&avg) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Pairwise-mean diversity metrics plus accuracies for one model set.
#[derive(Debug, Clone, Serialize)]
pub struct DiversityReport {
    pub method: String,
    pub model_count: usize,
    pub disagreement: f64,
    pub kl: f64,
    pub js: f64,
    pub per_model_accuracy: Vec<f64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub ensemble_accuracy: f64,
}

/// Compute all diversity metrics for a set of prediction sets against the
/// ground-truth labels. Disagreement and JS average over unordered pairs,
/// KL over ordered pairs.
pub fn diversity_report(
    method: &str,
    predictions: &[PredictionSet],
    labels: &[usize],
) -> Result<DiversityReport> {
    let m = predictions.len();
    if m < 2 {
        return Err(MetricsError::InsufficientModels { need: 2, got: m });
    }
    let mut dis = 0.0;
    let mut js = 0.0;
    let mut unordered = 0usize;
    let mut kl = 0.0;
    let mut ordered = 0usize;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            kl += kl_divergence(&predictions[i], &predictions[j])?;
            ordered += 1;
            if i < j {
                dis += disagreement(&predictions[i], &predictions[j])?;
                js += js_divergence(&predictions[i], &predictions[j])?;
                unordered += 1;
            }
        }
    }
    let per_model_accuracy: Vec<f64> = predictions
        .iter()
        .map(|p| {
            let correct = (0..p.samples)
                .filter(|&i| argmax_row(p.row(i)) == labels[i])
                .count();
            correct as f64 / p.samples as f64
        })
        .collect();
    let mean = per_model_accuracy.iter().sum::<f64>() / m as f64;
    let var = per_model_accuracy
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / m as f64;
    Ok(DiversityReport {
        method: method.to_string(),
        model_count: m,
        disagreement: dis / unordered as f64,
        kl: kl / ordered as f64,
        js: js / unordered as f64,
        per_model_accuracy,
        accuracy_mean: mean,
        accuracy_std: var.sqrt(),
        ensemble_accuracy: ensemble_accuracy(predictions, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pset(rows: &[&[f64]]) -> PredictionSet {
        let samples = rows.len();
        let classes = rows[0].len();
        PredictionSet::from_probs(samples, classes, rows.concat())
    }

    #[test]
    fn disagreement_trivials() {
        let p = pset(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert_eq!(disagreement(&p, &p).unwrap(), 0.0);
        let a = pset(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let b = pset(&[&[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(disagreement(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn disagreement_counts_one_of_three() {
        let a = pset(&[&[0.9, 0.1], &[0.3, 0.7], &[0.6, 0.4]]);
        let b = pset(&[&[0.8, 0.2], &[0.4, 0.6], &[0.2, 0.8]]);
        assert!((disagreement(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kl_known_value() {
        let p = pset(&[&[0.5, 0.5]]);
        let q = pset(&[&[0.25, 0.75]]);
        let expect = 0.5 * (0.5_f64 / 0.25).ln() + 0.5 * (0.5_f64 / 0.75).ln();
        assert!((kl_divergence(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.14384).abs() < 1e-5);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn js_bounded_by_ln2_and_finite_on_onehot() {
        let a = pset(&[&[1.0, 0.0]]);
        let b = pset(&[&[0.0, 1.0]]);
        let js = js_divergence(&a, &b).unwrap();
        assert!(js.is_finite());
        assert!(js <= 2.0_f64.ln() + 1e-12);
        assert!(js > 2.0_f64.ln() - 1e-6); // disjoint supports approach ln 2
        let kl = kl_divergence(&a, &b).unwrap();
        assert!(kl.is_finite() && kl > 0.0);
    }

    #[test]
    fn ensemble_trivials() {
        let p = pset(&[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4]]);
        let labels = [0usize, 1, 0];
        let acc = ensemble_accuracy(&[p.clone(), p.clone()], &labels).unwrap();
        assert_eq!(acc, 1.0);
        let acc2 = ensemble_accuracy(&[p.clone(), p.clone()], &labels).unwrap();
        assert_eq!(acc, acc2);
        assert!(ensemble_accuracy(&[p.clone()], &labels).is_err());
    }

    #[test]
    fn complementary_models_ensemble_perfectly() {
        // Each model is confidently right on its half and mildly wrong on
        // the other; averaged probabilities recover every label.
        let a = pset(&[&[0.99, 0.01], &[0.99, 0.01], &[0.45, 0.55], &[0.45, 0.55]]);
        let b = pset(&[&[0.55, 0.45], &[0.55, 0.45], &[0.01, 0.99], &[0.01, 0.99]]);
        let labels = [0usize, 0, 1, 1];
        assert_eq!(ensemble_accuracy(&[a, b], &labels).unwrap(), 1.0);
    }

    #[test]
    fn identical_model_set_has_zero_diversity() {
        let p = pset(&[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4]]);
        let labels = [0usize, 1, 1];
        let report =
            diversity_report("lth", &[p.clone(), p.clone(), p.clone()], &labels).unwrap();
        assert_eq!(report.disagreement, 0.0);
        assert_eq!(report.kl, 0.0);
        assert_eq!(report.js, 0.0);
        assert_eq!(report.accuracy_std, 0.0);
        assert!((report.ensemble_accuracy - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_aggregation_is_order_invariant() {
        let a = pset(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let b = pset(&[&[0.6, 0.4], &[0.5, 0.5]]);
        let c = pset(&[&[0.1, 0.9], &[0.7, 0.3]]);
        let labels = [0usize, 1];
        let r1 = diversity_report("x", &[a.clone(), b.clone(), c.clone()], &labels).unwrap();
        let r2 = diversity_report("x", &[c, a, b], &labels).unwrap();
        assert!((r1.disagreement - r2.disagreement).abs() < 1e-12);
        assert!((r1.kl - r2.kl).abs() < 1e-12);
        assert!((r1.js - r2.js).abs() < 1e-12);
        assert!((r1.ensemble_accuracy - r2.ensemble_accuracy).abs() < 1e-12);
    }
}
