//! CSV and manifest emission.
//!
//! Schemas:
//!
//! - `results.csv`:   experiment_id, dataset, width, sparsity, rewind_epoch,
//!   method, seed, test_acc, train_acc, final_train_loss, wall_time_s
//! - `barrier.csv`:   pair_id, width, alpha, repaired, metric, train_value,
//!   test_value
//! - `plane.csv`:     grid_x, grid_y, metric, value
//! - `diversity.csv`: method, metric, value
//!
//! Rows are sorted by their key columns before writing, so the files are
//! identical across reruns and worker counts (wall time excepted). The
//! manifest records the plan, its content hash, the crate version, the
//! master seed and per-cell statuses.

use std::path::Path;

use crate::lmc::Metric;
use crate::pipeline::PipelineOutput;
use crate::plan::ExperimentPlan;

#[derive(Debug, thiserror::Error)]
pub enum ResultsError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ResultsError>;

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Loss => "loss",
        Metric::Error => "error",
    }
}

pub fn emit_results(
    output: &PipelineOutput,
    plan: &ExperimentPlan,
    master_seed: u64,
    precision: &str,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let mut w = csv::Writer::from_path(out_dir.join("results.csv"))?;
    w.write_record([
        "experiment_id",
        "dataset",
        "width",
        "sparsity",
        "rewind_epoch",
        "method",
        "seed",
        "test_acc",
        "train_acc",
        "final_train_loss",
        "wall_time_s",
    ])?;
    for r in &output.records {
        w.write_record([
            r.experiment_id.clone(),
            r.dataset.clone(),
            r.width.to_string(),
            r.sparsity.to_string(),
            r.rewind_epoch.to_string(),
            r.method.name().to_string(),
            r.seed.to_string(),
            r.test_acc.to_string(),
            r.train_acc.to_string(),
            r.final_train_loss.to_string(),
            format!("{:.3}", r.wall_time_s),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("barrier.csv"))?;
    w.write_record([
        "pair_id",
        "width",
        "alpha",
        "repaired",
        "metric",
        "train_value",
        "test_value",
    ])?;
    for r in &output.barrier_rows {
        w.write_record([
            r.pair_id.clone(),
            r.width.to_string(),
            r.alpha.to_string(),
            if r.repaired { "1" } else { "0" }.to_string(),
            metric_name(r.metric).to_string(),
            r.train_value.to_string(),
            r.test_value.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("plane.csv"))?;
    w.write_record(["grid_x", "grid_y", "metric", "value"])?;
    for r in &output.plane_rows {
        w.write_record([
            r.grid_x.to_string(),
            r.grid_y.to_string(),
            metric_name(r.metric).to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("diversity.csv"))?;
    w.write_record(["method", "metric", "value"])?;
    for report in &output.diversity {
        for (metric, value) in [
            ("test_acc_mean", report.accuracy_mean),
            ("test_acc_std", report.accuracy_std),
            ("ensemble_acc", report.ensemble_accuracy),
            ("disagreement", report.disagreement),
            ("kl", report.kl),
            ("js", report.js),
        ] {
            w.write_record([report.method.clone(), metric.to_string(), value.to_string()])?;
        }
    }
    w.flush()?;

    let manifest = serde_json::json!({
        "crate_version": env!("CARGO_PKG_VERSION"),
        "config_hash": plan.config_hash(),
        "master_seed": master_seed,
        "precision": precision,
        "kl_direction": "mean over ordered pairs, not symmetrized",
        "plan": plan,
        "cells": output.statuses,
    });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}
