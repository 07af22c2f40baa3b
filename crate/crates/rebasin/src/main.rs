//! Command-line harness around the library: single-stage subcommands plus
//! the full sweep pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rebasin::align::{
    apply_permutation_mask, apply_permutation_params, collect_activations, match_activations,
    PermutationMap,
};
use rebasin::checkpoint::{load_checkpoint, save_checkpoint};
use rebasin::engine::init_params;
use rebasin::lmc::{barrier, plane_eval, Metric, Split};
use rebasin::pipeline::{pipeline, PipelineOutput};
use rebasin::plan::ExperimentPlan;
use rebasin::prune::{imp, PruneConfig};
use rebasin::results::emit_results;
use rebasin::rng::derive_seed;
use rebasin::scalar::Scalar;
use rebasin::train::{train, Checkpoint, TrainInit};

#[derive(Parser)]
#[command(
    name = "rebasin",
    about = "Lottery-ticket mask transfer via weight-space permutation alignment",
    version
)]
struct Cli {
    /// Experiment plan (TOML). Omit to use built-in desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, CSVs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed; all per-cell streams derive from it.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (0 = all available cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense model, saving the final and rewind checkpoints.
    Train,
    /// Iterative magnitude pruning from a rewind checkpoint.
    Imp {
        /// Rewind checkpoint produced by `train`.
        #[arg(long)]
        rewind: PathBuf,
        /// Target sparsity; defaults to the plan's first sweep sparsity.
        #[arg(long)]
        sparsity: Option<f64>,
    },
    /// Activation-match two trained models and write the permutation map.
    Match {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
    },
    /// Apply a permutation map to a checkpoint's parameters and mask.
    Permute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        perm: PathBuf,
        /// Apply the inverse map instead.
        #[arg(long)]
        invert: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sparse-train from an init checkpoint with a mask taken from another
    /// checkpoint.
    SparseTrain {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        mask_from: PathBuf,
    },
    /// Interpolation barrier between two checkpoints.
    Barrier {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        /// Permutation map applied to model A before interpolation.
        #[arg(long)]
        perm: Option<PathBuf>,
        #[arg(long)]
        repair: bool,
    },
    /// 2-d loss plane spanned by three checkpoints.
    Plane {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        ckpt_c: PathBuf,
    },
    /// Ensemble-diversity protocol across the four training methods.
    Diversity,
    /// Full sweep: dense pairs, IMP, matching, sparse cells, barriers.
    Pipeline,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = if cli.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cli.threads
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .expect("rayon pool");

    let result = match cli.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    if let Err(e) = result {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}

fn load_plan(cli: &Cli) -> Result<ExperimentPlan> {
    match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Ok(ExperimentPlan::from_toml(&text)?)
        }
        None => Ok(ExperimentPlan::default()),
    }
}

fn run<S: Scalar>(cli: &Cli) -> Result<()> {
    let plan = load_plan(cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out)?;
    let (train_set, test_set) = plan.dataset.load::<S>()?;

    match &cli.command {
        Command::Train => {
            let width = plan.model.widths[0];
            let spec = plan.model.spec(train_set.dim(), train_set.class_count, width)?;
            let init = init_params::<S>(&spec, derive_seed(cli.seed, "init-a", &[width as u64, 0]));
            let mut rewinds = plan.sweep.rewind_epochs.clone();
            rewinds.push(plan.prune.rewind_epoch);
            rewinds.sort_unstable();
            rewinds.dedup();
            let config = plan.train.config(
                plan.train.dense_lr,
                derive_seed(cli.seed, "order-a", &[width as u64, 0]),
                rewinds,
            );
            let outcome = train(TrainInit::Params(&init), None, &config, &train_set, &test_set)?;
            save_checkpoint(&outcome.final_checkpoint, &out.join("dense-final.sprb"))?;
            for ck in &outcome.rewinds {
                save_checkpoint(ck, &out.join(format!("dense-k{}.sprb", ck.epoch)))?;
            }
            std::fs::write(
                out.join("train-report.json"),
                serde_json::to_string_pretty(&outcome.report)?,
            )?;
            println!(
                "dense model: train acc {:.4}, test acc {:.4} ({} epochs)",
                outcome.report.train_accuracy.last().copied().unwrap_or(f64::NAN),
                outcome.report.test_accuracy,
                config.epochs
            );
        }
        Command::Imp { rewind, sparsity } => {
            let rewind: Checkpoint<S> = load_checkpoint(rewind)?;
            let target = sparsity
                .or_else(|| plan.sweep.sparsities.first().copied())
                .context("no target sparsity given and the plan sweep is empty")?;
            let prune_config = PruneConfig {
                target_sparsity: target,
                per_round_fraction: plan.prune.per_round_fraction,
                train_epochs_per_prune: plan.prune.train_epochs_per_prune,
                prune_lr: plan.prune.prune_lr,
            };
            let config = plan.train.config(plan.train.dense_lr, rewind.seed, vec![]);
            let outcome = imp(&rewind, (&train_set, &test_set), &prune_config, &config)?;
            for entry in &outcome.sequence.entries {
                let ck = Checkpoint {
                    params: entry.solution.clone(),
                    epoch: rewind.epoch + plan.prune.train_epochs_per_prune,
                    seed: rewind.seed,
                    rng_counter: (rewind.epoch + plan.prune.train_epochs_per_prune) as u64,
                    mask: Some(entry.mask.clone()),
                    velocity: None,
                };
                save_checkpoint(&ck, &out.join(format!("imp-iter{:02}.sprb", entry.iteration)))?;
            }
            let last = outcome.sequence.entries.last().context("empty IMP sequence")?;
            save_checkpoint(
                &Checkpoint {
                    params: last.solution.clone(),
                    epoch: rewind.epoch + plan.prune.train_epochs_per_prune,
                    seed: rewind.seed,
                    rng_counter: (rewind.epoch + plan.prune.train_epochs_per_prune) as u64,
                    mask: Some(outcome.final_mask.clone()),
                    velocity: None,
                },
                &out.join("imp-final.sprb"),
            )?;
            println!(
                "imp: {} iterations, final sparsity {:.6}",
                outcome.sequence.entries.len(),
                outcome.final_mask.sparsity()
            );
        }
        Command::Match { ckpt_a, ckpt_b } => {
            let a: Checkpoint<S> = load_checkpoint(ckpt_a)?;
            let b: Checkpoint<S> = load_checkpoint(ckpt_b)?;
            if a.params.spec != b.params.spec {
                bail!("models have different specs");
            }
            let seed = derive_seed(cli.seed, "match-sample", &[]);
            let acts_a =
                collect_activations(&a.params, &train_set, plan.matching.sample_count, seed)?;
            let acts_b =
                collect_activations(&b.params, &train_set, plan.matching.sample_count, seed)?;
            let perm = match_activations(&a.params.spec, &acts_a, &acts_b, plan.matching.center)?;
            let path = out.join("perm.json");
            std::fs::write(&path, perm.to_json())?;
            println!("wrote {}", path.display());
        }
        Command::Permute {
            ckpt,
            perm,
            invert,
            output,
        } => {
            let mut ck: Checkpoint<S> = load_checkpoint(ckpt)?;
            let mut map = PermutationMap::from_json(&std::fs::read_to_string(perm)?)?;
            if *invert {
                map = map.invert();
            }
            ck.params = apply_permutation_params(&ck.params, &map)?;
            if let Some(mask) = &ck.mask {
                ck.mask = Some(apply_permutation_mask(mask, &map)?);
            }
            ck.velocity = None;
            save_checkpoint(&ck, output)?;
            println!("wrote {}", output.display());
        }
        Command::SparseTrain { init, mask_from } => {
            let init_ck: Checkpoint<S> = load_checkpoint(init)?;
            let mask_ck: Checkpoint<S> = load_checkpoint(mask_from)?;
            let mask = mask_ck.mask.context("mask checkpoint carries no mask")?;
            let config = plan.train.config(plan.train.sparse_lr, init_ck.seed, vec![]);
            let outcome = train(
                TrainInit::Checkpoint(&init_ck),
                Some(&mask),
                &config,
                &train_set,
                &test_set,
            )?;
            save_checkpoint(&outcome.final_checkpoint, &out.join("sparse-final.sprb"))?;
            println!(
                "sparse model: sparsity {:.4}, test acc {:.4}",
                mask.sparsity(),
                outcome.report.test_accuracy
            );
        }
        Command::Barrier {
            ckpt_a,
            ckpt_b,
            perm,
            repair,
        } => {
            let a: Checkpoint<S> = load_checkpoint(ckpt_a)?;
            let b: Checkpoint<S> = load_checkpoint(ckpt_b)?;
            let mut theta_a = a.params;
            if let Some(p) = perm {
                let map = PermutationMap::from_json(&std::fs::read_to_string(p)?)?;
                theta_a = apply_permutation_params(&theta_a, &map)?;
            }
            let curve = barrier(
                &theta_a,
                &b.params,
                &train_set,
                &test_set,
                plan.barrier.grid_size,
                *repair,
                None,
            )?;
            let mut w = csv::Writer::from_path(out.join("barrier.csv"))?;
            w.write_record(["alpha", "repaired", "metric", "train_value", "test_value"])?;
            for (i, &alpha) in curve.alphas.iter().enumerate() {
                for (metric, tr, te) in [
                    ("loss", curve.train[i].loss, curve.test[i].loss),
                    ("error", curve.train[i].error, curve.test[i].error),
                ] {
                    w.write_record([
                        alpha.to_string(),
                        if curve.repaired { "1" } else { "0" }.into(),
                        metric.into(),
                        tr.to_string(),
                        te.to_string(),
                    ])?;
                }
            }
            w.flush()?;
            println!(
                "test-loss barrier {:.6}, test-error barrier {:.6}",
                curve.barrier(Metric::Loss, Split::Test),
                curve.barrier(Metric::Error, Split::Test)
            );
        }
        Command::Plane {
            ckpt_a,
            ckpt_b,
            ckpt_c,
        } => {
            let a: Checkpoint<S> = load_checkpoint(ckpt_a)?;
            let b: Checkpoint<S> = load_checkpoint(ckpt_b)?;
            let c: Checkpoint<S> = load_checkpoint(ckpt_c)?;
            let grid = plane_eval(
                &a.params,
                &b.params,
                &c.params,
                plan.plane.resolution,
                plan.plane.margin,
                &test_set,
            )?;
            let mut w = csv::Writer::from_path(out.join("plane.csv"))?;
            w.write_record(["grid_x", "grid_y", "metric", "value"])?;
            for (yi, &y) in grid.ys.iter().enumerate() {
                for (xi, &x) in grid.xs.iter().enumerate() {
                    let idx = yi * grid.xs.len() + xi;
                    for (metric, v) in [("loss", grid.loss[idx]), ("error", grid.error[idx])] {
                        w.write_record([
                            x.to_string(),
                            y.to_string(),
                            metric.into(),
                            v.to_string(),
                        ])?;
                    }
                }
            }
            w.flush()?;
            println!("plane grid {}x{} written", grid.xs.len(), grid.ys.len());
        }
        Command::Diversity => {
            let reports =
                rebasin::pipeline::diversity_protocol::<S>(&plan, cli.seed, &train_set, &test_set)?;
            let output = PipelineOutput {
                records: vec![],
                barrier_rows: vec![],
                plane_rows: vec![],
                diversity: reports,
                statuses: vec![],
            };
            emit_results(&output, &plan, cli.seed, precision_name::<S>(), out)?;
            for r in &output.diversity {
                println!(
                    "{}: acc {:.4} +/- {:.4}, ensemble {:.4}, disagreement {:.4}, kl {:.4}, js {:.4}",
                    r.method, r.accuracy_mean, r.accuracy_std, r.ensemble_accuracy,
                    r.disagreement, r.kl, r.js
                );
            }
        }
        Command::Pipeline => {
            let output = pipeline::<S>(&plan, cli.seed, out)?;
            emit_results(&output, &plan, cli.seed, precision_name::<S>(), out)?;
            let failed = output
                .statuses
                .iter()
                .filter(|s| s.status.starts_with("failed"))
                .count();
            println!(
                "pipeline: {} result rows, {} barrier rows, {} cells failed",
                output.records.len(),
                output.barrier_rows.len(),
                failed
            );
            if failed > 0 {
                bail!("{} cells failed; see manifest.json", failed);
            }
        }
    }
    Ok(())
}

fn precision_name<S: Scalar>() -> &'static str {
    S::DTYPE.name()
}
