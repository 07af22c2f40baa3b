//! Acceptance suite: exact property checks plus desk-scale directional
//! reproductions. Each test prints one `[PASS]`/`[FAIL]` line (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use rebasin::align::{
    apply_permutation_mask, apply_permutation_params, collect_activations, hungarian,
    match_activations, random_inputs, PermutationMap,
};
use rebasin::checkpoint::{from_bytes, to_bytes};
use rebasin::data::{make_blobs, Dataset};
use rebasin::engine::{
    backward, cross_entropy, evaluate, forward, init_params, Mask, ModelSpec, ParamSet,
};
use rebasin::lmc::{barrier, barrier_vs_imp_iteration, Metric, Split};
use rebasin::metrics::{
    disagreement, js_divergence, kl_divergence, PredictionSet,
};
use rebasin::pipeline::{diversity_protocol, pipeline};
use rebasin::plan::{DatasetKind, ExperimentPlan, Method};
use rebasin::prune::{global_magnitude_mask, imp, PruneConfig};
use rebasin::rng::{chacha, derive_seed, uniform_index};
use rebasin::scalar::Scalar;
use rebasin::tensor::Tensor;
use rebasin::train::{train, Checkpoint, LrSchedule, TrainConfig, TrainInit};

fn report(criterion: &str, pass: bool, details: &str) {
    println!(
        "[{}] {}: {}",
        if pass { "PASS" } else { "FAIL" },
        criterion,
        details
    );
    assert!(pass, "{}: {}", criterion, details);
}

fn random_spec(rng: &mut rand_chacha::ChaCha8Rng) -> ModelSpec {
    let hidden_layers = 1 + uniform_index(rng, 3);
    let mut sizes = vec![2 + uniform_index(rng, 15)];
    for _ in 0..hidden_layers {
        sizes.push(2 + uniform_index(rng, 38));
    }
    sizes.push(2 + uniform_index(rng, 9));
    ModelSpec::new(sizes, 1).unwrap()
}

fn max_output_deviation<S: Scalar>(trials: usize, seed_base: u64) -> f64 {
    let mut worst = 0.0_f64;
    for t in 0..trials {
        let mut rng = chacha(derive_seed(seed_base, "c1", &[t as u64]));
        let spec = random_spec(&mut rng);
        let params: ParamSet<S> = init_params(&spec, derive_seed(seed_base, "c1p", &[t as u64]));
        let map = PermutationMap::random(&spec, derive_seed(seed_base, "c1m", &[t as u64]));
        let permuted = apply_permutation_params(&params, &map).unwrap();
        let x = random_inputs::<S>(128, spec.input_dim(), derive_seed(seed_base, "c1x", &[t as u64]));
        let y0 = forward(&params, None, &x).unwrap();
        let y1 = forward(&permuted, None, &x).unwrap();
        for (a, b) in y0.data().iter().zip(y1.data()) {
            worst = worst.max((a.to_f64() - b.to_f64()).abs());
        }
    }
    worst
}

#[test]
fn criterion_01_permutation_functional_equivalence() {
    let start = Instant::now();
    let dev32 = max_output_deviation::<f32>(100, 0xC1);
    let dev64 = max_output_deviation::<f64>(100, 0xC2);
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 1 permutation-equivalence",
        dev32 <= 1e-5 && dev64 <= 1e-10 && elapsed < 10.0,
        &format!(
            "max deviation f32 {:.2e} (tol 1e-5), f64 {:.2e} (tol 1e-10), {:.1}s",
            dev32, dev64, elapsed
        ),
    );
}

fn brute_force_best(cost: &Tensor<f64>, maximize: bool) -> f64 {
    fn visit(cost: &Tensor<f64>, cols: &mut Vec<usize>, k: usize, best: &mut f64, maximize: bool) {
        let n = cols.len();
        if k == n {
            let s: f64 = cols.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
            if (maximize && s > *best) || (!maximize && s < *best) {
                *best = s;
            }
            return;
        }
        for i in k..n {
            cols.swap(k, i);
            visit(cost, cols, k + 1, best, maximize);
            cols.swap(k, i);
        }
    }
    let mut cols: Vec<usize> = (0..cost.rows()).collect();
    let mut best = if maximize { f64::NEG_INFINITY } else { f64::INFINITY };
    visit(cost, &mut cols, 0, &mut best, maximize);
    best
}

#[test]
fn criterion_02_hungarian_optimality() {
    let start = Instant::now();
    let mut checked = 0usize;
    for d in 2..=7usize {
        for trial in 0..200u64 {
            let mut rng = chacha(derive_seed(0xC3, "hungarian", &[d as u64, trial]));
            let data: Vec<f64> = (0..d * d)
                .map(|_| uniform_index(&mut rng, 1_000_000) as f64 / 1000.0)
                .collect();
            let cost = Tensor::from_vec(vec![d, d], data);
            let (_, obj) = hungarian(&cost, true).unwrap();
            let expect = brute_force_best(&cost, true);
            assert_eq!(obj, expect, "d = {}, trial {}", d, trial);
            checked += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 2 hungarian-optimality",
        checked == 1200 && elapsed < 30.0,
        &format!("{} assignments equal exhaustive optimum, {:.1}s", checked, elapsed),
    );
}

#[test]
fn criterion_03_self_recovery() {
    let start = Instant::now();
    let spec = ModelSpec::new(vec![16, 64, 64, 10], 1).unwrap();
    let ds: Dataset<f64> = make_blobs(0xC4, 512, 8, 16, 0.4).unwrap();
    let mut recovered = 0usize;
    for trial in 0..20u64 {
        let params: ParamSet<f64> = init_params(&spec, derive_seed(0xC5, "net", &[trial]));
        let map = PermutationMap::random(&spec, derive_seed(0xC5, "perm", &[trial]));
        let permuted = apply_permutation_params(&params, &map).unwrap();
        let seed = derive_seed(0xC5, "acts", &[trial]);
        let acts_a = collect_activations(&params, &ds, 512, seed).unwrap();
        let acts_b = collect_activations(&permuted, &ds, 512, seed).unwrap();
        let found = match_activations(&spec, &acts_a, &acts_b, false).unwrap();
        if found == map {
            recovered += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 3 self-recovery",
        recovered == 20 && elapsed < 60.0,
        &format!("{}/20 permutations recovered exactly, {:.1}s", recovered, elapsed),
    );
}

#[test]
fn criterion_04_gradient_check() {
    let start = Instant::now();
    let mut worst_rel = 0.0_f64;
    for trial in 0..20u64 {
        let mut rng = chacha(derive_seed(0xC6, "spec", &[trial]));
        let hidden = 3 + uniform_index(&mut rng, 6);
        let d_in = 2 + uniform_index(&mut rng, 5);
        let classes = 2 + uniform_index(&mut rng, 4);
        let spec = ModelSpec::new(vec![d_in, hidden, hidden, classes], 1).unwrap();
        // Central differences are only a valid oracle away from the ReLU
        // kinks: resample until no hidden pre-activation sits within 1e-3
        // of zero (the 1e-5 probe step moves each z by far less).
        let (params, x) = (0..)
            .map(|attempt| {
                let p: ParamSet<f64> =
                    init_params(&spec, derive_seed(0xC6, "p", &[trial, attempt]));
                let x =
                    random_inputs::<f64>(6, d_in, derive_seed(0xC6, "x", &[trial, attempt]));
                (p, x)
            })
            .find(|(p, x)| {
                rebasin::engine::forward_preactivations(p, None, x)
                    .unwrap()
                    .iter()
                    .all(|z| z.data().iter().all(|v| v.abs() > 1e-3))
            })
            .unwrap();
        let n = 6;
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                let mut r = chacha(derive_seed(0xC6, "y", &[trial, i as u64]));
                uniform_index(&mut r, classes)
            })
            .collect();
        let grads = backward(&params, None, &x, &labels).unwrap();
        let h = 1e-5;
        let mut probe = |get: &dyn Fn(&ParamSet<f64>) -> f64,
                         set: &dyn Fn(&mut ParamSet<f64>, f64),
                         analytic: f64| {
            let base = get(&params);
            let mut plus = params.clone();
            set(&mut plus, base + h);
            let mut minus = params.clone();
            set(&mut minus, base - h);
            let lp: f64 = cross_entropy(&forward(&plus, None, &x).unwrap(), &labels).unwrap();
            let lm: f64 = cross_entropy(&forward(&minus, None, &x).unwrap(), &labels).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-5);
            worst_rel = worst_rel.max(rel);
        };
        for l in 0..params.num_layers() {
            for idx in 0..params.weights[l].len() {
                probe(
                    &|p| p.weights[l].data()[idx],
                    &|p, v| p.weights[l].data_mut()[idx] = v,
                    grads.weights[l].data()[idx],
                );
            }
            for idx in 0..params.biases[l].len() {
                probe(
                    &|p| p.biases[l].data()[idx],
                    &|p, v| p.biases[l].data_mut()[idx] = v,
                    grads.biases[l].data()[idx],
                );
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 4 gradient-check",
        worst_rel <= 1e-4 && elapsed < 60.0,
        &format!(
            "worst per-coordinate relative error {:.2e} (tol 1e-4), {:.1}s",
            worst_rel, elapsed
        ),
    );
}

#[test]
fn criterion_05_barrier_identities() {
    let spec = ModelSpec::new(vec![8, 24, 24, 5], 1).unwrap();
    let train_set: Dataset<f64> = make_blobs(0xC7, 300, 5, 8, 0.35).unwrap();
    let test_set: Dataset<f64> = make_blobs(0xC8, 100, 5, 8, 0.35).unwrap();
    let a: ParamSet<f64> = init_params(&spec, 1);
    let b: ParamSet<f64> = init_params(&spec, 2);

    let self_curve = barrier(&a, &a, &train_set, &test_set, 9, false, None).unwrap();
    let self_zero = [
        (Metric::Loss, Split::Train),
        (Metric::Loss, Split::Test),
        (Metric::Error, Split::Train),
        (Metric::Error, Split::Test),
    ]
    .iter()
    .all(|&(m, s)| self_curve.barrier(m, s) == 0.0);

    let curve = barrier(&a, &b, &train_set, &test_set, 9, false, None).unwrap();
    let endpoints_exact = curve.train[0] == evaluate(&a, None, &train_set).unwrap()
        && curve.train[8] == evaluate(&b, None, &train_set).unwrap()
        && curve.test[0] == evaluate(&a, None, &test_set).unwrap()
        && curve.test[8] == evaluate(&b, None, &test_set).unwrap();

    let reverse = barrier(&b, &a, &train_set, &test_set, 9, false, None).unwrap();
    let mut max_asym = 0.0_f64;
    for (m, s) in [
        (Metric::Loss, Split::Train),
        (Metric::Loss, Split::Test),
        (Metric::Error, Split::Train),
        (Metric::Error, Split::Test),
    ] {
        max_asym = max_asym.max((curve.barrier(m, s) - reverse.barrier(m, s)).abs());
    }

    report(
        "criterion 5 barrier-identities",
        self_zero && endpoints_exact && max_asym <= 1e-6,
        &format!(
            "B(theta,theta) = 0 exactly: {}, endpoints exact: {}, max asymmetry {:.2e} (tol 1e-6)",
            self_zero, endpoints_exact, max_asym
        ),
    );
}

#[test]
fn criterion_06_imp_exactness() {
    let spec = ModelSpec::new(vec![8, 24, 24, 4], 1).unwrap();
    let train_set: Dataset<f64> = make_blobs(0xC9, 128, 4, 8, 0.3).unwrap();
    let test_set: Dataset<f64> = make_blobs(0xCA, 64, 4, 8, 0.3).unwrap();
    let config = TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        epochs: 2,
        batch_size: 32,
        seed: 3,
        rewind_epochs: vec![1],
        lr_schedule: LrSchedule::Constant,
    };
    let init = init_params::<f64>(&spec, 4);
    let dense = train(TrainInit::Params(&init), None, &config, &train_set, &test_set).unwrap();
    let rewind = &dense.rewinds[0];

    let mut all_exact = true;
    let mut all_monotone = true;
    let mut details = String::new();
    for &target in &[0.8, 0.9, 0.95, 0.97] {
        let pc = PruneConfig {
            target_sparsity: target,
            per_round_fraction: 0.2,
            train_epochs_per_prune: 1,
            prune_lr: 0.01,
        };
        let out = imp(rewind, (&train_set, &test_set), &pc, &config).unwrap();
        let total = out.final_mask.total() as f64;
        let err = (out.final_mask.sparsity() - target).abs();
        all_exact &= err <= 1.0 / total;
        details.push_str(&format!("S={}: |err| = {:.2e}; ", target, err));
        for pair in out.sequence.entries.windows(2) {
            all_monotone &= pair[1].sparsity > pair[0].sparsity;
            for (ma, mb) in pair[0].mask.layers.iter().zip(&pair[1].mask.layers) {
                all_monotone &= ma.data().iter().zip(mb.data()).all(|(&a, &b)| b <= a);
            }
        }
    }

    // Global pooling equals one flat sort over all layers.
    let params: ParamSet<f64> = init_params(&spec, 9);
    let mask = global_magnitude_mask(&params, &Mask::ones(&spec), 0.37).unwrap();
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (l, w) in params.weights.iter().enumerate() {
        for (i, &v) in w.data().iter().enumerate() {
            flat.push((v.abs(), l, i));
        }
    }
    flat.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let drop = (0.37 * flat.len() as f64).floor() as usize;
    let pooling_ok = flat
        .iter()
        .enumerate()
        .all(|(rank, &(_, l, i))| (mask.layers[l].data()[i] == 1) == (rank >= drop));

    report(
        "criterion 6 imp-exactness",
        all_exact && all_monotone && pooling_ok,
        &format!(
            "{}monotone: {}, flat-sort oracle: {}",
            details, all_monotone, pooling_ok
        ),
    );
}

#[test]
fn criterion_07_metric_bounds() {
    let mut rng = chacha(0xCB);
    let mut ok = true;
    for _ in 0..1000 {
        let c = 2 + uniform_index(&mut rng, 9);
        let sample = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            // Mix of soft vectors and near-one-hot spikes.
            let mut v: Vec<f64> = (0..c)
                .map(|_| (uniform_index(rng, 1000) as f64 / 200.0).exp())
                .collect();
            if uniform_index(rng, 5) == 0 {
                let hot = uniform_index(rng, c);
                for (i, x) in v.iter_mut().enumerate() {
                    *x = if i == hot { 1.0 } else { 0.0 };
                }
            }
            let s: f64 = v.iter().sum();
            if s > 0.0 {
                for x in &mut v {
                    *x /= s;
                }
            }
            v
        };
        let p = PredictionSet::from_probs(1, c, sample(&mut rng));
        let q = PredictionSet::from_probs(1, c, sample(&mut rng));
        let kl = kl_divergence(&p, &q).unwrap();
        let js = js_divergence(&p, &q).unwrap();
        let dis = disagreement(&p, &q).unwrap();
        ok &= kl >= 0.0 && kl.is_finite();
        ok &= (0.0..=2.0_f64.ln() + 1e-12).contains(&js);
        ok &= (0.0..=1.0).contains(&dis);
    }
    let p = PredictionSet::from_probs(1, 2, vec![0.5, 0.5]);
    let q = PredictionSet::from_probs(1, 2, vec![0.25, 0.75]);
    let kl = kl_divergence(&p, &q).unwrap();
    let frozen = (kl - 0.14384).abs() <= 1e-5;
    report(
        "criterion 7 metric-bounds",
        ok && frozen,
        &format!(
            "1000 random pairs within bounds: {}, KL((.5,.5),(.25,.75)) = {:.6} (0.14384 +/- 1e-5)",
            ok, kl
        ),
    );
}

fn tiny_plan() -> ExperimentPlan {
    ExperimentPlan::from_toml(
        r#"
[dataset]
train_n = 600
test_n = 200
classes = 10
dim = 16
spread = 0.3

[model]
hidden = [16, 16]
widths = [1]

[train]
epochs = 3
batch_size = 64

[prune]
train_epochs_per_prune = 1
rewind_epoch = 1

[sweep]
sparsities = [0.5]
rewind_epochs = [0, 1]
seed_pairs = 1

[matching]
sample_count = 128

[barrier]
grid_size = 5
eval_train_subset = 200

[plane]
enabled = true
resolution = 5
"#,
    )
    .unwrap()
}

fn read_csv_without_walltime(path: &std::path::Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            cols[..cols.len() - 1].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_08_persistence_and_determinism() {
    // Bitwise checkpoint round-trip, both precisions.
    let spec = ModelSpec::new(vec![6, 12, 4], 1).unwrap();
    let mut mask = Mask::ones(&spec);
    *mask.layers[0].at_mut(2, 3) = 0;
    let ck32 = Checkpoint::<f32> {
        params: init_params(&spec, 8),
        epoch: 3,
        seed: 9,
        rng_counter: 3,
        mask: Some(mask.clone()),
        velocity: None,
    };
    let bytes = to_bytes(&ck32).unwrap();
    let round: Checkpoint<f32> = from_bytes(&bytes).unwrap();
    let bytes2 = to_bytes(&round).unwrap();
    let roundtrip_ok = round == ck32 && bytes == bytes2;

    // Identical results at different worker counts and across reruns.
    let plan = tiny_plan();
    let run = |threads: usize, dir: &std::path::Path| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let output = pool.install(|| pipeline::<f32>(&plan, 77, dir).unwrap());
        rebasin::results::emit_results(&output, &plan, 77, "f32", dir).unwrap();
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let d3 = tempfile::tempdir().unwrap();
    run(1, d1.path());
    run(4, d2.path());
    run(1, d3.path());
    let r1 = read_csv_without_walltime(&d1.path().join("results.csv"));
    let r2 = read_csv_without_walltime(&d2.path().join("results.csv"));
    let r3 = read_csv_without_walltime(&d3.path().join("results.csv"));
    let b1 = std::fs::read_to_string(d1.path().join("barrier.csv")).unwrap();
    let b2 = std::fs::read_to_string(d2.path().join("barrier.csv")).unwrap();
    let deterministic = r1 == r2 && r1 == r3 && b1 == b2 && !r1.is_empty();

    report(
        "criterion 8 persistence-and-determinism",
        roundtrip_ok && deterministic,
        &format!(
            "checkpoint round-trip bitwise: {}, results identical at 1 vs 4 threads and rerun: {}",
            roundtrip_ok, deterministic
        ),
    );
}

/// Desk model: 64 -> 512x3 -> 10 via base 128 and width multiplier 4.
fn desk_spec(train_set: &Dataset<f32>, width: usize) -> ModelSpec {
    ModelSpec::new(
        vec![train_set.dim(), 128, 128, 128, train_set.class_count],
        width,
    )
    .unwrap()
}

fn desk_blobs() -> (Dataset<f32>, Dataset<f32>) {
    let mut plan = ExperimentPlan::default();
    plan.dataset.kind = DatasetKind::Blobs;
    plan.dataset.load::<f32>().unwrap()
}

fn desk_spirals() -> (Dataset<f32>, Dataset<f32>) {
    let mut plan = ExperimentPlan::default();
    plan.dataset.kind = DatasetKind::Spirals;
    plan.dataset.load::<f32>().unwrap()
}

fn dense_config(seed: u64, epochs: usize, rewinds: Vec<usize>) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        epochs,
        batch_size: 128,
        seed,
        rewind_epochs: rewinds,
        lr_schedule: LrSchedule::Constant,
    }
}

#[test]
fn criterion_09_barrier_reduction_and_width_trend() {
    use rayon::prelude::*;
    let start = Instant::now();
    let (train_set, test_set) = desk_blobs();
    let eval_train = train_set.subsample(2000, 0xD0);
    let calibration = train_set.subsample(2048, 0xD1);

    let widths = [1usize, 4, 16];
    let cells: Vec<(usize, usize)> = widths
        .iter()
        .flat_map(|&w| (0..3usize).map(move |p| (w, p)))
        .collect();
    let results: Vec<(usize, usize, f64, f64)> = cells
        .par_iter()
        .map(|&(w, p)| {
            let spec = desk_spec(&train_set, w);
            let seed = |tag: &str| derive_seed(0xD2, tag, &[w as u64, p as u64]);
            let config_a = dense_config(seed("order-a"), 10, vec![]);
            let config_b = dense_config(seed("order-b"), 10, vec![]);
            let a = train(
                TrainInit::Params(&init_params::<f32>(&spec, seed("init-a"))),
                None,
                &config_a,
                &train_set,
                &test_set,
            )
            .unwrap()
            .final_checkpoint
            .params;
            let b = train(
                TrainInit::Params(&init_params::<f32>(&spec, seed("init-b"))),
                None,
                &config_b,
                &train_set,
                &test_set,
            )
            .unwrap()
            .final_checkpoint
            .params;

            let naive = barrier(&a, &b, &eval_train, &test_set, 13, false, None)
                .unwrap()
                .barrier(Metric::Loss, Split::Test);

            let match_seed = seed("match");
            let acts_a = collect_activations(&a, &train_set, 2048, match_seed).unwrap();
            let acts_b = collect_activations(&b, &train_set, 2048, match_seed).unwrap();
            let perm = match_activations(&spec, &acts_a, &acts_b, false).unwrap();
            let a_matched = apply_permutation_params(&a, &perm).unwrap();
            let repaired = barrier(
                &a_matched,
                &b,
                &eval_train,
                &test_set,
                13,
                true,
                Some(&calibration),
            )
            .unwrap()
            .barrier(Metric::Loss, Split::Test);
            (w, p, naive, repaired)
        })
        .collect();

    let halved = results.iter().all(|&(_, _, naive, repaired)| repaired <= 0.5 * naive);

    let mut means = Vec::new();
    let mut stds = Vec::new();
    for &w in &widths {
        let vals: Vec<f64> = results
            .iter()
            .filter(|r| r.0 == w)
            .map(|r| r.3)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        means.push(mean);
        stds.push(var);
    }
    let pooled = (stds.iter().sum::<f64>() / stds.len() as f64).sqrt();
    let trend = means[1] <= means[0] + pooled && means[2] <= means[1] + pooled;

    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 9 barrier-reduction",
        halved && trend,
        &format!(
            "repaired <= 50% of naive on all 9 pairs: {}; mean repaired barrier by width {:?} = [{:.4}, {:.4}, {:.4}], pooled std {:.4}, non-increasing: {}; {:.0}s",
            halved, widths, means[0], means[1], means[2], pooled, trend, elapsed
        ),
    );
}

#[test]
fn criterion_10_mask_transfer() {
    let start = Instant::now();
    let mut plan = ExperimentPlan::default();
    plan.dataset.kind = DatasetKind::Spirals;
    plan.train.epochs = 40;
    plan.prune.train_epochs_per_prune = 8;
    plan.sweep.sparsities = vec![0.9];
    plan.sweep.rewind_epochs = vec![2, 10];
    plan.sweep.seed_pairs = 3;
    plan.barrier.grid_size = 5;
    plan.barrier.eval_train_subset = 500;
    plan.barrier.repair = false;

    let dir = tempfile::tempdir().unwrap();
    let output = pipeline::<f32>(&plan, 0xD3, dir.path()).unwrap();

    let acc = |method: Method, k: usize, pair: u64| -> f64 {
        output
            .records
            .iter()
            .find(|r| r.method == method && r.rewind_epoch == k && r.seed == pair)
            .map(|r| r.test_acc)
            .unwrap()
    };
    let mean_at = |method: Method, k: usize| -> f64 {
        (0..3).map(|p| acc(method, k, p)).sum::<f64>() / 3.0
    };
    let best_k = |method: Method| -> usize {
        *[2usize, 10]
            .iter()
            .max_by(|&&a, &&b| mean_at(method, a).partial_cmp(&mean_at(method, b)).unwrap())
            .unwrap()
    };

    let k_lth = best_k(Method::Lth);
    let k_naive = best_k(Method::Naive);
    let k_perm = best_k(Method::Permuted);
    let each_pair = (0..3).all(|p| acc(Method::Permuted, k_perm, p) > acc(Method::Naive, k_naive, p));
    let mean_gap = mean_at(Method::Permuted, k_perm) - mean_at(Method::Naive, k_naive);
    let lth_on_top = mean_at(Method::Lth, k_lth) >= mean_at(Method::Permuted, k_perm);

    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 10 mask-transfer",
        each_pair && mean_gap >= 0.005 && lth_on_top,
        &format!(
            "best k (lth/naive/permuted) = ({}, {}, {}); permuted > naive on all pairs: {}; mean gap {:.2} points (need >= 0.5); lth {:.2}% >= permuted {:.2}%: {}; {:.0}s",
            k_lth, k_naive, k_perm, each_pair, mean_gap * 100.0,
            mean_at(Method::Lth, k_lth) * 100.0,
            mean_at(Method::Permuted, k_perm) * 100.0,
            lth_on_top, elapsed
        ),
    );
}

#[test]
fn criterion_11_dense_sparse_connectivity() {
    let start = Instant::now();
    let (train_set, test_set) = desk_blobs();
    let spec = desk_spec(&train_set, 4);
    let config = dense_config(0xD4, 30, vec![5]);
    let dense = train(
        TrainInit::Params(&init_params::<f32>(&spec, 0xD5)),
        None,
        &config,
        &train_set,
        &test_set,
    )
    .unwrap();
    let pc = PruneConfig {
        target_sparsity: 0.9,
        per_round_fraction: 0.2,
        train_epochs_per_prune: 6,
        prune_lr: 0.01,
    };
    let imp_out = imp(&dense.rewinds[0], (&train_set, &test_set), &pc, &config).unwrap();

    let eval_train = train_set.subsample(2000, 0xD6);
    let calibration = train_set.subsample(2048, 0xD7);
    let points = barrier_vs_imp_iteration(
        &dense.final_checkpoint.params,
        &imp_out.sequence,
        &eval_train,
        &test_set,
        9,
        Some(&calibration),
    )
    .unwrap();

    let repaired_below = points
        .iter()
        .all(|p| p.test_error_barrier_repaired <= p.test_error_barrier);
    let through_target = points
        .iter()
        .filter(|p| p.sparsity <= 0.9 + 1e-9)
        .all(|p| p.test_error_barrier_repaired <= 0.1);
    let max_rep = points
        .iter()
        .map(|p| p.test_error_barrier_repaired)
        .fold(0.0_f64, f64::max);
    let max_plain = points
        .iter()
        .map(|p| p.test_error_barrier)
        .fold(0.0_f64, f64::max);

    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 11 dense-sparse-connectivity",
        repaired_below && through_target && points.len() == imp_out.sequence.entries.len() + 1,
        &format!(
            "{} iterations; repaired <= unrepaired everywhere: {}; repaired <= 0.1 through S = 0.9: {} (max repaired {:.4}, max unrepaired {:.4}); {:.0}s",
            points.len(), repaired_below, through_target, max_rep, max_plain, elapsed
        ),
    );
}

#[test]
fn criterion_12_diversity() {
    let start = Instant::now();
    let mut plan = ExperimentPlan::default();
    plan.dataset.kind = DatasetKind::Spirals;
    plan.train.epochs = 30;
    plan.prune.train_epochs_per_prune = 5;
    plan.diversity.enabled = true;
    plan.diversity.model_count = 5;
    plan.diversity.sparsity = 0.9;
    plan.diversity.rewind_epoch = 5;

    let (train_set, test_set) = plan.dataset.load::<f32>().unwrap();
    let reports = diversity_protocol::<f32>(&plan, 0xD8, &train_set, &test_set).unwrap();
    let get = |name: &str| reports.iter().find(|r| r.method == name).unwrap();
    let (imp_r, lth, permuted) = (get("imp"), get("lth"), get("permuted"));

    let more_diverse = permuted.disagreement > lth.disagreement
        && permuted.kl > lth.kl
        && permuted.js > lth.js;
    let better_ensemble = permuted.ensemble_accuracy > lth.ensemble_accuracy;
    let all_methods = reports.len() == 4;

    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 12 diversity",
        more_diverse && better_ensemble && all_methods,
        &format!(
            "permuted vs lth: disagreement {:.3} > {:.3}, kl {:.3} > {:.3}, js {:.3} > {:.3}: {}; ensemble {:.4} > {:.4}: {}; imp set emitted (disagreement {:.3}); {:.0}s",
            permuted.disagreement, lth.disagreement, permuted.kl, lth.kl, permuted.js, lth.js,
            more_diverse, permuted.ensemble_accuracy, lth.ensemble_accuracy, better_ensemble,
            imp_r.disagreement, elapsed
        ),
    );
}
