//! Acceptance suite: one PASS/FAIL line per criterion. Criterion 1 is
//! reported as UNATTAINED and excluded from the pass count.
//!
//! Runs without the libtest harness so the lines are always printed. The
//! process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use latentfed_cli::{run, Config};
use latentfed_core::checkpoint::{decode_client, decode_global, encode_client, encode_global};
use latentfed_core::crossval;
use latentfed_core::dataset::{class_counts, stratified_kfold};
use latentfed_core::federation::{fedavg, ClientState, HyperParams, Model, ServerState};
use latentfed_core::gcae::{forward, grad_check, init_model, ArchSpec, Batch, ModelState};
use latentfed_core::resampling::{enn_filter, knn_indices, resample, tomek_links, Provenance, SamplerKind, SamplerSpec};
use latentfed_core::rng;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Brute-force oracles.

fn dist2(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Every other row sorted by (distance, index).
fn brute_order(x: ArrayView2<'_, f64>, i: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..x.nrows())
        .filter(|&j| j != i)
        .map(|j| (dist2(x.row(i), x.row(j)), j))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().map(|(_, j)| j).collect()
}

fn brute_enn(x: ArrayView2<'_, f64>, y: &[usize], k: usize) -> Vec<bool> {
    (0..x.nrows())
        .map(|i| {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for j in brute_order(x, i).into_iter().take(k) {
                *votes.entry(y[j]).or_default() += 1;
            }
            !votes.iter().any(|(&c, &v)| c != y[i] && 2 * v > k)
        })
        .collect()
}

fn brute_tomek(x: ArrayView2<'_, f64>, y: &[usize]) -> Vec<(usize, usize)> {
    let nearest: Vec<usize> = (0..x.nrows()).map(|i| brute_order(x, i)[0]).collect();
    let mut out = Vec::new();
    for i in 0..x.nrows() {
        for j in i + 1..x.nrows() {
            if y[i] != y[j] && nearest[i] == j && nearest[j] == i {
                out.push((i, j));
            }
        }
    }
    out
}

/// Segment property: `d(a, p) + d(p, b) - d(a, b) <= tol * d(a, b)`. A
/// degenerate segment (`a == b`) requires `p == a`.
fn on_segment(p: ArrayView1<'_, f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, tol: f64) -> bool {
    let d = |u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>| dist2(u, v).sqrt();
    let ab = d(a, b);
    if ab == 0.0 {
        return d(a, p) == 0.0;
    }
    d(a, p) + d(p, b) - ab <= tol * ab
}

fn random_instance(seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut r = rng::from_seed(seed);
    let classes = r.random_range(2..=4);
    let dims = r.random_range(2..=8);
    let rows = r.random_range(2 * classes + 4..=100);
    let mut labels: Vec<usize> = (0..classes).flat_map(|c| [c, c]).collect();
    while labels.len() < rows {
        // Skewed: class 0 most likely.
        let c = if r.random::<f64>() < 0.5 { 0 } else { r.random_range(0..classes) };
        labels.push(c);
    }
    let x = Array2::from_shape_fn((rows, dims), |(i, j)| labels[i] as f64 * 0.7 + r.random_range(-1.0..1.0) * (1.0 + j as f64 * 0.1));
    (x, labels)
}

// ---------------------------------------------------------------------------
// Criteria.

fn resampler_oracles() -> Outcome {
    let mut problems = Vec::new();
    let mut synthetic = 0usize;
    for inst in 0..200u64 {
        let (x, y) = random_instance(1000 + inst);
        let n = x.nrows();
        let k = 1 + (inst as usize % 5).min(n - 2);
        for i in 0..n {
            let got = knn_indices(x.view(), i, k, true).unwrap();
            if got[..] != brute_order(x.view(), i)[..k] {
                problems.push(format!("instance {inst}: knn of row {i}"));
            }
        }
        let enn_k = 3;
        if enn_filter(x.view(), &y, enn_k).unwrap() != brute_enn(x.view(), &y, enn_k) {
            problems.push(format!("instance {inst}: enn"));
        }
        if tomek_links(x.view(), &y).unwrap() != brute_tomek(x.view(), &y) {
            problems.push(format!("instance {inst}: tomek"));
        }
        for kind in SamplerKind::ALL {
            let spec = SamplerSpec::new(kind);
            let out = resample(x.view(), &y, &spec, &mut rng::stream(inst, &[kind.id()])).unwrap();
            for (row, p) in out.provenance.iter().enumerate() {
                if let Provenance::Synthetic { seed, neighbor } = *p {
                    synthetic += 1;
                    let same_class = y[seed] == out.labels[row] && y[neighbor] == out.labels[row];
                    if !same_class || !on_segment(out.features.row(row), x.row(seed), x.row(neighbor), 1e-6) {
                        problems.push(format!("instance {inst}: {kind} row {row} off segment"));
                    }
                }
            }
            if kind.is_pure_oversampler() {
                let counts = class_counts(&out.labels, out.source_counts.len());
                let max = *out.source_counts.iter().max().unwrap();
                if counts.iter().any(|&c| c != max) {
                    problems.push(format!("instance {inst}: {kind} counts {counts:?}"));
                }
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("200 instances; kNN/ENN/Tomek exact, {synthetic} synthetic rows on their segments, oversamplers balanced")
        } else {
            format!("{} mismatches, first: {}", problems.len(), problems[0])
        },
    )
}

fn gradient_check() -> Outcome {
    let base = ArchSpec::default_for(24, 6);
    let mut r = rng::from_seed(31);
    let data: Vec<f64> = (0..4 * 24).map(|_| r.random_range(-1.5..1.5)).collect();
    let batch = Batch::new(1, 24, data).unwrap();
    let labels = [0, 3, 5, 3];
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    let mut layer_max: BTreeMap<String, f64> = BTreeMap::new();
    for (name, alpha, beta) in [("mse+ce", 1.0, 1.0), ("mse", 1.0, 0.0), ("ce", 0.0, 1.0)] {
        let arch = ArchSpec {
            recon_weight: alpha,
            pred_weight: beta,
            ..base.clone()
        };
        let m = init_model::<f64>(&arch, 17).unwrap();
        let report = grad_check(&m, &batch, &labels, 1e-5, 3).unwrap();
        for p in &report.probes {
            let layer = p.tensor.rsplit_once('.').map_or(p.tensor.clone(), |(l, _)| l.to_string());
            let e = layer_max.entry(layer).or_default();
            *e = e.max(p.relative_error);
        }
        worst = worst.max(report.max_relative_error);
        parts.push(format!("{name} {:.1e} ({} probes)", report.max_relative_error, report.probes.len()));
    }
    let layers = layer_max.len();
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {layers} layers; {}", parts.join(", ")),
    )
}

fn sample_server(arch: &ArchSpec) -> ServerState {
    let hyper = HyperParams {
        train_slow_rate: 0.4,
        send_slow_rate: 0.2,
        ..HyperParams::default()
    };
    let splits = (0..5).map(|c| (c, vec![c * 10, c * 10 + 1, c * 10 + 2], vec![c * 10 + 3])).collect();
    let mut s = ServerState::new(init_model::<f32>(arch, 1).unwrap(), splits, &hyper, 9).unwrap();
    for (i, c) in s.clients.iter_mut().enumerate() {
        c.model = init_model::<f32>(arch, 100 + i as u64).unwrap();
        c.train_time_cost = i as f64 / 7.0;
        c.send_time_cost = (i as f64).sqrt();
    }
    for i in 0..37 {
        s.rs_test_acc.push(i as f64 / 37.0);
        s.rs_test_auc.push(1.0 - i as f64 / 101.0);
        s.rs_train_loss.push((i as f64 + 0.5).ln());
    }
    s
}

fn checkpoints() -> Outcome {
    let arch = ArchSpec::default_for(24, 6);
    let server = sample_server(&arch);
    let dir = tempfile::tempdir().unwrap();
    let gp = dir.path().join("global.fedh");
    let cp = dir.path().join("client_2.fedh");
    let mut problems = Vec::new();

    latentfed_core::checkpoint::save_global(&server, &gp).unwrap();
    let g1 = fs::read(&gp).unwrap();
    let g_loaded = latentfed_core::checkpoint::load_global(&gp).unwrap();
    latentfed_core::checkpoint::save_global(&g_loaded, &gp).unwrap();
    if fs::read(&gp).unwrap() != g1 || g_loaded != server {
        problems.push("global round trip".to_string());
    }
    latentfed_core::checkpoint::save_client(&server.clients[2], &cp).unwrap();
    let c1 = fs::read(&cp).unwrap();
    let c_loaded: ClientState = latentfed_core::checkpoint::load_client(&cp).unwrap();
    latentfed_core::checkpoint::save_client(&c_loaded, &cp).unwrap();
    if fs::read(&cp).unwrap() != c1 || c_loaded != server.clients[2] {
        problems.push("client round trip".to_string());
    }

    let mut r = rng::from_seed(5);
    let batch = Batch::new(1, 24, (0..8 * 24).map(|_| r.random_range(-2.0f32..2.0)).collect()).unwrap();
    let bits = |m: &Model| {
        let out = forward(m, &batch).unwrap();
        out.reconstruction
            .data
            .iter()
            .chain(out.scores.iter())
            .chain(out.latent.iter())
            .map(|v| v.to_bits())
            .collect::<Vec<u32>>()
    };
    if bits(&g_loaded.global_model) != bits(&server.global_model) || bits(&c_loaded.model) != bits(&server.clients[2].model) {
        problems.push("forward pass differs after reload".to_string());
    }

    // Every byte of the client file, and every header byte plus a seeded
    // sample of payload bytes of the larger global file.
    let client_bytes = encode_client(&server.clients[2]).unwrap();
    let mut undetected = 0;
    for i in 0..client_bytes.len() {
        let mut bad = client_bytes.clone();
        bad[i] ^= 1 << (i % 8);
        if decode_client(&bad).is_ok() {
            undetected += 1;
        }
    }
    let global_bytes = encode_global(&server).unwrap();
    let header_end = 16 + u64::from_le_bytes(global_bytes[8..16].try_into().unwrap()) as usize;
    let mut positions: Vec<usize> = (0..header_end).collect();
    positions.extend((0..2000).map(|_| r.random_range(header_end..global_bytes.len())));
    for &i in &positions {
        let mut bad = global_bytes.clone();
        bad[i] ^= 0x40;
        if decode_global(&bad).is_ok() {
            undetected += 1;
        }
    }
    if undetected > 0 {
        problems.push(format!("{undetected} corrupted files loaded"));
    }
    let flips = client_bytes.len() + positions.len();
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("byte-identical re-save, bitwise forward, {flips} single-byte corruptions all rejected")
        } else {
            problems.join("; ")
        },
    )
}

fn fill(arch: &ArchSpec, f: impl Fn(usize) -> f32) -> Model {
    let mut m = ModelState::<f32>::zeros(arch).unwrap();
    let mut k = 0;
    for t in &mut m.tensors {
        for v in &mut t.values {
            *v = f(k);
            k += 1;
        }
    }
    m
}

fn max_abs_diff(m: &Model, f: impl Fn(usize) -> f64) -> f64 {
    m.tensors
        .iter()
        .flat_map(|t| t.values.iter())
        .enumerate()
        .map(|(k, &v)| (v as f64 - f(k)).abs())
        .fold(0.0, f64::max)
}

fn fedavg_properties() -> Outcome {
    let arch = ArchSpec::default_for(24, 6);
    let w = init_model::<f32>(&arch, 8).unwrap();
    let flat: Vec<f64> = w.tensors.iter().flat_map(|t| t.values.iter().map(|&v| v as f64)).collect();

    let equals = fedavg(&[&w, &w, &w, &w], &[5, 1, 12, 3]).unwrap();
    let e1 = max_abs_diff(&equals, |k| flat[k]);

    let neg = fill(&arch, |k| -(flat[k] as f32));
    let zero = fedavg(&[&w, &neg], &[7, 7]).unwrap();
    let e2 = max_abs_diff(&zero, |_| 0.0);

    let ones = fill(&arch, |_| 1.0);
    let twos = fill(&arch, |_| 2.0);
    let threes = fill(&arch, |_| 3.0);
    let weighted = fedavg(&[&ones, &twos, &threes], &[1, 2, 3]).unwrap();
    let e3 = max_abs_diff(&weighted, |_| 14.0 / 6.0);

    // Canonical order: sort (client id, model, count) triples by id before
    // aggregating; any arrival order then gives the same bits.
    let models: Vec<Model> = (0..5).map(|i| init_model::<f32>(&arch, 50 + i).unwrap()).collect();
    let counts = [13, 7, 29, 3, 11];
    let aggregate = |order: &[usize]| {
        let mut triples: Vec<(usize, &Model, usize)> = order.iter().map(|&i| (i, &models[i], counts[i])).collect();
        triples.sort_by_key(|t| t.0);
        let ms: Vec<&Model> = triples.iter().map(|t| t.1).collect();
        let cs: Vec<usize> = triples.iter().map(|t| t.2).collect();
        fedavg(&ms, &cs).unwrap()
    };
    let reference = aggregate(&[0, 1, 2, 3, 4]);
    let deterministic = [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 4, 0, 3, 2]]
        .iter()
        .all(|o| aggregate(o) == reference);

    let tol = 1e-6;
    outcome(
        e1 <= tol * 1.0 && e2 <= tol && e3 <= tol * (14.0 / 6.0) && deterministic,
        format!(
            "mean-of-equals {e1:.1e}, symmetric zero {e2:.1e}, 14/6 case {e3:.1e}, canonical order bitwise {deterministic}"
        ),
    )
}

fn stratification() -> Outcome {
    let mut problems = Vec::new();
    for inst in 0..500u64 {
        let mut r = rng::from_seed(7000 + inst);
        let classes = r.random_range(2..=8);
        let n = r.random_range(classes..=300);
        let mut labels: Vec<usize> = (0..classes).collect();
        while labels.len() < n {
            let c = if r.random::<f64>() < 0.6 { r.random_range(0..2.min(classes)) } else { r.random_range(0..classes) };
            labels.push(c);
        }
        let k = r.random_range(2..=10.min(n));
        let plan = stratified_kfold(&labels, k, inst).unwrap();
        let per_fold = plan.fold_class_counts(&labels);
        for c in 0..classes {
            let col: Vec<usize> = per_fold.iter().map(|f| f[c]).collect();
            let (lo, hi) = (col.iter().min().unwrap(), col.iter().max().unwrap());
            if hi - lo > 1 {
                problems.push(format!("instance {inst}: class {c} fold counts {col:?}"));
            }
            if *hi == 0 {
                problems.push(format!("instance {inst}: class {c} in no test fold"));
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "500 instances; per-class fold counts within 1, every class tested".to_string()
        } else {
            format!("{} violations, first: {}", problems.len(), problems[0])
        },
    )
}

const ALL_SAMPLERS: &str =
    r#"["smote", "borderline_smote", "random_over", "svm_smote", "smote_enn", "smote_tomek"]"#;

fn benchmark_config(folds: usize, samplers: &str, out: &Path) -> Config {
    let text = format!(
        r#"{{
            "seed": 20240601,
            "dataset": {{"type": "synthetic"}},
            "num_clients": 5,
            "num_folds": {folds},
            "global_rounds": 20,
            "personalization_rounds": 20,
            "eval_gap": 5,
            "include_final_eval": true,
            "samplers": {samplers},
            "output_dir": {out:?}
        }}"#
    );
    Config::from_json(&text).unwrap()
}

fn isolation() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (alone, _) = run(&benchmark_config(2, r#"["smote"]"#, a.path()), Path::new(".")).unwrap();
    let (all, _) = run(&benchmark_config(2, ALL_SAMPLERS, b.path()), Path::new(".")).unwrap();
    let x = alone.table.for_sampler(SamplerKind::Smote);
    let y = all.table.for_sampler(SamplerKind::Smote);
    outcome(
        !x.is_empty() && x == y,
        format!("{} smote records alone, {} alongside five others; identical: {}", x.len(), y.len(), x == y),
    )
}

/// Accuracy of predicting each client's training-majority class on its test
/// split, weighted by test size and averaged over folds.
fn majority_baseline(config: &Config) -> f64 {
    let ds = config.load_dataset(Path::new(".")).unwrap();
    let exp = config.experiment(&ds).unwrap();
    let split = crossval::split(&exp, &ds).unwrap();
    let mut fold_acc = Vec::new();
    for fold in 0..config.num_folds {
        let (mut hit, mut total) = (0usize, 0usize);
        for c in 0..split.shards.len() {
            let (train, test) = split.client_fold(c, fold);
            let counts = class_counts(&train.iter().map(|&i| ds.labels()[i]).collect::<Vec<_>>(), ds.num_classes());
            let majority = (0..counts.len()).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap();
            hit += test.iter().filter(|&&i| ds.labels()[i] == majority).count();
            total += test.len();
        }
        fold_acc.push(hit as f64 / total as f64);
    }
    fold_acc.iter().sum::<f64>() / fold_acc.len() as f64
}

struct EndToEnd {
    dir: tempfile::TempDir,
}

fn end_to_end() -> (Outcome, Option<EndToEnd>) {
    let dir = tempfile::tempdir().unwrap();
    let config = benchmark_config(5, ALL_SAMPLERS, dir.path());
    let (out, _) = match run(&config, Path::new(".")) {
        Ok(r) => r,
        Err(e) => return (outcome(false, format!("run failed: {e}")), None),
    };
    let mut problems = Vec::new();
    let records = &out.table.records;
    let mut grid: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for r in records {
        grid.entry((r.fold, r.sampler.name())).or_default().push(r.round);
    }
    let complete = records.len() == 6 * 5 * 5
        && grid.len() == 30
        && grid.values().all(|rounds| rounds == &[0, 5, 10, 15, 20]);
    if !complete {
        problems.push(format!("grid has {} records in {} cells", records.len(), grid.len()));
    }
    let baseline = majority_baseline(&config);
    let mut finals = Vec::new();
    for kind in SamplerKind::ALL {
        let row = |round: usize| {
            out.summary
                .iter()
                .find(|s| s.sampler == kind && s.round == round)
                .map(|s| s.test_accuracy)
        };
        let (Some(start), Some(end)) = (row(0), row(20)) else {
            problems.push(format!("{kind}: missing summary rows"));
            continue;
        };
        if end < start {
            problems.push(format!("{kind}: final {end:.4} < round-0 {start:.4}"));
        }
        if end < baseline {
            problems.push(format!("{kind}: final {end:.4} < majority baseline {baseline:.4}"));
        }
        finals.push(format!("{}={end:.3}", kind.name()));
    }
    let start = out.summary.iter().find(|s| s.round == 0).map_or(f64::NAN, |s| s.test_accuracy);
    let detail = if problems.is_empty() {
        format!(
            "150 records; round-0 {start:.3}, majority baseline {baseline:.3}, final {}",
            finals.join(" ")
        )
    } else {
        problems.join("; ")
    };
    (outcome(problems.is_empty(), detail), Some(EndToEnd { dir }))
}

fn determinism(first: Option<&EndToEnd>) -> Outcome {
    let Some(first) = first else {
        return outcome(false, "criterion 8 produced no output to compare");
    };
    let dir = tempfile::tempdir().unwrap();
    if let Err(e) = run(&benchmark_config(5, ALL_SAMPLERS, dir.path()), Path::new(".")) {
        return outcome(false, format!("second run failed: {e}"));
    }
    let mut same = Vec::new();
    let mut differ = Vec::new();
    for f in ["metrics.csv", "summary.csv", "violin.csv"] {
        let a = fs::read(first.dir.path().join(f)).unwrap();
        let b = fs::read(dir.path().join(f)).unwrap();
        if a == b { same.push(f) } else { differ.push(f) }
    }
    outcome(
        differ.is_empty(),
        if differ.is_empty() {
            format!("{} byte-identical across two runs", same.join(", "))
        } else {
            format!("differ: {}", differ.join(", "))
        },
    )
}

/// Reference figures cannot be reproduced here: the dataset, architecture and
/// hyperparameters behind them are unavailable. Reported, never counted as a pass.
fn reference_status(e2e: &str) {
    println!(
        "criterion 1 [reference figures]: UNATTAINED reference accuracy 98.8-99% and std ranges \
         (SMOTE 0.0157-0.0180, SMOTE-ENN 0.0167-0.0176) not reproduced; desk-scale analogue is criterion 8 ({e2e})"
    );
}

fn timed(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome, failures: &mut u32) {
    let start = Instant::now();
    let o = f();
    report(id, name, limit, start.elapsed(), o, failures);
}

fn report(id: u32, name: &str, limit: Option<Duration>, elapsed: Duration, o: Outcome, failures: &mut u32) {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = o.pass && in_time;
    if !pass {
        *failures += 1;
    }
    let budget = limit.map_or(String::new(), |l| format!(" / limit {:.0}s", l.as_secs_f64()));
    println!(
        "criterion {id} [{name}]: {} ({:.1}s{budget}) {}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        o.detail
    );
}

fn main() -> ExitCode {
    // libtest-style probes (`--list`) get an empty listing.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let secs = Duration::from_secs;
    let mut failures = 0;

    timed(2, "resampler oracles", Some(secs(30)), resampler_oracles, &mut failures);
    timed(3, "gradient check", Some(secs(60)), gradient_check, &mut failures);
    timed(4, "checkpoint round trip", Some(secs(10)), checkpoints, &mut failures);
    timed(5, "fedavg properties", Some(secs(5)), fedavg_properties, &mut failures);
    timed(6, "stratification", Some(secs(10)), stratification, &mut failures);
    timed(7, "sampler isolation", Some(secs(300)), isolation, &mut failures);

    let start = Instant::now();
    let (o8, e2e) = end_to_end();
    let e2e_detail = o8.detail.clone();
    report(8, "end-to-end benchmark", Some(secs(600)), start.elapsed(), o8, &mut failures);
    timed(9, "full-run determinism", None, || determinism(e2e.as_ref()), &mut failures);
    reference_status(&e2e_detail);

    if failures == 0 {
        println!("acceptance: all gated criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
