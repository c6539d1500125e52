//! Acceptance suite: one PASS/FAIL line per criterion. Oracles here are
//! written independently of the library code they check.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use karst::adapter::{AdaptedLinear, AdapterShape, KarstAdapter, KronKernel};
use karst::bench;
use karst::format::Archive;
use karst::kron::KronPair;
use karst::numerics::{gaussian_matrix, gaussian_vector, DenseMatrix, DenseVector, SeededRng};
use karst::training::model::random_base_layer;
use karst::training::train::predictions;
use karst::training::{build_model, gradcheck, make_task_from, train, Method, Recipe, TaskSpec, ToyModel, TrainConfig};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("Kronecker correctness", kron_correctness),
        ("zero-init guarantee", zero_init),
        ("re-parameterization", reparameterization),
        ("gradient correctness", gradient_correctness),
        ("rank structure", rank_structure),
        ("parameter-count formula", parameter_count),
        ("transfer trend", transfer_trend),
        ("determinism and provenance", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = check();
        println!(
            "criterion {}: {} {name} ({:.2} s) {detail}",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!ok);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rel(got: &[f64], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Block expansion: block (i, j) of `c ⊗ d` is `c[i,j]·d`.
fn block_kron(c: &DenseMatrix, d: &DenseMatrix) -> Vec<Vec<f64>> {
    let (p1, q1) = c.shape();
    let (p2, q2) = d.shape();
    let mut k = vec![vec![0.0; q1 * q2]; p1 * p2];
    for bi in 0..p1 {
        for bj in 0..q1 {
            for i in 0..p2 {
                for j in 0..q2 {
                    k[bi * p2 + i][bj * q2 + j] = c.get(bi, bj) * d.get(i, j);
                }
            }
        }
    }
    k
}

fn naive_mv(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn naive_tmv(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| m.iter().zip(x).map(|(row, xi)| row[j] * xi).sum()).collect()
}

fn kron_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let (mut pairs, mut worst, mut mismatched) = (0, 0.0f64, 0);
    for _ in 0..150 {
        let dims: Vec<usize> = (0..4).map(|_| 1 + rng.below(5)).collect();
        let c = gaussian_matrix(&mut rng, dims[0], dims[1], 1.0).unwrap();
        let d = gaussian_matrix(&mut rng, dims[2], dims[3], 1.0).unwrap();
        let pair = KronPair::new(c.clone(), d.clone());
        let oracle = block_kron(&c, &d);
        let lib = pair.materialize();
        let exact = oracle
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &v)| lib.get(i, j) == v));
        mismatched += usize::from(!exact);
        let x = gaussian_vector(&mut rng, dims[0] * dims[2], 1.0).unwrap();
        let v = gaussian_vector(&mut rng, dims[1] * dims[3], 1.0).unwrap();
        worst = worst.max(rel(pair.apply_transpose(&x).unwrap().as_slice(), &naive_tmv(&oracle, x.as_slice())));
        worst = worst.max(rel(pair.apply(&v).unwrap().as_slice(), &naive_mv(&oracle, v.as_slice())));
        pairs += 1;
    }
    let elapsed = start.elapsed();
    (
        mismatched == 0 && worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("{pairs} pairs, {mismatched} materialization mismatches, apply rel err {worst:.2e} (tol 1e-12)"),
    )
}

fn zero_init() -> Outcome {
    let mut rng = SeededRng::new(202);
    let (w0, b0) = random_base_layer(&mut rng, 64, 32).unwrap();
    let layer = AdaptedLinear::wrap(&mut rng, w0.clone(), Some(b0.clone()), 8, 8, 2, 0.02).unwrap();
    let plain = karst::MergedLinear {
        weight: w0,
        bias: Some(b0),
    };
    let mut differing = 0;
    for _ in 0..1000 {
        let x = gaussian_vector(&mut rng, 64, 1.0).unwrap();
        let got = layer.forward(&x).unwrap();
        let want = plain.forward(&x).unwrap();
        let bits = |v: &DenseVector| v.as_slice().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        differing += usize::from(bits(&got) != bits(&want));
    }
    (differing == 0, format!("{differing} of 1000 inputs differ bitwise from the frozen base"))
}

fn trained_models() -> Vec<(ToyModel, DenseMatrix)> {
    let mut out = Vec::new();
    for seed in 0..3u64 {
        let task = make_task_from(&TaskSpec {
            seed,
            ..TaskSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 20,
            seed,
            ..TrainConfig::default()
        };
        let mut model = build_model(&task, &cfg).unwrap();
        train(&mut model, &task, &cfg).unwrap();
        out.push((model, task.test_x.clone()));
    }
    out
}

fn reparameterization() -> Outcome {
    let mut worst = 0.0f64;
    let mut changed_predictions = 0;
    for (model, x) in trained_models() {
        let merged = model.merge().unwrap();
        for r in 0..x.rows() {
            let v = DenseVector::from_vec(x.row(r).to_vec());
            let a = model.predict_one(&v).unwrap();
            let b = merged.predict_one(&v).unwrap();
            worst = worst.max(rel(b.as_slice(), a.as_slice()));
        }
        let before = predictions(&model, &x).unwrap();
        let after: Vec<usize> = (0..x.rows())
            .map(|r| {
                let y = merged.predict_one(&DenseVector::from_vec(x.row(r).to_vec())).unwrap();
                karst::training::task::argmax(y.as_slice())
            })
            .collect();
        changed_predictions += before.iter().zip(&after).filter(|(a, b)| a != b).count();
    }
    // Wall-clock is noisy; the ratio is the median over interleaved
    // repetitions and up to three measurements are taken.
    let shape = AdapterShape::new(768, 768, 8, 8, 2).unwrap();
    let mut ratios = Vec::new();
    for attempt in 0..3 {
        let report = bench::run(shape, 60, 16, attempt).unwrap();
        ratios.push(report.merged_over_plain);
        if report.merged_over_plain <= 1.05 {
            break;
        }
    }
    let timing_ok = ratios.last().is_some_and(|&r| r <= 1.05);
    (
        worst <= 1e-10 && changed_predictions == 0 && timing_ok,
        format!(
            "merge rel err {worst:.2e} (tol 1e-10), {changed_predictions} changed predictions, merged/plain time {ratios:.3?} (limit 1.05)"
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let task = make_task_from(&TaskSpec {
        widths: vec![8, 8, 4],
        ..TaskSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        m: Some(2),
        r: 2,
        ..TrainConfig::default()
    };
    let mut model = build_model(&task, &cfg).unwrap();
    model.randomize_trainable(&mut SeededRng::new(404), 0.3).unwrap();
    let report = gradcheck(&model, &task, 1e-4).unwrap();
    let kinds = [".c", ".a", ".b", ".s1", ".s2"];
    let covered = kinds
        .iter()
        .all(|k| report.tensors.iter().any(|t| t.name.ends_with(k)));
    let elapsed = start.elapsed();
    (
        report.passed() && covered && model.layers().len() == 2 && elapsed < Duration::from_secs(30),
        format!(
            "{} tensors over 2 layers, max rel err {:.2e} (tol 1e-4, h=1e-5)",
            report.tensors.len(),
            report.max_rel_err()
        ),
    )
}

fn svd_rank(m: &DenseMatrix) -> usize {
    let mat = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let sv = mat.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > 1e-10 * max.max(f64::MIN_POSITIVE)).count()
}

fn low_rank(rng: &mut SeededRng, rows: usize, cols: usize, rank: usize) -> DenseMatrix {
    gaussian_matrix(rng, rows, rank, 1.0)
        .unwrap()
        .matmul(&gaussian_matrix(rng, rank, cols, 1.0).unwrap())
        .unwrap()
}

fn rank_structure() -> Outcome {
    let mut rng = SeededRng::new(505);
    let mut product_failures = 0;
    for _ in 0..30 {
        let (rc, rd) = (1 + rng.below(3), 1 + rng.below(3));
        let c = low_rank(&mut rng, 3, 4, rc);
        let d = low_rank(&mut rng, 4, 3, rd);
        let k = KronPair::new(c.clone(), d.clone()).materialize();
        product_failures += usize::from(svd_rank(&k) != svd_rank(&c) * svd_rank(&d));
    }
    let (mut bound_violations, mut equality_failures, mut cases) = (0, 0, 0);
    for (d_in, d_out, m, r, n) in [
        (8, 8, 2, 1, 1),
        (8, 8, 2, 1, 2),
        (8, 8, 2, 2, 2),
        (12, 8, 2, 1, 3),
        (12, 12, 3, 1, 2),
        (16, 8, 4, 1, 1),
        (16, 16, 4, 2, 1),
        (16, 16, 2, 4, 2),
    ] {
        let bound = (n * m * r).min(d_in).min(d_out);
        for degenerate in [false, true] {
            let shape = AdapterShape::new(d_in, d_out, m, r, n).unwrap();
            let kernels = (0..n)
                .map(|_| {
                    let c = if degenerate {
                        low_rank(&mut rng, m, m, 1)
                    } else {
                        gaussian_matrix(&mut rng, m, m, 1.0).unwrap()
                    };
                    KronKernel {
                        c,
                        a: gaussian_matrix(&mut rng, d_in / m, r, 1.0).unwrap(),
                        b: gaussian_matrix(&mut rng, r, d_out / m, 1.0).unwrap(),
                    }
                })
                .collect();
            let delta = KarstAdapter::from_parts(shape, 0, kernels).unwrap().materialize();
            let rank = svd_rank(&delta);
            bound_violations += usize::from(rank > bound);
            if !degenerate {
                equality_failures += usize::from(rank != bound);
            }
            cases += 1;
        }
    }
    (
        product_failures == 0 && bound_violations == 0 && equality_failures == 0,
        format!(
            "rank(c⊗d) mismatches {product_failures}/30, bound violations {bound_violations}/{cases}, random-factor equality misses {equality_failures}/{}",
            cases / 2
        ),
    )
}

fn parameter_count() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (d_in, d_out, m, r, n) in [(768, 768, 8, 8, 2), (768, 3072, 8, 4, 3), (16, 4, 4, 2, 1), (12, 18, 6, 1, 4)] {
        let formula = n * (m * m + r * d_in / m + r * d_out / m) + 2 * d_out;
        let mut rng = SeededRng::new(606);
        let layer = AdaptedLinear::wrap(&mut rng, DenseMatrix::zeros(d_in, d_out), None, m, r, n, 0.02).unwrap();
        let model = ToyModel::new(vec![layer]).unwrap();
        let mut bytes = Vec::new();
        model.to_archive(serde_json::Value::Null).write_to(&mut bytes).unwrap();
        let archive = Archive::read_from(&bytes[..]).unwrap();
        let enumerated: usize = archive
            .tensors
            .iter()
            .filter(|(name, _)| name.contains(".kernel") || name.ends_with(".s1") || name.ends_with(".s2"))
            .map(|(_, t)| t.len())
            .sum();
        let counted = model.trainable_count();
        ok &= enumerated == formula && counted == formula;
        details.push(format!("{enumerated}"));
    }
    ok &= details[0] == "4736";
    (ok, format!("serialized trainable counts {} (first expected 4736)", details.join(", ")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn transfer_trend() -> Outcome {
    let start = Instant::now();
    let run = |method: Method, n_kernels: usize, seed: u64| -> f64 {
        let task = make_task_from(&TaskSpec {
            recipe: Recipe::LowRankShift,
            seed,
            shift_rank: 4,
            ..TaskSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            m: Some(2),
            r: 1,
            n_kernels,
            method,
            lr: 1e-2,
            epochs: 200,
            seed,
            ..TrainConfig::default()
        };
        let mut model = build_model(&task, &cfg).unwrap();
        train(&mut model, &task, &cfg).unwrap().last().train_loss
    };
    let seeds = [0u64, 1, 2];
    let probe: Vec<f64> = seeds.iter().map(|&s| run(Method::LinearProbe, 1, s)).collect();
    let karst: Vec<Vec<f64>> = [1, 2, 4]
        .iter()
        .map(|&n| seeds.iter().map(|&s| run(Method::Karst, n, s)).collect())
        .collect();
    let adapter_only: Vec<f64> = seeds.iter().map(|&s| run(Method::KronAdapter, 2, s)).collect();

    let beats_probe = karst[1].iter().zip(&probe).all(|(k, p)| k < p);
    let (with_rst, without_rst) = (median(karst[1].clone()), median(adapter_only));
    let medians: Vec<f64> = karst.iter().map(|v| median(v.clone())).collect();
    let non_increasing = medians.windows(2).all(|w| w[1] <= w[0]);
    let elapsed = start.elapsed();
    (
        beats_probe && with_rst <= without_rst && non_increasing && elapsed < Duration::from_secs(300),
        format!(
            "(a) KARST {:.3?} vs probe {:.3?}; (b) median with rescale {with_rst:.4} vs without {without_rst:.4}; (c) medians over N=1,2,4 {medians:.4?}",
            karst[1], probe
        ),
    )
}

fn run_train(config: &Path, out: &Path, seed: u64) -> bool {
    Command::new(env!("CARGO_BIN_EXE_karst"))
        .args(["train", "--config"])
        .arg(config)
        .args(["--seed", &seed.to_string(), "--out"])
        .arg(out)
        .output()
        .unwrap()
        .status
        .success()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, "[task]\nrecipe = \"rotated-base\"\n[train]\nepochs = 25\nlr = 0.01\n").unwrap();
    let out = dir.path().join("run");
    if !run_train(&config, &out, 7) {
        return (false, "train command failed".into());
    }
    let first = std::fs::read(out.join("metrics.csv")).unwrap();
    if !run_train(&config, &out, 7) {
        return (false, "second train command failed".into());
    }
    let second = std::fs::read(out.join("metrics.csv")).unwrap();

    let resolved: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    let csv = String::from_utf8(second.clone()).unwrap();
    let csv_config: serde_json::Value =
        serde_json::from_str(csv.lines().next().unwrap().strip_prefix("# config: ").unwrap()).unwrap();
    let jsonl = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let jsonl_config = serde_json::from_str::<serde_json::Value>(jsonl.lines().next().unwrap()).unwrap()["config"].clone();
    let model_config = Archive::load(out.join("model.karst")).unwrap().header["provenance"].clone();
    let embedded = [&csv_config, &jsonl_config, &model_config].iter().all(|c| **c == resolved);
    let seeded = resolved["train"]["seed"] == 7 && resolved["resolved"]["layer_m"].is_array();
    (
        first == second && embedded && seeded,
        format!(
            "CSV {} across reruns ({} bytes); resolved config embedded in csv/jsonl/model: {embedded}",
            if first == second { "byte-identical" } else { "differs" },
            first.len()
        ),
    )
}
