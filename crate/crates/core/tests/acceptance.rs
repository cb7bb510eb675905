//! Acceptance criteria 1–11. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use image::{ImageBuffer, Luma, Rgb};
use maskdepth::autograd::Graph;
use maskdepth::data::{
    generate_scene, load_dataset, read_sample, sparsify, synthesize, write_sample, write_split, SceneConfig, Sample,
    SplitSpec, DEPTH_SCALE,
};
use maskdepth::losses::{
    depth_consistency, feature_consistency, uncertainty_nll, ConsistencyWeight, PredictorHead, SparseDepth,
};
use maskdepth::masking::sample_partition;
use maskdepth::metrics::depth_metrics;
use maskdepth::model::{Model, ModelConfig};
use maskdepth::nn::ParamStore;
use maskdepth::tensor::Tensor;
use maskdepth::tokens::ImageTensor;
use maskdepth::trainer::{fit, LrSchedule, RunPaths, TrainConfig};
use maskdepth::verify;
use maskdepth::viz::{mask_demo, DemoOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn subset_independence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let configs = 120;
    for case in 0..configs {
        let n = rng.random_range(8..=64);
        let d = [16, 32, 64][rng.random_range(0..3)];
        let depth = rng.random_range(1..=3);
        let k = rng.random_range(1..=8);
        worst64 = worst64.max(verify::subset_independence_error::<f64>(n, d, depth, k, case).unwrap());
        worst32 = worst32.max(verify::subset_independence_error::<f32>(n, d, depth, k, case).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst32 <= 1e-5 && worst64 <= 1e-10 && secs < 60.0,
        format!("{configs} configs, max err fp32 {worst32:.2e}, fp64 {worst64:.2e}, {secs:.1}s"),
    )
}

fn k1_neutrality() -> Outcome {
    let err = verify::k1_neutrality_error(3).unwrap();
    let model = Model::<f64>::new(ModelConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = ImageTensor::new(Tensor::from_fn([3, 32, 64], |_| rng.random::<f64>())).unwrap();
    let (panels, _) = mask_demo(&model, &img, &DemoOptions { k: 1, scale: 1, ..DemoOptions::default() }).unwrap();
    let diff = panels.iter().find(|p| p.name == "difference").unwrap();
    let zero = diff.image.pixels().all(|p| p.0 == [0, 0, 0]);
    outcome(
        err <= 1e-6 && zero,
        format!("forward diff {err:.2e}, demo difference panel all zero: {zero}"),
    )
}

fn partition_invariants() -> Outcome {
    let bad = verify::partition_violations(10_000, 77).unwrap();
    outcome(bad == 0, format!("{bad} violations in 10000 partitions"))
}

fn gradient_checks() -> Outcome {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, e) in verify::loss_gradchecks(11).unwrap() {
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    let e = verify::model_gradcheck(11).unwrap();
    worst = worst.max(e);
    parts.push(format!("model {e:.1e}"));
    outcome(worst <= 1e-3, format!("max rel err {worst:.2e} ({})", parts.join(", ")))
}

fn all_zero_bits(t: Option<&Tensor<f64>>) -> bool {
    t.is_none_or(|t| t.data().iter().all(|x| x.to_bits() == 0))
}

fn stop_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand = |shape: [usize; 2]| Tensor::from_fn(shape, |_| rng.random_range(0.5..3.0));
    let mut ok = true;
    for mode in [ConsistencyWeight::Confidence, ConsistencyWeight::Literal] {
        let mut g = Graph::new();
        let weak = g.param(Rc::new(rand([6, 8])));
        let log_u = g.param(Rc::new(rand([6, 8])));
        let strong = g.param(Rc::new(rand([6, 8])));
        let l = depth_consistency(&mut g, weak, log_u, strong, mode).unwrap();
        let grads = g.backward(l);
        ok &= all_zero_bits(grads.get(weak)) && all_zero_bits(grads.get(log_u)) && !all_zero_bits(grads.get(strong));
    }
    let mut store = ParamStore::<f64>::new();
    let head = PredictorHead::new(&mut store, 8, &mut ChaCha8Rng::seed_from_u64(6));
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let zw = g.param(Rc::new(rand([5, 8])));
    let zs = g.param(Rc::new(rand([5, 8])));
    let l = feature_consistency(&mut g, &b, zw, zs, &head).unwrap();
    let grads = g.backward(l);
    ok &= all_zero_bits(grads.get(zw)) && !all_zero_bits(grads.get(zs));

    // Parameter gradients with a live weak forward equal those with frozen weak outputs.
    let model = Model::<f64>::new(common::tiny_model(), 7).unwrap();
    let img = ImageTensor::new(Tensor::from_fn([3, 32, 64], |_| rng.random::<f64>())).unwrap();
    let part = sample_partition(model.num_tokens(), 3, &mut rng).unwrap();
    let grads = |live: bool| -> Vec<Option<Tensor<f64>>> {
        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let (wd, wu, wz) = if live {
            let w = model.forward(&mut g, &b, &img, None).unwrap();
            (w.depth, w.log_uncertainty, w.tokens)
        } else {
            let w = model.predict(&img, None).unwrap();
            (g.constant(w.prediction.depth), g.constant(w.prediction.log_uncertainty), g.constant(w.tokens))
        };
        let s = model.forward(&mut g, &b, &img, Some(&part)).unwrap();
        let dc = depth_consistency(&mut g, wd, wu, s.depth, ConsistencyWeight::Confidence).unwrap();
        let fc = feature_consistency(&mut g, &b, wz, s.tokens, &model.arch.predictor).unwrap();
        let total = g.add(dc, fc);
        let mut gr = g.backward(total);
        b.nodes().iter().map(|&n| gr.take(n)).collect()
    };
    let (live, frozen) = (grads(true), grads(false));
    let same = live.iter().zip(&frozen).all(|(a, b)| match (a, b) {
        (Some(a), Some(b)) => a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
        (a, b) => all_zero_bits(a.as_ref()) && all_zero_bits(b.as_ref()),
    });
    ok &= same;
    outcome(ok, format!("target gradients bitwise zero, weak forward contributes nothing: {same}"))
}

fn nll_analytics() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in [0.1, 1.0, 10.0] {
        let gt = SparseDepth::dense(Tensor::new([1, 1], vec![5.0])).unwrap();
        let mut s = 0.0f64;
        let mut loss = f64::NAN;
        for _ in 0..200 {
            let mut g = Graph::new();
            let pred = g.constant(Tensor::new([1, 1], vec![5.0 + r]));
            let su = g.param(Rc::new(Tensor::new([1, 1], vec![s])));
            let l = uncertainty_nll(&mut g, pred, su, &gt).unwrap();
            loss = g.value(l).item();
            s -= 0.5 * g.backward(l).get(su).unwrap().item();
        }
        let (ds, dl) = ((s - r.ln()).abs(), (loss - (1.0 + r.ln())).abs());
        ok &= ds <= 1e-3 && dl <= 1e-6;
        parts.push(format!("r={r}: |s-log r| {ds:.1e}, |L-(1+log r)| {dl:.1e}"));
    }
    outcome(ok, parts.join("; "))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let gt: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.5..100.0)).collect();
        let pred: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..120.0)).collect();
        let mut valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.7)).collect();
        valid[0] = true;
        let got = depth_metrics(&Tensor::new([h, w], pred.clone()), &Tensor::new([h, w], gt.clone()), &valid, 80.0).unwrap();
        let want = common::naive_metrics(&pred, &gt, &valid, 80.0);
        let pairs = [
            (got.abs_rel, want.abs_rel),
            (got.sq_rel, want.sq_rel),
            (got.rmse, want.rmse),
            (got.rmse_log, want.rmse_log),
            (got.log10, want.log10),
            (got.delta1, want.delta1),
            (got.delta2, want.delta2),
            (got.delta3, want.delta3),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    let g = Tensor::new([2, 3], vec![1.0, 2.5, 5.0, 12.0, 30.0, 79.0]);
    let same = depth_metrics(&g, &g, &[true; 6], 80.0).unwrap();
    let zeros = same.abs_rel == 0.0
        && same.sq_rel == 0.0
        && same.rmse == 0.0
        && same.rmse_log == 0.0
        && same.log10 == 0.0
        && same.delta1 == 1.0;
    let half = Tensor::new([2, 3], vec![1.0, 2.5, 5.0, 12.0, 30.0, 39.0]);
    let double = depth_metrics(&half.map(|x| 2.0 * x), &half, &[true; 6], 80.0).unwrap();
    let doubled = double.abs_rel == 1.0 && double.delta1 == 0.0;
    outcome(
        worst <= 1e-12 && zeros && doubled,
        format!("max rel diff {worst:.2e} over 50 instances, pred=gt exact: {zeros}, pred=2gt exact: {doubled}"),
    )
}

// Desk benchmark: 32×64 synthetic scenes, 16 labeled + 240 unlabeled with 1%
// of pixels labeled, 64 densely labeled eval scenes.
const BENCH_SEEDS: [u64; 3] = [0, 1, 2];
const BENCH_STEPS: u64 = 4000;
const BENCH_LR: f64 = 5e-4;
const BENCH_K: usize = 4;
const BENCH_DENSITY: f64 = 0.01;

struct Bench {
    /// AbsRel per variant (baseline, D, D+U, D+U+F) per seed.
    abs_rel: Vec<[f64; 4]>,
    minutes: f64,
}

const VARIANTS: [(&str, [f64; 3]); 4] =
    [("baseline", [0.0, 0.0, 0.0]), ("D", [1.0, 0.0, 0.0]), ("D+U", [1.0, 1.0, 0.0]), ("D+U+F", [1.0, 1.0, 1.0])];

fn desk_benchmark() -> Bench {
    let scene = SceneConfig::default();
    let eval: Vec<Sample<f32>> =
        synthesize(&scene, &SplitSpec { n_labeled: 64, n_unlabeled: 0, density: 1.0, seed: 999 }).unwrap();
    let mut abs_rel = Vec::new();
    let mut longest = 0.0f64;
    for seed in BENCH_SEEDS {
        let train: Vec<Sample<f32>> = synthesize(
            &scene,
            &SplitSpec { n_labeled: 16, n_unlabeled: 240, density: BENCH_DENSITY, seed: 100 + seed },
        )
        .unwrap();
        let mut row = [0.0; 4];
        for (slot, (name, [dc, uc, fc])) in row.iter_mut().zip(VARIANTS) {
            let cfg = TrainConfig {
                steps: BENCH_STEPS,
                seed,
                lr_encoder: BENCH_LR,
                lr_decoder: BENCH_LR,
                lr_schedule: LrSchedule::Cosine,
                strong_k: BENCH_K,
                lambda_dc: dc,
                lambda_uc: uc,
                lambda_fc: fc,
                ..TrainConfig::default()
            };
            let dir = tempfile::tempdir().unwrap();
            let start = Instant::now();
            let summary = fit(&cfg, &train, &eval, &RunPaths::new(dir.path()), None).unwrap();
            let secs = start.elapsed().as_secs_f64();
            longest = longest.max(secs);
            *slot = summary.metrics.unwrap().abs_rel;
            println!("  bench seed {seed} {name:<8} abs_rel {:.4} ({secs:.0}s)", *slot);
        }
        abs_rel.push(row);
    }
    Bench { abs_rel, minutes: longest / 60.0 }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn semi_supervised_benefit(b: &Bench) -> Outcome {
    let base = median(b.abs_rel.iter().map(|r| r[0]).collect());
    let full = median(b.abs_rel.iter().map(|r| r[3]).collect());
    let gain = 1.0 - full / base;
    outcome(
        gain >= 0.05 && b.minutes <= 15.0,
        format!(
            "median AbsRel baseline {base:.4}, full {full:.4}, relative gain {:.1}%, longest run {:.1} min",
            gain * 100.0,
            b.minutes
        ),
    )
}

fn ablation_ordering(b: &Bench) -> Outcome {
    let ordered = b.abs_rel.iter().filter(|r| r[0] >= r[1] && r[1] >= r[2] && r[2] >= r[3]).count();
    let medians: Vec<String> = (0..4)
        .map(|i| format!("{} {:.4}", VARIANTS[i].0, median(b.abs_rel.iter().map(|r| r[i]).collect())))
        .collect();
    outcome(ordered >= 2, format!("ordering holds in {ordered}/3 seeds; medians {}", medians.join(", ")))
}

fn split_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "depth"] {
        let mut entries: Vec<_> = fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
        }
    }
    out
}

fn determinism() -> Outcome {
    let scene = SceneConfig::default();
    let split = SplitSpec { n_labeled: 4, n_unlabeled: 20, density: 0.2, seed: 12 };
    let train: Vec<Sample<f32>> = synthesize(&scene, &split).unwrap();
    let eval: Vec<Sample<f32>> = synthesize(&scene, &SplitSpec { n_labeled: 4, n_unlabeled: 0, density: 1.0, seed: 13 }).unwrap();
    let cfg = TrainConfig { eval_every: 25, ..common::tiny_train(60, 21) };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fit(&cfg, &train, &eval, &RunPaths::new(a.path()), None).unwrap();
    fit(&cfg, &train, &eval, &RunPaths::new(b.path()), None).unwrap();
    let la = fs::read(a.path().join("log.jsonl")).unwrap();
    let lines = la.split(|&c| c == b'\n').filter(|l| l.windows(6).any(|w| w == b"lr_enc")).count();
    let logs_equal = la == fs::read(b.path().join("log.jsonl")).unwrap();

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_split(da.path(), &scene, &split).unwrap();
    write_split(db.path(), &scene, &split).unwrap();
    let data_equal = split_files(da.path()) == split_files(db.path());
    outcome(
        logs_equal && lines >= 50 && data_equal,
        format!("{lines}-step logs identical: {logs_equal}, datasets byte-identical: {data_equal}"),
    )
}

fn dataset_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (img, depth) = generate_scene::<f64, _>(&SceneConfig::default(), &mut rng).unwrap();
    let gt = sparsify(&depth, 0.5, &mut rng).unwrap();
    write_sample(dir.path(), "a", &img, Some(&gt)).unwrap();
    let index = load_dataset(dir.path()).unwrap();
    let gt2 = read_sample::<f64>(&index, "a").unwrap().1.unwrap();
    let mut worst = 0.0f64;
    for i in 0..gt.valid.len() {
        if gt.valid[i] {
            worst = worst.max((gt.values[i] - gt2.values[i]).abs());
        }
    }
    let within = gt2.valid == gt.valid && worst <= 1.0 / DEPTH_SCALE;

    let ext = tempfile::tempdir().unwrap();
    fs::create_dir_all(ext.path().join("images")).unwrap();
    fs::create_dir_all(ext.path().join("depth")).unwrap();
    ImageBuffer::<Rgb<u8>, _>::from_fn(4, 2, |x, y| Rgb([x as u8 * 50, y as u8 * 90, 3]))
        .save(ext.path().join("images/0000000042.png"))
        .unwrap();
    let codes: Vec<u16> = vec![0, 256, 20480, 65535, 1, 0, 4321, 999];
    ImageBuffer::<Luma<u16>, _>::from_raw(4, 2, codes.clone())
        .unwrap()
        .save(ext.path().join("depth/0000000042.png"))
        .unwrap();
    let loaded = read_sample::<f64>(&load_dataset(ext.path()).unwrap(), "0000000042").unwrap().1.unwrap();
    let external = codes
        .iter()
        .enumerate()
        .all(|(i, &c)| loaded.valid[i] == (c != 0) && (c == 0 || loaded.values[i] == f64::from(c) / 256.0));
    outcome(
        within && external,
        format!("round-trip max err {worst:.2e} m (bound {:.2e}), external 16-bit PNG = value/256: {external}", 1.0 / DEPTH_SCALE),
    )
}

type Criterion = (u8, &'static str, fn() -> Outcome);

fn main() {
    // Optional criterion numbers select a subset, e.g. `-- 1 4 7`.
    let wanted: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let picked = |id: u8| wanted.is_empty() || wanted.contains(&id);
    let quick: [Criterion; 9] = [
        (1, "subset independence", subset_independence),
        (2, "K=1 neutrality", k1_neutrality),
        (3, "partition invariants", partition_invariants),
        (4, "gradient checks", gradient_checks),
        (5, "stop-gradient contract", stop_gradient),
        (6, "uncertainty NLL analytics", nll_analytics),
        (7, "metrics oracle", metrics_oracle),
        (10, "determinism", determinism),
        (11, "dataset round-trip", dataset_round_trip),
    ];
    let mut results: Vec<(u8, &str, Outcome)> =
        quick.iter().filter(|c| picked(c.0)).map(|&(id, name, f)| (id, name, f())).collect();
    if picked(8) || picked(9) {
        let bench = desk_benchmark();
        results.push((8, "semi-supervised benefit", semi_supervised_benefit(&bench)));
        results.push((9, "ablation ordering", ablation_ordering(&bench)));
    }
    results.sort_by_key(|r| r.0);
    for (id, name, o) in &results {
        println!("{} criterion {id:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u8> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
