mod common;

use std::fs;

use maskdepth::checkpoint::{load_checkpoint, read_header};
use maskdepth::data::{synthesize, SceneConfig, Sample, SplitSpec};
use maskdepth::trainer::{fit, read_log, RunPaths};

fn data() -> (Vec<Sample<f32>>, Vec<Sample<f32>>) {
    let scene = SceneConfig::default();
    let train = synthesize(&scene, &SplitSpec { n_labeled: 4, n_unlabeled: 20, density: 0.2, seed: 5 }).unwrap();
    let eval = synthesize(&scene, &SplitSpec { n_labeled: 4, n_unlabeled: 0, density: 1.0, seed: 6 }).unwrap();
    (train, eval)
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (train, eval) = data();
    let cfg = maskdepth::trainer::TrainConfig { eval_every: 25, ..common::tiny_train(50, 7) };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fit(&cfg, &train, &eval, &RunPaths::new(a.path()), None).unwrap();
    fit(&cfg, &train, &eval, &RunPaths::new(b.path()), None).unwrap();
    let la = fs::read(a.path().join("log.jsonl")).unwrap();
    let lb = fs::read(b.path().join("log.jsonl")).unwrap();
    assert_eq!(la, lb);
    let (steps, evals) = read_log(&a.path().join("log.jsonl")).unwrap();
    assert_eq!(steps.len(), 50);
    assert_eq!(evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![25, 50]);
    assert_eq!(fs::read(a.path().join("checkpoint.bin")).unwrap(), fs::read(b.path().join("checkpoint.bin")).unwrap());

    let other = tempfile::tempdir().unwrap();
    let cfg2 = maskdepth::trainer::TrainConfig { seed: 8, ..cfg };
    fit(&cfg2, &train, &eval, &RunPaths::new(other.path()), None).unwrap();
    assert_ne!(la, fs::read(other.path().join("log.jsonl")).unwrap());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (train, eval) = data();
    let full = tempfile::tempdir().unwrap();
    fit(&common::tiny_train(6, 2), &train, &eval, &RunPaths::new(full.path()), None).unwrap();
    let (reference, _) = read_log(&full.path().join("log.jsonl")).unwrap();

    let part = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(part.path());
    fit(&common::tiny_train(3, 2), &train, &eval, &paths, None).unwrap();
    assert_eq!(read_header(&paths.checkpoint()).unwrap().step, 3);
    fit(&common::tiny_train(6, 2), &train, &eval, &paths, Some(&paths.checkpoint())).unwrap();
    let (resumed, _) = read_log(&paths.log()).unwrap();
    assert_eq!(resumed, reference);
    let ck = load_checkpoint::<f32>(&paths.checkpoint()).unwrap();
    assert_eq!(ck.step, 6);
    assert_eq!(ck.opt.t, 6);
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let (train, eval) = data();
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(dir.path());
    let summary = fit(&common::tiny_train(0, 1), &train, &eval, &paths, None).unwrap();
    assert_eq!(summary.steps_done, 0);
    let ck = load_checkpoint::<f32>(&paths.checkpoint()).unwrap();
    assert_eq!(ck.step, 0);
    for (a, b) in ck.model.store.iter().zip(summary.model.store.iter()) {
        assert_eq!(a.value, b.value);
    }
    assert!(read_log(&paths.log()).unwrap().0.is_empty());
}
