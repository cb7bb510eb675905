//! Self-check suites behind `maskdepth verify`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::{Graph, NodeId};
use crate::encoder::{encode, encode_subsets_oracle, AttnScale, Encoder, EncoderConfig, MaskFill};
use crate::error::Result;
use crate::losses::{
    depth_consistency, feature_consistency, supervised_l1, uncertainty_nll, ConsistencyWeight, PredictorHead,
    SparseDepth,
};
use crate::masking::{build_attention_mask, reassemble, sample_partition, shuffle};
use crate::metrics::depth_metrics;
use crate::model::{Model, ModelConfig};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::tokens::{Grid, ImageTensor, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Masking,
    Gradcheck,
    Metrics,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { suite, name: name.into(), passed, detail: detail.into() }
    }
}

pub fn run(suite: Suite, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Masking | Suite::All) {
        out.extend(masking_suite(seed));
    }
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        out.extend(gradcheck_suite(seed));
    }
    if matches!(suite, Suite::Metrics | Suite::All) {
        out.extend(metrics_suite(seed));
    }
    out
}

fn random_tensor<F: Float, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(shape.to_vec(), |_| F::lit(StandardNormal.sample(rng)))
}

fn encoder_cfg(depth: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        depth,
        d_model: d,
        heads: if d >= 32 { 4 } else { 2 },
        mlp_ratio: 2.0,
        skip_blocks: (0..depth).collect(),
        mask_fill: MaskFill::Exact,
        attn_scale: AttnScale::Standard,
    }
}

/// Max |joint − per-subset| over final tokens and skips for one random case.
pub fn subset_independence_error<F: Float>(n: usize, d: usize, depth: usize, k: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<F>::new();
    let enc = Encoder::new(&mut store, encoder_cfg(depth, d), &mut rng)?;
    let tokens = random_tensor::<F, _>(&[n, d], &mut rng);
    let seq = TokenSequence::new(tokens, Grid { rows: 1, cols: n }, 1)?;
    let part = sample_partition(n, k, &mut rng)?;
    let mut shuffled = seq.clone();
    shuffled.tokens = shuffle(&seq.tokens, &part)?;
    shuffled.perm = Some(Rc::clone(&part.perm));
    let joint = encode(&shuffled, Some(&build_attention_mask(&part)), &enc, &store)?;
    let oracle = encode_subsets_oracle(&seq, &part, &enc, &store)?;
    let mut err = reassemble(&joint.final_tokens, &part)?.max_abs_diff(&oracle.final_tokens).as_f64();
    for (j, o) in joint.skips.iter().zip(&oracle.skips) {
        err = err.max(reassemble(j, &part)?.max_abs_diff(o).as_f64());
    }
    Ok(err)
}

/// Violations among `count` sampled partitions: cover, disjointness,
/// inverse-permutation round-trip, and mask/subset agreement.
pub fn partition_violations(count: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..count {
        let n = rng.random_range(1..=96);
        let k = rng.random_range(1..=80);
        let p = sample_partition(n, k, &mut rng)?;
        let mut seen = vec![0u32; n];
        p.subsets.iter().flatten().for_each(|&i| seen[i] += 1);
        let cover = seen.iter().all(|&c| c == 1) && p.k() == k;
        let round = (0..n).all(|i| p.perm[p.inv_perm[i]] == i && p.inv_perm[p.perm[i]] == i);
        let labels = p.labels();
        let mask = build_attention_mask(&p);
        let agree = (0..n).all(|a| (0..n).all(|b| mask.allowed(a, b) == (labels[p.perm[a]] == labels[p.perm[b]])));
        if !(cover && round && agree) {
            bad += 1;
        }
    }
    Ok(bad)
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig { patch_size: 16, ..ModelConfig::default() };
    cfg.encoder.d_model = 8;
    cfg.encoder.depth = 2;
    cfg.encoder.heads = 2;
    cfg.encoder.mlp_ratio = 2.0;
    cfg.encoder.skip_blocks = vec![0, 1, 1, 1];
    cfg.decoder.level_widths = vec![4; 4];
    cfg.decoder.features = 4;
    cfg.decoder.head_hidden = 4;
    cfg.decoder.d_min = 0.5;
    cfg.decoder.d_max = 20.0;
    cfg
}

fn random_image<F: Float>(rng: &mut ChaCha8Rng) -> ImageTensor<F> {
    let data: Vec<F> = (0..3 * 32 * 64).map(|_| F::lit(rng.random::<f64>())).collect();
    ImageTensor::new(Tensor::new(vec![3, 32, 64], data)).expect("3-channel image")
}

/// K=1 masked forward vs unmasked forward of the desk model (fp64).
pub fn k1_neutrality_error(seed: u64) -> Result<f64> {
    let model = Model::<f64>::new(ModelConfig::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = random_image::<f64>(&mut rng);
    let part = sample_partition(model.num_tokens(), 1, &mut rng)?;
    let a = model.predict(&img, None)?;
    let b = model.predict(&img, Some(&part))?;
    Ok(a.prediction.depth.max_abs_diff(&b.prediction.depth).as_f64())
}

pub fn masking_suite(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    let mut failure = None;
    for case in 0..20 {
        let n = rng.random_range(8..=64);
        let d = [16, 32, 64][rng.random_range(0..3)];
        let depth = rng.random_range(1..=3);
        let k = rng.random_range(1..=8);
        let s = seed.wrapping_add(case);
        match (
            subset_independence_error::<f64>(n, d, depth, k, s),
            subset_independence_error::<f32>(n, d, depth, k, s),
        ) {
            (Ok(a), Ok(b)) => {
                worst64 = worst64.max(a);
                worst32 = worst32.max(b);
            }
            (Err(e), _) | (_, Err(e)) => failure = Some(e.to_string()),
        }
    }
    let ok = failure.is_none() && worst64 <= 1e-10 && worst32 <= 1e-5;
    let detail = failure.unwrap_or_else(|| format!("max err fp64 {worst64:.2e}, fp32 {worst32:.2e} over 20 configs"));
    out.push(Check::new("masking", "subset_independence", ok, detail));

    out.push(match k1_neutrality_error(seed) {
        Ok(e) => Check::new("masking", "k1_neutrality", e <= 1e-6, format!("max err {e:.2e}")),
        Err(e) => Check::new("masking", "k1_neutrality", false, e.to_string()),
    });
    out.push(match partition_violations(2000, seed) {
        Ok(v) => Check::new("masking", "partition_invariants", v == 0, format!("{v} violations in 2000 partitions")),
        Err(e) => Check::new("masking", "partition_invariants", false, e.to_string()),
    });
    out
}

/// Normwise relative error between the tape gradient and central finite
/// differences of `f` with respect to every input. Inputs listed in
/// `detached` sit behind a stop-gradient: their tape gradient must be exactly
/// zero (error 1 otherwise) and they are not differenced.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    detached: &[usize],
    f: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    eps: f64,
) -> Result<f64> {
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.param(Rc::new(t.clone()))).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(Rc::new(t.clone()))).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out);
    let mut worst = 0.0f64;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        if detached.contains(&i) {
            if analytic.data().iter().any(|&x| x != 0.0) {
                worst = 1.0;
            }
            continue;
        }
        let mut numeric = Vec::with_capacity(inputs[i].len());
        let mut vals = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            vals[i].data_mut()[j] = x + eps;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] = x - eps;
            let down = eval(&vals)?;
            vals[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * eps));
        }
        worst = worst.max(normwise_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn normwise_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Directional-derivative check of the end-to-end tiny model: for each
/// parameter tensor, `∇L·v` against `(L(θ+εv) − L(θ−εv)) / 2ε` along a unit
/// direction `v` mixing the tensor's gradient with a random direction.
/// Returns the normwise relative error over all tensors.
pub fn model_gradcheck(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(tiny_model_config(), seed)?;
    // Zero-initialised biases put whole regions exactly on ReLU kinks; move
    // to a generic point first.
    for p in model.store.iter_mut() {
        let t = Rc::make_mut(&mut p.value);
        t.data_mut().iter_mut().for_each(|x| *x += 0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
    }
    let img = random_image::<f64>(&mut rng);
    let strong_img = random_image::<f64>(&mut rng);
    let gt_values = Tensor::from_fn([32, 64], |_| rng.random_range(1.0..15.0));
    let valid: Vec<bool> = (0..32 * 64).map(|_| rng.random_bool(0.3)).collect();
    let gt = SparseDepth::new(gt_values, valid)?;
    let part = sample_partition(model.num_tokens(), 3, &mut rng)?;
    // Stop-gradient targets are frozen at the base parameters so finite
    // differences see the same objective the tape differentiates.
    let frozen = model.predict(&img, None)?;
    let loss = |m: &Model<f64>, g: &mut Graph<f64>, b: &Bound| -> Result<NodeId> {
        let w = m.forward(g, b, &img, None)?;
        let s = m.forward(g, b, &strong_img, Some(&part))?;
        let wd = g.constant(frozen.prediction.depth.clone());
        let wu = g.constant(frozen.prediction.log_uncertainty.clone());
        let wz = g.constant(frozen.tokens.clone());
        let l_gt = supervised_l1(g, s.depth, &gt)?;
        let l_uc = uncertainty_nll(g, w.depth, w.log_uncertainty, &gt)?;
        let l_dc = depth_consistency(g, wd, wu, s.depth, ConsistencyWeight::Confidence)?;
        let l_fc = feature_consistency(g, b, wz, s.tokens, &m.arch.predictor)?;
        let a = g.add(l_gt, l_uc);
        let c = g.add(l_dc, l_fc);
        Ok(g.add(a, c))
    };
    let mut g = Graph::new();
    let b = model.store.bind(&mut g);
    let root = loss(&model, &mut g, &b)?;
    let grads = g.backward(root);
    let eps = 1e-6;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (pi, &node) in b.nodes().iter().enumerate() {
        let Some(grad) = grads.get(node) else { continue };
        let unit = |t: &Tensor<f64>| {
            let n = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            t.map(|x| if n > 0.0 { x / n } else { 0.0 })
        };
        let mut v = unit(&random_tensor::<f64, _>(grad.shape(), &mut rng));
        v.add_assign(&unit(grad));
        let v = unit(&v);
        analytic.push(grad.data().iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>());
        let shifted = |sign: f64| -> Result<f64> {
            let mut m = model.clone();
            let p = m.store.iter_mut().nth(pi).expect("param");
            let t = Rc::make_mut(&mut p.value);
            t.data_mut().iter_mut().zip(v.data()).for_each(|(w, d)| *w += sign * eps * d);
            let mut g = Graph::no_grad();
            let b = m.store.bind(&mut g);
            let r = loss(&m, &mut g, &b)?;
            Ok(g.value(r).item())
        };
        numeric.push((shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps));
    }
    Ok(normwise_error(&analytic, &numeric))
}

/// Gradchecks of each loss at fp64; returns `(name, error)` pairs.
pub fn loss_gradchecks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (4, 5);
    let gt_values = Tensor::from_fn([h, w], |_| rng.random_range(1.0..5.0));
    let valid: Vec<bool> = (0..h * w).map(|i| i % 3 != 1).collect();
    let gt = SparseDepth::new(gt_values.clone(), valid)?;
    // Keep predictions away from the |·| kink.
    let pred = Tensor::from_fn([h, w], |i| gt_values[i] + if rng.random_bool(0.5) { 0.7 } else { -0.7 });
    let log_u = random_tensor::<f64, _>(&[h, w], &mut rng);
    let strong = pred.map(|p| p + 0.4);
    let mut out = Vec::new();
    let eps = 1e-6;
    out.push(("supervised_l1", gradcheck(&[pred.clone()], &[], |g, x| supervised_l1(g, x[0], &gt), eps)?));
    out.push((
        "uncertainty_nll",
        gradcheck(&[pred.clone(), log_u.clone()], &[], |g, x| uncertainty_nll(g, x[0], x[1], &gt), eps)?,
    ));
    for mode in [ConsistencyWeight::Confidence, ConsistencyWeight::Literal] {
        let name = match mode {
            ConsistencyWeight::Confidence => "depth_consistency",
            ConsistencyWeight::Literal => "depth_consistency_literal",
        };
        out.push((
            name,
            gradcheck(&[pred.clone(), log_u.clone(), strong.clone()], &[0, 1], |g, x| depth_consistency(g, x[0], x[1], x[2], mode), eps)?,
        ));
    }
    let mut store = ParamStore::<f64>::new();
    let d = 6;
    let head = PredictorHead::new(&mut store, d, &mut rng);
    for p in store.iter_mut() {
        // Non-zero second layer so the MLP path is exercised.
        let t = Rc::make_mut(&mut p.value);
        t.data_mut().iter_mut().for_each(|x| *x += 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
    }
    let params: Vec<Tensor<f64>> = store.iter().map(|p| (*p.value).clone()).collect();
    let zw = random_tensor::<f64, _>(&[5, d], &mut rng);
    let zs = random_tensor::<f64, _>(&[5, d], &mut rng);
    let mut inputs = vec![zw, zs];
    inputs.extend(params);
    let err = gradcheck(
        &inputs,
        &[0],
        |g, x| {
            // The head's parameters are inputs 2.. so they are perturbed too.
            let b = Bound::from_nodes(x[2..].to_vec());
            feature_consistency(g, &b, x[0], x[1], &head)
        },
        eps,
    )?;
    out.push(("feature_consistency", err));
    Ok(out)
}

pub fn gradcheck_suite(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    match loss_gradchecks(seed) {
        Ok(list) => {
            for (name, e) in list {
                out.push(Check::new("gradcheck", name, e <= 1e-3, format!("rel err {e:.2e}")));
            }
        }
        Err(e) => out.push(Check::new("gradcheck", "losses", false, e.to_string())),
    }
    out.push(match model_gradcheck(seed) {
        Ok(e) => Check::new("gradcheck", "end_to_end_model", e <= 1e-3, format!("normwise rel err {e:.2e}")),
        Err(e) => Check::new("gradcheck", "end_to_end_model", false, e.to_string()),
    });
    out
}

/// Straight per-pixel loop used as the reference for [`depth_metrics`].
fn naive_metrics(pred: &[f64], gt: &[f64], valid: &[bool], cap: f64) -> [f64; 8] {
    let mut rows = Vec::new();
    for i in 0..pred.len() {
        if valid[i] && gt[i] > 0.0 {
            rows.push((pred[i].clamp(1e-3, cap), gt[i].clamp(1e-3, cap)));
        }
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| rows.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
    [
        mean(&|p, g| (p - g).abs() / g),
        mean(&|p, g| (p - g).powi(2) / g),
        mean(&|p, g| (p - g).powi(2)).sqrt(),
        mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        mean(&|p, g| (p.log10() - g.log10()).abs()),
        mean(&|p, g| f64::from(u8::from((p / g).max(g / p) < 1.25))),
        mean(&|p, g| f64::from(u8::from((p / g).max(g / p) < 1.25 * 1.25))),
        mean(&|p, g| f64::from(u8::from((p / g).max(g / p) < 1.25 * 1.25 * 1.25))),
    ]
}

pub fn metrics_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failed = None;
    for _ in 0..20 {
        let n = rng.random_range(1..40);
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..90.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        valid[0] = true;
        let got = depth_metrics(&Tensor::new([n], pred.clone()), &Tensor::new([n], gt.clone()), &valid, 80.0);
        match got {
            Ok(m) => {
                let want = naive_metrics(&pred, &gt, &valid, 80.0);
                let have = [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.log10, m.delta1, m.delta2, m.delta3];
                for (a, b) in have.iter().zip(want) {
                    worst = worst.max((a - b).abs());
                }
            }
            Err(e) => failed = Some(e.to_string()),
        }
    }
    let mut out = vec![Check::new(
        "metrics",
        "naive_oracle",
        failed.is_none() && worst <= 1e-12,
        failed.unwrap_or_else(|| format!("max abs diff {worst:.2e}")),
    )];
    let g = Tensor::new([3], vec![1.0, 5.0, 30.0]);
    let same = depth_metrics(&g, &g, &[true; 3], 80.0);
    out.push(Check::new(
        "metrics",
        "identity_prediction",
        same.is_ok_and(|m| m.abs_rel == 0.0 && m.rmse == 0.0 && m.delta1 == 1.0),
        "pred = gt",
    ));
    let double = depth_metrics(&g.map(|x| 2.0 * x), &g, &[true; 3], 80.0);
    out.push(Check::new(
        "metrics",
        "doubled_prediction",
        double.is_ok_and(|m| m.abs_rel == 1.0 && m.delta1 == 0.0),
        "pred = 2 gt",
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let checks = run(Suite::All, 0);
        for c in &checks {
            println!("{} {} {} {}", c.suite, c.name, c.passed, c.detail);
        }
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
