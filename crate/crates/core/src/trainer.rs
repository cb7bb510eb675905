//! Two-branch training: a weak (unmasked) forward that supplies pseudo-labels
//! and a strong forward under K-way disjoint masking, sharing one model.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{derive_rng, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    depth_consistency, feature_consistency, supervised_l1, total_loss, uncertainty_nll, ConsistencyWeight,
    LossParts, LossRecord, LossWeights, SparseDepth,
};
use crate::masking::sample_partition;
use crate::metrics::{evaluate, DepthMetrics, EvalProtocol};
use crate::model::{Model, ModelConfig};
use crate::nn::Bound;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Float, Tensor};
use crate::tokens::ImageTensor;

const STREAM_LABELED: u64 = 10;
const STREAM_UNLABELED: u64 = 11;
const STREAM_SAMPLE: u64 = 12;

/// Learning-rate multiplier over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rates down to zero at the last step.
    Cosine,
}

/// Flat training configuration; key names are the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub labeled_fraction_per_batch: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_schedule: LrSchedule,
    pub steps: u64,
    pub seed: u64,
    pub lambda_dc: f64,
    pub lambda_uc: f64,
    pub lambda_fc: f64,
    pub weak_k: usize,
    pub strong_k: usize,
    pub consistency_weight: ConsistencyWeight,
    pub flip: bool,
    pub jitter: f64,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: u64,
    pub eval_cap: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            labeled_fraction_per_batch: 1.0 / 8.0,
            lr_encoder: 1e-5,
            lr_decoder: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_schedule: LrSchedule::Constant,
            steps: 1000,
            seed: 0,
            lambda_dc: 1.0,
            lambda_uc: 1.0,
            lambda_fc: 1.0,
            weak_k: 1,
            strong_k: 64,
            consistency_weight: ConsistencyWeight::Confidence,
            flip: true,
            jitter: 0.2,
            eval_every: 0,
            eval_cap: 80.0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_dc: self.lambda_dc,
            lambda_uc: self.lambda_uc,
            lambda_fc: self.lambda_fc,
            weak_k: self.weak_k,
            strong_k: self.strong_k,
            consistency_weight: self.consistency_weight,
        }
    }

    /// Adam settings with the scheduled rates for 0-based `step`.
    pub fn adam_at(&self, step: u64) -> AdamConfig {
        let scale = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / self.steps.max(1) as f64).cos()),
        };
        AdamConfig { lr_encoder: self.lr_encoder * scale, lr_decoder: self.lr_decoder * scale, ..self.adam() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_encoder: self.lr_encoder,
            lr_decoder: self.lr_decoder,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.labeled_fraction_per_batch > 0.0 && self.labeled_fraction_per_batch <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "labeled_fraction_per_batch {} outside (0, 1]",
                self.labeled_fraction_per_batch
            )));
        }
        if !(self.lr_encoder > 0.0 && self.lr_decoder > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return Err(Error::InvalidConfig(format!("jitter {} outside [0, 1)", self.jitter)));
        }
        if !(self.eval_cap > 0.0) {
            return Err(Error::InvalidConfig("eval_cap must be positive".into()));
        }
        Ok(())
    }

    /// Whether the strong branch contributes anything.
    pub fn uses_strong_branch(&self) -> bool {
        self.weights().uses_consistency()
    }

    /// Labeled samples per batch; `unlabeled_available` false gives an
    /// all-labeled batch.
    pub fn labeled_per_batch(&self, unlabeled_available: bool) -> usize {
        if !unlabeled_available {
            return self.batch_size;
        }
        let n = (self.batch_size as f64 * self.labeled_fraction_per_batch).round() as usize;
        n.clamp(1, self.batch_size)
    }
}

/// Images with optional ground truth; labeled samples come first.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub images: Vec<ImageTensor<F>>,
    pub gt: Vec<Option<SparseDepth<F>>>,
    pub is_labeled: Vec<bool>,
}

impl<F> Batch<F> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.is_labeled.iter().filter(|&&l| l).count()
    }
}

/// Position `t` of an endless stream that visits `0..len` once per epoch in
/// an epoch-specific shuffled order.
pub fn stream_index(seed: u64, stream: u64, len: usize, t: u64) -> usize {
    let epoch = t / len as u64;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut derive_rng(seed, stream, epoch));
    order[(t % len as u64) as usize]
}

/// Draws batch number `step`. Labeled and unlabeled samples come from their
/// own epoch-shuffled streams.
pub fn compose_batch<F: Float>(
    labeled: &[Sample<F>],
    unlabeled: &[Sample<F>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<Batch<F>> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledPool);
    }
    let n_lab = cfg.labeled_per_batch(!unlabeled.is_empty());
    let n_unl = cfg.batch_size - n_lab;
    let mut batch = Batch { images: Vec::new(), gt: Vec::new(), is_labeled: Vec::new() };
    for j in 0..n_lab {
        let s = &labeled[stream_index(cfg.seed, STREAM_LABELED, labeled.len(), step * n_lab as u64 + j as u64)];
        let gt = s.gt.clone().ok_or_else(|| Error::InvalidConfig(format!("sample {} has no ground truth", s.id)))?;
        batch.images.push(s.image.clone());
        batch.gt.push(Some(gt));
        batch.is_labeled.push(true);
    }
    for j in 0..n_unl {
        let s = &unlabeled[stream_index(cfg.seed, STREAM_UNLABELED, unlabeled.len(), step * n_unl as u64 + j as u64)];
        batch.images.push(s.image.clone());
        batch.gt.push(None);
        batch.is_labeled.push(false);
    }
    Ok(batch)
}

/// Brightness, contrast and saturation perturbation with factors drawn from
/// `[1 − s, 1 + s]`. Strength 0 returns the image unchanged.
pub fn jitter<F: Float, R: Rng + ?Sized>(image: &ImageTensor<F>, strength: f64, rng: &mut R) -> ImageTensor<F> {
    if strength <= 0.0 {
        return image.clone();
    }
    let mut draw = || F::lit(1.0 + rng.random_range(-strength..=strength));
    let (b, c, s) = (draw(), draw(), draw());
    let (h, w) = (image.height(), image.width());
    let hw = h * w;
    let mut x: Vec<F> = image.tensor().data().iter().map(|&v| v * b).collect();
    let mean = x.iter().copied().sum::<F>() / F::lit(x.len() as f64);
    x.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
    let (wr, wg, wb) = (F::lit(0.299), F::lit(0.587), F::lit(0.114));
    for i in 0..hw {
        let gray = wr * x[i] + wg * x[hw + i] + wb * x[2 * hw + i];
        for ch in 0..3 {
            let v = &mut x[ch * hw + i];
            *v = (*v - gray) * s + gray;
        }
    }
    x.iter_mut().for_each(|v| *v = v.max(F::zero()).min(F::one()));
    ImageTensor::new(Tensor::new([3, h, w], x)).expect("same shape")
}

/// Weak and strong views of one image. The flip decision is shared; jitter
/// is drawn independently per view.
pub fn augment_pair<F: Float, R: Rng + ?Sized>(
    image: &ImageTensor<F>,
    rng: &mut R,
    flip: bool,
    jitter_strength: f64,
) -> (ImageTensor<F>, ImageTensor<F>, bool) {
    let flipped = flip && rng.random_bool(0.5);
    let base = if flipped { image.flip_horizontal() } else { image.clone() };
    let weak = jitter(&base, jitter_strength, rng);
    let strong = jitter(&base, jitter_strength, rng);
    (weak, strong, flipped)
}

/// Log line for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_gt: f64,
    pub l_dc: f64,
    pub l_uc: f64,
    pub l_fc: f64,
    pub total: f64,
    pub lr_enc: f64,
    pub lr_dec: f64,
}

/// Log line for one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: u64,
    #[serde(flatten)]
    pub metrics: DepthMetrics,
}

#[derive(Default)]
struct SampleTerms<F> {
    objective: Option<NodeId>,
    l_gt: Option<F>,
    l_uc: Option<F>,
    l_dc: Option<F>,
    l_fc: Option<F>,
}

/// Builds the per-sample objective on `g`. Terms are pre-scaled so that the
/// sum over the batch is the batch loss.
#[allow(clippy::too_many_arguments)]
fn sample_objective<F: Float, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    b: &Bound,
    model: &Model<F>,
    image: &ImageTensor<F>,
    gt: Option<&SparseDepth<F>>,
    cfg: &TrainConfig,
    n_labeled: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<SampleTerms<F>> {
    let w = cfg.weights();
    let strong_on = cfg.uses_strong_branch();
    let (weak_img, strong_img, flipped) = augment_pair(image, rng, cfg.flip, cfg.jitter);
    let gt = gt.map(|d| if flipped { d.flip_horizontal() } else { d.clone() });
    let n = model.num_tokens();
    let weak_part = if cfg.weak_k > 1 { Some(sample_partition(n, cfg.weak_k, rng)?) } else { None };
    let strong_part = sample_partition(n, cfg.strong_k, rng)?;
    let per_lab = F::one() / F::lit(n_labeled.max(1) as f64);
    let per_all = F::one() / F::lit(batch_size as f64);
    let mut out = SampleTerms::default();
    let mut terms = Vec::new();
    let mut l_gt_nodes = Vec::new();

    // Labeled samples are supervised through the weak branch too; unlabeled
    // ones only use it for targets.
    let weak = if let Some(gt) = &gt {
        let wf = model.forward(g, b, &weak_img, weak_part.as_ref())?;
        l_gt_nodes.push(supervised_l1(g, wf.depth, gt)?);
        // With λ_uc = 0 the uncertainty head is untrained and its NLL can
        // overflow, so the term is neither computed nor logged.
        if w.lambda_uc > 0.0 {
            let l_uc = uncertainty_nll(g, wf.depth, wf.log_uncertainty, gt)?;
            out.l_uc = Some(g.value(l_uc).item());
            terms.push(g.scale(l_uc, per_lab * F::lit(w.lambda_uc)));
        }
        Some((wf.depth, wf.log_uncertainty, wf.tokens))
    } else if strong_on {
        let wf = model.predict(&weak_img, weak_part.as_ref())?;
        Some((
            g.constant(wf.prediction.depth),
            g.constant(wf.prediction.log_uncertainty),
            g.constant(wf.tokens),
        ))
    } else {
        None
    };

    if let (true, Some((wd, ws, wt))) = (strong_on, weak) {
        let sf = model.forward(g, b, &strong_img, Some(&strong_part))?;
        if let Some(gt) = &gt {
            l_gt_nodes.push(supervised_l1(g, sf.depth, gt)?);
        }
        let l_dc = depth_consistency(g, wd, ws, sf.depth, w.consistency_weight)?;
        out.l_dc = Some(g.value(l_dc).item());
        if w.lambda_dc > 0.0 {
            terms.push(g.scale(l_dc, per_all * F::lit(w.lambda_dc)));
        }
        let l_fc = feature_consistency(g, b, wt, sf.tokens, &model.arch.predictor)?;
        out.l_fc = Some(g.value(l_fc).item());
        if w.lambda_fc > 0.0 {
            terms.push(g.scale(l_fc, per_all * F::lit(w.lambda_fc)));
        }
    }

    if let Some((&first, rest)) = l_gt_nodes.split_first() {
        let sum = rest.iter().fold(first, |acc, &t| g.add(acc, t));
        let l_gt = g.scale(sum, F::one() / F::lit(l_gt_nodes.len() as f64));
        out.l_gt = Some(g.value(l_gt).item());
        terms.push(g.scale(l_gt, per_lab));
    }
    out.objective = terms.split_first().map(|(&first, rest)| rest.iter().fold(first, |acc, &t| g.add(acc, t)));
    Ok(out)
}

/// One optimizer step on `batch`. `step` seeds the augmentation and
/// partition draws.
pub fn train_step<F: Float>(
    model: &mut Model<F>,
    opt: &mut Adam<F>,
    batch: &Batch<F>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let n_lab = batch.num_labeled();
    let bsz = batch.len();
    let mut grads: Vec<Option<Tensor<F>>> = vec![None; model.store.len()];
    let (mut gt_sum, mut uc_sum, mut dc_sum, mut fc_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut n_consistency = 0usize;
    for i in 0..bsz {
        let mut rng = derive_rng(cfg.seed, STREAM_SAMPLE, step * bsz as u64 + i as u64);
        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let terms = sample_objective(&mut g, &b, model, &batch.images[i], batch.gt[i].as_ref(), cfg, n_lab, bsz, &mut rng)?;
        gt_sum += terms.l_gt.map_or(0.0, |v| v.as_f64());
        uc_sum += terms.l_uc.map_or(0.0, |v| v.as_f64());
        if let (Some(dc), Some(fc)) = (terms.l_dc, terms.l_fc) {
            dc_sum += dc.as_f64();
            fc_sum += fc.as_f64();
            n_consistency += 1;
        }
        let Some(objective) = terms.objective else { continue };
        let mut sg = g.backward(objective);
        for (slot, &node) in grads.iter_mut().zip(b.nodes()) {
            if let Some(t) = sg.take(node) {
                match slot {
                    Some(acc) => acc.add_assign(&t),
                    None => *slot = Some(t),
                }
            }
        }
    }
    let labeled_mean = |s: f64| (n_lab > 0).then(|| s / n_lab as f64);
    let consistency_mean = |s: f64| if n_consistency > 0 { s / n_consistency as f64 } else { 0.0 };
    let parts = LossParts {
        l_gt: labeled_mean(gt_sum),
        l_uc: labeled_mean(uc_sum),
        l_dc: consistency_mean(dc_sum),
        l_fc: consistency_mean(fc_sum),
    };
    let record = total_loss(&parts, &cfg.weights())?;
    let grads_finite = grads.iter().flatten().all(|t| t.is_finite());
    if !record.is_finite() || !grads_finite {
        return Err(Error::NonFiniteLoss {
            step,
            terms: format!(
                "l_gt={} l_dc={} l_uc={} l_fc={} total={} grads_finite={grads_finite}",
                record.l_gt, record.l_dc, record.l_uc, record.l_fc, record.total
            ),
        });
    }
    opt.cfg = cfg.adam_at(step);
    opt.step(&mut model.store, &grads)?;
    Ok(record)
}

/// Per-image metrics of `model` on the labeled samples of `eval`.
pub fn evaluate_model<F: Float>(model: &Model<F>, eval: &[Sample<F>], cap: f64) -> Result<DepthMetrics> {
    let labeled: Vec<&Sample<F>> = eval.iter().filter(|s| s.gt.is_some()).collect();
    evaluate(
        labeled.len(),
        |i| {
            let s = labeled[i];
            let out = model.predict(&s.image, None)?;
            Ok((out.prediction.depth, s.gt.clone().expect("filtered")))
        },
        EvalProtocol { cap },
    )
}

/// Where `fit` writes its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.out_dir.join("log.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.out_dir.join("checkpoint.bin")
    }
}

#[derive(Clone, Debug)]
pub struct FitSummary<F> {
    pub model: Model<F>,
    pub steps_done: u64,
    pub last: Option<LossRecord>,
    pub metrics: Option<DepthMetrics>,
}

/// Trains from scratch or from `resume`, logging JSON lines and writing a
/// checkpoint. Unlabeled samples are ignored when no consistency term is on.
pub fn fit<F: Float>(
    cfg: &TrainConfig,
    train: &[Sample<F>],
    eval: &[Sample<F>],
    paths: &RunPaths,
    resume: Option<&Path>,
) -> Result<FitSummary<F>> {
    cfg.validate()?;
    fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
    let labeled: Vec<Sample<F>> = train.iter().filter(|s| s.gt.is_some()).cloned().collect();
    let unlabeled: Vec<Sample<F>> = if cfg.uses_strong_branch() {
        train.iter().filter(|s| s.gt.is_none()).cloned().collect()
    } else {
        Vec::new()
    };
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledPool);
    }
    let (mut model, mut opt, start) = match resume {
        Some(path) => {
            let ck = load_checkpoint::<F>(path)?;
            if ck.model.cfg != cfg.model {
                return Err(Error::InvalidConfig(format!("{} was trained with a different model config", path.display())));
            }
            let mut opt = ck.opt;
            opt.cfg = cfg.adam();
            (ck.model, opt, ck.step)
        }
        None => {
            let model = Model::<F>::new(cfg.model.clone(), cfg.seed)?;
            let opt = Adam::new(cfg.adam(), &model.store);
            (model, opt, 0)
        }
    };
    let log_path = paths.log();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);

    if start >= cfg.steps {
        save_checkpoint(&paths.checkpoint(), cfg, start, &model, &opt)?;
    }
    let mut last = None;
    let mut metrics = None;
    let has_eval = eval.iter().any(|s| s.gt.is_some());
    for step in start..cfg.steps {
        let batch = compose_batch(&labeled, &unlabeled, cfg, step)?;
        let rec = train_step(&mut model, &mut opt, &batch, cfg, step)?;
        let done = step + 1;
        write_json(&mut log, &log_path, &StepLog {
            step: done,
            l_gt: rec.l_gt,
            l_dc: rec.l_dc,
            l_uc: rec.l_uc,
            l_fc: rec.l_fc,
            total: rec.total,
            lr_enc: opt.cfg.lr_encoder,
            lr_dec: opt.cfg.lr_decoder,
        })?;
        last = Some(rec);
        let final_step = done == cfg.steps;
        if has_eval && (final_step || (cfg.eval_every > 0 && done % cfg.eval_every == 0)) {
            let m = evaluate_model(&model, eval, cfg.eval_cap)?;
            write_json(&mut log, &log_path, &EvalLog { step: done, metrics: m })?;
            metrics = Some(m);
        }
        if final_step || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save_checkpoint(&paths.checkpoint(), cfg, done, &model, &opt)?;
        }
    }
    Ok(FitSummary { model, steps_done: cfg.steps.max(start), last, metrics })
}

fn write_json<T: Serialize>(log: &mut BufWriter<File>, path: &Path, v: &T) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| Error::format(path, e.to_string()))?;
    writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines log back.
pub fn read_log(path: &Path) -> Result<(Vec<StepLog>, Vec<EvalLog>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut steps, mut evals) = (Vec::new(), Vec::new());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?;
        if v.get("abs_rel").is_some() {
            evals.push(serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string()))?);
        } else {
            steps.push(serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string()))?);
        }
    }
    Ok((steps, evals))
}
