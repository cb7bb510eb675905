//! Supervised, uncertainty, depth-consistency and feature-consistency losses.
//!
//! All functions build graph nodes so gradients come from the tape. Targets
//! that must not receive gradient (pseudo-labels, the confidence weight, the
//! weak-branch features) are detached inside the loss.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamGroup, ParamStore};
use crate::tensor::{Float, Tensor};

/// Ground-truth depth `[h, w]` with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepth<F> {
    pub values: Tensor<F>,
    pub valid: Vec<bool>,
}

impl<F: Float> SparseDepth<F> {
    pub fn new(values: Tensor<F>, valid: Vec<bool>) -> Result<Self> {
        if values.ndim() != 2 || values.len() != valid.len() {
            return Err(Error::ShapeMismatch(format!(
                "depth {:?} with {} validity bits",
                values.shape(),
                valid.len()
            )));
        }
        if values.data().iter().zip(&valid).any(|(v, &ok)| ok && !v.is_finite()) {
            return Err(Error::NonFinite("valid ground-truth depth".into()));
        }
        Ok(Self { values, valid })
    }

    pub fn dense(values: Tensor<F>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::new(values, valid)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn mask_tensor(&self) -> Tensor<F> {
        Tensor::from_fn(self.values.shape().to_vec(), |i| {
            if self.valid[i] {
                F::one()
            } else {
                F::zero()
            }
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let src = |i: usize| (i / w) * w + (w - 1 - i % w);
        Self {
            values: Tensor::from_fn([h, w], |i| self.values[src(i)]),
            valid: (0..h * w).map(|i| self.valid[src(i)]).collect(),
        }
    }
}

/// How the weak branch's log-uncertainty weights the depth-consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyWeight {
    /// `min(exp(−s), 1)`: confident pixels count, uncertain ones fade out.
    #[default]
    Confidence,
    /// `exp(s)`: the uncertainty map itself.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dc: f64,
    pub lambda_uc: f64,
    pub lambda_fc: f64,
    pub weak_k: usize,
    pub strong_k: usize,
    #[serde(default)]
    pub consistency_weight: ConsistencyWeight,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dc: 1.0,
            lambda_uc: 1.0,
            lambda_fc: 1.0,
            weak_k: 1,
            strong_k: 64,
            consistency_weight: ConsistencyWeight::Confidence,
        }
    }
}

impl LossWeights {
    pub fn with_lambdas(dc: f64, uc: f64, fc: f64) -> Self {
        Self { lambda_dc: dc, lambda_uc: uc, lambda_fc: fc, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_dc", self.lambda_dc), ("lambda_uc", self.lambda_uc), ("lambda_fc", self.lambda_fc)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.weak_k == 0 || self.strong_k == 0 {
            return Err(Error::InvalidK(0));
        }
        Ok(())
    }

    /// True when any unlabeled-data term is active.
    pub fn uses_consistency(&self) -> bool {
        self.lambda_dc > 0.0 || self.lambda_fc > 0.0
    }
}

fn check_same(g: &Graph<impl Float>, a: NodeId, shape: &[usize], what: &str) -> Result<()> {
    if g.shape(a) != shape {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", g.shape(a), shape)));
    }
    Ok(())
}

fn masked_mean<F: Float>(g: &mut Graph<F>, x: NodeId, gt: &SparseDepth<F>) -> Result<NodeId> {
    let count = gt.valid_count();
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    let m = g.mul_const(x, Rc::new(gt.mask_tensor()));
    let s = g.sum(m);
    Ok(g.scale(s, F::one() / F::lit(count as f64)))
}

fn residual<F: Float>(g: &mut Graph<F>, pred: NodeId, gt: &SparseDepth<F>) -> NodeId {
    // Invalid pixels may hold anything; zero them so they stay finite.
    let target = Tensor::from_fn(gt.values.shape().to_vec(), |i| {
        if gt.valid[i] {
            gt.values[i]
        } else {
            F::zero()
        }
    });
    let t = g.constant(target);
    let d = g.sub(pred, t);
    g.abs(d)
}

/// Mean over valid pixels of `|pred − gt|`.
pub fn supervised_l1<F: Float>(g: &mut Graph<F>, pred: NodeId, gt: &SparseDepth<F>) -> Result<NodeId> {
    check_same(g, pred, gt.values.shape(), "prediction vs ground truth")?;
    let r = residual(g, pred, gt);
    masked_mean(g, r, gt)
}

/// Mean over valid pixels of `|pred − gt|·exp(−s) + s` with `s` the predicted
/// log-uncertainty.
pub fn uncertainty_nll<F: Float>(g: &mut Graph<F>, pred: NodeId, log_u: NodeId, gt: &SparseDepth<F>) -> Result<NodeId> {
    check_same(g, pred, gt.values.shape(), "prediction vs ground truth")?;
    check_same(g, log_u, gt.values.shape(), "log-uncertainty vs ground truth")?;
    let r = residual(g, pred, gt);
    let neg = g.scale(log_u, -F::one());
    let inv_u = g.exp(neg);
    let t = g.mul(r, inv_u);
    let t = g.add(t, log_u);
    masked_mean(g, t, gt)
}

/// Per-pixel weight derived from the (detached) weak log-uncertainty.
pub fn consistency_weight<F: Float>(log_u: &Tensor<F>, mode: ConsistencyWeight) -> Tensor<F> {
    match mode {
        ConsistencyWeight::Confidence => log_u.map(|s| (-s).exp().max(F::zero()).min(F::one())),
        ConsistencyWeight::Literal => log_u.map(|s| s.exp()),
    }
}

/// Mean over all pixels of `w ⊙ |sg(weak) − strong|` with `w` from
/// [`consistency_weight`] on `sg(weak_log_u)`.
pub fn depth_consistency<F: Float>(
    g: &mut Graph<F>,
    weak_depth: NodeId,
    weak_log_u: NodeId,
    strong_depth: NodeId,
    mode: ConsistencyWeight,
) -> Result<NodeId> {
    let shape = g.shape(strong_depth).to_vec();
    check_same(g, weak_depth, &shape, "weak vs strong depth")?;
    check_same(g, weak_log_u, &shape, "weak log-uncertainty vs strong depth")?;
    let target = g.detach(weak_depth);
    let w = Rc::new(consistency_weight(g.value(weak_log_u), mode));
    let d = g.sub(target, strong_depth);
    let d = g.abs(d);
    let d = g.mul_const(d, w);
    Ok(g.mean(d))
}

/// Residual two-layer token MLP `h(z) = z + W2·gelu(W1·z)`; `W2` starts at
/// zero so `h` starts as the identity.
#[derive(Clone, Debug)]
pub struct PredictorHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PredictorHead {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, d_model: usize, rng: &mut R) -> Self {
        let fc1 = Linear::new(store, "predictor.fc1", ParamGroup::Decoder, d_model, d_model, true, rng);
        let fc2 = Linear::new(store, "predictor.fc2", ParamGroup::Decoder, d_model, d_model, true, rng);
        store.get_mut(fc2.weight).data_mut().iter_mut().for_each(|x| *x = F::zero());
        Self { fc1, fc2 }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, b: &Bound, z: NodeId) -> NodeId {
        let h = self.fc1.forward(g, b, z);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, b, h);
        g.add(z, h)
    }
}

/// Mean over tokens of `‖sg(z_weak) − h(z_strong)‖²`.
pub fn feature_consistency<F: Float>(
    g: &mut Graph<F>,
    b: &Bound,
    z_weak: NodeId,
    z_strong: NodeId,
    head: &PredictorHead,
) -> Result<NodeId> {
    let shape = g.shape(z_strong).to_vec();
    check_same(g, z_weak, &shape, "weak vs strong features")?;
    let n = shape[0];
    let target = g.detach(z_weak);
    let p = head.forward(g, b, z_strong);
    let d = g.sub(target, p);
    let d = g.square(d);
    let s = g.sum(d);
    Ok(g.scale(s, F::one() / F::lit(n.max(1) as f64)))
}

/// Loss values of one step; labeled-only terms are `None` when the batch had
/// no labels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_gt: Option<f64>,
    pub l_dc: f64,
    pub l_uc: Option<f64>,
    pub l_fc: f64,
}

/// Per-term record, the shape of one training-log line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_gt: f64,
    pub l_dc: f64,
    pub l_uc: f64,
    pub l_fc: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.l_gt, self.l_dc, self.l_uc, self.l_fc, self.total].iter().all(|v| v.is_finite())
    }
}

/// `L_gt + λ_dc·L_dc + λ_uc·L_uc + λ_fc·L_fc`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossRecord> {
    weights.validate()?;
    let l_gt = parts.l_gt.unwrap_or(0.0);
    let l_uc = parts.l_uc.unwrap_or(0.0);
    // Zero-weighted terms are dropped rather than multiplied, so an
    // overflowing disabled term cannot poison the total.
    let term = |lambda: f64, v: f64| if lambda == 0.0 { 0.0 } else { lambda * v };
    let total = l_gt + term(weights.lambda_dc, parts.l_dc) + term(weights.lambda_uc, l_uc) + term(weights.lambda_fc, parts.l_fc);
    Ok(LossRecord { l_gt, l_dc: parts.l_dc, l_uc, l_fc: parts.l_fc, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], v: Vec<f64>) -> NodeId {
        g.param(Rc::new(Tensor::new(shape.to_vec(), v)))
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::new();
        let gt = SparseDepth::dense(Tensor::new([1, 2], vec![2.0, 1.0])).unwrap();
        let p = leaf(&mut g, &[1, 2], vec![1.0, 3.0]);
        let l = supervised_l1(&mut g, p, &gt).unwrap();
        assert_eq!(g.value(l).item(), 1.5);

        let same = leaf(&mut g, &[1, 2], vec![2.0, 1.0]);
        let l = supervised_l1(&mut g, same, &gt).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let one = SparseDepth::new(Tensor::new([1, 2], vec![5.0, f64::NAN]), vec![true, false]).unwrap();
        let p = leaf(&mut g, &[1, 2], vec![1.0, 100.0]);
        let l = supervised_l1(&mut g, p, &one).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
    }

    #[test]
    fn empty_supervision_is_an_error() {
        let mut g = Graph::new();
        let gt = SparseDepth::new(Tensor::new([1, 2], vec![1.0, 1.0]), vec![false, false]).unwrap();
        let p = leaf(&mut g, &[1, 2], vec![0.0, 0.0]);
        assert!(matches!(supervised_l1(&mut g, p, &gt), Err(Error::EmptySupervision)));
    }

    #[test]
    fn nll_examples() {
        let mut g = Graph::new();
        let gt = SparseDepth::dense(Tensor::new([1, 1], vec![0.0])).unwrap();
        let p = leaf(&mut g, &[1, 1], vec![1.0]);
        let s = leaf(&mut g, &[1, 1], vec![0.0]);
        let l = uncertainty_nll(&mut g, p, s, &gt).unwrap();
        assert_eq!(g.value(l).item(), 1.0);

        let p = leaf(&mut g, &[1, 1], vec![2.0]);
        let s = leaf(&mut g, &[1, 1], vec![2f64.ln()]);
        let l = uncertainty_nll(&mut g, p, s, &gt).unwrap();
        assert!((g.value(l).item() - 1.693_147_180_559_945).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples_and_stop_gradient() {
        let mut g = Graph::new();
        let weak = leaf(&mut g, &[1, 3], vec![1.0, 2.0, 3.0]);
        let s = leaf(&mut g, &[1, 3], vec![0.0, 0.0, 0.0]);
        let strong = leaf(&mut g, &[1, 3], vec![1.0, 2.0, 3.0]);
        let l = depth_consistency(&mut g, weak, s, strong, ConsistencyWeight::Confidence).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let strong2 = leaf(&mut g, &[1, 3], vec![2.0, 0.0, 3.5]);
        let l = depth_consistency(&mut g, weak, s, strong2, ConsistencyWeight::Confidence).unwrap();
        assert!((g.value(l).item() - (1.0 + 2.0 + 0.5) / 3.0).abs() < 1e-15);
        let grads = g.backward(l);
        assert!(grads.get(weak).is_none());
        assert!(grads.get(s).is_none());
        assert!(grads.get(strong2).is_some());

        let big = leaf(&mut g, &[1, 3], vec![800.0, 0.0, 0.0]);
        let l = depth_consistency(&mut g, weak, big, strong2, ConsistencyWeight::Confidence).unwrap();
        assert!((g.value(l).item() - (2.0 + 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn feature_consistency_examples() {
        let mut store = ParamStore::<f64>::new();
        let head = PredictorHead::new(&mut store, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = leaf(&mut g, &[1, 2], vec![0.3, -0.7]);
        let z2 = leaf(&mut g, &[1, 2], vec![0.3, -0.7]);
        let l = feature_consistency(&mut g, &b, z, z2, &head).unwrap();
        assert!(g.value(l).item().abs() < 1e-30);

        let zw = leaf(&mut g, &[1, 2], vec![0.0, 0.0]);
        let zs = leaf(&mut g, &[1, 2], vec![3.0, 4.0]);
        let l = feature_consistency(&mut g, &b, zw, zs, &head).unwrap();
        assert!((g.value(l).item() - 25.0).abs() < 1e-12);
        let grads = g.backward(l);
        assert!(grads.get(zw).is_none());
        assert!(grads.get(zs).is_some());
    }

    #[test]
    fn total_loss_examples() {
        let w0 = LossWeights::with_lambdas(0.0, 0.0, 0.0);
        let parts = LossParts { l_gt: Some(1.0), l_dc: 1.0, l_uc: Some(1.0), l_fc: 1.0 };
        assert_eq!(total_loss(&parts, &w0).unwrap().total, 1.0);
        assert_eq!(total_loss(&parts, &LossWeights::default()).unwrap().total, 4.0);
        assert!(total_loss(&parts, &LossWeights::with_lambdas(-1.0, 0.0, 0.0)).is_err());
        let unlabeled = LossParts { l_gt: None, l_dc: 0.5, l_uc: None, l_fc: 0.25 };
        assert_eq!(total_loss(&unlabeled, &LossWeights::default()).unwrap().total, 0.75);
    }

    #[test]
    fn flip_is_an_involution() {
        let gt = SparseDepth::new(Tensor::from_fn([2, 3], |i| i as f64), vec![true, false, true, true, true, false]).unwrap();
        let f = gt.flip_horizontal();
        assert_eq!(f.values.data(), &[2., 1., 0., 5., 4., 3.]);
        assert_eq!(f.valid, vec![true, false, true, false, true, true]);
        assert_eq!(f.flip_horizontal(), gt);
    }
}
