//! Depth error and threshold-accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SparseDepth;
use crate::tensor::{Float, Tensor};

/// Lower clamp applied to predictions and ground truth before logs.
pub const CAP_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    fn as_array(&self) -> [f64; 8] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.log10, self.delta1, self.delta2, self.delta3]
    }

    fn from_array(a: [f64; 8]) -> Self {
        Self {
            abs_rel: a[0],
            sq_rel: a[1],
            rmse: a[2],
            rmse_log: a[3],
            log10: a[4],
            delta1: a[5],
            delta2: a[6],
            delta3: a[7],
        }
    }

    /// Arithmetic mean of several per-image results.
    pub fn mean(items: &[DepthMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let mut acc = [0.0; 8];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.as_array()) {
                *a += v;
            }
        }
        Ok(Self::from_array(acc.map(|a| a / items.len() as f64)))
    }
}

/// Metrics over pixels that are valid and have `gt > 0`, with both maps
/// clamped to `[CAP_MIN, cap]`.
pub fn depth_metrics<F: Float>(pred: &Tensor<F>, gt: &Tensor<F>, valid: &[bool], cap: f64) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() || gt.len() != valid.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, gt {:?}, {} validity bits",
            pred.shape(),
            gt.shape(),
            valid.len()
        )));
    }
    if !(cap > CAP_MIN) {
        return Err(Error::InvalidRange(format!("cap {cap} must exceed {CAP_MIN}")));
    }
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut l10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for ((&p, &g), &ok) in pred.data().iter().zip(gt.data()).zip(valid) {
        let (p, g) = (p.as_f64(), g.as_f64());
        if !ok || !(g > 0.0) {
            continue;
        }
        let p = p.clamp(CAP_MIN, cap);
        let g = g.clamp(CAP_MIN, cap);
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        l10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (i, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        log10: l10 / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub cap: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { cap: 80.0 }
    }
}

/// Per-image metrics averaged over the set. `predict` maps a sample index to
/// its predicted depth.
pub fn evaluate<F: Float>(
    n: usize,
    mut predict: impl FnMut(usize) -> Result<(Tensor<F>, SparseDepth<F>)>,
    protocol: EvalProtocol,
) -> Result<DepthMetrics> {
    if n == 0 {
        return Err(Error::EmptyEvalSet);
    }
    let per_image = (0..n)
        .map(|i| {
            let (pred, gt) = predict(i)?;
            depth_metrics(&pred, &gt.values, &gt.valid, protocol.cap)
        })
        .collect::<Result<Vec<_>>>()?;
    DepthMetrics::mean(&per_image)
}
