#![allow(dead_code)]

use maskdepth::metrics::{DepthMetrics, CAP_MIN};
use maskdepth::model::ModelConfig;
use maskdepth::trainer::TrainConfig;

/// Small enough for per-test training runs: 2×4 tokens of 16×16 pixels.
pub fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig { patch_size: 16, ..ModelConfig::default() };
    cfg.encoder.d_model = 8;
    cfg.encoder.depth = 2;
    cfg.encoder.heads = 2;
    cfg.encoder.mlp_ratio = 2.0;
    cfg.encoder.skip_blocks = vec![0, 1, 1, 1];
    cfg.decoder.level_widths = vec![4; 4];
    cfg.decoder.features = 4;
    cfg.decoder.head_hidden = 4;
    cfg
}

pub fn tiny_train(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed,
        strong_k: 4,
        lr_encoder: 1e-3,
        lr_decoder: 1e-3,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

/// Straight-line restatement of the metric definitions.
pub fn naive_metrics(pred: &[f64], gt: &[f64], valid: &[bool], cap: f64) -> DepthMetrics {
    let (mut n, mut ar, mut sr, mut se, mut sl, mut l10) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut d = [0.0; 3];
    for i in 0..pred.len() {
        if !valid[i] || gt[i] <= 0.0 {
            continue;
        }
        let p = pred[i].max(CAP_MIN).min(cap);
        let g = gt[i].max(CAP_MIN).min(cap);
        n += 1.0;
        ar += (p - g).abs() / g;
        sr += (p - g) * (p - g) / g;
        se += (p - g) * (p - g);
        sl += (p.ln() - g.ln()) * (p.ln() - g.ln());
        l10 += (p.log10() - g.log10()).abs();
        let ratio = if p / g > g / p { p / g } else { g / p };
        for (j, t) in [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if ratio < *t {
                d[j] += 1.0;
            }
        }
    }
    DepthMetrics {
        abs_rel: ar / n,
        sq_rel: sr / n,
        rmse: (se / n).sqrt(),
        rmse_log: (sl / n).sqrt(),
        log10: l10 / n,
        delta1: d[0] / n,
        delta2: d[1] / n,
        delta3: d[2] / n,
    }
}
