//! Convolutional fusion decoder: skip features → depth and log-uncertainty.
//!
//! Level `i` (0 = shallowest skip) is reassembled to `1/2^(i+2)` of the image
//! resolution. That is a resample of the token grid by `p / 2^(i+2)`:
//! transposed-conv upsampling above 1, strided-conv downsampling below 1.
//! Fusion runs coarse-to-fine with a ×2 upsample per level, which lands at half
//! resolution; the head upsamples once more to full resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::encoder::EncodedTokens;
use crate::error::{Error, Result};
use crate::nn::{upsample2x, Bound, Conv2d, ConvGeom, ConvTranspose2d, ParamGroup, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::tokens::{to_grid_node, Grid};

/// How the sigmoid output maps to metric depth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthParam {
    /// `d_min + (d_max − d_min)·σ`
    #[default]
    Linear,
    /// `1 / (1/d_max + (1/d_min − 1/d_max)·σ)`
    InverseAffine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Reassemble width per skip level, shallowest first.
    pub level_widths: Vec<usize>,
    /// Fusion width.
    pub features: usize,
    /// Width of the last hidden head conv.
    pub head_hidden: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub depth_param: DepthParam,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            level_widths: vec![8, 16, 32, 32],
            features: 16,
            head_hidden: 8,
            d_min: 1e-3,
            d_max: 80.0,
            depth_param: DepthParam::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthPrediction<F> {
    /// Metric depth `[h, w]` within `[d_min, d_max]`.
    pub depth: Tensor<F>,
    /// `s = log U`, unbounded.
    pub log_uncertainty: Tensor<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scale {
    Up(usize),
    Same,
    Down(usize),
}

fn level_scale(patch: usize, level: usize) -> Result<Scale> {
    if !patch.is_power_of_two() {
        return Err(Error::InvalidConfig(format!("patch size {patch} must be a power of two")));
    }
    let target = 1usize << (level + 2);
    Ok(match patch.cmp(&target) {
        std::cmp::Ordering::Greater => Scale::Up(patch / target),
        std::cmp::Ordering::Equal => Scale::Same,
        std::cmp::Ordering::Less => Scale::Down(target / patch),
    })
}

#[derive(Clone, Debug)]
enum Resample {
    Same,
    Up(ConvTranspose2d),
    Down(Conv2d),
}

#[derive(Clone, Debug)]
struct Reassemble {
    project: Conv2d,
    resample: Resample,
    to_features: Conv2d,
}

#[derive(Clone, Debug)]
struct ResidualUnit {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualUnit {
    fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, name: &str, f: usize, rng: &mut R) -> Self {
        let g = ConvGeom::new(3, 1, 1);
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ParamGroup::Decoder, f, f, g, true, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ParamGroup::Decoder, f, f, g, true, rng),
        }
    }

    fn forward<F: Float>(&self, g: &mut Graph<F>, b: &Bound, x: NodeId) -> NodeId {
        let h = g.relu(x);
        let h = self.conv1.forward(g, b, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, b, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct FusionBlock {
    skip_unit: Option<ResidualUnit>,
    out_unit: ResidualUnit,
    out_conv: Conv2d,
}

#[derive(Clone, Debug)]
struct Head {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    levels: Vec<Reassemble>,
    fusion: Vec<FusionBlock>,
    head: Head,
}

/// Graph-level decoder outputs, all `[h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct DecodedNodes {
    pub sigma: NodeId,
    pub depth: NodeId,
    pub log_uncertainty: NodeId,
}

impl Decoder {
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        cfg: DecoderConfig,
        d_model: usize,
        patch: usize,
        grid: Grid,
        rng: &mut R,
    ) -> Result<Self> {
        if !(cfg.d_min > 0.0 && cfg.d_min < cfg.d_max) {
            return Err(Error::InvalidRange(format!(
                "need 0 < d_min < d_max, got [{}, {}]",
                cfg.d_min, cfg.d_max
            )));
        }
        if cfg.level_widths.is_empty() || cfg.features == 0 || cfg.head_hidden == 0 {
            return Err(Error::InvalidConfig("decoder needs at least one level and non-zero widths".into()));
        }
        let grp = ParamGroup::Decoder;
        let f = cfg.features;
        let mut levels = Vec::with_capacity(cfg.level_widths.len());
        for (i, &c) in cfg.level_widths.iter().enumerate() {
            let name = format!("decoder.level{i}");
            let resample = match level_scale(patch, i)? {
                Scale::Same => Resample::Same,
                Scale::Up(s) => Resample::Up(ConvTranspose2d::new(
                    store, &format!("{name}.up"), grp, c, c, ConvGeom::new(s, s, 0), true, rng,
                )),
                Scale::Down(s) => {
                    if grid.rows % s != 0 || grid.cols % s != 0 {
                        return Err(Error::DimensionMismatch(format!(
                            "token grid {}x{} cannot be downsampled by {s} for level {i}",
                            grid.rows, grid.cols
                        )));
                    }
                    Resample::Down(Conv2d::new(
                        store, &format!("{name}.down"), grp, c, c, ConvGeom::new(2 * s - 1, s, s - 1), true, rng,
                    ))
                }
            };
            levels.push(Reassemble {
                project: Conv2d::new(store, &format!("{name}.project"), grp, d_model, c, ConvGeom::new(1, 1, 0), true, rng),
                resample,
                to_features: Conv2d::new(store, &format!("{name}.features"), grp, c, f, ConvGeom::new(3, 1, 1), false, rng),
            });
        }
        let n = levels.len();
        let fusion = (0..n)
            .map(|i| {
                let name = format!("decoder.fusion{i}");
                FusionBlock {
                    skip_unit: (i + 1 < n).then(|| ResidualUnit::new(store, &format!("{name}.skip"), f, rng)),
                    out_unit: ResidualUnit::new(store, &format!("{name}.out"), f, rng),
                    out_conv: Conv2d::new(store, &format!("{name}.out_conv"), grp, f, f, ConvGeom::new(1, 1, 0), true, rng),
                }
            })
            .collect();
        let half = (f / 2).max(1);
        let head = Head {
            conv1: Conv2d::new(store, "decoder.head.conv1", grp, f, half, ConvGeom::new(3, 1, 1), true, rng),
            conv2: Conv2d::new(store, "decoder.head.conv2", grp, half, cfg.head_hidden, ConvGeom::new(3, 1, 1), true, rng),
            conv3: Conv2d::new(store, "decoder.head.conv3", grp, cfg.head_hidden, 2, ConvGeom::new(1, 1, 0), true, rng),
        };
        Ok(Self { cfg, levels, fusion, head })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// `skips`: spatial-order `[N, d]` token nodes, shallowest first.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, b: &Bound, skips: &[NodeId], grid: Grid) -> Result<DecodedNodes> {
        if skips.len() != self.levels.len() {
            return Err(Error::ShapeMismatch(format!(
                "decoder has {} levels, got {} skip features",
                self.levels.len(),
                skips.len()
            )));
        }
        for &s in skips {
            if g.shape(s)[0] != grid.len() {
                return Err(Error::ShapeMismatch(format!(
                    "skip has {} tokens, grid {}x{} needs {}",
                    g.shape(s)[0],
                    grid.rows,
                    grid.cols,
                    grid.len()
                )));
            }
        }
        let mut feats = Vec::with_capacity(skips.len());
        for (lvl, &s) in self.levels.iter().zip(skips) {
            let x = to_grid_node(g, s, grid);
            let x = lvl.project.forward(g, b, x);
            let x = match &lvl.resample {
                Resample::Same => x,
                Resample::Up(c) => c.forward(g, b, x),
                Resample::Down(c) => c.forward(g, b, x),
            };
            feats.push(lvl.to_features.forward(g, b, x));
        }
        let mut x: Option<NodeId> = None;
        for (i, block) in self.fusion.iter().enumerate().rev() {
            let mut h = feats[i];
            if let (Some(prev), Some(unit)) = (x, &block.skip_unit) {
                let s = unit.forward(g, b, h);
                h = g.add(prev, s);
            }
            h = block.out_unit.forward(g, b, h);
            h = upsample2x(g, h);
            x = Some(block.out_conv.forward(g, b, h));
        }
        let x = x.expect("at least one level");
        let h = self.head.conv1.forward(g, b, x);
        let h = upsample2x(g, h);
        let h = self.head.conv2.forward(g, b, h);
        let h = g.relu(h);
        let out = self.head.conv3.forward(g, b, h);
        let logit = g.select(out, 0);
        let log_uncertainty = g.select(out, 1);
        let sigma = g.sigmoid(logit);
        let depth = depth_node(g, sigma, &self.cfg);
        Ok(DecodedNodes { sigma, depth, log_uncertainty })
    }
}

fn depth_node<F: Float>(g: &mut Graph<F>, sigma: NodeId, cfg: &DecoderConfig) -> NodeId {
    match cfg.depth_param {
        DepthParam::Linear => {
            let d = g.scale(sigma, F::lit(cfg.d_max - cfg.d_min));
            g.add_scalar(d, F::lit(cfg.d_min))
        }
        DepthParam::InverseAffine => {
            let (lo, hi) = (1.0 / cfg.d_max, 1.0 / cfg.d_min);
            let inv = g.scale(sigma, F::lit(hi - lo));
            let inv = g.add_scalar(inv, F::lit(lo));
            let vi = g.value_rc(inv);
            let v = vi.map(|x| F::one() / x);
            g.custom(v, &[inv], move |gr, _| vec![Some(gr.zip_map(&vi, |gi, x| -gi / (x * x)))])
        }
    }
}

/// Maps sigmoid outputs to metric depth, `d_min + (d_max − d_min)·σ`.
pub fn depth_from_sigmoid<F: Float>(sigma: &Tensor<F>, d_min: f64, d_max: f64) -> Result<Tensor<F>> {
    if !(d_min < d_max) {
        return Err(Error::InvalidRange(format!("d_min {d_min} must be below d_max {d_max}")));
    }
    let (lo, span) = (F::lit(d_min), F::lit(d_max - d_min));
    Ok(sigma.map(|s| lo + span * s))
}

/// Decodes spatial-order encoder outputs.
pub fn decode<F: Float>(
    enc: &EncodedTokens<F>,
    grid: Grid,
    decoder: &Decoder,
    store: &ParamStore<F>,
) -> Result<DepthPrediction<F>> {
    if enc.perm.is_some() {
        return Err(Error::UnappliedPermutation);
    }
    let mut g = Graph::no_grad();
    let b = store.bind(&mut g);
    let skips: Vec<NodeId> = enc.skips.iter().map(|s| g.constant(s.clone())).collect();
    let out = decoder.forward(&mut g, &b, &skips, grid)?;
    Ok(DepthPrediction {
        depth: g.value(out.depth).clone(),
        log_uncertainty: g.value(out.log_uncertainty).clone(),
    })
}
