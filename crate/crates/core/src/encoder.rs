//! Pre-norm transformer encoder with optional attention masking.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::masking::{AttentionMask, Partition};
use crate::nn::{Bound, LayerNorm, Linear, ParamGroup, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::tokens::TokenSequence;

/// Logit value written into disallowed attention entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    /// Additive −∞: disallowed keys get exactly zero weight.
    #[default]
    Exact,
    /// Logits replaced by −10 before the softmax.
    Legacy,
}

impl MaskFill {
    pub const LEGACY_VALUE: f64 = -10.0;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// `1/sqrt(d_head)`.
    #[default]
    Standard,
    /// `sqrt(d_head)`.
    Legacy,
}

impl AttnScale {
    pub fn factor(self, d_head: usize) -> f64 {
        match self {
            AttnScale::Standard => 1.0 / (d_head as f64).sqrt(),
            AttnScale::Legacy => (d_head as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub skip_blocks: Vec<usize>,
    pub mask_fill: MaskFill,
    pub attn_scale: AttnScale,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            d_model: 64,
            heads: 4,
            mlp_ratio: 4.0,
            skip_blocks: vec![0, 1, 2, 3],
            mask_fill: MaskFill::Exact,
            attn_scale: AttnScale::Standard,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if let Some(b) = self.skip_blocks.iter().find(|&&b| b >= self.depth) {
            return Err(Error::InvalidConfig(format!(
                "skip block {b} outside encoder depth {}",
                self.depth
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.d_model as f64) * self.mlp_ratio).round() as usize
    }
}

/// Encoder outputs. `final_tokens` and every skip share N and d_model, and
/// are in the order given by `perm` (spatial order when `None`).
#[derive(Clone, Debug)]
pub struct EncodedTokens<F> {
    pub final_tokens: Tensor<F>,
    pub skips: Vec<Tensor<F>>,
    pub perm: Option<Rc<Vec<usize>>>,
}

// ---- attention kernel ---------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct HeadView {
    offset: usize,
    row_stride: usize,
}

/// Forward for one head. Returns the `[n, n]` attention weights.
#[allow(clippy::too_many_arguments)]
fn head_forward<F: Float>(
    q: (&[F], HeadView),
    k: (&[F], HeadView),
    v: (&[F], HeadView),
    n: usize,
    dh: usize,
    mask: Option<&AttentionMask>,
    scale: F,
    fill: MaskFill,
    out: (&mut [F], HeadView),
) -> Vec<F> {
    let mut p = vec![F::zero(); n * n];
    F::gemm(
        n, dh, n, scale,
        &q.0[q.1.offset..], q.1.row_stride as isize, 1,
        &k.0[k.1.offset..], 1, k.1.row_stride as isize,
        F::zero(), &mut p, n as isize, 1,
    );
    let legacy = F::lit(MaskFill::LEGACY_VALUE);
    for i in 0..n {
        let row = &mut p[i * n..(i + 1) * n];
        let allow = mask.map(|m| m.row(i));
        let ok = |j: usize| allow.is_none_or(|a| a[j]);
        if fill == MaskFill::Legacy {
            for (j, x) in row.iter_mut().enumerate() {
                if !ok(j) {
                    *x = legacy;
                }
            }
        }
        let exact = fill == MaskFill::Exact;
        let mut max = F::neg_infinity();
        for (j, &x) in row.iter().enumerate() {
            if (!exact || ok(j)) && x > max {
                max = x;
            }
        }
        if max == F::neg_infinity() {
            // No admissible key: the row stays zero.
            row.iter_mut().for_each(|x| *x = F::zero());
            continue;
        }
        let mut sum = F::zero();
        for (j, x) in row.iter_mut().enumerate() {
            if exact && !ok(j) {
                *x = F::zero();
            } else {
                *x = (*x - max).exp();
                sum += *x;
            }
        }
        let inv = F::one() / sum;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    F::gemm(
        n, n, dh, F::one(), &p, n as isize, 1,
        &v.0[v.1.offset..], v.1.row_stride as isize, 1,
        F::zero(), &mut out.0[out.1.offset..], out.1.row_stride as isize, 1,
    );
    p
}

/// Masked multi-head attention on `q, k, v: [heads, N, d_head]`.
///
/// Disallowed entries are filled per `fill`; rows without any admissible key
/// come out as zeros.
pub fn masked_attention<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: Option<&AttentionMask>,
    scale: AttnScale,
    fill: MaskFill,
) -> Result<Tensor<F>> {
    let (h, n, dh) = match q.shape() {
        [h, n, dh] => (*h, *n, *dh),
        s => return Err(Error::ShapeMismatch(format!("q must be [heads, N, d_head], got {s:?}"))),
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(m) = mask {
        if m.n() != n {
            return Err(Error::ShapeMismatch(format!("mask is {0}x{0}, sequence has {n}", m.n())));
        }
    }
    if cfg!(debug_assertions) {
        for (name, t) in [("q", q), ("k", k), ("v", v)] {
            if t.data().iter().any(|x| x.is_nan()) {
                return Err(Error::NonFinite(format!("attention input {name}")));
            }
        }
    }
    let s = F::lit(scale.factor(dh));
    let mut out = vec![F::zero(); h * n * dh];
    for head in 0..h {
        let view = HeadView { offset: head * n * dh, row_stride: dh };
        head_forward(
            (q.data(), view),
            (k.data(), view),
            (v.data(), view),
            n,
            dh,
            mask,
            s,
            fill,
            (&mut out, view),
        );
    }
    Ok(Tensor::new([h, n, dh], out))
}

/// Fused multi-head attention node: `qkv: [N, 3·d]` → `[N, d]`.
pub fn attention_node<F: Float>(
    g: &mut Graph<F>,
    qkv: NodeId,
    heads: usize,
    mask: Option<Rc<AttentionMask>>,
    scale: AttnScale,
    fill: MaskFill,
) -> NodeId {
    let vqkv = g.value_rc(qkv);
    let (n, d3) = (vqkv.shape()[0], vqkv.shape()[1]);
    let d = d3 / 3;
    let dh = d / heads;
    if let Some(m) = &mask {
        assert_eq!(m.n(), n, "attention mask size");
    }
    let s = F::lit(scale.factor(dh));
    let mut out = vec![F::zero(); n * d];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qv = HeadView { offset: h * dh, row_stride: d3 };
        let kv = HeadView { offset: d + h * dh, row_stride: d3 };
        let vv = HeadView { offset: 2 * d + h * dh, row_stride: d3 };
        let ov = HeadView { offset: h * dh, row_stride: d };
        probs.push(head_forward(
            (vqkv.data(), qv),
            (vqkv.data(), kv),
            (vqkv.data(), vv),
            n,
            dh,
            mask.as_deref(),
            s,
            fill,
            (&mut out, ov),
        ));
    }
    let value = Tensor::new([n, d], out);
    g.custom(value, &[qkv], move |gr, _| {
        let x = vqkv.data();
        let go = gr.data();
        let mut gx = vec![F::zero(); n * d3];
        let mut dp = vec![F::zero(); n * n];
        for (h, p) in probs.iter().enumerate() {
            let (qo, ko, vo, oo) = (h * dh, d + h * dh, 2 * d + h * dh, h * dh);
            // dV = Pᵀ · dO
            F::gemm(n, n, dh, F::one(), p, 1, n as isize, &go[oo..], d as isize, 1, F::zero(), &mut gx[vo..], d3 as isize, 1);
            // dP = dO · Vᵀ
            F::gemm(n, dh, n, F::one(), &go[oo..], d as isize, 1, &x[vo..], 1, d3 as isize, F::zero(), &mut dp, n as isize, 1);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), zero where the logit was a constant fill
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    let masked = mask.as_ref().is_some_and(|m| !m.allowed(i, j));
                    dr[j] = if masked { F::zero() } else { pr[j] * (dr[j] - dot) };
                }
            }
            // dQ = s · dS · K,  dK = s · dSᵀ · Q
            F::gemm(n, n, dh, s, &dp, n as isize, 1, &x[ko..], d3 as isize, 1, F::zero(), &mut gx[qo..], d3 as isize, 1);
            F::gemm(n, n, dh, s, &dp, 1, n as isize, &x[qo..], d3 as isize, 1, F::zero(), &mut gx[ko..], d3 as isize, 1);
        }
        vec![Some(Tensor::new([n, d3], gx))]
    })
}

// ---- blocks -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, i: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let hidden = cfg.mlp_hidden();
        let grp = ParamGroup::Encoder;
        let name = |s: &str| format!("encoder.block{i}.{s}");
        Self {
            norm1: LayerNorm::new(store, &name("norm1"), grp, d),
            qkv: Linear::new(store, &name("qkv"), grp, d, 3 * d, true, rng),
            proj: Linear::new(store, &name("proj"), grp, d, d, true, rng),
            norm2: LayerNorm::new(store, &name("norm2"), grp, d),
            fc1: Linear::new(store, &name("fc1"), grp, d, hidden, true, rng),
            fc2: Linear::new(store, &name("fc2"), grp, hidden, d, true, rng),
        }
    }

    fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        x: NodeId,
        cfg: &EncoderConfig,
        mask: Option<&Rc<AttentionMask>>,
    ) -> NodeId {
        let h = self.norm1.forward(g, b, x);
        let qkv = self.qkv.forward(g, b, h);
        let a = attention_node(g, qkv, cfg.heads, mask.cloned(), cfg.attn_scale, cfg.mask_fill);
        let a = self.proj.forward(g, b, a);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, b, x);
        let h = self.fc1.forward(g, b, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, b, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<Block>,
}

/// Graph-level encoder outputs.
#[derive(Clone, Debug)]
pub struct EncodedNodes {
    pub final_tokens: NodeId,
    pub skips: Vec<NodeId>,
}

impl Encoder {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth).map(|i| Block::new(store, i, &cfg, rng)).collect();
        Ok(Self { cfg, blocks })
    }

    /// Runs every block; `mask` applies in the token order of `x`.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        x: NodeId,
        mask: Option<&Rc<AttentionMask>>,
    ) -> EncodedNodes {
        let mut x = x;
        let mut skips = Vec::with_capacity(self.cfg.skip_blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, b, x, &self.cfg, mask);
            if self.cfg.skip_blocks.contains(&i) {
                skips.push(x);
            }
        }
        // Skips are reported in the order listed in the config.
        let order: Vec<usize> = {
            let mut sorted: Vec<usize> = self.cfg.skip_blocks.clone();
            sorted.sort_unstable();
            self.cfg
                .skip_blocks
                .iter()
                .map(|b| sorted.iter().position(|s| s == b).expect("listed"))
                .collect()
        };
        let skips = order.iter().map(|&i| skips[i]).collect();
        EncodedNodes { final_tokens: x, skips }
    }
}

/// Encodes a token sequence (spatial or shuffled order) under an optional
/// mask given in the same order.
pub fn encode<F: Float>(
    seq: &TokenSequence<F>,
    mask: Option<&AttentionMask>,
    enc: &Encoder,
    store: &ParamStore<F>,
) -> Result<EncodedTokens<F>> {
    if seq.d_model() != enc.cfg.d_model {
        return Err(Error::ShapeMismatch(format!(
            "tokens have width {}, encoder expects {}",
            seq.d_model(),
            enc.cfg.d_model
        )));
    }
    if let Some(m) = mask {
        if m.n() != seq.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask is {0}x{0}, sequence has {1} tokens",
                m.n(),
                seq.len()
            )));
        }
    }
    let out = encode_tokens(&seq.tokens, mask.map(|m| Rc::new(m.clone())), enc, store);
    Ok(EncodedTokens { perm: seq.perm.clone(), ..out })
}

fn encode_tokens<F: Float>(
    tokens: &Tensor<F>,
    mask: Option<Rc<AttentionMask>>,
    enc: &Encoder,
    store: &ParamStore<F>,
) -> EncodedTokens<F> {
    let mut g = Graph::no_grad();
    let b = store.bind(&mut g);
    let x = g.constant(tokens.clone());
    let nodes = enc.forward(&mut g, &b, x, mask.as_ref());
    EncodedTokens {
        final_tokens: g.value(nodes.final_tokens).clone(),
        skips: nodes.skips.iter().map(|&s| g.value(s).clone()).collect(),
        perm: None,
    }
}

/// Encodes every non-empty subset as its own sequence, concatenates the
/// results in subset order and reassembles them into spatial order.
pub fn encode_subsets_oracle<F: Float>(
    seq: &TokenSequence<F>,
    part: &Partition,
    enc: &Encoder,
    store: &ParamStore<F>,
) -> Result<EncodedTokens<F>> {
    if enc.cfg.mask_fill != MaskFill::Exact {
        return Err(Error::LegacyFill);
    }
    if seq.perm.is_some() {
        return Err(Error::UnappliedPermutation);
    }
    if seq.len() != part.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens for a partition of {}",
            seq.len(),
            part.n()
        )));
    }
    let d = seq.d_model();
    let n_skips = enc.cfg.skip_blocks.len();
    let mut final_rows = Vec::with_capacity(seq.len() * d);
    let mut skip_rows = vec![Vec::with_capacity(seq.len() * d); n_skips];
    for subset in part.subsets.iter().filter(|s| !s.is_empty()) {
        let x = seq.tokens.gather_rows(subset);
        let out = encode_tokens(&x, None, enc, store);
        final_rows.extend_from_slice(out.final_tokens.data());
        for (acc, s) in skip_rows.iter_mut().zip(&out.skips) {
            acc.extend_from_slice(s.data());
        }
    }
    let n = seq.len();
    let back = |rows: Vec<F>| Tensor::new([n, d], rows).gather_rows(&part.inv_perm);
    Ok(EncodedTokens {
        final_tokens: back(final_rows),
        skips: skip_rows.into_iter().map(back).collect(),
        perm: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_attention_mask, reassemble, shuffle};
    use crate::tokens::Grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(depth: usize, d: usize, heads: usize) -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            depth,
            d_model: d,
            heads,
            mlp_ratio: 2.0,
            skip_blocks: (0..depth).collect(),
            mask_fill: MaskFill::Exact,
            attn_scale: AttnScale::Standard,
        };
        let enc = Encoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (enc, store)
    }

    fn seq(n: usize, d: usize, seed: u64) -> TokenSequence<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn([n, d], |_| StandardNormal.sample(&mut rng));
        TokenSequence::new(t, Grid { rows: 1, cols: n }, 1).unwrap()
    }

    #[test]
    fn hand_computed_block_mask() {
        // tokens 0,1 share a block; token 2 is alone
        let q = Tensor::new([1, 3, 1], vec![1.0f64, 2.0, 3.0]);
        let k = Tensor::new([1, 3, 1], vec![0.5, -1.0, 2.0]);
        let v = Tensor::new([1, 3, 1], vec![10.0, 20.0, 30.0]);
        let m = AttentionMask::from_fn(3, |i, j| (i < 2) == (j < 2));
        let out = masked_attention(&q, &k, &v, Some(&m), AttnScale::Standard, MaskFill::Exact).unwrap();
        // row 0: logits 0.5, -1 → weights e^0.5/(e^0.5+e^-1)
        let w0 = 0.5f64.exp() / (0.5f64.exp() + (-1.0f64).exp());
        assert!((out[0] - (w0 * 10.0 + (1.0 - w0) * 20.0)).abs() < 1e-12);
        // row 1: logits 1, -2
        let w1 = 1.0f64.exp() / (1.0f64.exp() + (-2.0f64).exp());
        assert!((out[1] - (w1 * 10.0 + (1.0 - w1) * 20.0)).abs() < 1e-12);
        // row 2: singleton → its own value
        assert_eq!(out[2], 30.0);
    }

    #[test]
    fn all_true_mask_matches_unmasked() {
        let q = Tensor::from_fn([2, 5, 3], |i| (i as f64 * 0.37).sin());
        let k = Tensor::from_fn([2, 5, 3], |i| (i as f64 * 0.11).cos());
        let v = Tensor::from_fn([2, 5, 3], |i| i as f64);
        let a = masked_attention(&q, &k, &v, None, AttnScale::Standard, MaskFill::Exact).unwrap();
        let all = AttentionMask::all(5);
        let b = masked_attention(&q, &k, &v, Some(&all), AttnScale::Standard, MaskFill::Exact).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }

    #[test]
    fn empty_row_is_zero_and_nan_is_reported() {
        let q = Tensor::from_fn([1, 2, 2], |i| i as f64);
        let m = AttentionMask::from_fn(2, |i, j| i == 0 && j == 0);
        let out = masked_attention(&q, &q, &q, Some(&m), AttnScale::Standard, MaskFill::Exact).unwrap();
        assert_eq!(&out.data()[2..], &[0.0, 0.0]);
        let mut bad = q.clone();
        bad.data_mut()[0] = f64::NAN;
        if cfg!(debug_assertions) {
            assert!(matches!(
                masked_attention(&bad, &q, &q, None, AttnScale::Standard, MaskFill::Exact),
                Err(Error::NonFinite(_))
            ));
        }
    }

    #[test]
    fn depth_zero_is_identity() {
        let (enc, store) = small(0, 8, 2);
        let s = seq(4, 8, 1);
        let out = encode(&s, None, &enc, &store).unwrap();
        assert_eq!(out.final_tokens, s.tokens);
        assert!(out.skips.is_empty());
    }

    #[test]
    fn zero_output_projections_make_identity() {
        let (enc, mut store) = small(2, 8, 2);
        for b in &enc.blocks {
            for lin in [&b.proj, &b.fc2] {
                store.get_mut(lin.weight).data_mut().iter_mut().for_each(|x| *x = 0.0);
                store.get_mut(lin.bias.unwrap()).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let s = seq(5, 8, 2);
        let out = encode(&s, None, &enc, &store).unwrap();
        assert!(out.final_tokens.max_abs_diff(&s.tokens) < 1e-15);
    }

    #[test]
    fn k1_mask_matches_no_mask() {
        let (enc, store) = small(2, 32, 2);
        let s = seq(16, 32, 4);
        let a = encode(&s, None, &enc, &store).unwrap();
        let b = encode(&s, Some(&AttentionMask::all(16)), &enc, &store).unwrap();
        assert!(a.final_tokens.max_abs_diff(&b.final_tokens) <= 1e-6);
    }

    #[test]
    fn joint_masked_encoding_matches_oracle() {
        let (enc, store) = small(2, 16, 2);
        let s = seq(16, 16, 5);
        let part = crate::masking::sample_partition(16, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut shuffled = s.clone();
        shuffled.tokens = shuffle(&s.tokens, &part).unwrap();
        shuffled.perm = Some(part.perm.clone());
        let joint = encode(&shuffled, Some(&build_attention_mask(&part)), &enc, &store).unwrap();
        let joint = reassemble(&joint.final_tokens, &part).unwrap();
        let oracle = encode_subsets_oracle(&s, &part, &enc, &store).unwrap();
        assert!(joint.max_abs_diff(&oracle.final_tokens) <= 1e-10);
    }

    #[test]
    fn oracle_refuses_legacy_fill() {
        let (mut enc, store) = small(1, 8, 2);
        enc.cfg.mask_fill = MaskFill::Legacy;
        let s = seq(4, 8, 6);
        let part = Partition::identity(4);
        assert!(matches!(encode_subsets_oracle(&s, &part, &enc, &store), Err(Error::LegacyFill)));
    }

    #[test]
    fn empty_subset_is_a_no_op_for_the_oracle() {
        let (enc, store) = small(1, 8, 2);
        let s = seq(6, 8, 7);
        let part = Partition::from_splits(vec![4, 1, 0, 5, 2, 3], &[3, 3]).unwrap();
        let a = encode_subsets_oracle(&s, &part, &enc, &store).unwrap();
        let b = encode_subsets_oracle(&s, &part.without_empty(), &enc, &store).unwrap();
        assert_eq!(a.final_tokens, b.final_tokens);
    }

    #[test]
    fn config_validation() {
        let mut store = ParamStore::<f32>::new();
        let cfg = EncoderConfig {
            depth: 2,
            d_model: 10,
            heads: 3,
            mlp_ratio: 4.0,
            skip_blocks: vec![0],
            mask_fill: MaskFill::Exact,
            attn_scale: AttnScale::Standard,
        };
        assert!(Encoder::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let cfg = EncoderConfig { d_model: 12, skip_blocks: vec![2], ..cfg };
        assert!(Encoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
