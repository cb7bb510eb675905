//! Parameters, layers and the spatial ops used by the decoder.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::tensor::{Float, Tensor};

/// Optimizer group a parameter belongs to (separate learning rates).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Rc<Tensor<F>>,
}

/// Flat, ordered list of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<F>) -> ParamId {
        self.params.push(Param { name: name.into(), group, value: Rc::new(value) });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        Bound { ids: self.params.iter().map(|p| g.param(Rc::clone(&p.value))).collect() }
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: Rc::new(p.value.cast()),
                })
                .collect(),
        }
    }
}

/// Graph nodes of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    /// Binding onto existing nodes, in store order.
    pub fn from_nodes(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn node(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.ids
    }
}

// ---- initializers -------------------------------------------------------

pub fn init_xavier<F: Float, R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    Tensor::from_fn(shape.to_vec(), |_| F::lit(dist.sample(rng)))
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_fan_in<F: Float, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    Tensor::from_fn(shape.to_vec(), |_| F::lit(dist.sample(rng)))
}

/// Normal(0, std) truncated to two standard deviations.
pub fn init_trunc_normal<F: Float, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break F::lit(v);
        }
    })
}

// ---- layers -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        group: ParamGroup,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, init_xavier(&[din, dout], din, dout, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros([dout])));
        Self { weight, bias }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, b: &Bound, x: NodeId) -> NodeId {
        g.linear(x, b.node(self.weight), self.bias.map(|p| b.node(p)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, group: ParamGroup, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full([d], F::one())),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros([d])),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, b: &Bound, x: NodeId) -> NodeId {
        g.layer_norm(x, b.node(self.gamma), b.node(self.beta), F::lit(1e-6))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn transposed_out_len(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

/// 2-D convolution on a single `[c, h, w]` image; weight `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * geom.kernel * geom.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            group,
            init_fan_in(&[cout, cin, geom.kernel, geom.kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros([cout])));
        Self { weight, bias, geom }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, b: &Bound, x: NodeId) -> NodeId {
        conv2d(g, x, b.node(self.weight), self.bias.map(|p| b.node(p)), self.geom)
    }
}

/// Transposed convolution; weight `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * geom.kernel * geom.kernel / (geom.stride * geom.stride).max(1);
        let weight = store.add(
            format!("{name}.weight"),
            group,
            init_fan_in(&[cin, cout, geom.kernel, geom.kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros([cout])));
        Self { weight, bias, geom }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, b: &Bound, x: NodeId) -> NodeId {
        conv_transpose2d(g, x, b.node(self.weight), self.bias.map(|p| b.node(p)), self.geom)
    }
}

// ---- im2col kernels -----------------------------------------------------

/// Unfolds `x: [c, h, w]` into `[c·k·k, oh·ow]`.
/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` lies in `0..w`.
fn valid_range(geom: ConvGeom, kx: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = geom.pad.saturating_sub(kx).div_ceil(geom.stride);
    let hi = if w + geom.pad > kx { ((w + geom.pad - kx - 1) / geom.stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<F: Float>(x: &[F], c: usize, h: usize, w: usize, geom: ConvGeom) -> (Vec<F>, usize, usize) {
    let (oh, ow) = (geom.out_len(h), geom.out_len(w));
    let k = geom.kernel;
    let mut cols = vec![F::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let (lo, hi) = valid_range(geom, kx, w, ow);
                    if geom.stride == 1 {
                        let off = lo + kx - geom.pad;
                        dst[oy * ow + lo..oy * ow + hi].copy_from_slice(&src_row[off..off + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            dst[oy * ow + ox] = src_row[ox * geom.stride + kx - geom.pad];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: folds `[c·k·k, oh·ow]` back into `[c, h, w]`, summing overlaps.
fn col2im<F: Float>(cols: &[F], c: usize, h: usize, w: usize, geom: ConvGeom) -> Vec<F> {
    let (oh, ow) = (geom.out_len(h), geom.out_len(w));
    let k = geom.kernel;
    let mut x = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    let (lo, hi) = valid_range(geom, kx, w, ow);
                    if geom.stride == 1 {
                        let off = base + lo + kx - geom.pad;
                        for (d, &v) in x[off..off + hi - lo].iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            x[base + ox * geom.stride + kx - geom.pad] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_channel_bias<F: Float>(out: &mut [F], bias: &[F], plane: usize) {
    for (ch, &bv) in out.chunks_mut(plane).zip(bias) {
        for v in ch {
            *v += bv;
        }
    }
}

fn channel_sums<F: Float>(g: &[F], plane: usize) -> Vec<F> {
    g.chunks(plane).map(|ch| ch.iter().copied().sum()).collect()
}

/// `x: [c, h, w]`, `w: [o, c, k, k]` → `[o, oh, ow]`.
pub fn conv2d<F: Float>(
    g: &mut Graph<F>,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    geom: ConvGeom,
) -> NodeId {
    let vx = g.value_rc(x);
    let vw = g.value_rc(weight);
    let (c, h, w) = match vx.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("conv2d input must be [c, h, w], got {s:?}"),
    };
    let (o, k) = (vw.shape()[0], geom.kernel);
    assert_eq!(vw.shape(), [o, c, k, k], "conv2d weight shape");
    let (cols, oh, ow) = im2col(vx.data(), c, h, w, geom);
    let ckk = c * k * k;
    let p = oh * ow;
    let mut out = vec![F::zero(); o * p];
    F::gemm(o, ckk, p, F::one(), vw.data(), ckk as isize, 1, &cols, p as isize, 1, F::zero(), &mut out, p as isize, 1);
    if let Some(b) = bias {
        add_channel_bias(&mut out, g.value(b).data(), p);
    }
    let v = Tensor::new([o, oh, ow], out);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let cols = Rc::new(cols);
    g.custom(v, &parents, move |gr, needs| {
        let gd = gr.data();
        let gx = needs[0].then(|| {
            let mut gcols = vec![F::zero(); ckk * p];
            F::gemm(ckk, o, p, F::one(), vw.data(), 1, ckk as isize, gd, p as isize, 1, F::zero(), &mut gcols, p as isize, 1);
            Tensor::new([c, h, w], col2im(&gcols, c, h, w, geom))
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![F::zero(); o * ckk];
            F::gemm(o, p, ckk, F::one(), gd, p as isize, 1, &cols, 1, p as isize, F::zero(), &mut gw, ckk as isize, 1);
            Tensor::new([o, c, k, k], gw)
        });
        let mut res = vec![gx, gw];
        if needs.len() == 3 {
            res.push(needs[2].then(|| Tensor::new([o], channel_sums(gd, p))));
        }
        res
    })
}

/// `x: [c, h, w]`, `w: [c, o, k, k]` → `[o, (h-1)s+k-2p, (w-1)s+k-2p]`.
pub fn conv_transpose2d<F: Float>(
    g: &mut Graph<F>,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    geom: ConvGeom,
) -> NodeId {
    let vx = g.value_rc(x);
    let vw = g.value_rc(weight);
    let (c, h, w) = match vx.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("conv_transpose2d input must be [c, h, w], got {s:?}"),
    };
    let (o, k) = (vw.shape()[1], geom.kernel);
    assert_eq!(vw.shape(), [c, o, k, k], "conv_transpose2d weight shape");
    let (oh, ow) = (geom.transposed_out_len(h), geom.transposed_out_len(w));
    assert_eq!(geom.out_len(oh), h, "conv_transpose2d geometry is not invertible");
    let okk = o * k * k;
    let p = h * w;
    // cols[okk, p] = wᵀ · x
    let mut cols = vec![F::zero(); okk * p];
    F::gemm(okk, c, p, F::one(), vw.data(), 1, okk as isize, vx.data(), p as isize, 1, F::zero(), &mut cols, p as isize, 1);
    let mut out = col2im(&cols, o, oh, ow, geom);
    if let Some(b) = bias {
        add_channel_bias(&mut out, g.value(b).data(), oh * ow);
    }
    let v = Tensor::new([o, oh, ow], out);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    g.custom(v, &parents, move |gr, needs| {
        let (gcols, _, _) = im2col(gr.data(), o, oh, ow, geom);
        let gx = needs[0].then(|| {
            let mut gx = vec![F::zero(); c * p];
            F::gemm(c, okk, p, F::one(), vw.data(), okk as isize, 1, &gcols, p as isize, 1, F::zero(), &mut gx, p as isize, 1);
            Tensor::new([c, h, w], gx)
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![F::zero(); c * okk];
            F::gemm(c, p, okk, F::one(), vx.data(), p as isize, 1, &gcols, 1, p as isize, F::zero(), &mut gw, okk as isize, 1);
            Tensor::new([c, o, k, k], gw)
        });
        let mut res = vec![gx, gw];
        if needs.len() == 3 {
            res.push(needs[2].then(|| Tensor::new([o], channel_sums(gr.data(), oh * ow))));
        }
        res
    })
}

/// Bilinear interpolation matrix `[2n, n]` with aligned corners.
fn upsample_matrix<F: Float>(n: usize) -> Tensor<F> {
    let m = 2 * n;
    let mut r = Tensor::zeros([m, n]);
    let d = r.data_mut();
    for i in 0..m {
        if n == 1 {
            d[i] = F::one();
            continue;
        }
        let src = i as f64 * (n - 1) as f64 / (m - 1) as f64;
        let lo = (src.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let t = src - lo as f64;
        d[i * n + lo] += F::lit(1.0 - t);
        d[i * n + hi] += F::lit(t);
    }
    r
}

/// ×2 bilinear upsampling (aligned corners) of `[c, h, w]`.
pub fn upsample2x<F: Float>(g: &mut Graph<F>, x: NodeId) -> NodeId {
    let vx = g.value_rc(x);
    let (c, h, w) = match vx.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("upsample2x input must be [c, h, w], got {s:?}"),
    };
    let ry = Rc::new(upsample_matrix::<F>(h));
    let rx = Rc::new(upsample_matrix::<F>(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); c * oh * ow];
    let mut tmp = vec![F::zero(); h * ow];
    for ci in 0..c {
        let plane = &vx.data()[ci * h * w..(ci + 1) * h * w];
        // tmp[h, ow] = plane[h, w] · rxᵀ
        F::gemm(h, w, ow, F::one(), plane, w as isize, 1, rx.data(), 1, w as isize, F::zero(), &mut tmp, ow as isize, 1);
        // out[oh, ow] = ry[oh, h] · tmp
        F::gemm(oh, h, ow, F::one(), ry.data(), h as isize, 1, &tmp, ow as isize, 1, F::zero(), &mut out[ci * oh * ow..(ci + 1) * oh * ow], ow as isize, 1);
    }
    let v = Tensor::new([c, oh, ow], out);
    g.custom(v, &[x], move |gr, _| {
        let mut gx = vec![F::zero(); c * h * w];
        let mut tmp = vec![F::zero(); h * ow];
        for ci in 0..c {
            let gp = &gr.data()[ci * oh * ow..(ci + 1) * oh * ow];
            // tmp[h, ow] = ryᵀ · gp
            F::gemm(h, oh, ow, F::one(), ry.data(), 1, h as isize, gp, ow as isize, 1, F::zero(), &mut tmp, ow as isize, 1);
            // gx[h, w] = tmp · rx
            F::gemm(h, ow, w, F::one(), &tmp, ow as isize, 1, rx.data(), w as isize, 1, F::zero(), &mut gx[ci * h * w..(ci + 1) * h * w], w as isize, 1);
        }
        vec![Some(Tensor::new([c, h, w], gx))]
    })
}
