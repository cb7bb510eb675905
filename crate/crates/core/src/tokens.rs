//! Images to patch tokens and back.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{init_trunc_normal, Bound, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// `[3, h, w]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<F> {
    data: Tensor<F>,
}

impl<F: Float> ImageTensor<F> {
    pub fn new(data: Tensor<F>) -> Result<Self> {
        match data.shape() {
            [3, h, w] if *h > 0 && *w > 0 => Ok(Self { data }),
            s => Err(Error::ShapeMismatch(format!("image must be [3, h, w], got {s:?}"))),
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> F) -> Self {
        let t = Tensor::from_fn([3, h, w], |i| f(i / (h * w), (i / w) % h, i % w));
        Self { data: t }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> F {
        self.data[(c * self.height() + y) * self.width() + x]
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        Self::from_fn(h, w, |c, y, x| self.at(c, y, w - 1 - x))
    }
}

/// Patch grid geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embedded tokens `[N, d_model]` in row-major grid order, optionally in a
/// shuffled order described by `perm` (shuffled position → spatial index).
#[derive(Clone, Debug)]
pub struct TokenSequence<F> {
    pub tokens: Tensor<F>,
    pub grid: Grid,
    pub patch_size: usize,
    pub perm: Option<Rc<Vec<usize>>>,
}

impl<F: Float> TokenSequence<F> {
    pub fn new(tokens: Tensor<F>, grid: Grid, patch_size: usize) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.shape()[0] != grid.len() || tokens.shape()[1] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "tokens {:?} do not fit a {}x{} grid",
                tokens.shape(),
                grid.rows,
                grid.cols
            )));
        }
        Ok(Self { tokens, grid, patch_size, perm: None })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.tokens.shape()[1]
    }
}

fn grid_for(h: usize, w: usize, p: usize) -> Result<Grid> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::DimensionMismatch(format!(
            "image {h}x{w} is not divisible by patch size {p}"
        )));
    }
    Ok(Grid { rows: h / p, cols: w / p })
}

/// Flattens non-overlapping `p×p` patches into rows of `p·p·3` values
/// (channel fastest, then column, then row inside a patch).
pub fn patchify<F: Float>(image: &ImageTensor<F>, p: usize) -> Result<Tensor<F>> {
    let (h, w) = (image.height(), image.width());
    let grid = grid_for(h, w, p)?;
    let width = p * p * 3;
    let src = image.tensor().data();
    let mut out = vec![F::zero(); grid.len() * width];
    for r in 0..grid.rows {
        for q in 0..grid.cols {
            let row = &mut out[(r * grid.cols + q) * width..][..width];
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (r * p + py, q * p + px);
                    for c in 0..3 {
                        row[(py * p + px) * 3 + c] = src[(c * h + y) * w + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::new([grid.len(), width], out))
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Float>(patches: &Tensor<F>, grid: Grid, p: usize) -> Result<ImageTensor<F>> {
    let width = p * p * 3;
    if patches.shape() != [grid.len(), width] {
        return Err(Error::ShapeMismatch(format!(
            "patches {:?} do not match grid {}x{} with p={p}",
            patches.shape(),
            grid.rows,
            grid.cols
        )));
    }
    let (h, w) = (grid.rows * p, grid.cols * p);
    let src = patches.data();
    Ok(ImageTensor::from_fn(h, w, |c, y, x| {
        let (r, q, py, px) = (y / p, x / p, y % p, x % p);
        src[(r * grid.cols + q) * width + (py * p + px) * 3 + c]
    }))
}

/// Parameters of the patch embedding: `tokens = patches·weight + bias + pos`.
#[derive(Clone, Debug)]
pub struct EmbedParams<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub pos: Tensor<F>,
}

pub fn embed<F: Float>(patches: &Tensor<F>, grid: Grid, p: usize, params: &EmbedParams<F>) -> Result<TokenSequence<F>> {
    let (n, pw) = match patches.shape() {
        [n, pw] => (*n, *pw),
        s => return Err(Error::ShapeMismatch(format!("patches must be [N, P], got {s:?}"))),
    };
    let (din, d) = match params.weight.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::ShapeMismatch(format!("projection must be [P, d], got {s:?}"))),
    };
    if din != pw || params.bias.shape() != [d] || params.pos.shape() != [n, d] || n != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "patches {:?}, projection {:?}, bias {:?}, pos {:?}",
            patches.shape(),
            params.weight.shape(),
            params.bias.shape(),
            params.pos.shape()
        )));
    }
    let mut g = Graph::no_grad();
    let x = g.constant(patches.clone());
    let w = g.constant(params.weight.clone());
    let b = g.constant(params.bias.clone());
    let pos = g.constant(params.pos.clone());
    let t = g.linear(x, w, Some(b));
    let t = g.add(t, pos);
    TokenSequence::new(g.value(t).clone(), grid, p)
}

/// `[N, d]` tokens in spatial order → `[d, rows, cols]`.
pub fn to_grid<F: Float>(seq: &TokenSequence<F>) -> Result<Tensor<F>> {
    if seq.perm.is_some() {
        return Err(Error::UnappliedPermutation);
    }
    let d = seq.d_model();
    Ok(seq.tokens.t().reshape([d, seq.grid.rows, seq.grid.cols]))
}

/// Graph version of [`to_grid`].
pub fn to_grid_node<F: Float>(g: &mut Graph<F>, tokens: NodeId, grid: Grid) -> NodeId {
    let d = g.shape(tokens)[1];
    let t = g.transpose(tokens);
    g.reshape(t, &[d, grid.rows, grid.cols])
}

/// Trainable patch projection plus learned absolute position embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch_size: usize,
    pub grid: Grid,
}

impl PatchEmbed {
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        patch_size: usize,
        grid: Grid,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        let pw = patch_size * patch_size * 3;
        let proj = Linear::new(store, "embed.proj", ParamGroup::Encoder, pw, d_model, true, rng);
        let pos = store.add(
            "embed.pos",
            ParamGroup::Encoder,
            init_trunc_normal(&[grid.len(), d_model], 0.02, rng),
        );
        Self { proj, pos, patch_size, grid }
    }

    pub fn params<F: Float>(&self, store: &ParamStore<F>) -> EmbedParams<F> {
        EmbedParams {
            weight: store.get(self.proj.weight).clone(),
            bias: store.get(self.proj.bias.expect("embedding has a bias")).clone(),
            pos: store.get(self.pos).clone(),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, b: &Bound, image: &ImageTensor<F>) -> Result<NodeId> {
        let patches = patchify(image, self.patch_size)?;
        if patches.shape()[0] != self.grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "image gives {} patches, model expects {}",
                patches.shape()[0],
                self.grid.len()
            )));
        }
        let x = g.constant(patches);
        let t = self.proj.forward(g, b, x);
        Ok(g.add(t, b.node(self.pos)))
    }
}
