//! A small reverse-mode tape.
//!
//! Every forward op appends a node holding its value and, when any parent
//! requires a gradient, a closure mapping the output gradient to parent
//! gradients. [`Graph::detach`] produces a constant sharing the same value,
//! which is how stop-gradient is expressed. A graph built with
//! [`Graph::no_grad`] records no closures at all.

use std::rc::Rc;

use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice says which parents actually need one.
pub type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Rc<Tensor<F>>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph that only evaluates values.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Rc<Tensor<F>>) -> NodeId {
        let requires_grad = self.grad_enabled;
        self.push_leaf(value, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push_leaf(Rc::new(value), false)
    }

    pub fn constant_rc(&mut self, value: Rc<Tensor<F>>) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Rc<Tensor<F>>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = Rc::clone(&self.nodes[x.0].value);
        self.push_leaf(v, false)
    }

    pub fn value(&self, x: NodeId) -> &Tensor<F> {
        &self.nodes[x.0].value
    }

    pub fn value_rc(&self, x: NodeId) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes[x.0].value)
    }

    pub fn shape(&self, x: NodeId) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: NodeId) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Appends an op node. `backward` is only built when some parent
    /// requires a gradient.
    pub fn custom<B>(&mut self, value: Tensor<F>, parents: &[NodeId], backward: B) -> NodeId
    where
        B: Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<F>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar (or any tensor, seeded with ones).
    pub fn backward(&self, root: NodeId) -> Gradients<F> {
        let seed = Tensor::full(self.shape(root).to_vec(), F::one());
        self.backward_with_seed(root, seed)
    }

    pub fn backward_with_seed(&self, root: NodeId, seed: Tensor<F>) -> Gradients<F> {
        assert_eq!(seed.shape(), self.shape(root), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<F>>> = (0..=root.0).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> =
                node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.shape(*p), "gradient shape mismatch");
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Leaf gradients are kept; intermediate ones are consumed above.
            if node.parents.is_empty() {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(v, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(v, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        let v = va.zip_map(&vb, |x, y| x * y);
        self.custom(v, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&vb, |gi, y| gi * y)),
                needs[1].then(|| g.zip_map(&va, |gi, x| gi * x)),
            ]
        })
    }

    /// Elementwise product with a constant tensor (e.g. a validity mask).
    pub fn mul_const(&mut self, a: NodeId, c: Rc<Tensor<F>>) -> NodeId {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.custom(v, &[a], move |g, _| vec![Some(g.zip_map(&c, |gi, y| gi * y))])
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.custom(v, &[a], move |g, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.custom(v, &[a], |g, _| vec![Some(g.clone())])
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let v = va.map(|x| x.abs());
        self.custom(v, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |gi, x| {
                if x > F::zero() {
                    gi
                } else if x < F::zero() {
                    -gi
                } else {
                    F::zero()
                }
            }))]
        })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = Rc::new(self.value(a).map(|x| x.exp()));
        let out = Rc::clone(&v);
        let id = self.custom((*v).clone(), &[a], move |g, _| {
            vec![Some(g.zip_map(&out, |gi, y| gi * y))]
        });
        id
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let v = va.map(|x| x * x);
        self.custom(v, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |gi, x| gi * (x + x)))]
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let v = va.map(|x| x.max(F::zero()));
        self.custom(v, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |gi, x| if x > F::zero() { gi } else { F::zero() }))]
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = Rc::new(self.value(a).map(sigmoid));
        let o = Rc::clone(&out);
        self.custom((*out).clone(), &[a], move |g, _| {
            vec![Some(g.zip_map(&o, |gi, s| gi * s * (F::one() - s)))]
        })
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value_rc(a);
        let half = F::lit(0.5);
        let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
        let v = va.map(|x| half * x * (F::one() + (x * inv_sqrt2).erf()));
        let inv_sqrt_2pi = F::lit(0.398_942_280_401_432_7);
        self.custom(v, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |gi, x| {
                let cdf = half * (F::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-(half * x * x)).exp();
                gi * (cdf + x * pdf)
            }))]
        })
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> NodeId {
        let va = self.value_rc(a);
        let v = va.map(|x| x.max(lo).min(hi));
        self.custom(v, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |gi, x| if x > lo && x < hi { gi } else { F::zero() }))]
        })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let v = Tensor::scalar(self.value(a).sum());
        self.custom(v, &[a], move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::one() / F::lit(n as f64))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let old = self.shape(a).to_vec();
        let v = self.value(a).clone().reshape(shape.to_vec());
        self.custom(v, &[a], move |g, _| vec![Some(g.clone().reshape(old.clone()))])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t();
        self.custom(v, &[a], |g, _| vec![Some(g.t())])
    }

    /// Rows of a matrix in the order of `idx`. Backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let rows = self.shape(a)[0];
        let v = self.value(a).gather_rows(&idx);
        self.custom(v, &[a], move |g, _| {
            let d = g.shape()[1];
            let mut out = Tensor::zeros([rows, d]);
            let od = out.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    od[i * d + c] += g.data()[r * d + c];
                }
            }
            vec![Some(out)]
        })
    }

    /// Plane `index` of a `[c, h, w]` tensor.
    pub fn select(&mut self, a: NodeId, index: usize) -> NodeId {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 3, "select needs [c, h, w]");
        let plane = shape[1] * shape[2];
        let v = Tensor::new(
            [shape[1], shape[2]],
            self.value(a).data()[index * plane..(index + 1) * plane].to_vec(),
        );
        self.custom(v, &[a], move |g, _| {
            let mut out = Tensor::zeros(shape.clone());
            out.data_mut()[index * plane..(index + 1) * plane].copy_from_slice(g.data());
            vec![Some(out)]
        })
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        let v = va.matmul(&vb);
        self.custom(v, &[a, b], move |g, needs| {
            vec![needs[0].then(|| g.matmul(&vb.t())), needs[1].then(|| va.t().matmul(g))]
        })
    }

    /// `x·w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (vx, vw) = (self.value_rc(x), self.value_rc(w));
        assert_eq!(vx.ndim(), 2, "linear input must be [n, in]");
        assert_eq!(vx.shape()[1], vw.shape()[0], "linear width mismatch");
        let (n, din, dout) = (vx.shape()[0], vw.shape()[0], vw.shape()[1]);
        let mut out = vec![F::zero(); n * dout];
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.shape(), [dout], "bias shape mismatch");
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(vb.data());
            }
        }
        F::gemm(
            n, din, dout, F::one(), vx.data(), din as isize, 1, vw.data(), dout as isize, 1,
            F::one(), &mut out, dout as isize, 1,
        );
        let v = Tensor::new([n, dout], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom(v, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![F::zero(); n * din];
                F::gemm(
                    n, dout, din, F::one(), g.data(), dout as isize, 1, vw.data(), 1,
                    dout as isize, F::zero(), &mut gx, din as isize, 1,
                );
                Tensor::new([n, din], gx)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![F::zero(); din * dout];
                F::gemm(
                    din, n, dout, F::one(), vx.data(), 1, din as isize, g.data(), dout as isize,
                    1, F::zero(), &mut gw, dout as isize, 1,
                );
                Tensor::new([din, dout], gw)
            });
            let mut res = vec![gx, gw];
            if needs.len() == 3 {
                res.push(needs[2].then(|| {
                    let mut gb = vec![F::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::new([dout], gb)
                }));
            }
            res
        })
    }

    /// Row-wise layer normalization of `x: [n, d]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: F) -> NodeId {
        let vx = self.value_rc(x);
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let vg = self.value_rc(gamma);
        let vb = self.value(beta);
        assert_eq!(vg.shape(), [d], "layer_norm gamma shape");
        let df = F::lit(d as f64);
        let mut xhat = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); n];
        let mut out = vec![F::zero(); n * d];
        for r in 0..n {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let v = Tensor::new([n, d], out);
        self.custom(v, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gx = vec![F::zero(); n * d];
                for r in 0..n {
                    let mut sum_dy = F::zero();
                    let mut sum_dy_xhat = F::zero();
                    for c in 0..d {
                        let dy = gd[r * d + c] * vg.data()[c];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat[r * d + c];
                    }
                    for c in 0..d {
                        let dy = gd[r * d + c] * vg.data()[c];
                        gx[r * d + c] =
                            rstd[r] * (dy - sum_dy / df - xhat[r * d + c] * sum_dy_xhat / df);
                    }
                }
                Tensor::new([n, d], gx)
            });
            let gg = needs[1].then(|| {
                let mut gg = vec![F::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        gg[c] += gd[r * d + c] * xhat[r * d + c];
                    }
                }
                Tensor::new([d], gg)
            });
            let gb = needs[2].then(|| {
                let mut gb = vec![F::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        gb[c] += gd[r * d + c];
                    }
                }
                Tensor::new([d], gb)
            });
            vec![gx, gg, gb]
        })
    }
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Result of a reverse pass; only leaves keep their gradient.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf, `None` when no gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Rc::new(Tensor::new([2], vec![1.0, 2.0])));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let grads = g.backward(s);
        // d/dx (x * sg(x)) = sg(x)
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.param(Rc::new(Tensor::new([1], vec![3.0])));
        let y = g.square(x);
        assert!(!g.requires_grad(y));
        assert!(g.backward(y).get(x).is_none());
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Rc::new(Tensor::scalar(3.0)));
        let a = g.scale(x, 2.0);
        let b = g.square(x);
        let c = g.add(a, b);
        let grads = g.backward(c);
        assert_eq!(grads.get(x).unwrap().item(), 2.0 + 6.0);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Rc::new(Tensor::new([3], vec![-1.0, 0.0, 2.0])));
        let y = g.abs(x);
        let s = g.sum(y);
        assert_eq!(g.backward(s).get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }
}
