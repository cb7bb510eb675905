//! Adam with one learning rate per parameter group.

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Decoder => self.lr_decoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Float> Adam<F> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update. `grads` is aligned with the store; `None` means zero.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1f, b2f, eps) = (F::lit(b1), F::lit(b2), F::lit(self.cfg.eps));
        let (one_b1, one_b2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let (inv_bc1, inv_bc2) = (F::lit(1.0 / bc1), F::lit(1.0 / bc2));
        for (i, p) in store.iter_mut().enumerate() {
            let lr = F::lit(self.cfg.lr(p.group));
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = std::rc::Rc::make_mut(&mut p.value).data_mut();
            match &grads[i] {
                Some(g) => {
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1f * *m + one_b1 * g;
                        *v = b2f * *v + one_b2 * g * g;
                        *w -= lr * (*m * inv_bc1) / ((*v * inv_bc2).sqrt() + eps);
                    }
                }
                None => {
                    for ((w, m), v) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= b1f;
                        *v *= b2f;
                        *w -= lr * (*m * inv_bc1) / ((*v * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AdamConfig {
        AdamConfig { lr_encoder: 0.1, lr_decoder: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    #[test]
    fn first_step_moves_by_lr_per_group() {
        let mut store = ParamStore::<f64>::new();
        store.add("e", ParamGroup::Encoder, Tensor::new([2], vec![1.0, 1.0]));
        store.add("d", ParamGroup::Decoder, Tensor::new([1], vec![1.0]));
        let mut opt = Adam::new(cfg(), &store);
        let grads = vec![Some(Tensor::new([2], vec![3.0, -0.5])), Some(Tensor::new([1], vec![2.0]))];
        opt.step(&mut store, &grads).unwrap();
        let e = store.iter().next().unwrap().value.data().to_vec();
        assert!((e[0] - 0.9).abs() < 1e-6 && (e[1] - 1.1).abs() < 1e-6);
        let d = store.iter().nth(1).unwrap().value.data()[0];
        assert!((d - 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", ParamGroup::Encoder, Tensor::new([1], vec![5.0]));
        let mut opt = Adam::new(cfg(), &store);
        for _ in 0..2000 {
            let x = store.iter().next().unwrap().value.data()[0];
            opt.step(&mut store, &[Some(Tensor::new([1], vec![2.0 * (x - 2.0)]))]).unwrap();
        }
        let x = store.iter().next().unwrap().value.data()[0];
        assert!((x - 2.0).abs() < 1e-3, "{x}");
    }
}
