//! The full depth network: patch embedding, ViT encoder, dense decoder and
//! the feature predictor head, all over one parameter store.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::decoder::{Decoder, DecoderConfig, DepthPrediction};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::PredictorHead;
use crate::masking::{build_attention_mask, Partition};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::tokens::{Grid, ImageTensor, PatchEmbed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    /// Desk-scale network for 32×64 images.
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 64,
            patch_size: 4,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<Grid> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::DimensionMismatch(format!(
                "patch size {p} does not divide {}x{}",
                self.image_height, self.image_width
            )));
        }
        Ok(Grid { rows: self.image_height / p, cols: self.image_width / p })
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.encoder.validate()?;
        if self.decoder.level_widths.len() != self.encoder.skip_blocks.len() {
            return Err(Error::InvalidConfig(format!(
                "{} decoder levels for {} encoder skips",
                self.decoder.level_widths.len(),
                self.encoder.skip_blocks.len()
            )));
        }
        Ok(())
    }
}

/// Layer layout; parameter values live in the store.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub embed: PatchEmbed,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub predictor: PredictorHead,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub grid: Grid,
    pub arch: Architecture,
    pub store: ParamStore<F>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub depth: NodeId,
    pub log_uncertainty: NodeId,
    /// Final encoder tokens `[N, d]` in spatial order.
    pub tokens: NodeId,
}

/// Plain-tensor result of a no-grad forward.
#[derive(Clone, Debug)]
pub struct Forward<F> {
    pub prediction: DepthPrediction<F>,
    pub tokens: Tensor<F>,
}

impl<F: Float> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.encoder.d_model;
        let embed = PatchEmbed::new(&mut store, cfg.patch_size, grid, d, &mut rng);
        let encoder = Encoder::new(&mut store, cfg.encoder.clone(), &mut rng)?;
        let decoder = Decoder::new(&mut store, cfg.decoder.clone(), d, cfg.patch_size, grid, &mut rng)?;
        let predictor = PredictorHead::new(&mut store, d, &mut rng);
        Ok(Self { cfg, grid, arch: Architecture { embed, encoder, decoder, predictor }, store })
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model { cfg: self.cfg.clone(), grid: self.grid, arch: self.arch.clone(), store: self.store.cast() }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.len()
    }

    /// Forward with parameters already bound into `g`. With a partition the
    /// tokens are shuffled, encoded under the block mask and reassembled
    /// before decoding; without one attention is unrestricted.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        image: &ImageTensor<F>,
        part: Option<&Partition>,
    ) -> Result<ForwardNodes> {
        let x = self.arch.embed.forward(g, b, image)?;
        let enc = match part {
            None => self.arch.encoder.forward(g, b, x, None),
            Some(p) => {
                if p.n() != self.num_tokens() {
                    return Err(Error::ShapeMismatch(format!(
                        "partition over {} tokens, model has {}",
                        p.n(),
                        self.num_tokens()
                    )));
                }
                let mask = Rc::new(build_attention_mask(p));
                let xs = g.gather_rows(x, Rc::clone(&p.perm));
                let mut e = self.arch.encoder.forward(g, b, xs, Some(&mask));
                e.final_tokens = g.gather_rows(e.final_tokens, Rc::clone(&p.inv_perm));
                for s in &mut e.skips {
                    *s = g.gather_rows(*s, Rc::clone(&p.inv_perm));
                }
                e
            }
        };
        let dec = self.arch.decoder.forward(g, b, &enc.skips, self.grid)?;
        Ok(ForwardNodes { depth: dec.depth, log_uncertainty: dec.log_uncertainty, tokens: enc.final_tokens })
    }

    /// No-grad forward returning plain tensors.
    pub fn predict(&self, image: &ImageTensor<F>, part: Option<&Partition>) -> Result<Forward<F>> {
        let mut g = Graph::no_grad();
        let b = self.store.bind(&mut g);
        let n = self.forward(&mut g, &b, image, part)?;
        Ok(Forward {
            prediction: DepthPrediction {
                depth: g.value(n.depth).clone(),
                log_uncertainty: g.value(n.log_uncertainty).clone(),
            },
            tokens: g.value(n.tokens).clone(),
        })
    }
}
