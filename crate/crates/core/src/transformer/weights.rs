// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<S> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub b_q: Tensor<S>,
    pub b_k: Tensor<S>,
    pub b_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub b_o: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<S> {
    pub heads: Vec<HeadWeights<S>>,
    pub w_in: Tensor<S>,
    pub b_in: Tensor<S>,
    pub w_out: Tensor<S>,
    pub b_out: Tensor<S>,
}

/// All parameters of the transformer. Biases are stored as `[1, n]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<S> {
    pub config: ModelConfig,
    pub tok_embed: Tensor<S>,
    pub pos_embed: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub w_unembed: Tensor<S>,
}

fn gaussian<S: Scalar>(rng: &mut impl Rng, dist: &Normal<f64>, rows: usize, cols: usize) -> Tensor<S> {
    let data = (0..rows * cols).map(|_| S::of(dist.sample(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("sized above")
}

impl<S: Scalar> Weights<S> {
    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn init(config: &ModelConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let dist = Normal::new(0.0, std).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        let c = config;
        let tok_embed = gaussian(rng, &dist, c.d_vocab, c.d_model);
        let pos_embed = gaussian(rng, &dist, c.max_seq_len, c.d_model);
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            let heads = (0..c.n_heads)
                .map(|_| HeadWeights {
                    w_q: gaussian(rng, &dist, c.d_model, c.d_head),
                    w_k: gaussian(rng, &dist, c.d_model, c.d_head),
                    w_v: gaussian(rng, &dist, c.d_model, c.d_head),
                    b_q: Tensor::zeros(&[1, c.d_head]),
                    b_k: Tensor::zeros(&[1, c.d_head]),
                    b_v: Tensor::zeros(&[1, c.d_head]),
                    w_o: gaussian(rng, &dist, c.d_head, c.d_model),
                    b_o: Tensor::zeros(&[1, c.d_model]),
                })
                .collect();
            layers.push(LayerWeights {
                heads,
                w_in: gaussian(rng, &dist, c.d_model, c.d_mlp),
                b_in: Tensor::zeros(&[1, c.d_mlp]),
                w_out: gaussian(rng, &dist, c.d_mlp, c.d_model),
                b_out: Tensor::zeros(&[1, c.d_model]),
            });
        }
        let w_unembed = gaussian(rng, &dist, c.d_model, c.d_vocab);
        Ok(Self { config: config.clone(), tok_embed, pos_embed, layers, w_unembed })
    }

    /// All zeros, useful as a template for hand-set weights.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let z = |r: usize, k: usize| Tensor::zeros(&[r, k]);
        let layers = (0..c.n_layers)
            .map(|_| LayerWeights {
                heads: (0..c.n_heads)
                    .map(|_| HeadWeights {
                        w_q: z(c.d_model, c.d_head),
                        w_k: z(c.d_model, c.d_head),
                        w_v: z(c.d_model, c.d_head),
                        b_q: z(1, c.d_head),
                        b_k: z(1, c.d_head),
                        b_v: z(1, c.d_head),
                        w_o: z(c.d_head, c.d_model),
                        b_o: z(1, c.d_model),
                    })
                    .collect(),
                w_in: z(c.d_model, c.d_mlp),
                b_in: z(1, c.d_mlp),
                w_out: z(c.d_mlp, c.d_model),
                b_out: z(1, c.d_model),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_embed: z(c.d_vocab, c.d_model),
            pos_embed: z(c.max_seq_len, c.d_model),
            layers,
            w_unembed: z(c.d_model, c.d_vocab),
        })
    }

    /// Parameters with stable, human-readable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("tok_embed".to_string(), &self.tok_embed), ("pos_embed".to_string(), &self.pos_embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                for (name, t) in [
                    ("w_q", &head.w_q),
                    ("w_k", &head.w_k),
                    ("w_v", &head.w_v),
                    ("b_q", &head.b_q),
                    ("b_k", &head.b_k),
                    ("b_v", &head.b_v),
                    ("w_o", &head.w_o),
                    ("b_o", &head.b_o),
                ] {
                    out.push((format!("layers.{l}.heads.{h}.{name}"), t));
                }
            }
            for (name, t) in [("w_in", &layer.w_in), ("b_in", &layer.b_in), ("w_out", &layer.w_out), ("b_out", &layer.b_out)] {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("w_unembed".to_string(), &self.w_unembed));
        out
    }

    /// Mutable parameters in the same order as [`Weights::named`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.tok_embed, &mut self.pos_embed];
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.extend([
                    &mut head.w_q,
                    &mut head.w_k,
                    &mut head.w_v,
                    &mut head.b_q,
                    &mut head.b_k,
                    &mut head.b_v,
                    &mut head.w_o,
                    &mut head.b_o,
                ]);
            }
            out.extend([&mut layer.w_in, &mut layer.b_in, &mut layer.w_out, &mut layer.b_out]);
        }
        out.push(&mut self.w_unembed);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape`. With `trainable`, gradients flow to them.
    pub fn record(&self, tape: &mut Tape<S>, trainable: bool) -> WeightVars {
        let mut put = |t: &Tensor<S>| tape.leaf(t.clone().with_requires_grad(trainable));
        let tok_embed = put(&self.tok_embed);
        let pos_embed = put(&self.pos_embed);
        let layers = self
            .layers
            .iter()
            .map(|layer| LayerVars {
                heads: layer
                    .heads
                    .iter()
                    .map(|h| HeadVars {
                        w_q: put(&h.w_q),
                        w_k: put(&h.w_k),
                        w_v: put(&h.w_v),
                        b_q: put(&h.b_q),
                        b_k: put(&h.b_k),
                        b_v: put(&h.b_v),
                        w_o: put(&h.w_o),
                        b_o: put(&h.b_o),
                    })
                    .collect(),
                w_in: put(&layer.w_in),
                b_in: put(&layer.b_in),
                w_out: put(&layer.w_out),
                b_out: put(&layer.b_out),
            })
            .collect();
        let w_unembed = put(&self.w_unembed);
        WeightVars { tok_embed, pos_embed, layers, w_unembed }
    }

    pub fn to_f64(&self) -> Weights<f64> {
        let mut out = Weights::<f64>::zeros(&self.config).expect("config already validated");
        for (dst, (_, src)) in out.params_mut().into_iter().zip(self.named()) {
            *dst = src.to_f64();
        }
        out
    }

    pub fn from_f64(w: &Weights<f64>) -> Self {
        let mut out = Self::zeros(&w.config).expect("config already validated");
        for (dst, (_, src)) in out.params_mut().into_iter().zip(w.named()) {
            *dst = Tensor::from_f64(src);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub b_q: Var,
    pub b_k: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub heads: Vec<HeadVars>,
    pub w_in: Var,
    pub b_in: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Handles to a [`Weights`] recorded on one tape.
#[derive(Clone, Debug)]
pub struct WeightVars {
    pub tok_embed: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub w_unembed: Var,
}

impl WeightVars {
    /// Vars in the order of [`Weights::named`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embed, self.pos_embed];
        for layer in &self.layers {
            for h in &layer.heads {
                out.extend([h.w_q, h.w_k, h.w_v, h.b_q, h.b_k, h.b_v, h.w_o, h.b_o]);
            }
            out.extend([layer.w_in, layer.b_in, layer.w_out, layer.b_out]);
        }
        out.push(self.w_unembed);
        out
    }
}
