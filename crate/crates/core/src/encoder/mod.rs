//! A small pre-normalization transformer encoder with an aspect-aware
//! classification head. Forward and backward passes are written by hand so
//! every gradient is exact, and all math is generic over [`Scalar`] so the
//! same code runs in `f32` for training and `f64` for verification.

mod network;
mod ops;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CvibError, Result};
use crate::scalar::Scalar;

pub use network::{
    backward, classify, encode, forward, pool_final, Batch, FinalRep, Forward, LayerStates,
    NetworkGrads,
};
pub use ops::{log_softmax_rows, softmax_rows};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    /// Width of the hidden layer of the classification MLP.
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            hidden_dim: 64,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 64,
            vocab_size: 128,
            n_classes: 3,
            head_hidden: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CvibError::Config(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad("hidden_dim must be a positive multiple of n_heads");
        }
        if self.ffn_dim == 0 || self.head_hidden == 0 {
            return bad("ffn_dim and head_hidden must be positive");
        }
        if self.max_len < 5 {
            return bad("max_len must hold at least [CLS] w [SEP] a [SEP]");
        }
        if self.vocab_size <= crate::corpus::SEP {
            return bad("vocab_size must cover the reserved tokens");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Dimension of the final representation: CLS state plus aspect pool.
    pub fn rep_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Linear<F> {
    /// `(in, out)`; applied as `x · w + b`.
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    fn init<R: Rng>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            w: normal_matrix(fan_in, fan_out, std, rng),
            b: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct LayerNorm<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    fn identity(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Block<F> {
    pub ln_attn: LayerNorm<F>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub attn_out: Linear<F>,
    pub ln_ffn: LayerNorm<F>,
    pub ffn_in: Linear<F>,
    pub ffn_out: Linear<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Head<F> {
    /// The MLP hidden layer applied to the final representation.
    pub hidden: Linear<F>,
    /// Output projection producing class logits.
    pub out: Linear<F>,
}

/// Every learnable weight of one classifier: embeddings, encoder blocks and
/// the prediction head. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct EncoderParams<F> {
    pub token_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub blocks: Vec<Block<F>>,
    /// Normalizes the last layer's (masked) output before pooling.
    pub final_norm: LayerNorm<F>,
    pub head: Head<F>,
}

fn normal_matrix<F: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || F::of(dist.sample(rng)))
}

impl<F: Scalar> EncoderParams<F> {
    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let resid = inv(d) / (2.0 * cfg.n_layers as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln_attn: LayerNorm::identity(d),
                query: Linear::init(d, d, inv(d), rng),
                key: Linear::init(d, d, inv(d), rng),
                value: Linear::init(d, d, inv(d), rng),
                attn_out: Linear::init(d, d, resid, rng),
                ln_ffn: LayerNorm::identity(d),
                ffn_in: Linear::init(d, cfg.ffn_dim, inv(d), rng),
                ffn_out: Linear::init(cfg.ffn_dim, d, inv(cfg.ffn_dim) / (2.0 * cfg.n_layers as f64).sqrt(), rng),
            })
            .collect();
        EncoderParams {
            token_emb: normal_matrix(cfg.vocab_size, d, 1.0, rng),
            pos_emb: normal_matrix(cfg.max_len, d, 0.5, rng),
            blocks,
            final_norm: LayerNorm::identity(d),
            head: Head {
                hidden: Linear::init(cfg.rep_dim(), cfg.head_hidden, inv(cfg.rep_dim()), rng),
                out: Linear::init(cfg.head_hidden, cfg.n_classes, inv(cfg.head_hidden), rng),
            },
        }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.hidden_dim;
        EncoderParams {
            token_emb: Array2::zeros((cfg.vocab_size, d)),
            pos_emb: Array2::zeros((cfg.max_len, d)),
            blocks: (0..cfg.n_layers)
                .map(|_| Block {
                    ln_attn: LayerNorm::zeros(d),
                    query: Linear::zeros(d, d),
                    key: Linear::zeros(d, d),
                    value: Linear::zeros(d, d),
                    attn_out: Linear::zeros(d, d),
                    ln_ffn: LayerNorm::zeros(d),
                    ffn_in: Linear::zeros(d, cfg.ffn_dim),
                    ffn_out: Linear::zeros(cfg.ffn_dim, d),
                })
                .collect(),
            final_norm: LayerNorm::zeros(d),
            head: Head {
                hidden: Linear::zeros(cfg.rep_dim(), cfg.head_hidden),
                out: Linear::zeros(cfg.head_hidden, cfg.n_classes),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, t)| t.fill(F::zero()));
        z
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = vec![
            ("token_emb".into(), self.token_emb.as_slice().expect("standard layout")),
            ("pos_emb".into(), self.pos_emb.as_slice().expect("standard layout")),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let lin = [
                ("query", &b.query),
                ("key", &b.key),
                ("value", &b.value),
                ("attn_out", &b.attn_out),
                ("ffn_in", &b.ffn_in),
                ("ffn_out", &b.ffn_out),
            ];
            for (ln_name, ln) in [("ln_attn", &b.ln_attn), ("ln_ffn", &b.ln_ffn)] {
                out.push((format!("blocks.{l}.{ln_name}.gain"), slice(&ln.gain)));
                out.push((format!("blocks.{l}.{ln_name}.bias"), slice(&ln.bias)));
            }
            for (name, lin) in lin {
                out.push((format!("blocks.{l}.{name}.w"), slice2(&lin.w)));
                out.push((format!("blocks.{l}.{name}.b"), slice(&lin.b)));
            }
        }
        out.push(("final_norm.gain".into(), slice(&self.final_norm.gain)));
        out.push(("final_norm.bias".into(), slice(&self.final_norm.bias)));
        for (name, lin) in [("head.hidden", &self.head.hidden), ("head.out", &self.head.out)] {
            out.push((format!("{name}.w"), slice2(&lin.w)));
            out.push((format!("{name}.b"), slice(&lin.b)));
        }
        out
    }

    /// Mutable counterpart of [`EncoderParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = vec![
            ("token_emb".into(), self.token_emb.as_slice_mut().expect("standard layout")),
            ("pos_emb".into(), self.pos_emb.as_slice_mut().expect("standard layout")),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (ln_name, ln) in [("ln_attn", &mut b.ln_attn), ("ln_ffn", &mut b.ln_ffn)] {
                out.push((format!("blocks.{l}.{ln_name}.gain"), slice_mut(&mut ln.gain)));
                out.push((format!("blocks.{l}.{ln_name}.bias"), slice_mut(&mut ln.bias)));
            }
            let lin = [
                ("query", &mut b.query),
                ("key", &mut b.key),
                ("value", &mut b.value),
                ("attn_out", &mut b.attn_out),
                ("ffn_in", &mut b.ffn_in),
                ("ffn_out", &mut b.ffn_out),
            ];
            for (name, lin) in lin {
                out.push((format!("blocks.{l}.{name}.w"), lin.w.as_slice_mut().expect("standard layout")));
                out.push((format!("blocks.{l}.{name}.b"), slice_mut(&mut lin.b)));
            }
        }
        out.push(("final_norm.gain".into(), slice_mut(&mut self.final_norm.gain)));
        out.push(("final_norm.bias".into(), slice_mut(&mut self.final_norm.bias)));
        let head = &mut self.head;
        for (name, lin) in [("head.hidden", &mut head.hidden), ("head.out", &mut head.out)] {
            out.push((format!("{name}.w"), lin.w.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.b"), slice_mut(&mut lin.b)));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Element-type conversion, e.g. to run an `f32` model in `f64`.
    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        let mut out = EncoderParams::<G> {
            token_emb: self.token_emb.mapv(|v| G::of(v.as_f64())),
            pos_emb: self.pos_emb.mapv(|v| G::of(v.as_f64())),
            blocks: Vec::new(),
            final_norm: cast_ln(&self.final_norm),
            head: Head {
                hidden: cast_linear(&self.head.hidden),
                out: cast_linear(&self.head.out),
            },
        };
        out.blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                ln_attn: cast_ln(&b.ln_attn),
                query: cast_linear(&b.query),
                key: cast_linear(&b.key),
                value: cast_linear(&b.value),
                attn_out: cast_linear(&b.attn_out),
                ln_ffn: cast_ln(&b.ln_ffn),
                ffn_in: cast_linear(&b.ffn_in),
                ffn_out: cast_linear(&b.ffn_out),
            })
            .collect();
        out
    }

    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let expect = EncoderParams::<F>::zeros(cfg);
        let ours = self.tensors();
        let theirs = expect.tensors();
        if ours.len() != theirs.len()
            || ours
                .iter()
                .zip(theirs.iter())
                .any(|((_, a), (_, b))| a.len() != b.len())
            || self.token_emb.dim() != expect.token_emb.dim()
            || self.pos_emb.dim() != expect.pos_emb.dim()
        {
            return Err(CvibError::Shape(
                "encoder parameters do not match configuration".into(),
            ));
        }
        Ok(())
    }
}

fn cast_linear<F: Scalar, G: Scalar>(l: &Linear<F>) -> Linear<G> {
    Linear {
        w: l.w.mapv(|v| G::of(v.as_f64())),
        b: l.b.mapv(|v| G::of(v.as_f64())),
    }
}

fn cast_ln<F: Scalar, G: Scalar>(l: &LayerNorm<F>) -> LayerNorm<G> {
    LayerNorm {
        gain: l.gain.mapv(|v| G::of(v.as_f64())),
        bias: l.bias.mapv(|v| G::of(v.as_f64())),
    }
}

fn slice<F>(a: &Array1<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn slice2<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<F>(a: &mut Array1<F>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}
