//! Byte-level transformer encoder.
//!
//! Token and learned absolute position embeddings feed a stack of pre-norm
//! blocks (multi-head self-attention, then a GELU feed-forward), each
//! sublayer wrapped in a residual connection, followed by a final layer
//! norm. Padding keys are masked with `-inf` logits.

mod pooling;
pub mod tokenizer;

pub use pooling::{pool, pool_on_tape, PoolingStrategy};
pub use tokenizer::{build_input, tokenize, TokenSequence, VOCAB_SIZE};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: DEFAULT_MAX_LEN,
            vocab_size: VOCAB_SIZE,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale preset: the default widths with a shorter position table.
    pub fn tiny() -> Self {
        Self {
            max_len: 128,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail(format!(
                "d_model ({}), n_heads ({}) and d_ff ({}) must be positive",
                self.d_model, self.n_heads, self.d_ff
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model < 2 {
            return fail("d_model must be at least 2 for layer norm".into());
        }
        if !(tokenizer::MIN_INPUT_LEN..=DEFAULT_MAX_LEN).contains(&self.max_len) {
            return fail(format!(
                "max_len must lie in {}..={DEFAULT_MAX_LEN}, got {}",
                tokenizer::MIN_INPUT_LEN,
                self.max_len
            ));
        }
        if self.vocab_size != VOCAB_SIZE {
            return fail(format!(
                "vocab_size must be {VOCAB_SIZE} for the byte vocabulary, got {}",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        Ok(())
    }
}

/// Names of the per-layer parameters, in storage order.
pub const LAYER_PARAM_NAMES: [&str; 16] = [
    "attn_norm.gain",
    "attn_norm.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ff_norm.gain",
    "ff_norm.bias",
    "ff.in.weight",
    "ff.in.bias",
    "ff.out.weight",
    "ff.out.bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ff_norm_gain: Tensor,
    pub ff_norm_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerWeights {
    fn shapes(c: &EncoderConfig) -> [Vec<usize>; 16] {
        let (d, f) = (c.d_model, c.d_ff);
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ff_norm_gain,
            &self.ff_norm_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = Tensor>) -> Self {
        let mut next = || it.next().expect("enough tensors for a layer");
        Self {
            attn_norm_gain: next(),
            attn_norm_bias: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ff_norm_gain: next(),
            ff_norm_bias: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
}

const EMBEDDING_STD: f32 = 0.1;

impl EncoderWeights {
    /// Random initialization: embeddings `N(0, 0.1^2)`, projection matrices
    /// `N(0, 1/fan_in)`, biases zero, norm gains one.
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let shapes = Self::expected_shapes(config);
        let tensors = shapes
            .iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; numel]
                } else if name.ends_with(".bias") {
                    vec![0.0; numel]
                } else {
                    let std = if name.starts_with("embeddings.") {
                        EMBEDDING_STD
                    } else {
                        1.0 / (shape[0] as f32).sqrt()
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..numel).map(|_| normal.sample(rng)).collect()
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, tensors)
    }

    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let tensors = Self::expected_shapes(config)
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Parameter names and shapes in storage order.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = vec![
            ("embeddings.token".to_string(), vec![config.vocab_size, d]),
            ("embeddings.position".to_string(), vec![config.max_len, d]),
        ];
        for i in 0..config.n_layers {
            let shapes = LayerWeights::shapes(config);
            for (name, shape) in LAYER_PARAM_NAMES.iter().zip(shapes) {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("final_norm.gain".into(), vec![d]));
        out.push(("final_norm.bias".into(), vec![d]));
        out
    }

    /// Assembles weights from tensors in [`EncoderWeights::expected_shapes`]
    /// order, checking every shape.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = Self::expected_shapes(config);
        if tensors.len() != expected.len() {
            return Err(Error::Config(format!(
                "expected {} encoder tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, config requires {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let token_embedding = it.next().expect("checked length");
        let position_embedding = it.next().expect("checked length");
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::from_iter(&mut it))
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain: it.next().expect("checked length"),
            final_norm_bias: it.next().expect("checked length"),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.final_norm_gain);
        out.push(&self.final_norm_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn check_against(&self, config: &EncoderConfig) -> Result<()> {
        let expected = Self::expected_shapes(config);
        let actual = self.tensors();
        if actual.len() != expected.len() {
            return Err(Error::Config(format!(
                "weights hold {} tensors, config implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(actual) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, config requires {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Whether dropout is active. Training mode carries the RNG that draws
/// the masks.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

struct LayerVars {
    v: [Var; 16],
}

/// Encoder parameters registered on a tape, in storage order.
pub struct EncoderVars {
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<LayerVars>,
    final_norm_gain: Var,
    final_norm_bias: Var,
}

impl EncoderVars {
    pub fn register<'a>(tape: &mut Tape<'a>, weights: &'a EncoderWeights) -> Self {
        Self {
            token_embedding: tape.param(&weights.token_embedding),
            position_embedding: tape.param(&weights.position_embedding),
            layers: weights
                .layers
                .iter()
                .map(|l| LayerVars {
                    v: l.tensors().map(|t| tape.param(t)),
                })
                .collect(),
            final_norm_gain: tape.param(&weights.final_norm_gain),
            final_norm_bias: tape.param(&weights.final_norm_bias),
        }
    }

    /// All parameter vars in storage order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            out.extend_from_slice(&l.v);
        }
        out.push(self.final_norm_gain);
        out.push(self.final_norm_bias);
        out
    }
}

fn dropout(tape: &mut Tape<'_>, x: Var, rate: f32, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train(rng) = mode else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(x).numel())
        .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
        .collect();
    tape.dropout_mask(x, mask)
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Records the encoder forward pass on `tape`, returning the
/// `[len x d_model]` hidden states.
pub fn encode_on_tape(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    seq: &TokenSequence,
    config: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    seq.validate(config.max_len)?;
    let len = seq.len();
    let ids: Vec<usize> = seq.ids.iter().map(|&id| id as usize).collect();
    let positions: Vec<usize> = (0..len).collect();
    let tok = tape.gather_rows(vars.token_embedding, &ids)?;
    let pos = tape.gather_rows(vars.position_embedding, &positions)?;
    let mut x = tape.add(tok, pos)?;
    x = dropout(tape, x, config.dropout_rate, mode)?;

    let key_mask = if seq.real_len() < len {
        let mut m = vec![0.0; len * len];
        for row in m.chunks_mut(len) {
            for (v, &keep) in row.iter_mut().zip(&seq.attention_mask) {
                if keep == 0 {
                    *v = f32::NEG_INFINITY;
                }
            }
        }
        Some(Tensor::matrix(len, len, m))
    } else {
        None
    };

    let dh = config.head_dim();
    let inv_sqrt_dh = 1.0 / (dh as f32).sqrt();
    for layer in &vars.layers {
        let [ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, w1, b1, w2, b2] = layer.v;

        let h = tape.layer_norm_rows(x, ln1g, ln1b, LAYER_NORM_EPS)?;
        let q = linear(tape, h, wq, bq)?;
        let k = linear(tape, h, wk, bk)?;
        let v = linear(tape, h, wv, bv)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let mut scores = tape.scale(scores, inv_sqrt_dh)?;
            if let Some(mask) = &key_mask {
                scores = tape.add_const(scores, mask)?;
            }
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = linear(tape, ctx, wo, bo)?;
        let attn_out = dropout(tape, attn_out, config.dropout_rate, mode)?;
        x = tape.add(x, attn_out)?;

        let h = tape.layer_norm_rows(x, ln2g, ln2b, LAYER_NORM_EPS)?;
        let f = linear(tape, h, w1, b1)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, w2, b2)?;
        let f = dropout(tape, f, config.dropout_rate, mode)?;
        x = tape.add(x, f)?;
    }
    tape.layer_norm_rows(x, vars.final_norm_gain, vars.final_norm_bias, LAYER_NORM_EPS)
}

/// Contextual hidden states `[len x d_model]` for `seq`.
pub fn encode(
    seq: &TokenSequence,
    weights: &EncoderWeights,
    config: &EncoderConfig,
    mut mode: Mode<'_>,
) -> Result<Tensor> {
    config.validate()?;
    weights.check_against(config)?;
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, weights);
    let out = encode_on_tape(&mut tape, &vars, seq, config, &mut mode)?;
    Ok(tape.value(out).clone())
}
