//! The quality-estimation model: encoder, pooling and an affine regression
//! head producing one unbounded score per (source, target) pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{
    build_input, encode_on_tape, pool_on_tape, EncoderConfig, EncoderVars, EncoderWeights, Mode,
    PoolingStrategy, TokenSequence,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Debug, Clone, PartialEq)]
pub struct QEModel {
    pub config: EncoderConfig,
    pub weights: EncoderWeights,
    /// `[d_model x 1]`
    pub head_weight: Tensor,
    /// `[1]`
    pub head_bias: Tensor,
    pub pooling: PoolingStrategy,
}

/// A model's parameters registered on one tape.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ModelVars {
    /// All parameter vars, in [`QEModel::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.encoder.all();
        v.push(self.head_weight);
        v.push(self.head_bias);
        v
    }
}

impl QEModel {
    /// Randomly initialized encoder with a zero head, so every initial
    /// prediction is 0.
    pub fn new(config: EncoderConfig, pooling: PoolingStrategy, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = EncoderWeights::init(&config, &mut rng)?;
        Ok(Self::with_weights(config, weights, pooling))
    }

    /// All parameters zero.
    pub fn zeros(config: EncoderConfig, pooling: PoolingStrategy) -> Result<Self> {
        let weights = EncoderWeights::zeros(&config)?;
        Ok(Self::with_weights(config, weights, pooling))
    }

    fn with_weights(config: EncoderConfig, weights: EncoderWeights, pooling: PoolingStrategy) -> Self {
        Self {
            head_weight: Tensor::zeros(&[config.d_model, 1]),
            head_bias: Tensor::zeros(&[1]),
            config,
            weights,
            pooling,
        }
    }

    /// Draws the head from `N(0, 1/d_model)`, giving a fully random model.
    pub fn randomize_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (self.config.d_model as f32).sqrt()).expect("positive std");
        for v in self.head_weight.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let mut shapes = EncoderWeights::expected_shapes(config);
        shapes.push(("head.weight".into(), vec![config.d_model, 1]));
        shapes.push(("head.bias".into(), vec![1]));
        shapes
    }

    /// Assembles a model from tensors in [`QEModel::expected_shapes`] order.
    pub fn from_tensors(
        config: EncoderConfig,
        pooling: PoolingStrategy,
        mut tensors: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if tensors.len() != expected.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        let head_bias = tensors.pop().expect("checked length");
        let head_weight = tensors.pop().expect("checked length");
        let model = Self {
            weights: EncoderWeights::from_tensors(&config, tensors)?,
            head_weight,
            head_bias,
            config,
            pooling,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.weights.tensors();
        v.push(&self.head_weight);
        v.push(&self.head_bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.weights.tensors_mut();
        v.push(&mut self.head_weight);
        v.push(&mut self.head_bias);
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.weights.check_against(&self.config)?;
        if self.head_weight.shape() != [self.config.d_model, 1] || self.head_bias.shape() != [1] {
            return Err(Error::Config(format!(
                "head shapes {:?} / {:?} do not match d_model {}",
                self.head_weight.shape(),
                self.head_bias.shape(),
                self.config.d_model
            )));
        }
        if !self.is_finite() {
            return Err(Error::Numeric("model holds non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> ModelVars {
        ModelVars {
            encoder: EncoderVars::register(tape, &self.weights),
            head_weight: tape.param(&self.head_weight),
            head_bias: tape.param(&self.head_bias),
        }
    }

    /// Records encode, pool and head on `tape`; returns the `[1 x 1]` score.
    pub fn score_on_tape(
        &self,
        tape: &mut Tape<'_>,
        vars: &ModelVars,
        seq: &TokenSequence,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let hidden = encode_on_tape(tape, &vars.encoder, seq, &self.config, mode)?;
        let pooled = pool_on_tape(tape, hidden, &seq.attention_mask, self.pooling)?;
        let y = tape.matmul(pooled, vars.head_weight)?;
        tape.add_row(y, vars.head_bias)
    }

    pub fn input(&self, source: &str, target: &str) -> Result<TokenSequence> {
        build_input(source, target, self.config.max_len)
    }

    /// Predicted quality score: a deterministic function of the model and
    /// the pair.
    pub fn predict(&self, source: &str, target: &str) -> Result<f32> {
        let seq = self.input(source, target)?;
        self.predict_sequence(&seq)
    }

    pub fn predict_sequence(&self, seq: &TokenSequence) -> Result<f32> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let score = self.score_on_tape(&mut tape, &vars, seq, &mut Mode::Eval)?;
        Ok(tape.value(score).data()[0])
    }
}

/// `(1/n) * sum (pred_i - gold_i)^2`, accumulated in 64-bit.
pub fn mse_loss(preds: &[f64], gold: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gold.len() {
        return Err(Error::Contract(format!(
            "mse_loss needs equal nonzero lengths, got {} predictions and {} labels",
            preds.len(),
            gold.len()
        )));
    }
    let sum: f64 = preds.iter().zip(gold).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(sum / preds.len() as f64)
}
