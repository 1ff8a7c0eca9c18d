//! Mini-batch MSE training with Adam and patience-based early stopping.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::encoder::{Mode, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{mse_loss, save_checkpoint, QEModel};
use crate::tensor::{Tape, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// An eval loss must beat the best by more than this to count.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluation rounds without improvement before stopping.
    pub patience: usize,
    /// Optimizer steps per evaluation round; `None` evaluates once per epoch.
    pub eval_every: Option<usize>,
    pub seed: u64,
    pub shuffle: bool,
    /// Written on every improvement when set.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 8,
            epochs: 3,
            patience: 10,
            eval_every: None,
            seed: 0,
            shuffle: true,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// `learning_rate = 0` is accepted so a frozen run can exercise the
    /// stopping rule.
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config(format!(
                "batch_size ({}), epochs ({}) and patience ({}) must all be >= 1",
                self.batch_size, self.epochs, self.patience
            )));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    fn steps_per_eval(&self, n_train: usize) -> usize {
        self.eval_every
            .unwrap_or_else(|| n_train.div_ceil(self.batch_size))
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// NaN or any shape disagrees.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, ((p, g), m)) in params.iter().zip(grads).zip(&state.m).enumerate() {
        if p.numel() != g.len() || g.len() != m.len() {
            return Err(Error::Contract(format!(
                "parameter {i} has {} elements, gradient {}, moments {}",
                p.numel(),
                g.len(),
                m.len()
            )));
        }
        if g.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("NaN gradient for parameter {i}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let lr = lr as f64;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let m1 = BETA1 * *m as f64 + (1.0 - BETA1) * g;
            let v1 = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
            *m = m1 as f32;
            *v = v1 as f32;
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + ADAM_EPS);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Dev-set MSE with dropout off; the model is not touched.
pub fn evaluate_loss(model: &QEModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let gold = dataset.labels()?;
    let preds = dataset
        .pairs
        .iter()
        .map(|p| model.predict(&p.source, &p.target).map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    mse_loss(&preds, &gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSplit {
    Train,
    Dev,
}

impl fmt::Display for LogSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogSplit::Train => "train",
            LogSplit::Dev => "dev",
        })
    }
}

impl FromStr for LogSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(LogSplit::Train),
            "dev" => Ok(LogSplit::Dev),
            other => Err(Error::Contract(format!("unknown log split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub split: LogSplit,
    pub loss: f64,
}

/// Every training-step loss and every dev evaluation, in order. Dev
/// records at step 0 are the pre-training baseline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    fn push(&mut self, step: u64, split: LogSplit, loss: f64) {
        self.records.push(LogRecord { step, split, loss });
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.of(LogSplit::Train)
    }

    pub fn dev_losses(&self) -> Vec<f64> {
        self.of(LogSplit::Dev)
    }

    fn of(&self, split: LogSplit) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.loss)
            .collect()
    }

    /// `step\tsplit\tloss` per line; losses print in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.step, r.split, r.loss));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
            }
            let step = fields[0]
                .parse()
                .map_err(|_| parse_err(format!("bad step {:?}", fields[0])))?;
            let split = fields[1]
                .parse()
                .map_err(|_| parse_err(format!("bad split {:?}", fields[1])))?;
            let loss = fields[2]
                .parse()
                .map_err(|_| parse_err(format!("bad loss {:?}", fields[2])))?;
            log.push(step, split, loss);
        }
        Ok(log)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best_eval_loss: f64,
    pub rounds_since_improvement: usize,
    pub best_checkpoint_path: Option<PathBuf>,
}

impl EarlyStopState {
    /// Records one evaluation; true when it is a new best.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best_eval_loss - IMPROVEMENT_TOL {
            self.best_eval_loss = loss;
            self.rounds_since_improvement = 0;
            true
        } else {
            self.rounds_since_improvement += 1;
            false
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The parameters with the lowest dev loss seen.
    pub model: QEModel,
    pub log: TrainLog,
    pub stopped_early: bool,
    /// Evaluation rounds after the baseline.
    pub eval_rounds: usize,
    pub steps: u64,
    /// Step at which `model` was captured; 0 means the initial parameters.
    pub best_step: u64,
    pub early_stop: EarlyStopState,
}

fn batch_loss(
    model: &QEModel,
    batch: &[(TokenSequence, f32)],
    rng: &mut ChaCha8Rng,
) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let mut mode = Mode::Train(rng);
    let mut scores = Vec::with_capacity(batch.len());
    for (seq, _) in batch {
        scores.push(model.score_on_tape(&mut tape, &vars, seq, &mut mode)?);
    }
    let preds = tape.concat_rows(&scores)?;
    let gold: Vec<f32> = batch.iter().map(|(_, g)| *g).collect();
    let loss = tape.mse_loss(preds, &gold)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let per_param = vars
        .all()
        .into_iter()
        .zip(model.tensors())
        .map(|(v, t)| grads.get_or_zeros(v, t.numel()))
        .collect();
    Ok((value, per_param))
}

/// Trains `model` on `train_set`, evaluating on `dev_set`, and returns the
/// best parameters seen (possibly the initial ones).
pub fn train(
    model: QEModel,
    train_set: &Dataset,
    dev_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Contract(format!(
            "training needs nonempty train ({}) and dev ({}) sets",
            train_set.len(),
            dev_set.len()
        )));
    }
    let labels = train_set.labels()?;
    dev_set.labels()?;
    let examples: Vec<(TokenSequence, f32)> = train_set
        .pairs
        .iter()
        .zip(&labels)
        .map(|(p, &z)| Ok((model.input(&p.source, &p.target)?, z as f32)))
        .collect::<Result<_>>()?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);

    let steps_per_eval = config.steps_per_eval(examples.len());
    let mut log = TrainLog::default();
    let mut model = model;
    let mut adam = AdamState::new(&model.tensors());

    let baseline = evaluate_loss(&model, dev_set)?;
    if baseline.is_nan() {
        return Err(Error::Diverged {
            step: 0,
            reason: "initial dev loss is NaN".into(),
            best_checkpoint: None,
        });
    }
    log.push(0, LogSplit::Dev, baseline);
    let mut stop = EarlyStopState {
        best_eval_loss: baseline,
        rounds_since_improvement: 0,
        best_checkpoint_path: None,
    };
    let mut best = model.clone();
    let mut best_step = 0;
    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(&best, path)?;
        stop.best_checkpoint_path = Some(path.clone());
    }

    let diverged = |step: u64, reason: String, stop: &EarlyStopState| Error::Diverged {
        step,
        reason,
        best_checkpoint: stop.best_checkpoint_path.clone(),
    };

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0u64;
    let mut eval_rounds = 0;
    let mut stopped_early = false;
    let mut last_eval_step = 0u64;

    'epochs: for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(TokenSequence, f32)> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = batch_loss(&model, &batch, &mut dropout_rng)?;
            step += 1;
            log.push(step, LogSplit::Train, loss as f64);
            let mut params = model.tensors_mut();
            adam_step(&mut params, &grads, &mut adam, config.learning_rate).map_err(|e| match e {
                Error::Numeric(reason) => diverged(step, reason, &stop),
                other => other,
            })?;

            if step.is_multiple_of(steps_per_eval as u64) {
                last_eval_step = step;
                if eval_round(
                    &model,
                    dev_set,
                    step,
                    &mut log,
                    &mut stop,
                    config,
                    &mut best,
                    &mut best_step,
                )
                .map_err(|e| match e {
                    Error::Numeric(reason) => diverged(step, reason, &stop),
                    other => other,
                })? {
                    eval_rounds += 1;
                    stopped_early = true;
                    break 'epochs;
                }
                eval_rounds += 1;
            }
        }
    }
    if !stopped_early && last_eval_step != step {
        eval_round(
            &model,
            dev_set,
            step,
            &mut log,
            &mut stop,
            config,
            &mut best,
            &mut best_step,
        )
        .map_err(|e| match e {
            Error::Numeric(reason) => diverged(step, reason, &stop),
            other => other,
        })?;
        eval_rounds += 1;
    }

    Ok(TrainOutcome {
        model: best,
        log,
        stopped_early,
        eval_rounds,
        steps: step,
        best_step,
        early_stop: stop,
    })
}

/// Runs one evaluation round; returns true when patience is exhausted.
#[allow(clippy::too_many_arguments)]
fn eval_round(
    model: &QEModel,
    dev_set: &Dataset,
    step: u64,
    log: &mut TrainLog,
    stop: &mut EarlyStopState,
    config: &TrainConfig,
    best: &mut QEModel,
    best_step: &mut u64,
) -> Result<bool> {
    let loss = evaluate_loss(model, dev_set)?;
    log.push(step, LogSplit::Dev, loss);
    if loss.is_nan() {
        return Err(Error::Numeric(format!("dev loss is NaN at step {step}")));
    }
    if stop.observe(loss) {
        *best = model.clone();
        *best_step = step;
        if let Some(path) = &config.checkpoint_path {
            save_checkpoint(best, path)?;
        }
    }
    Ok(stop.rounds_since_improvement >= config.patience)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnnotatedPair, Split};
    use crate::encoder::{EncoderConfig, PoolingStrategy};
    use proptest::prelude::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_len: 24,
            ..EncoderConfig::default()
        }
    }

    fn toy_set(n: usize) -> Dataset {
        let pairs = (0..n)
            .map(|i| {
                let z = (i as f64 / n as f64) * 2.0 - 1.0;
                AnnotatedPair::labeled(format!("p{i}"), format!("src {i}"), "x".repeat(i % 7 + 1), z)
            })
            .collect();
        Dataset::new(Split::Train, "xx-yy", pairs).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![0.5, -1.0]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[vec![1.0]], &mut st, 2e-5).unwrap();
        // m_hat = 1, v_hat = 1 ⇒ update = lr / (1 + eps)
        let expected = -2e-5 / (1.0 + 1e-8);
        assert!((p.data()[0] as f64 - expected).abs() < 1e-10);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut a = Tensor::vector(vec![1.0]);
        let mut b = Tensor::vector(vec![2.0]);
        let mut st = AdamState::new(&[&a, &b]);
        let err = adam_step(&mut [&mut a, &mut b], &[vec![1.0], vec![f32::NAN]], &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!((a.data()[0], b.data()[0], st.t), (1.0, 2.0, 0));
    }

    #[test]
    fn parameters_update_independently() {
        let run = |g1: f32| {
            let mut a = Tensor::vector(vec![0.3]);
            let mut b = Tensor::vector(vec![0.7]);
            let mut st = AdamState::new(&[&a, &b]);
            for _ in 0..3 {
                adam_step(&mut [&mut a, &mut b], &[vec![g1], vec![-0.4]], &mut st, 0.01).unwrap();
            }
            b.data()[0]
        };
        assert_eq!(run(1.0).to_bits(), run(-25.0).to_bits());
    }

    #[test]
    fn evaluate_loss_matches_recomputation_and_is_pure() {
        let mut m = QEModel::new(small(), PoolingStrategy::Mean, 1).unwrap();
        m.randomize_head(2);
        let ds = toy_set(6);
        let before = m.clone();
        let loss = evaluate_loss(&m, &ds).unwrap();
        assert_eq!(m, before);
        let preds: Vec<f64> = ds
            .pairs
            .iter()
            .map(|p| m.predict(&p.source, &p.target).unwrap() as f64)
            .collect();
        assert_eq!(loss, mse_loss(&preds, &ds.labels().unwrap()).unwrap());
        let empty = Dataset::new(Split::Dev, "xx-yy", vec![]).unwrap();
        assert!(matches!(evaluate_loss(&m, &empty), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_model_on_zero_labels_has_zero_loss() {
        let m = QEModel::zeros(small(), PoolingStrategy::Cls).unwrap();
        let mut ds = toy_set(4);
        for p in &mut ds.pairs {
            p.z_mean = Some(0.0);
        }
        assert_eq!(evaluate_loss(&m, &ds).unwrap(), 0.0);
    }

    #[test]
    fn frozen_model_stops_after_patience_rounds() {
        let m = QEModel::new(small(), PoolingStrategy::Cls, 5).unwrap();
        let ds = toy_set(10);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 4,
            epochs: 50,
            ..TrainConfig::default()
        };
        let out = train(m.clone(), &ds, &ds, &cfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.eval_rounds, 10);
        assert_eq!(out.log.dev_losses().len(), 11);
        assert_eq!(out.steps, 30);
        assert_eq!(out.best_step, 0);
        assert_eq!(out.model, m);
    }

    #[test]
    fn eval_every_controls_round_cadence() {
        let m = QEModel::new(small(), PoolingStrategy::Cls, 5).unwrap();
        let ds = toy_set(10);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 4,
            epochs: 50,
            patience: 3,
            eval_every: Some(2),
            ..TrainConfig::default()
        };
        let out = train(m, &ds, &ds, &cfg).unwrap();
        assert_eq!(out.steps, 6);
        let dev_steps: Vec<u64> = out
            .log
            .records
            .iter()
            .filter(|r| r.split == LogSplit::Dev)
            .map(|r| r.step)
            .collect();
        assert_eq!(dev_steps, vec![0, 2, 4, 6]);
    }

    #[test]
    fn training_is_deterministic_and_returns_best() {
        let m = QEModel::new(small(), PoolingStrategy::Mean, 9).unwrap();
        let ds = toy_set(12);
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 5,
            epochs: 6,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = train(m.clone(), &ds, &ds, &cfg).unwrap();
        let b = train(m, &ds, &ds, &cfg).unwrap();
        assert_eq!(a.log.to_tsv(), b.log.to_tsv());
        assert_eq!(a.model, b.model);
        // The final partial batch is kept: ceil(12/5) = 3 steps per epoch.
        assert_eq!(a.steps, 18);

        let dev = a.log.dev_losses();
        let min = dev.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(a.early_stop.best_eval_loss, min);
        let reeval = evaluate_loss(&a.model, &ds).unwrap();
        assert_eq!(reeval, min);
        assert!(a.early_stop.rounds_since_improvement <= cfg.patience);
    }

    #[test]
    fn checkpoint_is_written_on_improvement() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.qeck");
        let m = QEModel::new(small(), PoolingStrategy::Cls, 9).unwrap();
        let ds = toy_set(8);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 4,
            epochs: 4,
            checkpoint_path: Some(path.clone()),
            ..TrainConfig::default()
        };
        let out = train(m, &ds, &ds, &cfg).unwrap();
        let saved = crate::model::load_checkpoint(&path).unwrap();
        assert_eq!(saved, out.model);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let m = QEModel::zeros(small(), PoolingStrategy::Cls).unwrap();
        let ds = toy_set(3);
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                patience: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                eval_every: Some(0),
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(train(m.clone(), &ds, &ds, &cfg), Err(Error::Config(_))));
        }
        let empty = Dataset::new(Split::Dev, "xx-yy", vec![]).unwrap();
        assert!(matches!(
            train(m, &ds, &empty, &TrainConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn log_round_trips() {
        let mut log = TrainLog::default();
        log.push(0, LogSplit::Dev, 0.1 + 0.2);
        log.push(1, LogSplit::Train, 1e-300);
        log.push(2, LogSplit::Train, 123456.789);
        let text = log.to_tsv();
        assert!(text.starts_with("0\tdev\t0.30000000000000004\n"));
        assert_eq!(TrainLog::parse(&text, Path::new("log")).unwrap(), log);
        assert!(matches!(
            TrainLog::parse("1\ttest\t0.5\n", Path::new("log")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    fn simulate(losses: &[f64], patience: usize) -> (usize, bool) {
        let mut st = EarlyStopState {
            best_eval_loss: f64::INFINITY,
            rounds_since_improvement: 0,
            best_checkpoint_path: None,
        };
        for (i, &l) in losses.iter().enumerate() {
            st.observe(l);
            assert!(st.rounds_since_improvement <= patience);
            if st.rounds_since_improvement == patience {
                return (i + 1, true);
            }
        }
        (losses.len(), false)
    }

    #[test]
    fn improving_every_round_never_stops() {
        let losses: Vec<f64> = (0..30).map(|i| 1.0 - i as f64 * 0.01).collect();
        assert_eq!(simulate(&losses, 10), (30, false));
    }

    #[test]
    fn sub_tolerance_gains_do_not_reset() {
        let losses: Vec<f64> = (0..12).map(|i| 1.0 - i as f64 * 1e-7).collect();
        assert_eq!(simulate(&losses, 10), (11, true));
    }

    proptest! {
        #[test]
        fn counter_never_exceeds_patience(
            losses in proptest::collection::vec(0.0f64..2.0, 1..80),
            patience in 1usize..12,
        ) {
            let (rounds, stopped) = simulate(&losses, patience);
            prop_assert!(rounds <= losses.len());
            if !stopped {
                prop_assert_eq!(rounds, losses.len());
            }
        }
    }
}
