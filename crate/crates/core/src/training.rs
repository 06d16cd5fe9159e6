//! Mini-batch training with per-epoch validation and best-model selection.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::layers::{softmax_xent, softmax_xent_backward, Mode};
use crate::models::{argmax_rows, Arch, ModelGraph};
use crate::tensor::Tensor;

/// Rows per forward pass during evaluation. Fixed so that re-evaluating a
/// split always sees the same batches.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub task: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Resnet26,
            task: 1,
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Per-tensor optimizer state, allocated on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: TrainConfig,
    steps: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to `params` (with their gradients) and zeroes the
    /// gradients. Tensors must be presented in the same order every step.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<f32>>) -> Result<()> {
        self.steps += 1;
        for (i, p) in params.into_iter().enumerate() {
            self.update(i, p)?;
        }
        Ok(())
    }

    pub fn step_model(&mut self, model: &mut ModelGraph<f32>) -> Result<()> {
        self.steps += 1;
        let mut i = 0;
        let mut result = Ok(());
        model.visit_params_mut(&mut |_, p| {
            if result.is_ok() {
                result = self.update(i, p);
            }
            i += 1;
        });
        result
    }

    fn update(&mut self, i: usize, p: &mut Tensor<f32>) -> Result<()> {
        let c = &self.config;
        let t = self.steps as i32;
        let (lr, b1, b2, eps, mu) = (c.learning_rate, c.beta1, c.beta2, c.epsilon, c.momentum);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        if self.first.len() == i {
            self.first.push(vec![0.0; p.len()]);
            self.second.push(vec![0.0; p.len()]);
        }
        if self.first[i].len() != p.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                left: p.shape().to_vec(),
                right: vec![self.first[i].len()],
            });
        }
        let (values, grads) = p.value_and_grad_mut();
        match c.optimizer {
            OptimizerKind::Adam => {
                for (((w, g), m), v) in values
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(&mut self.first[i])
                    .zip(&mut self.second[i])
                {
                    let g = *g as f64;
                    let m1 = b1 * *m as f64 + (1.0 - b1) * g;
                    let v1 = b2 * *v as f64 + (1.0 - b2) * g * g;
                    *m = m1 as f32;
                    *v = v1 as f32;
                    let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
                    *w = (*w as f64 - update) as f32;
                }
            }
            OptimizerKind::SgdMomentum => {
                for ((w, g), vel) in values.iter_mut().zip(grads.iter()).zip(&mut self.first[i]) {
                    let v1 = mu * *vel as f64 + *g as f64;
                    *vel = v1 as f32;
                    *w = (*w as f64 - lr * v1) as f32;
                }
            }
        }
        grads.iter_mut().for_each(|g| *g = 0.0);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Infer-mode pass over a whole split; never mutates the model.
pub fn evaluate(model: &ModelGraph<f32>, split: &SplitData) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let rows: Vec<usize> = (0..split.len()).collect();
    let mut predictions = Vec::with_capacity(split.len());
    let mut loss_sum = 0.0;
    for chunk in rows.chunks(EVAL_BATCH) {
        let (x, labels) = split.batch(chunk);
        let logits = model.infer(&x)?;
        loss_sum += softmax_xent(&logits, &labels)?.loss * chunk.len() as f64;
        predictions.extend(argmax_rows(&logits));
    }
    let hits = predictions.iter().zip(&split.labels).filter(|(p, t)| p == t).count();
    Ok(Evaluation {
        loss: loss_sum / split.len() as f64,
        accuracy: hits as f64 / split.len() as f64,
        predictions,
    })
}

/// Parameters and buffers of the best epoch so far.
#[derive(Debug, Clone)]
pub struct BestModel {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub state: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best: BestModel,
    pub steps: u64,
    pub first_batch_loss: f64,
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // separate stream from the one used for weight initialization
    rng.set_stream(1);
    rng
}

/// Trains `model` in place. On return the model holds the final-epoch
/// weights; the best epoch's state is in the outcome.
pub fn train(
    model: &mut ModelGraph<f32>,
    train_split: &SplitData,
    val_split: &SplitData,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_split.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if let Some(&bad) = train_split.labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: model.num_classes(),
        });
    }
    let mut rng = shuffle_rng(config.seed);
    let mut opt = Optimizer::new(config);
    let mut order: Vec<usize> = (0..train_split.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<BestModel> = None;
    let mut first_batch_loss = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let diverged = |detail: String| Error::Diverged {
                epoch,
                batch: b + 1,
                detail,
            };
            let (x, labels) = train_split.batch(rows);
            let logits = model.forward(&x, Mode::Train).map_err(|e| match e {
                Error::NonFinite { .. } => diverged(e.to_string()),
                e => e,
            })?;
            let out = softmax_xent(&logits, &labels).map_err(|e| diverged(e.to_string()))?;
            if !out.loss.is_finite() {
                return Err(diverged(format!("loss {}", out.loss)));
            }
            first_batch_loss.get_or_insert(out.loss);
            loss_sum += out.loss * rows.len() as f64;
            hits += argmax_rows(&logits).iter().zip(&labels).filter(|(p, t)| p == t).count();
            model.backward(&softmax_xent_backward(&out.probs, &labels)?)?;
            opt.step_model(model)?;
        }
        model.clear_cache();
        let val = evaluate(model, val_split)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_split.len() as f64,
            train_accuracy: hits as f64 / train_split.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            wall_time_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|b| record.val_accuracy > b.val_accuracy) {
            best = Some(BestModel {
                epoch,
                val_accuracy: record.val_accuracy,
                state: model.state(),
            });
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        history,
        best: best.expect("epochs >= 1"),
        steps: opt.steps(),
        first_batch_loss: first_batch_loss.expect("at least one batch"),
    })
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

/// `history.csv`. The `seconds` column is written as 0 unless
/// `record_timing` is set, so that reruns produce identical bytes.
pub fn history_csv(history: &[EpochRecord], record_timing: bool) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let secs = if record_timing { r.wall_time_seconds } else { 0.0 };
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy, secs
        ));
    }
    s
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord], record_timing: bool) -> Result<()> {
    std::fs::File::create(path)?.write_all(history_csv(history, record_timing).as_bytes())?;
    Ok(())
}
