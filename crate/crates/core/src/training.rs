//! Loss, Adam updates, batching and validation-based model selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::FeaturizedDialogue;
use crate::metrics::{evaluate_predictions, Report, SessionPrediction};
use crate::model::tape::{Grads, Tape};
use crate::model::{Dami, ModelParams};

/// Validation metric used to pick the best epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    MacroF1,
    GtIi,
}

impl SelectionMetric {
    pub fn score(self, report: &Report) -> f64 {
        match self {
            SelectionMetric::MacroF1 => report.macro_f1,
            SelectionMetric::GtIi => report.gt_ii(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// L2 weight δ; the penalty is `δ/2 · ||θ||²`.
    pub l2: f64,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Probability above which an utterance is labelled transferable.
    pub threshold: f64,
    /// λ of the GT-T scores computed during validation.
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0075,
            batch_size: 128,
            epochs: 30,
            l2: 1e-4,
            seed: 0,
            selection_metric: SelectionMetric::MacroF1,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 5.0,
            threshold: 0.5,
            lambda: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1");
        }
        if !(self.l2 >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("l2 and clip_norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_epsilon > 0.0) {
            return bad("Adam decays must lie in [0, 1) and its epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1)");
        }
        if !(self.lambda > -1.0 && self.lambda < 1.0) {
            return bad("lambda must lie in (-1, 1)");
        }
        Ok(())
    }
}

/// Batch objective split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    /// `-(1/I) Σ log p(y)` over real utterances.
    pub cross_entropy: f64,
    /// `δ/2 · ||θ||²`.
    pub penalty: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.penalty
    }
}

fn targets(model_batch: &[&FeaturizedDialogue], steps: usize) -> Vec<Option<usize>> {
    let n = model_batch.len();
    let mut out = vec![None; steps * n];
    for (i, d) in model_batch.iter().enumerate() {
        for (t, label) in d.labels.iter().enumerate() {
            out[t * n + i] = Some(label.index());
        }
    }
    out
}

/// Objective and parameter gradients for one batch. Dropout is active only
/// when `dropout_rng` is given.
pub fn loss_and_grads(
    model: &Dami,
    batch: &[&FeaturizedDialogue],
    l2: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossParts, Grads)> {
    for d in batch {
        if d.labels.len() != d.utterances.len() {
            return Err(Error::Featurize(format!(
                "session `{}` has {} labels for {} utterances",
                d.session_id,
                d.labels.len(),
                d.utterances.len()
            )));
        }
    }
    let mut tape = Tape::new(&model.params);
    let pass = model.forward(&mut tape, batch, dropout_rng)?;
    let nll = tape.softmax_nll(pass.logits, targets(batch, pass.layout.steps), 1.0 / batch.len() as f64);
    let cross_entropy = tape.value(nll)[[0, 0]];
    let mut grads = tape.backward(nll);
    if l2 > 0.0 {
        for (g, p) in grads.iter_mut().zip(model.params.values()) {
            g.scaled_add(l2, p);
        }
    }
    Ok((
        LossParts {
            cross_entropy,
            penalty: 0.5 * l2 * model.params.squared_norm(),
        },
        grads,
    ))
}

/// Objective of a batch without dropout.
pub fn loss(model: &Dami, batch: &[&FeaturizedDialogue], l2: f64) -> Result<LossParts> {
    let mut tape = Tape::new(&model.params);
    let pass = model.forward::<ChaCha8Rng>(&mut tape, batch, None)?;
    let nll = tape.softmax_nll(pass.logits, targets(batch, pass.layout.steps), 1.0 / batch.len() as f64);
    Ok(LossParts {
        cross_entropy: tape.value(nll)[[0, 0]],
        penalty: 0.5 * l2 * model.params.squared_norm(),
    })
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Grads,
    pub v: Grads,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Grads, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let lr = cfg.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(i);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + cfg.adam_epsilon);
            });
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch objective (cross-entropy plus L2 penalty).
    pub train_loss: f64,
    /// Mean batch cross-entropy alone.
    pub train_cross_entropy: f64,
    pub valid: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Dami,
    pub adam: Adam,
    pub epoch: usize,
    pub best_score: f64,
    pub best_epoch: usize,
    pub best_params: ModelParams,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: Dami) -> Self {
        TrainState {
            adam: Adam::new(&model.params),
            best_params: model.params.clone(),
            model,
            epoch: 0,
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            history: Vec::new(),
        }
    }

    /// The model with the best validation parameters.
    pub fn best_model(&self) -> Dami {
        Dami {
            config: self.model.config.clone(),
            params: self.best_params.clone(),
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs one epoch over `train` and returns the mean objective parts.
pub fn run_epoch(
    state: &mut TrainState,
    train: &[FeaturizedDialogue],
    cfg: &TrainConfig,
    order_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(order_rng);
    let epoch = state.epoch + 1;
    let mut sum = LossParts {
        cross_entropy: 0.0,
        penalty: 0.0,
    };
    let n_batches = order.len().div_ceil(cfg.batch_size);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&FeaturizedDialogue> = chunk.iter().map(|&i| &train[i]).collect();
        let use_dropout = state.model.config.dropout_rate > 0.0;
        let result = loss_and_grads(&state.model, &batch, cfg.l2, use_dropout.then_some(&mut *dropout_rng));
        let (parts, mut grads) = match result {
            Ok(x) => x,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, batch: b + 1 }),
            Err(e) => return Err(e),
        };
        if !parts.total().is_finite() {
            return Err(Error::Diverged { epoch, batch: b + 1 });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        state.adam.update(&mut state.model.params, &grads, cfg);
        if !state.model.params.all_finite() {
            return Err(Error::Diverged { epoch, batch: b + 1 });
        }
        sum.cross_entropy += parts.cross_entropy;
        sum.penalty += parts.penalty;
    }
    state.epoch = epoch;
    Ok(LossParts {
        cross_entropy: sum.cross_entropy / n_batches as f64,
        penalty: sum.penalty / n_batches as f64,
    })
}

/// Trains for `cfg.epochs` epochs, evaluating on `valid` after each one
/// and keeping the parameters with the best selection metric. `on_epoch`
/// sees every log record as it is produced.
pub fn train(
    model: Dami,
    train: &[FeaturizedDialogue],
    valid: &[FeaturizedDialogue],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let mut state = TrainState::new(model);
    let mut order_rng = rng_for(cfg.seed, 1);
    let mut dropout_rng = rng_for(cfg.seed, 2);
    for _ in 0..cfg.epochs {
        let parts = run_epoch(&mut state, train, cfg, &mut order_rng, &mut dropout_rng)?;
        let report = evaluate(&state.model, valid, cfg.lambda, cfg.threshold, cfg.batch_size)?;
        let score = cfg.selection_metric.score(&report);
        if score > state.best_score {
            state.best_score = score;
            state.best_epoch = state.epoch;
            state.best_params = state.model.params.clone();
        }
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss: parts.total(),
            train_cross_entropy: parts.cross_entropy,
            valid: report
                .entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        };
        on_epoch(&record);
        state.history.push(record);
    }
    Ok(state)
}

/// Predictions for every dialogue, in input order.
pub fn predict(
    model: &Dami,
    dialogues: &[FeaturizedDialogue],
    threshold: f64,
    batch_size: usize,
) -> Result<Vec<SessionPrediction>> {
    let mut out = Vec::with_capacity(dialogues.len());
    for chunk in dialogues.chunks(batch_size.max(1)) {
        let batch: Vec<&FeaturizedDialogue> = chunk.iter().collect();
        let probs = model.predict_batch(&batch)?;
        for (d, p) in chunk.iter().zip(probs) {
            out.push(SessionPrediction::from_probs(
                d.session_id.clone(),
                p.iter().map(|x| x[1]).collect(),
                threshold,
            ));
        }
    }
    Ok(out)
}

/// Report of `model` on `dialogues` at asymmetry `lambda`.
pub fn evaluate(
    model: &Dami,
    dialogues: &[FeaturizedDialogue],
    lambda: f64,
    threshold: f64,
    batch_size: usize,
) -> Result<Report> {
    let preds = predict(model, dialogues, threshold, batch_size)?;
    evaluate_predictions(dialogues, &preds, lambda)
}
