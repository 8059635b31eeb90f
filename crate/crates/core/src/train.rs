//! Mini-batch training with mean cross-entropy and Adam, dev-set
//! evaluation, and hyperparameter grid search.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::evaluate_with_gradient;
use crate::metrics::{compute_metrics, MetricsError, MetricsReport};
use crate::model::{Classifier, ForwardGraph, InputMode, ModelError};
use crate::tensor::Tensor;
use crate::text::{encode_record, Corpus, EncodedExample, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch size {batch_size} exceeds the {examples} training examples")]
    BatchTooLarge { batch_size: usize, examples: usize },
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("training diverged: non-finite loss in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidHyperparams(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::InvalidHyperparams(
                "batch size and epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for Hyperparams {
    /// Desk-scale defaults for training from scratch.
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 2,
            epochs: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean of the batch losses, per epoch.
    pub epoch_loss: Vec<f64>,
    pub dev_metrics: Vec<MetricsReport>,
    /// Loss of the very first batch, before any update.
    pub first_batch_loss: f64,
    pub seconds: f64,
}

/// Adam with bias correction.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[Tensor]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Vec<EncodedExample> {
    corpus
        .records
        .iter()
        .map(|r| encode_record(r, vocab, max_len))
        .collect()
}

/// Cross-entropy of one example and its gradient for every parameter tensor.
pub fn example_loss_and_grad(
    model: &Classifier,
    example: &EncodedExample,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let label = example
        .label_index
        .ok_or_else(|| ModelError::InvalidConfig("training example has no label".into()))?;
    let mut fg = ForwardGraph::build(&model.config, InputMode::Ids(&example.ids), &example.mask)?;
    let loss = fg.graph.cross_entropy(fg.logits, label);
    fg.graph.set_output(loss);
    let bindings = fg.bindings(&model.params, None);
    Ok(evaluate_with_gradient(&fg.graph, &bindings, &fg.params)?)
}

/// Mean loss and mean gradient over a batch. Per-example work runs in
/// parallel; the reduction is sequential so results are bit-reproducible.
pub fn batch_loss_and_grad(
    model: &Classifier,
    batch: &[&EncodedExample],
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let parts: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|ex| example_loss_and_grad(model, ex))
        .collect::<Result<_, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.axpy(1.0, gi);
        }
    }
    grads
        .iter_mut()
        .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
    Ok((loss * scale, grads))
}

/// Trains `model` in place of its current weights. Shuffle order and batching
/// are driven by a ChaCha8 generator seeded with `hp.seed`.
pub fn train(
    mut model: Classifier,
    vocab: &Vocabulary,
    train_set: &Corpus,
    dev_set: &Corpus,
    hp: &Hyperparams,
) -> Result<(Classifier, TrainHistory), TrainError> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus("training"));
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptyCorpus("dev"));
    }
    if hp.batch_size > train_set.len() {
        return Err(TrainError::BatchTooLarge {
            batch_size: hp.batch_size,
            examples: train_set.len(),
        });
    }

    let started = Instant::now();
    let examples = encode_corpus(train_set, vocab, model.config.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut adam = Adam::new(hp.learning_rate, model.params.tensors());
    let mut history = TrainHistory {
        epoch_loss: Vec::with_capacity(hp.epochs),
        dev_metrics: Vec::with_capacity(hp.epochs),
        first_batch_loss: f64::NAN,
        seconds: 0.0,
    };

    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b });
            }
            if epoch == 0 && b == 0 {
                history.first_batch_loss = loss;
            }
            adam.update(model.params.tensors_mut(), &grads);
            if model.params.tensors().iter().any(|t| !t.is_finite()) {
                return Err(TrainError::Diverged { epoch, batch: b });
            }
            total += loss;
            batches += 1;
        }
        history.epoch_loss.push(total / batches as f64);
        history.dev_metrics.push(evaluate(&model, vocab, dev_set)?);
    }
    history.seconds = started.elapsed().as_secs_f64();
    Ok((model, history))
}

/// Label-index predictions for every record.
pub fn predict_corpus(
    model: &Classifier,
    vocab: &Vocabulary,
    corpus: &Corpus,
) -> Result<Vec<usize>, ModelError> {
    corpus
        .records
        .par_iter()
        .map(|r| model.predict(vocab, &r.text).map(|p| p.label.index()))
        .collect()
}

pub fn evaluate(
    model: &Classifier,
    vocab: &Vocabulary,
    corpus: &Corpus,
) -> Result<MetricsReport, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus("evaluation"));
    }
    let predicted = predict_corpus(model, vocab, corpus)?;
    Ok(compute_metrics(&corpus.labels(), &predicted)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    #[default]
    MacroF1,
    Accuracy,
}

impl SelectionMetric {
    fn score(self, report: &MetricsReport) -> f64 {
        match self {
            SelectionMetric::MacroF1 => report.f1,
            SelectionMetric::Accuracy => report.accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    pub metric: SelectionMetric,
    pub seed: u64,
}

impl GridSpec {
    /// lr in {1e-5, 2e-5, 3e-5}, batch in {16, 32, 64}, epochs in {3, 4, 5}.
    pub fn full(seed: u64) -> Self {
        Self {
            learning_rates: vec![1e-5, 2e-5, 3e-5],
            batch_sizes: vec![16, 32, 64],
            epochs: vec![3, 4, 5],
            metric: SelectionMetric::MacroF1,
            seed,
        }
    }

    pub fn single(hp: Hyperparams) -> Self {
        Self {
            learning_rates: vec![hp.learning_rate],
            batch_sizes: vec![hp.batch_size],
            epochs: vec![hp.epochs],
            metric: SelectionMetric::MacroF1,
            seed: hp.seed,
        }
    }

    /// Every combination, ordered by (learning rate, batch size, epochs)
    /// ascending.
    pub fn candidates(&self) -> Vec<Hyperparams> {
        let mut lrs = self.learning_rates.clone();
        lrs.sort_by(f64::total_cmp);
        lrs.dedup();
        let mut batches = self.batch_sizes.clone();
        batches.sort_unstable();
        batches.dedup();
        let mut epochs = self.epochs.clone();
        epochs.sort_unstable();
        epochs.dedup();

        let mut out = Vec::with_capacity(lrs.len() * batches.len() * epochs.len());
        for &learning_rate in &lrs {
            for &batch_size in &batches {
                for &e in &epochs {
                    out.push(Hyperparams {
                        learning_rate,
                        batch_size,
                        epochs: e,
                        seed: self.seed,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub hyperparams: Hyperparams,
    pub dev: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub best: Hyperparams,
    pub best_model: Classifier,
    pub runs: Vec<GridRun>,
}

/// Trains one fresh model per grid point and keeps the best by the selection
/// metric on `dev_set`. Ties go to the earlier candidate, i.e. smaller
/// learning rate, then smaller batch, then fewer epochs.
pub fn grid_search(
    factory: impl Fn() -> Result<Classifier, ModelError>,
    vocab: &Vocabulary,
    train_set: &Corpus,
    dev_set: &Corpus,
    grid: &GridSpec,
) -> Result<GridOutcome, TrainError> {
    let candidates = grid.candidates();
    if candidates.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let mut runs = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, Hyperparams, Classifier)> = None;
    for hp in candidates {
        let (model, _) = train(factory()?, vocab, train_set, dev_set, &hp)?;
        let dev = evaluate(&model, vocab, dev_set)?;
        let score = grid.metric.score(&dev);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, hp, model));
        }
        runs.push(GridRun {
            hyperparams: hp,
            dev,
        });
    }
    let (_, best, best_model) = best.expect("at least one candidate");
    Ok(GridOutcome {
        best,
        best_model,
        runs,
    })
}
