//! Integrated Gradients over input embeddings.
//!
//! For input `x`, baseline `x'` and `m` steps, the attribution of coordinate
//! `i` is
//!
//! ```text
//! (x_i - x'_i) * (1/m) * sum_{k=1..m} dF/dx_i (x' + a_k (x - x')),   a_k = (k - 1/2) / m
//! ```
//!
//! i.e. a midpoint-rule estimate of the path integral. Token scores are the
//! sum over that token's embedding coordinates. The attributions should add
//! up to `F(x) - F(x')`; the residual is reported as the completeness gap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{evaluate_with_gradient, Graph, GraphError, LeafId};
use crate::model::{Classifier, ForwardGraph, InputMode, ModelError, Prediction};
use crate::tensor::Tensor;
use crate::text::{Label, Vocabulary, PAD_ID};

pub const DEFAULT_STEPS: usize = 64;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("empty input")]
    EmptyInput,
    #[error("step count must be at least 1, got {0}")]
    BadSteps(usize),
    #[error("target label index {0} is outside 0..3")]
    BadTarget(usize),
    #[error("input shape {input:?} differs from baseline shape {baseline:?}")]
    BaselineShape {
        input: Vec<usize>,
        baseline: Vec<usize>,
    },
    #[error("attributed function has non-scalar output of shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A differentiable scalar function of one tensor.
pub trait ScalarField: Sync {
    fn value(&self, x: &Tensor) -> Result<f64, AttributionError>;
    fn value_and_gradient(&self, x: &Tensor) -> Result<(f64, Tensor), AttributionError>;
}

/// A graph with a scalar output, viewed as a function of one of its leaves
/// while every other leaf stays bound to a fixed value.
pub struct GraphField<'a> {
    graph: &'a Graph,
    bindings: Vec<&'a Tensor>,
    input: LeafId,
}

impl<'a> GraphField<'a> {
    /// `fixed` binds every leaf except `input`, in declaration order.
    pub fn new(graph: &'a Graph, input: LeafId, fixed: Vec<&'a Tensor>) -> Self {
        Self {
            graph,
            bindings: fixed,
            input,
        }
    }

    fn bind<'b>(&'b self, x: &'b Tensor) -> Vec<&'b Tensor> {
        let mut b: Vec<&Tensor> = Vec::with_capacity(self.bindings.len() + 1);
        b.extend(self.bindings[..self.input.ordinal()].iter().copied());
        b.push(x);
        b.extend(self.bindings[self.input.ordinal()..].iter().copied());
        b
    }
}

impl ScalarField for GraphField<'_> {
    fn value(&self, x: &Tensor) -> Result<f64, AttributionError> {
        let eval = self.graph.evaluate(&self.bind(x))?;
        let out = eval.output()?;
        out.item()
            .ok_or_else(|| AttributionError::NonScalar(out.shape().to_vec()))
    }

    fn value_and_gradient(&self, x: &Tensor) -> Result<(f64, Tensor), AttributionError> {
        let (v, mut grads) = evaluate_with_gradient(self.graph, &self.bind(x), &[self.input])?;
        Ok((v, grads.pop().expect("one gradient")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathAttribution {
    /// Per-coordinate attributions, shaped like the input.
    pub coordinates: Tensor,
    /// `F(input) - F(baseline)`
    pub output_delta: f64,
    pub steps: usize,
}

impl PathAttribution {
    pub fn completeness_gap(&self) -> f64 {
        (self.coordinates.sum() - self.output_delta).abs()
    }
}

/// Midpoint-rule Integrated Gradients along the straight line from
/// `baseline` to `input`. Gradient evaluations run in parallel and are
/// summed in step order.
pub fn integrate_path(
    f: &impl ScalarField,
    input: &Tensor,
    baseline: &Tensor,
    steps: usize,
) -> Result<PathAttribution, AttributionError> {
    if steps == 0 {
        return Err(AttributionError::BadSteps(steps));
    }
    if input.shape() != baseline.shape() {
        return Err(AttributionError::BaselineShape {
            input: input.shape().to_vec(),
            baseline: baseline.shape().to_vec(),
        });
    }
    let diff = Tensor::new(
        input.shape().to_vec(),
        input
            .data()
            .iter()
            .zip(baseline.data())
            .map(|(a, b)| a - b)
            .collect(),
    )
    .expect("same shape");

    let grads: Vec<Tensor> = (1..=steps)
        .into_par_iter()
        .map(|k| {
            let alpha = (k as f64 - 0.5) / steps as f64;
            let mut point = baseline.clone();
            point.axpy(alpha, &diff);
            f.value_and_gradient(&point).map(|(_, g)| g)
        })
        .collect::<Result<_, _>>()?;

    let mut total = Tensor::zeros(input.shape());
    for g in &grads {
        total.axpy(1.0, g);
    }
    let inv = 1.0 / steps as f64;
    let coords = diff
        .data()
        .iter()
        .zip(total.data())
        .map(|(d, g)| d * g * inv)
        .collect();

    let output_delta = f.value(input)? - f.value(baseline)?;
    Ok(PathAttribution {
        coordinates: Tensor::new(input.shape().to_vec(), coords).expect("same shape"),
        output_delta,
        steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// PAD token embedding at every real position, positions unchanged.
    PadEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub tokens: Vec<String>,
    pub raw_scores: Vec<f64>,
    pub normalized_scores: Vec<f64>,
    pub target_label: Label,
    pub steps: usize,
    pub baseline_kind: BaselineKind,
    pub completeness_gap: f64,
    pub output_delta: f64,
}

/// Attributes the pre-softmax logit of `target` to each input token.
pub fn integrated_gradients(
    model: &Classifier,
    vocab: &Vocabulary,
    text: &str,
    target: usize,
    steps: usize,
) -> Result<AttributionResult, AttributionError> {
    if steps == 0 {
        return Err(AttributionError::BadSteps(steps));
    }
    let target_label = Label::from_index(target).ok_or(AttributionError::BadTarget(target))?;
    let (tokens, example) = match model.encode_text(vocab, text) {
        Ok(v) => v,
        Err(ModelError::EmptyInput) => return Err(AttributionError::EmptyInput),
        Err(e) => return Err(e.into()),
    };
    let real = example.real_len();

    let input = model.embed(&example.ids)?;
    let baseline = model.embed(&vec![PAD_ID; example.ids.len()])?;

    let mut fg = ForwardGraph::build(&model.config, InputMode::Embedded, &example.mask)?;
    let out = fg.graph.select(fg.logits, target);
    fg.graph.set_output(out);
    let leaf = fg.embedded.expect("embedded input leaf");
    let field = GraphField::new(&fg.graph, leaf, fg.bindings(&model.params, None));

    let path = integrate_path(&field, &input, &baseline, steps)?;
    let raw_scores: Vec<f64> = (0..real)
        .map(|r| path.coordinates.row(r).iter().sum())
        .collect();
    let completeness_gap = (raw_scores.iter().sum::<f64>() - path.output_delta).abs();
    Ok(AttributionResult {
        tokens,
        normalized_scores: normalize_attributions(&raw_scores),
        raw_scores,
        target_label,
        steps,
        baseline_kind: BaselineKind::PadEmbedding,
        completeness_gap,
        output_delta: path.output_delta,
    })
}

/// Prediction plus attributions towards the predicted label.
pub fn explain(
    model: &Classifier,
    vocab: &Vocabulary,
    text: &str,
    steps: usize,
) -> Result<(Prediction, AttributionResult), AttributionError> {
    let prediction = match model.predict(vocab, text) {
        Ok(p) => p,
        Err(ModelError::EmptyInput) => return Err(AttributionError::EmptyInput),
        Err(e) => return Err(e.into()),
    };
    let attribution = integrated_gradients(model, vocab, text, prediction.label.index(), steps)?;
    Ok((prediction, attribution))
}

/// `|sum of raw attributions - (F(x) - F(x'))|` and `F(x) - F(x')`.
pub fn completeness_gap(
    model: &Classifier,
    vocab: &Vocabulary,
    text: &str,
    target: usize,
    steps: usize,
) -> Result<(f64, f64), AttributionError> {
    let r = integrated_gradients(model, vocab, text, target, steps)?;
    Ok((r.completeness_gap, r.output_delta))
}

/// Divides by the largest magnitude, mapping into [-1, 1]. All-zero input
/// stays all zero.
pub fn normalize_attributions(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v / max).clamp(-1.0, 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token: String,
    pub score: f64,
    pub position: usize,
}

/// Tokens with strictly positive scores, highest first, earlier position
/// first among equal scores.
pub fn rank_scores<S: AsRef<str>>(tokens: &[S], scores: &[f64]) -> Vec<RankedToken> {
    let mut ranked: Vec<RankedToken> = tokens
        .iter()
        .zip(scores)
        .enumerate()
        .filter(|(_, (_, &s))| s > 0.0)
        .map(|(position, (t, &score))| RankedToken {
            token: t.as_ref().to_string(),
            score,
            position,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.position.cmp(&b.position))
    });
    ranked
}

pub fn rank_tokens(result: &AttributionResult) -> Vec<RankedToken> {
    rank_scores(&result.tokens, &result.normalized_scores)
}
