//! Small post-layer-norm transformer encoder with a masked mean-pool and a
//! linear 3-way head, expressed entirely as an autodiff [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, LeafId, NodeId};
use crate::tensor::Tensor;
use crate::text::{encode, normalize_text, tokenize, EncodedExample, Label, Vocabulary};

pub const NUM_CLASSES: usize = 3;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive attention bias on masked keys.
pub const MASK_BIAS: f64 = -1e9;
pub const INIT_RANGE: f64 = 0.05;

/// Tensors per encoder layer: Q/K/V/O weight+bias, two feed-forward
/// weight+bias pairs, two layer-norm gain+shift pairs.
const PER_LAYER: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty input")]
    EmptyInput,
    #[error("example has {len} positions but the model supports at most {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("example ids and mask differ in length ({ids} vs {mask})")]
    MaskLength { ids: usize, mask: usize },
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    UnknownId { id: usize, vocab_size: usize },
    #[error("parameter payload does not match the config: {0}")]
    ParamShape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// d=32, h=2, L=2, f=128, M=64.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            max_len: 64,
            n_classes: NUM_CLASSES,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!(
                "{name} must be at least 1"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes != NUM_CLASSES {
            return Err(ModelError::InvalidConfig(format!(
                "n_classes must be {NUM_CLASSES}, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f, m, c) = (
            self.vocab_size,
            self.d_model,
            self.d_ff,
            self.max_len,
            self.n_classes,
        );
        let mut out = vec![
            ("token_embedding".to_string(), vec![v, d]),
            ("position_embedding".to_string(), vec![m, d]),
        ];
        for l in 0..self.n_layers {
            let mut push =
                |name: &str, shape: Vec<usize>| out.push((format!("layer{l}.{name}"), shape));
            for proj in ["query", "key", "value", "output"] {
                push(&format!("{proj}.weight"), vec![d, d]);
                push(&format!("{proj}.bias"), vec![d]);
            }
            push("ff_in.weight", vec![d, f]);
            push("ff_in.bias", vec![f]);
            push("ff_out.weight", vec![f, d]);
            push("ff_out.bias", vec![d]);
            push("attn_norm.gain", vec![d]);
            push("attn_norm.shift", vec![d]);
            push("ff_norm.gain", vec![d]);
            push("ff_norm.shift", vec![d]);
        }
        out.push(("head.weight".to_string(), vec![d, c]));
        out.push(("head.bias".to_string(), vec![c]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let (v, d, f, m, c, l) = (
            self.vocab_size,
            self.d_model,
            self.d_ff,
            self.max_len,
            self.n_classes,
            self.n_layers,
        );
        v * d + m * d + l * (4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d) + d * c + c
    }
}

/// Index of each per-layer tensor relative to the layer's first slot.
mod slot {
    pub const QUERY_W: usize = 0;
    pub const QUERY_B: usize = 1;
    pub const KEY_W: usize = 2;
    pub const KEY_B: usize = 3;
    pub const VALUE_W: usize = 4;
    pub const VALUE_B: usize = 5;
    pub const OUT_W: usize = 6;
    pub const OUT_B: usize = 7;
    pub const FF_IN_W: usize = 8;
    pub const FF_IN_B: usize = 9;
    pub const FF_OUT_W: usize = 10;
    pub const FF_OUT_B: usize = 11;
    pub const ATTN_GAIN: usize = 12;
    pub const ATTN_SHIFT: usize = 13;
    pub const FF_GAIN: usize = 14;
    pub const FF_SHIFT: usize = 15;
}

/// All weights, ordered as in [`ModelConfig::layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(ModelError::ParamShape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::ParamShape(format!("{name}: non-finite values")));
            }
        }
        Ok(Self { tensors })
    }

    /// Splits a flat payload into tensors following the config's layout.
    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self, ModelError> {
        let layout = config.layout();
        let total: usize = layout
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if total != flat.len() {
            return Err(ModelError::ParamShape(format!(
                "expected {total} values, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let tensors = layout
            .into_iter()
            .map(|(_, shape)| {
                let n: usize = shape.iter().product();
                let t =
                    Tensor::new(shape, flat[offset..offset + n].to_vec()).expect("layout sizes");
                offset += n;
                t
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.tensors[0]
    }

    pub fn position_embedding(&self) -> &Tensor {
        &self.tensors[1]
    }

    pub fn head_weight(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 2]
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 1]
    }

    /// Concatenation of every tensor's data in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

/// A configured model together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Weights ~ U(-0.05, 0.05) drawn from ChaCha8 seeded with `config.seed`, in
/// layout order. Biases, layer-norm shifts and the whole head start at zero;
/// layer-norm gains start at one.
pub fn init_model(config: &ModelConfig) -> Result<Classifier, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout = config.layout();
    let head_start = layout.len() - 2;
    let tensors = layout
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            if i >= head_start || name.ends_with(".bias") || name.ends_with(".shift") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".gain") {
                Tensor::filled(&shape, 1.0)
            } else {
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
                    .collect();
                Tensor::new(shape, data).expect("layout sizes")
            }
        })
        .collect();
    Ok(Classifier {
        config: config.clone(),
        params: ModelParams { tensors },
    })
}

/// How the encoder input enters the graph.
pub enum InputMode<'a> {
    /// Token ids are looked up in the (leaf) embedding tables.
    Ids(&'a [usize]),
    /// The summed token+position embedding matrix `[len, d]` is itself a leaf.
    Embedded,
}

/// A recorded forward pass. Leaves are the parameter tensors in layout order,
/// followed by the embedded input when built with [`InputMode::Embedded`].
pub struct ForwardGraph {
    pub graph: Graph,
    pub params: Vec<LeafId>,
    pub embedded: Option<LeafId>,
    pub logits: NodeId,
}

impl ForwardGraph {
    pub fn build(
        config: &ModelConfig,
        input: InputMode<'_>,
        mask: &[bool],
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let len = mask.len();
        if len > config.max_len {
            return Err(ModelError::TooLong {
                len,
                max_len: config.max_len,
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(ModelError::EmptyInput);
        }

        let mut g = Graph::new();
        let params: Vec<LeafId> = config
            .layout()
            .into_iter()
            .map(|(name, shape)| g.leaf(name, &shape))
            .collect();
        let p = |i: usize| params[i].node();

        let (embedded_leaf, x0) = match input {
            InputMode::Ids(ids) => {
                if ids.len() != len {
                    return Err(ModelError::MaskLength {
                        ids: ids.len(),
                        mask: len,
                    });
                }
                let tok = g.gather(p(0), ids.to_vec());
                let pos = g.gather(p(1), (0..len).collect());
                (None, g.add(tok, pos))
            }
            InputMode::Embedded => {
                let leaf = g.leaf("embedded_input", &[len, config.d_model]);
                (Some(leaf), leaf.node())
            }
        };

        let key_bias = g.constant(Tensor::vector(
            mask.iter()
                .map(|&m| if m { 0.0 } else { MASK_BIAS })
                .collect(),
        ));
        let head_dim = config.d_model / config.n_heads;
        let score_scale = 1.0 / (head_dim as f64).sqrt();

        let mut x = x0;
        for l in 0..config.n_layers {
            let base = 2 + l * PER_LAYER;
            let w = |s: usize| p(base + s);
            let linear = |g: &mut Graph, input: NodeId, weight: usize, bias: usize| {
                let m = g.matmul(input, w(weight));
                g.add_bias(m, w(bias))
            };

            let q = linear(&mut g, x, slot::QUERY_W, slot::QUERY_B);
            let k = linear(&mut g, x, slot::KEY_W, slot::KEY_B);
            let v = linear(&mut g, x, slot::VALUE_W, slot::VALUE_B);
            let mut heads = Vec::with_capacity(config.n_heads);
            for h in 0..config.n_heads {
                let qh = g.slice_cols(q, h * head_dim, head_dim);
                let kh = g.slice_cols(k, h * head_dim, head_dim);
                let vh = g.slice_cols(v, h * head_dim, head_dim);
                let kt = g.transpose(kh);
                let raw = g.matmul(qh, kt);
                let scaled = g.scale(raw, score_scale);
                let masked = g.add_bias(scaled, key_bias);
                let weights = g.softmax(masked);
                heads.push(g.matmul(weights, vh));
            }
            let joined = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(heads)
            };
            let attn = linear(&mut g, joined, slot::OUT_W, slot::OUT_B);
            let res = g.add(x, attn);
            x = g.layer_norm(res, w(slot::ATTN_GAIN), w(slot::ATTN_SHIFT), LAYER_NORM_EPS);

            let hidden = linear(&mut g, x, slot::FF_IN_W, slot::FF_IN_B);
            let act = g.relu(hidden);
            let ff = linear(&mut g, act, slot::FF_OUT_W, slot::FF_OUT_B);
            let res = g.add(x, ff);
            x = g.layer_norm(res, w(slot::FF_GAIN), w(slot::FF_SHIFT), LAYER_NORM_EPS);
        }

        let pooled = g.masked_mean_pool(x, mask.to_vec());
        let head_w = params[params.len() - 2].node();
        let head_b = params[params.len() - 1].node();
        let projected = g.matmul(pooled, head_w);
        let logits = g.add_bias(projected, head_b);
        g.set_output(logits);

        Ok(Self {
            graph: g,
            params,
            embedded: embedded_leaf,
            logits,
        })
    }

    /// Parameter bindings, with `extra` appended (the embedded input, if any).
    pub fn bindings<'a>(
        &self,
        params: &'a ModelParams,
        extra: Option<&'a Tensor>,
    ) -> Vec<&'a Tensor> {
        let mut b: Vec<&Tensor> = params.tensors.iter().collect();
        b.extend(extra);
        b
    }
}

fn check_example(config: &ModelConfig, example: &EncodedExample) -> Result<(), ModelError> {
    if example.ids.len() != example.mask.len() {
        return Err(ModelError::MaskLength {
            ids: example.ids.len(),
            mask: example.mask.len(),
        });
    }
    if example.ids.len() > config.max_len {
        return Err(ModelError::TooLong {
            len: example.ids.len(),
            max_len: config.max_len,
        });
    }
    Ok(())
}

impl Classifier {
    /// Three pre-softmax logits. Examples may be shorter than `max_len`;
    /// trailing masked positions never influence the result.
    pub fn forward(&self, example: &EncodedExample) -> Result<[f64; NUM_CLASSES], ModelError> {
        check_example(&self.config, example)?;
        let fg = ForwardGraph::build(&self.config, InputMode::Ids(&example.ids), &example.mask)?;
        let bindings = fg.bindings(&self.params, None);
        let eval = fg.graph.evaluate(&bindings)?;
        let out = eval.value(fg.logits).data();
        Ok([out[0], out[1], out[2]])
    }

    /// The summed token and position embeddings for `ids`, shape `[len, d]`.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor, ModelError> {
        let d = self.config.d_model;
        if ids.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        let tok = self.params.token_embedding();
        let pos = self.params.position_embedding();
        let mut data = Vec::with_capacity(ids.len() * d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(ModelError::UnknownId {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
            data.extend(tok.row(id).iter().zip(pos.row(i)).map(|(a, b)| a + b));
        }
        Ok(Tensor::new(vec![ids.len(), d], data).expect("embedding size"))
    }

    pub fn encode_text(
        &self,
        vocab: &Vocabulary,
        text: &str,
    ) -> Result<(Vec<String>, EncodedExample), ModelError> {
        let tokens = tokenize(&normalize_text(text));
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let example = encode(&tokens, vocab, self.config.max_len);
        let shown = tokens.into_iter().take(self.config.max_len).collect();
        Ok((shown, example))
    }

    /// normalize -> tokenize -> encode -> forward -> softmax.
    pub fn predict(&self, vocab: &Vocabulary, text: &str) -> Result<Prediction, ModelError> {
        let (_, example) = self.encode_text(vocab, text)?;
        Ok(Prediction::from_logits(&self.forward(&example)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub confidence: f64,
    pub probabilities: [f64; NUM_CLASSES],
    pub logits: [f64; NUM_CLASSES],
}

impl Prediction {
    /// Argmax of the softmax, lowest index on ties.
    pub fn from_logits(logits: &[f64; NUM_CLASSES]) -> Self {
        let mut probabilities = *logits;
        crate::autodiff::softmax_in_place(&mut probabilities);
        let best = argmax(&probabilities);
        Prediction {
            label: Label::from_index(best).expect("three classes"),
            confidence: probabilities[best],
            probabilities,
            logits: *logits,
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
