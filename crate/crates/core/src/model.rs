//! Post-layer-norm transformer encoder with a `[CLS]` classification head.
//!
//! Forward passes record onto a [`Tape`]; each parameter is bound either as
//! a trainable leaf or as a constant, which is how the grafted composition
//! keeps teacher weights frozen while gradients still flow through them.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive score for padded keys; `exp` of it underflows to exactly 0.
const MASKED_SCORE: f64 = -1e9;
pub const SEGMENT_VOCAB: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    /// Add learned position embeddings. Without them the encoder is
    /// permutation-invariant over tokens of the same segment.
    pub position_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size: 512,
            max_seq_len: 32,
            num_classes: 2,
            position_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_layers,
            self.d_model,
            self.num_heads,
            self.d_ff,
            self.vocab_size,
            self.max_seq_len,
            self.num_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.normal(std)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("linear shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::ones(&[dim]),
            bias: Tensor::zeros(&[dim]),
        }
    }
}

/// The six weight matrices magnitude pruning may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrunableMatrix {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

impl PrunableMatrix {
    pub const ALL: [PrunableMatrix; 6] = [
        PrunableMatrix::Query,
        PrunableMatrix::Key,
        PrunableMatrix::Value,
        PrunableMatrix::Output,
        PrunableMatrix::FfnIn,
        PrunableMatrix::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrunableMatrix::Query => "query",
            PrunableMatrix::Key => "key",
            PrunableMatrix::Value => "value",
            PrunableMatrix::Output => "output",
            PrunableMatrix::FfnIn => "ffn_in",
            PrunableMatrix::FfnOut => "ffn_out",
        }
    }

    /// Position of the weight in [`EncoderLayer::PARAM_NAMES`].
    pub fn param_index(self) -> usize {
        match self {
            PrunableMatrix::Query => 0,
            PrunableMatrix::Key => 2,
            PrunableMatrix::Value => 4,
            PrunableMatrix::Output => 6,
            PrunableMatrix::FfnIn => 10,
            PrunableMatrix::FfnOut => 12,
        }
    }
}

pub const LAYER_PARAMS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub const PARAM_NAMES: [&'static str; LAYER_PARAMS] = [
        "query.weight",
        "query.bias",
        "key.weight",
        "key.bias",
        "value.weight",
        "value.bias",
        "output.weight",
        "output.bias",
        "attn_norm.gain",
        "attn_norm.bias",
        "ffn_in.weight",
        "ffn_in.bias",
        "ffn_out.weight",
        "ffn_out.bias",
        "ffn_norm.gain",
        "ffn_norm.bias",
    ];

    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        EncoderLayer {
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
            attn_norm: LayerNorm::new(d),
            ffn_in: Linear::init(d, cfg.d_ff, rng),
            ffn_out: Linear::init(cfg.d_ff, d, rng),
            ffn_norm: LayerNorm::new(d),
        }
    }

    pub fn tensors(&self) -> [&Tensor; LAYER_PARAMS] {
        [
            &self.query.weight,
            &self.query.bias,
            &self.key.weight,
            &self.key.bias,
            &self.value.weight,
            &self.value.bias,
            &self.output.weight,
            &self.output.bias,
            &self.attn_norm.gain,
            &self.attn_norm.bias,
            &self.ffn_in.weight,
            &self.ffn_in.bias,
            &self.ffn_out.weight,
            &self.ffn_out.bias,
            &self.ffn_norm.gain,
            &self.ffn_norm.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; LAYER_PARAMS] {
        [
            &mut self.query.weight,
            &mut self.query.bias,
            &mut self.key.weight,
            &mut self.key.bias,
            &mut self.value.weight,
            &mut self.value.bias,
            &mut self.output.weight,
            &mut self.output.bias,
            &mut self.attn_norm.gain,
            &mut self.attn_norm.bias,
            &mut self.ffn_in.weight,
            &mut self.ffn_in.bias,
            &mut self.ffn_out.weight,
            &mut self.ffn_out.bias,
            &mut self.ffn_norm.gain,
            &mut self.ffn_norm.bias,
        ]
    }

    pub fn matrix(&self, which: PrunableMatrix) -> &Tensor {
        self.tensors()[which.param_index()]
    }

    pub fn matrix_mut(&mut self, which: PrunableMatrix) -> &mut Tensor {
        let [q, _, k, _, v, _, o, _, _, _, f1, _, f2, _, _, _] = self.tensors_mut();
        match which {
            PrunableMatrix::Query => q,
            PrunableMatrix::Key => k,
            PrunableMatrix::Value => v,
            PrunableMatrix::Output => o,
            PrunableMatrix::FfnIn => f1,
            PrunableMatrix::FfnOut => f2,
        }
    }

    pub fn same_architecture(&self, other: &EncoderLayer) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LayerVars {
        LayerVars(self.tensors().map(|t| bind(tape, t, trainable)))
    }
}

/// Tape handles of one layer's parameters, in [`EncoderLayer::PARAM_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars(pub [Var; LAYER_PARAMS]);

impl LayerVars {
    pub fn grads(&self, tape: &Tape) -> [Tensor; LAYER_PARAMS] {
        self.0.map(|v| tape.grad_tensor(v))
    }
}

fn bind(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub token: Tensor,
    pub position: Tensor,
    pub segment: Tensor,
    pub norm: LayerNorm,
}

pub const EMBEDDING_PARAMS: usize = 5;

impl Embeddings {
    pub const PARAM_NAMES: [&'static str; EMBEDDING_PARAMS] =
        ["token", "position", "segment", "norm.gain", "norm.bias"];

    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let mut table = |rows: usize| {
            let data = (0..rows * d).map(|_| rng.normal(0.5)).collect();
            Tensor::new(vec![rows, d], data).expect("embedding shape")
        };
        let token = table(cfg.vocab_size);
        let position = if cfg.position_embeddings {
            table(cfg.max_seq_len)
        } else {
            Tensor::zeros(&[cfg.max_seq_len, d])
        };
        Embeddings {
            token,
            position,
            segment: table(SEGMENT_VOCAB),
            norm: LayerNorm::new(d),
        }
    }

    pub fn tensors(&self) -> [&Tensor; EMBEDDING_PARAMS] {
        [
            &self.token,
            &self.position,
            &self.segment,
            &self.norm.gain,
            &self.norm.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; EMBEDDING_PARAMS] {
        [
            &mut self.token,
            &mut self.position,
            &mut self.segment,
            &mut self.norm.gain,
            &mut self.norm.bias,
        ]
    }
}

/// A full encoder: embeddings, `num_layers` encoder layers, classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

impl EncoderModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embeddings = Embeddings::init(&config, rng);
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::init(&config, rng))
            .collect();
        let head = Linear::init(config.d_model, config.num_classes, rng);
        Ok(EncoderModel {
            config,
            embeddings,
            layers,
            head,
        })
    }

    /// Deep copy; later mutation of either side never reaches the other.
    pub fn clone_weights(&self) -> EncoderModel {
        self.clone()
    }

    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in Embeddings::PARAM_NAMES
            .iter()
            .zip(self.embeddings.tensors())
        {
            out.push((format!("embeddings.{n}"), t));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (n, t) in EncoderLayer::PARAM_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in Embeddings::PARAM_NAMES
            .iter()
            .zip(self.embeddings.tensors_mut())
        {
            out.push((format!("embeddings.{n}"), t));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (n, t) in EncoderLayer::PARAM_NAMES.iter().zip(layer.tensors_mut()) {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Inference-mode forward; nothing is trainable.
    pub fn trace(&self, batch: &Batch) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let layers: Vec<_> = self.layers.iter().map(|l| (l, false)).collect();
        let bound = forward_parts(&mut tape, self, &layers, false, batch)?;
        Ok(bound.trace.values(&tape))
    }

    /// Forward with every parameter trainable (plain task training).
    pub fn forward_trainable(&self, tape: &mut Tape, batch: &Batch) -> Result<BoundForward> {
        let layers: Vec<_> = self.layers.iter().map(|l| (l, true)).collect();
        forward_parts(tape, self, &layers, true, batch)
    }

    pub fn check_same_architecture(&self, other: &EncoderModel) -> Result<()> {
        let ok = self.config == other.config
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_architecture(b));
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("models differ in architecture".into()))
        }
    }
}

/// Per-layer hidden states and attention maps plus logits, as tape handles.
#[derive(Clone, Debug)]
pub struct TraceVars {
    /// `[batch, seq, d_model]` after each layer.
    pub hidden_states: Vec<Var>,
    /// `[batch, heads, seq, seq]` post-softmax probabilities.
    pub attention_probs: Vec<Var>,
    /// `[batch, num_classes]`
    pub logits: Var,
}

impl TraceVars {
    pub fn values(&self, tape: &Tape) -> ForwardTrace {
        ForwardTrace {
            hidden_states: self
                .hidden_states
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            attention_probs: self
                .attention_probs
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            logits: tape.value(self.logits).clone(),
        }
    }
}

/// Materialized forward trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub hidden_states: Vec<Tensor>,
    pub attention_probs: Vec<Tensor>,
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.hidden_states.len()
    }
}

/// Result of a forward pass: trace handles plus the parameter bindings that
/// let callers read gradients back.
#[derive(Clone, Debug)]
pub struct BoundForward {
    pub trace: TraceVars,
    pub embeddings: [Var; EMBEDDING_PARAMS],
    pub layers: Vec<LayerVars>,
    pub head: [Var; 2],
}

/// Scaled dot-product attention over `[batch, heads, seq, d_k]` operands.
///
/// Returns `(Z, A)` with `A = softmax(QKᵀ/√d_k + mask)` and `Z = A·V`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 4 || sq != sk || sk != sv {
        return Err(Error::dim("attention", sq, sk));
    }
    let d_k = sq[3] as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let mut scaled = tape.scale(scores, 1.0 / d_k.sqrt());
    if let Some(m) = mask {
        scaled = tape.add(scaled, m)?;
    }
    let probs = tape.softmax(scaled, 3)?;
    let z = tape.batch_matmul(probs, v)?;
    Ok((z, probs))
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// One post-LN encoder layer over flattened `[batch*seq, d_model]` input.
fn layer_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &LayerVars,
    x: Var,
    dims: (usize, usize),
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let (batch, seq) = dims;
    let (h, dk) = (cfg.num_heads, cfg.head_dim());
    let p = &p.0;
    let mut heads = |w: Var, b: Var| -> Result<Var> {
        let y = linear(tape, x, w, b)?;
        let y = tape.reshape(y, &[batch, seq, h, dk])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = heads(p[0], p[1])?;
    let k = heads(p[2], p[3])?;
    let v = heads(p[4], p[5])?;
    let (z, probs) = attention(tape, q, k, v, mask)?;
    let z = tape.permute(z, &[0, 2, 1, 3])?;
    let z = tape.reshape(z, &[batch * seq, cfg.d_model])?;
    let attn_out = linear(tape, z, p[6], p[7])?;
    let res = tape.add(x, attn_out)?;
    let x1 = tape.layer_norm(res, p[8], p[9])?;
    let ff = linear(tape, x1, p[10], p[11])?;
    let ff = tape.gelu(ff);
    let ff = linear(tape, ff, p[12], p[13])?;
    let res2 = tape.add(x1, ff)?;
    let out = tape.layer_norm(res2, p[14], p[15])?;
    Ok((out, probs))
}

fn padding_mask(tape: &mut Tape, batch: &Batch, heads: usize) -> Option<Var> {
    let (b, s) = (batch.batch_size, batch.seq_len);
    if batch.lengths.iter().all(|&l| l == s) {
        return None;
    }
    let mut data = vec![0.0; b * heads * s * s];
    for (bi, &len) in batch.lengths.iter().enumerate() {
        for hi in 0..heads {
            for qi in 0..s {
                let row = ((bi * heads + hi) * s + qi) * s;
                for v in &mut data[row + len..row + s] {
                    *v = MASKED_SCORE;
                }
            }
        }
    }
    Some(tape.constant(Tensor::new(vec![b, heads, s, s], data).expect("mask shape")))
}

/// Forward pass with embeddings/head from `base` and an explicit layer
/// stack, each layer flagged trainable or frozen.
pub fn forward_parts(
    tape: &mut Tape,
    base: &EncoderModel,
    layers: &[(&EncoderLayer, bool)],
    outer_trainable: bool,
    batch: &Batch,
) -> Result<BoundForward> {
    let cfg = &base.config;
    batch.validate()?;
    if batch.seq_len > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.seq_len, cfg.max_seq_len
        )));
    }
    if let Some(&bad) = batch.token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let (b, s, d) = (batch.batch_size, batch.seq_len, cfg.d_model);
    let emb = base
        .embeddings
        .tensors()
        .map(|t| bind(tape, t, outer_trainable));
    let tok = tape.embedding(emb[0], &batch.token_ids)?;
    let seg = tape.embedding(emb[2], &batch.segment_ids)?;
    let mut x = tape.add(tok, seg)?;
    if cfg.position_embeddings {
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let pos = tape.embedding(emb[1], &positions)?;
        x = tape.add(x, pos)?;
    }
    let mut x = tape.layer_norm(x, emb[3], emb[4])?;

    let mask = padding_mask(tape, batch, cfg.num_heads);
    let mut hidden_states = Vec::with_capacity(layers.len());
    let mut attention_probs = Vec::with_capacity(layers.len());
    let mut layer_vars = Vec::with_capacity(layers.len());
    for (layer, trainable) in layers {
        let vars = layer.bind(tape, *trainable);
        let (out, probs) = layer_forward(tape, cfg, &vars, x, (b, s), mask)?;
        hidden_states.push(tape.reshape(out, &[b, s, d])?);
        attention_probs.push(probs);
        layer_vars.push(vars);
        x = out;
    }
    let flat = tape.reshape(x, &[b, s * d])?;
    let cls = tape.narrow(flat, 1, 0, d)?;
    let head = [
        bind(tape, &base.head.weight, outer_trainable),
        bind(tape, &base.head.bias, outer_trainable),
    ];
    let logits = linear(tape, cls, head[0], head[1])?;
    Ok(BoundForward {
        trace: TraceVars {
            hidden_states,
            attention_probs,
            logits,
        },
        embeddings: emb,
        layers: layer_vars,
        head,
    })
}
