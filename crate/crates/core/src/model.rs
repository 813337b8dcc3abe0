//! The dual-stream encoder: an H-stream built from self-attention only and
//! an S-stream that additionally cross-attends the paired sequence's final H
//! layer. Cross-attention parameters are optional, so an encoder-only store
//! (cross-attention unplugged) loads and runs unchanged.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    multi_head_attention_packed, AttentionMask, AttentionOutput, AttentionParams,
};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{AttnSegment, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("cross-attention is unplugged from this model")]
    NoCrossAttention,
    #[error("layer index {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("{n} decoder layers requested from a {layers}-layer encoder")]
    DecoderTooDeep { n: usize, layers: usize },
    #[error("paired input required; use Plug-Out mode for single sequences")]
    MissingPair,
    #[error("unknown attention stream `{0}` (expected h-self, s-self or s-cross)")]
    InvalidStream(String),
    #[error("paired sequence count {paired} does not match {own}")]
    PairCount { own: usize, paired: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Precision parameters are rounded to after every update and written with
/// in checkpoints. Computation is always `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub init_std: f64,
    pub storage: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            vocab_size: 64,
            max_seq_len: 64,
            dropout: 0.1,
            ln_eps: 1e-5,
            init_std: 0.02,
            storage: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// The 24-layer production shape with a 250k vocabulary.
    pub fn large() -> Self {
        ModelConfig {
            num_layers: 24,
            d_model: 1024,
            heads: 16,
            d_ff: 4096,
            vocab_size: 250_000,
            max_seq_len: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size <= crate::data::FIRST_CONTENT_ID {
            return Err(ModelError::Config(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossParams {
    pub attn: AttentionParams,
    pub norm: NormParams,
}

/// Self-attention, FFN and their norms (the self-side set) plus the optional
/// cross-attention sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub self_attn: AttentionParams,
    pub self_norm: NormParams,
    pub ffn: FfnParams,
    pub ffn_norm: NormParams,
    pub cross: Option<CrossParams>,
}

/// Whether a parameter name belongs to the cross-attention set.
pub fn is_cross_param(name: &str) -> bool {
    name.contains(".cross_attn")
}

pub const TOKEN_EMBED: &str = "embed.tokens";
pub const POS_EMBED: &str = "embed.positions";
pub const LM_BIAS: &str = "lm_head.bias";

fn layer_prefix(l: usize) -> String {
    format!("layers.{l}")
}

/// Parameter names and shapes of a full model, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![
        (TOKEN_EMBED.to_string(), vec![cfg.vocab_size, d]),
        (POS_EMBED.to_string(), vec![cfg.max_seq_len, d]),
        (LM_BIAS.to_string(), vec![cfg.vocab_size]),
    ];
    for l in 0..cfg.num_layers {
        let p = layer_prefix(l);
        for m in ["query", "key", "value", "output"] {
            out.push((format!("{p}.self_attn.{m}"), vec![d, d]));
        }
        out.push((format!("{p}.self_attn_norm.gain"), vec![d]));
        out.push((format!("{p}.self_attn_norm.bias"), vec![d]));
        out.push((format!("{p}.ffn.w1"), vec![d, f]));
        out.push((format!("{p}.ffn.b1"), vec![f]));
        out.push((format!("{p}.ffn.w2"), vec![f, d]));
        out.push((format!("{p}.ffn.b2"), vec![d]));
        out.push((format!("{p}.ffn_norm.gain"), vec![d]));
        out.push((format!("{p}.ffn_norm.bias"), vec![d]));
        for m in ["query", "key", "value", "output"] {
            out.push((format!("{p}.cross_attn.{m}"), vec![d, d]));
        }
        out.push((format!("{p}.cross_attn_norm.gain"), vec![d]));
        out.push((format!("{p}.cross_attn_norm.bias"), vec![d]));
    }
    out
}

/// Model configuration plus its parameters. No language embeddings exist;
/// the output head is tied to the token embedding with a free bias.
#[derive(Clone, PartialEq)]
pub struct Veco {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub lm_bias: ParamId,
    pub layers: Vec<LayerParams>,
}

impl fmt::Debug for Veco {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Veco")
            .field("config", &self.config)
            .field("params", &self.store.len())
            .finish()
    }
}

fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
    let found = store.get(id).shape();
    if found != shape {
        return Err(ModelError::ParamShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(id)
}

impl Veco {
    /// Random initialization: N(0, init_std) matrices and embeddings, unit
    /// norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, config.init_std).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut store = ParamStore::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            store.insert(name, Tensor::new(shape, data)?);
        }
        if config.storage == Precision::F32 {
            store.round_to_f32();
        }
        Self::from_store(config, store)
    }

    /// Binds a store by name. Cross-attention parameters are optional per
    /// layer; every other parameter must be present with the right shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let tok_embed = lookup(&store, TOKEN_EMBED, &[v, d])?;
        let pos_embed = lookup(&store, POS_EMBED, &[config.max_seq_len, d])?;
        let lm_bias = lookup(&store, LM_BIAS, &[v])?;
        let attn = |store: &ParamStore, prefix: &str| -> Result<AttentionParams> {
            Ok(AttentionParams {
                query: lookup(store, &format!("{prefix}.query"), &[d, d])?,
                key: lookup(store, &format!("{prefix}.key"), &[d, d])?,
                value: lookup(store, &format!("{prefix}.value"), &[d, d])?,
                output: lookup(store, &format!("{prefix}.output"), &[d, d])?,
                heads: config.heads,
            })
        };
        let norm = |store: &ParamStore, prefix: &str| -> Result<NormParams> {
            Ok(NormParams {
                gain: lookup(store, &format!("{prefix}.gain"), &[d])?,
                bias: lookup(store, &format!("{prefix}.bias"), &[d])?,
            })
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = layer_prefix(l);
            let cross = if store.contains(&format!("{p}.cross_attn.query")) {
                Some(CrossParams {
                    attn: attn(&store, &format!("{p}.cross_attn"))?,
                    norm: norm(&store, &format!("{p}.cross_attn_norm"))?,
                })
            } else {
                None
            };
            layers.push(LayerParams {
                self_attn: attn(&store, &format!("{p}.self_attn"))?,
                self_norm: norm(&store, &format!("{p}.self_attn_norm"))?,
                ffn: FfnParams {
                    w1: lookup(&store, &format!("{p}.ffn.w1"), &[d, f])?,
                    b1: lookup(&store, &format!("{p}.ffn.b1"), &[f])?,
                    w2: lookup(&store, &format!("{p}.ffn.w2"), &[f, d])?,
                    b2: lookup(&store, &format!("{p}.ffn.b2"), &[d])?,
                },
                ffn_norm: norm(&store, &format!("{p}.ffn_norm"))?,
                cross,
            });
        }
        Ok(Veco {
            config,
            store,
            tok_embed,
            pos_embed,
            lm_bias,
            layers,
        })
    }

    pub fn has_cross(&self) -> bool {
        self.layers.iter().all(|l| l.cross.is_some())
    }

    /// Encoder-only copy with every cross-attention parameter removed.
    pub fn plugged_out(&self) -> Result<Veco> {
        let store = self.store.filtered(|n| !is_cross_param(n));
        Veco::from_store(self.config.clone(), store)
    }

    /// Trainable mask selecting only the cross-attention parameters.
    pub fn cross_only_mask(&self) -> Vec<bool> {
        self.store
            .iter()
            .map(|(_, n, _)| is_cross_param(n))
            .collect()
    }
}

/// One sequence inside a [`Packed`] block of rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// Leading positions that are real tokens; the rest are padding.
    pub valid: usize,
}

/// Several sequences stacked along the row dimension so projections run as
/// one matrix product while attention stays within each sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Packed {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Packed {
    /// Unpadded sequences, positions restarting at 0 for each.
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let mut p = Packed::default();
        for s in seqs {
            let s = s.as_ref();
            p.segments.push(Segment {
                start: p.ids.len(),
                len: s.len(),
                valid: s.len(),
            });
            p.ids.extend_from_slice(s);
            p.positions.extend(0..s.len());
        }
        p
    }

    /// Padded rows of a token matrix with per-row valid lengths.
    pub fn padded<S: AsRef<[usize]>>(rows: &[S], lengths: &[usize]) -> Self {
        let mut p = Self::from_sequences(rows);
        for (seg, &len) in p.segments.iter_mut().zip(lengths) {
            seg.valid = len.min(seg.len);
        }
        p
    }

    pub fn single(tokens: &[usize]) -> Self {
        Self::from_sequences(&[tokens])
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    fn self_segments(&self, causal: bool) -> Vec<AttnSegment> {
        self.segments
            .iter()
            .map(|s| AttnSegment {
                q_start: s.start,
                k_start: s.start,
                mask: if causal {
                    AttentionMask::causal(s.valid, s.len)
                } else {
                    AttentionMask::padding(s.valid, s.len, s.len)
                },
            })
            .collect()
    }

    fn cross_segments(&self, memory: &Packed) -> Vec<AttnSegment> {
        self.segments
            .iter()
            .zip(&memory.segments)
            .map(|(q, k)| AttnSegment {
                q_start: q.start,
                k_start: k.start,
                mask: AttentionMask::padding(k.valid, q.len, k.len),
            })
            .collect()
    }
}

/// Final and per-layer activations of one stream plus the attention nodes
/// needed for export.
#[derive(Debug, Clone, Default)]
pub struct StreamStates {
    /// `num_layers + 1` packed activations; index 0 is the embedding.
    pub layers: Vec<Var>,
    pub self_attn: Vec<Var>,
    pub cross_attn: Vec<Var>,
}

impl StreamStates {
    pub fn last(&self) -> Var {
        *self
            .layers
            .last()
            .expect("stream has at least the embedding layer")
    }
}

/// H- and S-stream states for both sides of a pair.
#[derive(Debug, Clone)]
pub struct DualStates {
    pub h_x: StreamStates,
    pub h_y: StreamStates,
    pub s_x: StreamStates,
    pub s_y: StreamStates,
}

/// One forward pass over a model, recording on `tape`.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub model: &'a Veco,
    pub bind: Binder<'a>,
    dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    /// Deterministic pass: dropout disabled.
    pub fn eval(tape: &'a mut Tape, model: &'a Veco, bind: Binder<'a>) -> Self {
        Forward {
            tape,
            model,
            bind,
            dropout: None,
        }
    }

    /// Training pass applying the configured dropout with `rng`.
    pub fn train(
        tape: &'a mut Tape,
        model: &'a Veco,
        bind: Binder<'a>,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Forward {
            tape,
            model,
            bind,
            dropout: Some(rng),
        }
    }

    fn p(&mut self, id: ParamId) -> Var {
        self.bind.var(self.tape, id)
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        let rate = self.model.config.dropout;
        match self.dropout.as_deref_mut() {
            Some(rng) if rate > 0.0 => Ok(self.tape.dropout(x, rate, rng)?),
            _ => Ok(x),
        }
    }

    fn check_len(&self, packed: &Packed) -> Result<()> {
        let max = self.model.config.max_seq_len;
        if let Some(&pos) = packed.positions.iter().max() {
            if pos >= max {
                return Err(ModelError::TooLong { len: pos + 1, max });
            }
        }
        Ok(())
    }

    /// `E[tokens] + P[positions]`.
    pub fn embed(&mut self, packed: &Packed) -> Result<Var> {
        self.check_len(packed)?;
        let (te, pe) = (self.model.tok_embed, self.model.pos_embed);
        let e = self.p(te);
        let p = self.p(pe);
        let tok = self.tape.embedding(e, &packed.ids)?;
        let pos = self.tape.embedding(p, &packed.positions)?;
        Ok(self.tape.add(tok, pos)?)
    }

    fn add_norm(&mut self, residual: Var, sub: Var, norm: NormParams) -> Result<Var> {
        let sub = self.drop(sub)?;
        let sum = self.tape.add(residual, sub)?;
        let g = self.p(norm.gain);
        let b = self.p(norm.bias);
        Ok(self.tape.layer_norm(sum, g, b, self.model.config.ln_eps)?)
    }

    pub fn self_sublayer(
        &mut self,
        attn: &AttentionParams,
        norm: NormParams,
        x: Var,
        packed: &Packed,
        causal: bool,
    ) -> Result<(Var, Var)> {
        let out = multi_head_attention_packed(
            self.tape,
            &self.bind,
            attn,
            x,
            x,
            packed.self_segments(causal),
        )?;
        Ok((self.add_norm(x, out.output, norm)?, out.core))
    }

    pub fn cross_sublayer(
        &mut self,
        cross: &CrossParams,
        x: Var,
        packed: &Packed,
        memory: Var,
        memory_packed: &Packed,
    ) -> Result<(Var, Var)> {
        if packed.segments.len() != memory_packed.segments.len() {
            return Err(ModelError::PairCount {
                own: packed.segments.len(),
                paired: memory_packed.segments.len(),
            });
        }
        let d = self.model.config.d_model;
        if self.tape.value(memory).cols() != d {
            return Err(TensorError::ShapeMismatch {
                op: "cross_attention",
                lhs: self.tape.value(memory).shape().to_vec(),
                rhs: vec![memory_packed.rows(), d],
            }
            .into());
        }
        let AttentionOutput { output, core } = multi_head_attention_packed(
            self.tape,
            &self.bind,
            &cross.attn,
            x,
            memory,
            packed.cross_segments(memory_packed),
        )?;
        Ok((self.add_norm(x, output, cross.norm)?, core))
    }

    pub fn ffn_sublayer(&mut self, ffn: FfnParams, norm: NormParams, x: Var) -> Result<Var> {
        let w1 = self.p(ffn.w1);
        let b1 = self.p(ffn.b1);
        let w2 = self.p(ffn.w2);
        let b2 = self.p(ffn.b2);
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_bias(h, b1)?;
        let h = self.tape.gelu(h)?;
        let h = self.tape.matmul(h, w2)?;
        let h = self.tape.add_bias(h, b2)?;
        self.add_norm(x, h, norm)
    }

    /// H-stream from a precomputed embedding.
    pub fn encode_h_from(&mut self, h0: Var, packed: &Packed) -> Result<StreamStates> {
        let mut st = StreamStates {
            layers: vec![h0],
            ..Default::default()
        };
        let mut h = h0;
        for layer in &self.model.layers {
            let (a, core) =
                self.self_sublayer(&layer.self_attn, layer.self_norm, h, packed, false)?;
            h = self.ffn_sublayer(layer.ffn, layer.ffn_norm, a)?;
            st.layers.push(h);
            st.self_attn.push(core);
        }
        Ok(st)
    }

    /// Self-attention-only stack over `packed`.
    pub fn encode_h(&mut self, packed: &Packed) -> Result<StreamStates> {
        let h0 = self.embed(packed)?;
        self.encode_h_from(h0, packed)
    }

    /// S-stream from a precomputed embedding. `memory` is the paired
    /// sequence's final H layer; callers apply stop-gradient when required.
    pub fn encode_s_from(
        &mut self,
        s0: Var,
        packed: &Packed,
        memory: Var,
        memory_packed: &Packed,
    ) -> Result<StreamStates> {
        let mut st = StreamStates {
            layers: vec![s0],
            ..Default::default()
        };
        let mut s = s0;
        for layer in &self.model.layers {
            let cross = layer.cross.ok_or(ModelError::NoCrossAttention)?;
            let (a, self_core) =
                self.self_sublayer(&layer.self_attn, layer.self_norm, s, packed, false)?;
            let (c, cross_core) = self.cross_sublayer(&cross, a, packed, memory, memory_packed)?;
            s = self.ffn_sublayer(layer.ffn, layer.ffn_norm, c)?;
            st.layers.push(s);
            st.self_attn.push(self_core);
            st.cross_attn.push(cross_core);
        }
        Ok(st)
    }

    pub fn encode_s(
        &mut self,
        packed: &Packed,
        memory: Var,
        memory_packed: &Packed,
    ) -> Result<StreamStates> {
        let s0 = self.embed(packed)?;
        self.encode_s_from(s0, packed, memory, memory_packed)
    }

    /// All four streams of a pair with stop-gradient on both cross inputs.
    pub fn encode_pair(&mut self, x: &Packed, y: &Packed) -> Result<DualStates> {
        let x0 = self.embed(x)?;
        let y0 = self.embed(y)?;
        let h_x = self.encode_h_from(x0, x)?;
        let h_y = self.encode_h_from(y0, y)?;
        let mem_x = self.tape.stop_gradient(h_x.last());
        let mem_y = self.tape.stop_gradient(h_y.last());
        let s_x = self.encode_s_from(x0, x, mem_y, y)?;
        let s_y = self.encode_s_from(y0, y, mem_x, x)?;
        Ok(DualStates { h_x, h_y, s_x, s_y })
    }

    /// Vocabulary logits through the tied output head: `hidden · Eᵀ + b`.
    pub fn lm_logits(&mut self, hidden: Var) -> Result<Var> {
        let (te, lb) = (self.model.tok_embed, self.model.lm_bias);
        let e = self.p(te);
        let b = self.p(lb);
        let z = self.tape.matmul_nt(hidden, e)?;
        Ok(self.tape.add_bias(z, b)?)
    }

    /// Mean cross-entropy of `targets` at packed row indices `rows` of
    /// `hidden`. No rows yields a constant 0.
    pub fn masked_lm_loss(
        &mut self,
        hidden: Var,
        rows: &[usize],
        targets: &[usize],
    ) -> Result<Var> {
        if rows.is_empty() {
            return Ok(self.tape.constant(Tensor::scalar(0.0)));
        }
        let h = self.tape.select_rows(hidden, rows)?;
        let logits = self.lm_logits(h)?;
        Ok(self.tape.cross_entropy(logits, targets)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 16,
            max_seq_len: 12,
            dropout: 0.0,
            storage: Precision::F64,
            init_std: 0.3,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(1);
        c.heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
        let mut c = tiny(1);
        c.max_seq_len = 1;
        assert!(c.validate().is_err());
        assert!(ModelConfig::large().validate().is_ok());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_layers_is_embedding_plus_position() {
        let m = Veco::init(tiny(0), 1).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &m, Binder::frozen(&m.store));
        let toks = [1usize, 7, 9, 2];
        let st = f.encode_h(&Packed::single(&toks)).unwrap();
        let out = tape.value(st.last());
        let e = m.store.get(m.tok_embed);
        let p = m.store.get(m.pos_embed);
        for (i, &t) in toks.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(out.at(i, c), e.at(t, c) + p.at(i, c));
            }
        }
    }

    #[test]
    fn overlength_input_is_rejected() {
        let m = Veco::init(tiny(1), 1).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &m, Binder::frozen(&m.store));
        let toks = vec![5usize; 13];
        assert_eq!(
            f.encode_h(&Packed::single(&toks)).unwrap_err(),
            ModelError::TooLong { len: 13, max: 12 }
        );
    }

    #[test]
    fn perturbing_cross_params_leaves_h_stream_bit_identical() {
        let m = Veco::init(tiny(2), 3).unwrap();
        let toks = [1usize, 6, 7, 8, 2];
        let run = |m: &Veco| {
            let mut tape = Tape::new();
            let mut f = Forward::eval(&mut tape, m, Binder::frozen(&m.store));
            let st = f.encode_h(&Packed::single(&toks)).unwrap();
            st.layers
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect::<Vec<_>>()
        };
        let base = run(&m);
        let mut m2 = m.clone();
        for id in m2.store.ids().collect::<Vec<_>>() {
            if is_cross_param(m2.store.name(id)) {
                for v in m2.store.get_mut(id).data_mut() {
                    *v += 0.37;
                }
            }
        }
        assert_eq!(base, run(&m2));
        assert_eq!(base, run(&m.plugged_out().unwrap()));
    }

    #[test]
    fn zero_cross_output_reduces_s_stream_to_h_stream() {
        // LN of an already-normalized row is the identity up to eps.
        let mut cfg = tiny(2);
        cfg.ln_eps = 1e-14;
        let mut m = Veco::init(cfg, 4).unwrap();
        for layer in m.layers.clone() {
            let c = layer.cross.unwrap();
            for v in m.store.get_mut(c.attn.output).data_mut() {
                *v = 0.0;
            }
        }
        let x = [1usize, 6, 7, 2];
        let y = [1usize, 9, 10, 11, 2];
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &m, Binder::frozen(&m.store));
        let (px, py) = (Packed::single(&x), Packed::single(&y));
        let d = f.encode_pair(&px, &py).unwrap();
        let diff = tape
            .value(d.s_x.last())
            .max_abs_diff(tape.value(d.h_x.last()));
        assert!(diff < 1e-9, "diff {diff}");
    }

    #[test]
    fn padded_rows_match_unpadded_on_real_positions() {
        let m = Veco::init(tiny(2), 5).unwrap();
        let a = vec![1usize, 6, 7, 2];
        let b = vec![1usize, 8, 2];
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &m, Binder::frozen(&m.store));
        let packed = Packed::from_sequences(&[a.clone(), b.clone()]);
        let h = f.encode_h(&packed).unwrap().last();
        let padded = Packed::padded(&[a.clone(), vec![1, 8, 2, 0]], &[4, 3]);
        let hp = f.encode_h(&padded).unwrap().last();
        let (hv, hpv) = (tape.value(h).clone(), tape.value(hp).clone());
        for r in 0..4 {
            assert!(hv
                .row(r)
                .iter()
                .zip(hpv.row(r))
                .all(|(x, y)| (x - y).abs() < 1e-12));
        }
        for r in 0..3 {
            assert!(hv
                .row(4 + r)
                .iter()
                .zip(hpv.row(4 + r))
                .all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn lm_logits_shape_and_uniform_for_zero_state() {
        let m = Veco::init(tiny(1), 6).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &m, Binder::frozen(&m.store));
        let h = f.tape.constant(Tensor::zeros(&[7, 8]));
        let z = f.lm_logits(h).unwrap();
        assert_eq!(tape.value(z).shape(), &[7, 16]);
        let p = tape.softmax(z, 1).unwrap();
        assert!(tape
            .value(p)
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn orthonormal_embedding_argmax_recovers_row() {
        // V = d = 8 with E a signed permutation matrix (orthonormal rows).
        let mut cfg = tiny(0);
        cfg.vocab_size = 8;
        cfg.max_seq_len = 4;
        let mut m = Veco::init(cfg, 7).unwrap();
        let mut e = Tensor::zeros(&[8, 8]);
        let perm = [3usize, 0, 6, 1, 7, 2, 5, 4];
        for (i, &p) in perm.iter().enumerate() {
            e.data_mut()[i * 8 + p] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        m.store.insert(TOKEN_EMBED, e.clone());
        for i in 0..8 {
            let mut tape = Tape::new();
            let mut f = Forward::eval(&mut tape, &m, Binder::frozen(&m.store));
            let h = f
                .tape
                .constant(Tensor::new(vec![1, 8], e.row(i).to_vec()).unwrap());
            let z = f.lm_logits(h).unwrap();
            let row = tape.value(z).row(0).to_vec();
            let argmax = (0..8).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, i);
        }
    }

    #[test]
    fn missing_cross_params_unplug_s_stream() {
        let m = Veco::init(tiny(1), 8).unwrap().plugged_out().unwrap();
        assert!(!m.has_cross());
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &m, Binder::frozen(&m.store));
        let p = Packed::single(&[1, 5, 2]);
        let err = f.encode_pair(&p, &p).unwrap_err();
        assert_eq!(err, ModelError::NoCrossAttention);
    }

    #[test]
    fn wrong_memory_width_is_rejected() {
        let m = Veco::init(tiny(1), 9).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &m, Binder::frozen(&m.store));
        let p = Packed::single(&[1, 5, 2]);
        let mem = f.tape.constant(Tensor::zeros(&[3, 4]));
        assert!(f.encode_s(&p, mem, &p).is_err());
    }
}
