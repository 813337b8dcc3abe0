//! Encoder-decoder built from a pre-trained checkpoint, teacher-forced
//! training and beam search.
//!
//! The encoder is the full H-stream. Decoder layer `j` takes causal
//! self-attention, its norm and the FFN from a selected source layer and
//! initializes its encoder attention from that layer's cross-attention.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::bleu::corpus_bleu;
use crate::checkpoint::{AdamState, Checkpoint};
use crate::data::{frame, step_rng, ParallelCorpus, BOS, FIRST_CONTENT_ID, SEP};
use crate::model::{
    is_cross_param, CrossParams, FfnParams, Forward, ModelError, NormParams, Packed, Segment, Veco,
};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{apply_update, lr_at, AdamConfig, Result, Schedule, TrainError};

type ModelResult<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    First,
    Last,
    Full,
}

impl FromStr for Selection {
    type Err = ModelError;
    fn from_str(s: &str) -> ModelResult<Self> {
        match s {
            "first" => Ok(Selection::First),
            "last" => Ok(Selection::Last),
            "full" => Ok(Selection::Full),
            _ => Err(ModelError::Config(format!(
                "unknown layer selection `{s}` (first, last or full)"
            ))),
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::First => "first",
            Selection::Last => "last",
            Selection::Full => "full",
        })
    }
}

/// Source layer of each decoder layer. `Full` uses every layer and ignores
/// `n`.
pub fn decoder_sources(
    num_layers: usize,
    n: usize,
    selection: Selection,
) -> ModelResult<Vec<usize>> {
    if selection == Selection::Full {
        return Ok((0..num_layers).collect());
    }
    if n > num_layers {
        return Err(ModelError::DecoderTooDeep {
            n,
            layers: num_layers,
        });
    }
    Ok(match selection {
        Selection::First => (0..n).collect(),
        _ => (num_layers - n..num_layers).collect(),
    })
}

/// How a decoder was carved out of a checkpoint. Stored in the checkpoint
/// header so assemblies survive a save.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assembly {
    pub layers: usize,
    pub selection: Selection,
    /// Decoder layers share self-attention, FFN and norms with their
    /// source encoder layer instead of owning copies.
    pub tie: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayer {
    pub source: usize,
    pub self_attn: AttentionParams,
    pub self_norm: NormParams,
    pub ffn: FfnParams,
    pub ffn_norm: NormParams,
    pub cross: CrossParams,
}

/// Parameter accounting of an assembly, in scalar counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub checkpoint: usize,
    /// Cross-attention of layers no decoder layer uses.
    pub dropped: usize,
    /// Untied decoder copies.
    pub added: usize,
    pub total: usize,
    pub sources: Vec<usize>,
    pub tied: bool,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checkpoint\t{}\ndropped\t{}\nadded\t{}\ntotal\t{}\nsources\t{:?}\ntied\t{}",
            self.checkpoint, self.dropped, self.added, self.total, self.sources, self.tied
        )
    }
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    /// Encoder plus every decoder parameter, in one store.
    pub model: Veco,
    pub decoder: Vec<DecoderLayer>,
    pub assembly: Assembly,
}

fn layer_index(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

const DECODER_PARTS: [&str; 4] = ["self_attn", "self_attn_norm", "ffn", "ffn_norm"];

fn decoder_name(j: usize, source: usize, encoder_name: &str) -> Option<String> {
    let rest = encoder_name.strip_prefix(&format!("layers.{source}."))?;
    let part = rest.split('.').next()?;
    DECODER_PARTS
        .contains(&part)
        .then(|| format!("decoder.{j}.{rest}"))
}

/// Builds an encoder-decoder from a checkpoint holding cross-attention for
/// at least the selected layers.
pub fn assemble_seq2seq(
    ckpt: &Checkpoint,
    n: usize,
    selection: Selection,
    tie: bool,
) -> ModelResult<(Seq2Seq, ParamReport)> {
    let cfg = &ckpt.header.model;
    let sources = decoder_sources(cfg.num_layers, n, selection)?;
    let keep = |name: &str| {
        if name.starts_with("decoder.") {
            return false;
        }
        !is_cross_param(name) || layer_index(name).is_some_and(|l| sources.contains(&l))
    };
    let mut store = ckpt.params.filtered(keep);
    let dropped = ckpt.num_params() - store.numel();
    let mut added = 0;
    if !tie {
        for (j, &s) in sources.iter().enumerate() {
            let copies: Vec<(String, Tensor)> = store
                .iter()
                .filter_map(|(_, name, t)| decoder_name(j, s, name).map(|d| (d, t.clone())))
                .collect();
            for (name, t) in copies {
                added += t.len();
                store.insert(name, t);
            }
        }
    }
    let assembly = Assembly {
        layers: sources.len(),
        selection,
        tie,
    };
    let s2s = Seq2Seq::from_store(cfg.clone(), store, assembly)?;
    let report = ParamReport {
        checkpoint: ckpt.num_params(),
        dropped,
        added,
        total: s2s.model.store.numel(),
        sources,
        tied: tie,
    };
    Ok((s2s, report))
}

impl Seq2Seq {
    fn from_store(
        config: crate::model::ModelConfig,
        store: ParamStore,
        assembly: Assembly,
    ) -> ModelResult<Self> {
        let model = Veco::from_store(config, store)?;
        let n = if assembly.selection == Selection::Full {
            model.config.num_layers
        } else {
            assembly.layers
        };
        let sources = decoder_sources(model.config.num_layers, n, assembly.selection)?;
        let mut decoder = Vec::with_capacity(sources.len());
        for (j, &s) in sources.iter().enumerate() {
            let enc = model.layers[s];
            let cross = enc.cross.ok_or(ModelError::NoCrossAttention)?;
            let layer = if assembly.tie {
                DecoderLayer {
                    source: s,
                    self_attn: enc.self_attn,
                    self_norm: enc.self_norm,
                    ffn: enc.ffn,
                    ffn_norm: enc.ffn_norm,
                    cross,
                }
            } else {
                let id = |suffix: &str| {
                    let name = format!("decoder.{j}.{suffix}");
                    model.store.id(&name).ok_or(ModelError::MissingParam(name))
                };
                DecoderLayer {
                    source: s,
                    self_attn: AttentionParams {
                        query: id("self_attn.query")?,
                        key: id("self_attn.key")?,
                        value: id("self_attn.value")?,
                        output: id("self_attn.output")?,
                        heads: model.config.heads,
                    },
                    self_norm: NormParams {
                        gain: id("self_attn_norm.gain")?,
                        bias: id("self_attn_norm.bias")?,
                    },
                    ffn: FfnParams {
                        w1: id("ffn.w1")?,
                        b1: id("ffn.b1")?,
                        w2: id("ffn.w2")?,
                        b2: id("ffn.b2")?,
                    },
                    ffn_norm: NormParams {
                        gain: id("ffn_norm.gain")?,
                        bias: id("ffn_norm.bias")?,
                    },
                    cross,
                }
            };
            decoder.push(layer);
        }
        Ok(Seq2Seq {
            model,
            decoder,
            assembly,
        })
    }

    /// Checkpoint of every parameter; the assembly goes in the header.
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, seed);
        ckpt.header.extra = serde_json::json!({ "seq2seq": self.assembly });
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> ModelResult<Self> {
        let assembly: Assembly = ckpt
            .header
            .extra
            .get("seq2seq")
            .cloned()
            .ok_or_else(|| {
                ModelError::Config("checkpoint holds no encoder-decoder assembly".into())
            })
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| ModelError::Config(e.to_string()))
            })?;
        Self::from_store(ckpt.header.model.clone(), ckpt.params.clone(), assembly)
    }

    /// Final encoder layer for framed sources.
    pub fn encode(&self, fwd: &mut Forward, src: &Packed) -> ModelResult<Var> {
        Ok(fwd.encode_h(src)?.last())
    }

    /// Decoder hidden states: causal self-attention, encoder attention (no
    /// stop-gradient), FFN.
    pub fn decode_hidden(
        &self,
        fwd: &mut Forward,
        dec: &Packed,
        memory: Var,
        mem: &Packed,
    ) -> ModelResult<Var> {
        let mut h = fwd.embed(dec)?;
        for layer in &self.decoder {
            let (a, _) = fwd.self_sublayer(&layer.self_attn, layer.self_norm, h, dec, true)?;
            let (c, _) = fwd.cross_sublayer(&layer.cross, a, dec, memory, mem)?;
            h = fwd.ffn_sublayer(layer.ffn, layer.ffn_norm, c)?;
        }
        Ok(h)
    }

    /// Vocabulary logits for every decoder input position.
    pub fn logits(&self, fwd: &mut Forward, src: &Packed, dec: &Packed) -> ModelResult<Var> {
        let memory = self.encode(fwd, src)?;
        let h = self.decode_hidden(fwd, dec, memory, src)?;
        fwd.lm_logits(h)
    }
}

/// Teacher-forcing inputs: framed sources, `[BOS, y…]` decoder inputs and
/// `[y…, SEP]` targets, all packed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MtBatch {
    pub src: Packed,
    pub dec: Packed,
    pub targets: Vec<usize>,
}

impl MtBatch {
    pub fn new<'a>(
        pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>,
        max_seq_len: usize,
    ) -> Self {
        let mut srcs = Vec::new();
        let mut decs = Vec::new();
        let mut targets = Vec::new();
        for (x, y) in pairs {
            srcs.push(frame(x, max_seq_len));
            let keep = y.len().min(max_seq_len - 1);
            let mut d = vec![BOS];
            d.extend_from_slice(&y[..keep]);
            decs.push(d);
            targets.extend_from_slice(&y[..keep]);
            targets.push(SEP);
        }
        MtBatch {
            src: Packed::from_sequences(&srcs),
            dec: Packed::from_sequences(&decs),
            targets,
        }
    }
}

/// Mean teacher-forced cross-entropy per target token.
pub fn mt_loss(fwd: &mut Forward, s2s: &Seq2Seq, batch: &MtBatch) -> ModelResult<Var> {
    let z = s2s.logits(fwd, &batch.src, &batch.dec)?;
    Ok(fwd.tape.cross_entropy(z, &batch.targets)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtEval {
    pub loss: f64,
    pub token_accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
}

/// Teacher-forced loss and argmax token accuracy over a corpus.
pub fn mt_eval(s2s: &Seq2Seq, corpus: &ParallelCorpus) -> ModelResult<MtEval> {
    let (mut nll, mut correct, mut count) = (0.0, 0usize, 0usize);
    let max = s2s.model.config.max_seq_len;
    for start in (0..corpus.len()).step_by(64) {
        let end = (start + 64).min(corpus.len());
        let batch = MtBatch::new(
            (start..end).map(|i| (corpus.src[i].as_slice(), corpus.tgt[i].as_slice())),
            max,
        );
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, &s2s.model, Binder::frozen(&s2s.model.store));
        let z = s2s.logits(&mut fwd, &batch.src, &batch.dec)?;
        let loss = tape.cross_entropy(z, &batch.targets)?;
        nll += tape.value(loss).item() * batch.targets.len() as f64;
        let zt = tape.value(z);
        for (r, &t) in batch.targets.iter().enumerate() {
            correct += (argmax(zt.row(r)) == t) as usize;
        }
        count += batch.targets.len();
    }
    if count == 0 {
        return Ok(MtEval {
            loss: 0.0,
            token_accuracy: 0.0,
        });
    }
    Ok(MtEval {
        loss: nll / count as f64,
        token_accuracy: correct as f64 / count as f64,
    })
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

impl Hyp {
    fn score(&self) -> f64 {
        self.logp / self.tokens.len().max(1) as f64
    }

    /// Best first: higher normalized score, then higher log-prob, then the
    /// lexicographically smaller token sequence.
    fn rank(&self, other: &Hyp) -> Ordering {
        other
            .score()
            .total_cmp(&self.score())
            .then(other.logp.total_cmp(&self.logp))
            .then(self.tokens.cmp(&other.tokens))
    }

    fn done(&self) -> bool {
        self.tokens.last() == Some(&SEP)
    }

    fn output(mut self) -> Vec<usize> {
        if self.done() {
            self.tokens.pop();
        }
        self.tokens
    }
}

struct Decoder<'a> {
    s2s: &'a Seq2Seq,
    memory: Tensor,
    mem_len: usize,
    allowed: Vec<usize>,
}

impl<'a> Decoder<'a> {
    fn new(s2s: &'a Seq2Seq, source: &[usize]) -> ModelResult<Self> {
        let src = Packed::single(&frame(source, s2s.model.config.max_seq_len));
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, &s2s.model, Binder::frozen(&s2s.model.store));
        let m = s2s.encode(&mut fwd, &src)?;
        let mut allowed = vec![SEP];
        allowed.extend(FIRST_CONTENT_ID..s2s.model.config.vocab_size);
        Ok(Decoder {
            s2s,
            memory: tape.value(m).clone(),
            mem_len: src.rows(),
            allowed,
        })
    }

    /// Next-token log-probabilities for each prefix.
    fn step(&self, prefixes: &[&[usize]]) -> ModelResult<Vec<Vec<f64>>> {
        let decs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let dec = Packed::from_sequences(&decs);
        let seg = Segment {
            start: 0,
            len: self.mem_len,
            valid: self.mem_len,
        };
        let mem = Packed {
            ids: vec![],
            positions: vec![],
            segments: vec![seg; decs.len()],
        };
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(
            &mut tape,
            &self.s2s.model,
            Binder::frozen(&self.s2s.model.store),
        );
        let memory = fwd.tape.constant(self.memory.clone());
        let h = self.s2s.decode_hidden(&mut fwd, &dec, memory, &mem)?;
        let last: Vec<usize> = dec.segments.iter().map(|s| s.start + s.len - 1).collect();
        let h = fwd.tape.select_rows(h, &last)?;
        let z = fwd.lm_logits(h)?;
        let z = tape.value(z);
        Ok((0..z.rows()).map(|r| log_softmax(z.row(r))).collect())
    }

    fn greedy(&self, max_len: usize) -> ModelResult<Hyp> {
        let mut h = Hyp {
            tokens: vec![],
            logp: 0.0,
        };
        while h.tokens.len() < max_len && !h.done() {
            let lp = self.step(&[&h.tokens])?.remove(0);
            let mut best: Option<(usize, f64)> = None;
            for &t in &self.allowed {
                let cand = h.logp + lp[t];
                if best.is_none_or(|(bt, bv)| cand > bv || (cand == bv && t < bt)) {
                    best = Some((t, cand));
                }
            }
            let (t, v) = best.expect("allowed set is non-empty");
            h.tokens.push(t);
            h.logp = v;
        }
        Ok(h)
    }

    fn beam(&self, beam_size: usize, max_len: usize) -> ModelResult<Hyp> {
        let mut alive = vec![Hyp {
            tokens: vec![],
            logp: 0.0,
        }];
        let mut finished = Vec::new();
        while !alive.is_empty() {
            let prefixes: Vec<&[usize]> = alive.iter().map(|h| h.tokens.as_slice()).collect();
            let lps = self.step(&prefixes)?;
            let mut cands = Vec::with_capacity(alive.len() * self.allowed.len());
            for (h, lp) in alive.iter().zip(&lps) {
                for &t in &self.allowed {
                    let mut tokens = h.tokens.clone();
                    tokens.push(t);
                    cands.push(Hyp {
                        tokens,
                        logp: h.logp + lp[t],
                    });
                }
            }
            cands.sort_by(Hyp::rank);
            cands.truncate(beam_size);
            alive.clear();
            for c in cands {
                if c.done() || c.tokens.len() >= max_len {
                    finished.push(c);
                } else {
                    alive.push(c);
                }
            }
        }
        finished.sort_by(Hyp::rank);
        Ok(finished.swap_remove(0))
    }
}

/// Greedy decode: at each step the allowed token (content or SEP) with the
/// highest cumulative log-probability, ties to the lowest id.
pub fn greedy_decode(s2s: &Seq2Seq, source: &[usize], max_len: usize) -> ModelResult<Vec<usize>> {
    let max_len = max_len.min(s2s.model.config.max_seq_len);
    if max_len == 0 {
        return Ok(vec![]);
    }
    Ok(Decoder::new(s2s, source)?.greedy(max_len)?.output())
}

/// Beam search over length-normalized log-probability, stopping at SEP or
/// `max_len` tokens. Never returns a hypothesis scoring below greedy's.
/// The trailing SEP is stripped.
pub fn beam_decode(
    s2s: &Seq2Seq,
    source: &[usize],
    beam_size: usize,
    max_len: usize,
) -> ModelResult<Vec<usize>> {
    if beam_size == 0 {
        return Err(ModelError::Config("beam_size must be at least 1".into()));
    }
    let max_len = max_len.min(s2s.model.config.max_seq_len);
    if max_len == 0 {
        return Ok(vec![]);
    }
    let dec = Decoder::new(s2s, source)?;
    let beam = dec.beam(beam_size, max_len)?;
    if beam_size == 1 {
        return Ok(beam.output());
    }
    let greedy = dec.greedy(max_len)?;
    Ok(match beam.rank(&greedy) {
        Ordering::Greater => greedy.output(),
        _ => beam.output(),
    })
}

/// Length-normalized score of `tokens` followed by SEP, as ranked by the
/// beam. `tokens` excludes SEP.
pub fn sequence_score(s2s: &Seq2Seq, source: &[usize], tokens: &[usize]) -> ModelResult<f64> {
    let dec = Decoder::new(s2s, source)?;
    let mut full = tokens.to_vec();
    full.push(SEP);
    let mut logp = 0.0;
    for i in 0..full.len() {
        logp += dec.step(&[&full[..i]])?[0][full[i]];
    }
    Ok(logp / full.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    /// Dev loss and token accuracy interval; 0 disables.
    pub eval_every: u64,
    /// Dev BLEU interval; 0 disables.
    pub bleu_every: u64,
    pub bleu_samples: usize,
    pub beam_size: usize,
    pub max_decode_len: usize,
    /// Stop once dev token accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for MtConfig {
    fn default() -> Self {
        MtConfig {
            steps: 1000,
            batch_size: 16,
            warmup_steps: 50,
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            eval_every: 50,
            bleu_every: 0,
            bleu_samples: 100,
            beam_size: 5,
            max_decode_len: 32,
            stop_at_accuracy: None,
        }
    }
}

pub const MT_METRICS_HEADER: &str = "step\tloss\tlr\tdev_loss\tdev_token_acc\tdev_bleu";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub dev: Option<MtEval>,
    pub dev_bleu: Option<f64>,
}

impl MtRow {
    /// Empty cells where no evaluation ran.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.loss,
            self.lr,
            opt(self.dev.map(|d| d.loss)),
            opt(self.dev.map(|d| d.token_accuracy)),
            opt(self.dev_bleu)
        )
    }
}

/// Corpus BLEU of beam translations of the first `n` dev sources.
pub fn dev_bleu(
    s2s: &Seq2Seq,
    dev: &ParallelCorpus,
    n: usize,
    beam_size: usize,
    max_len: usize,
) -> Result<f64> {
    let n = n.min(dev.len());
    if n == 0 {
        return Ok(0.0);
    }
    let hyps = (0..n)
        .map(|i| beam_decode(s2s, &dev.src[i], beam_size, max_len))
        .collect::<ModelResult<Vec<_>>>()?;
    let r = corpus_bleu(&hyps, &dev.tgt[..n], 4, true)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(r.score)
}

/// Teacher-forced fine-tuning of every parameter. Batches are drawn
/// uniformly from `train` by a `(seed, step)` stream.
pub fn finetune_mt(
    s2s: &mut Seq2Seq,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    cfg: &MtConfig,
    seed: u64,
    mut sink: impl FnMut(&MtRow),
) -> Result<Vec<MtRow>> {
    if train.is_empty() {
        return Err(TrainError::Config("empty training corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    let sched = Schedule::new(cfg.adam.lr, cfg.warmup_steps.min(cfg.steps), cfg.steps)?;
    let mut adam = AdamState::new(&s2s.model.store);
    let max = s2s.model.config.max_seq_len;
    let mut rows = Vec::with_capacity(cfg.steps as usize);
    for t in 0..cfg.steps {
        let mut rng = step_rng(seed, t, 2);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..train.len()))
            .collect();
        let batch = MtBatch::new(
            idx.iter()
                .map(|&i| (train.src[i].as_slice(), train.tgt[i].as_slice())),
            max,
        );
        let mut tape = Tape::new();
        let mut drop_rng = step_rng(seed, t, 1);
        let mut fwd = Forward::train(
            &mut tape,
            &s2s.model,
            Binder::all(&s2s.model.store),
            &mut drop_rng,
        );
        let loss = mt_loss(&mut fwd, s2s, &batch)?;
        let loss_v = tape.value(loss).item();
        let lr = lr_at(t + 1, &sched);
        let storage = s2s.model.config.storage;
        apply_update(
            &mut s2s.model.store,
            tape,
            loss,
            &mut adam,
            &cfg.adam,
            lr,
            storage,
        )?;
        let step = t + 1;
        let due = |every: u64| every > 0 && (step % every == 0 || step == cfg.steps);
        let dev_eval = if due(cfg.eval_every) && !dev.is_empty() {
            Some(mt_eval(s2s, dev)?)
        } else {
            None
        };
        let bleu = if due(cfg.bleu_every) {
            Some(dev_bleu(
                s2s,
                dev,
                cfg.bleu_samples,
                cfg.beam_size,
                cfg.max_decode_len,
            )?)
        } else {
            None
        };
        let row = MtRow {
            step,
            loss: loss_v,
            lr,
            dev: dev_eval,
            dev_bleu: bleu,
        };
        sink(&row);
        rows.push(row);
        if let (Some(target), Some(d)) = (cfg.stop_at_accuracy, dev_eval) {
            if d.token_accuracy >= target {
                break;
            }
        }
    }
    Ok(rows)
}

/// First step whose dev token accuracy reached `target`.
pub fn steps_to_accuracy(rows: &[MtRow], target: f64) -> Option<u64> {
    rows.iter()
        .find(|r| r.dev.is_some_and(|d| d.token_accuracy >= target))
        .map(|r| r.step)
}
