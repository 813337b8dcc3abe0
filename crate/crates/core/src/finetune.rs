//! Sequence classification on top of the encoder.
//!
//! Plug-Out pools the final H layer at BOS. Plug-In additionally runs the
//! S-stream against the paired sequence and classifies from the
//! concatenation `[H : S]` of the pooled vectors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::AdamState;
use crate::data::{frame, step_rng, SyntheticConfig, FIRST_CONTENT_ID};
use crate::model::{Forward, ModelError, Packed, Veco};
use crate::params::{Binder, ParamId};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{apply_update, lr_at, AdamConfig, Result, Schedule, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClsMode {
    PlugOut,
    PlugIn,
}

impl FromStr for ClsMode {
    type Err = ModelError;
    fn from_str(s: &str) -> std::result::Result<Self, ModelError> {
        match s {
            "plug-out" => Ok(ClsMode::PlugOut),
            "plug-in" => Ok(ClsMode::PlugIn),
            _ => Err(ModelError::Config(format!(
                "unknown classifier mode `{s}` (plug-out or plug-in)"
            ))),
        }
    }
}

impl fmt::Display for ClsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClsMode::PlugOut => "plug-out",
            ClsMode::PlugIn => "plug-in",
        })
    }
}

pub const HEAD_WEIGHT: &str = "cls.weight";
pub const HEAD_BIAS: &str = "cls.bias";

/// Linear head `[in, labels]` over the pooled representation; `in` is
/// `d_model` for Plug-Out and `2 * d_model` for Plug-In.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub mode: ClsMode,
    pub num_labels: usize,
}

/// An encoder with a classification head stored alongside its parameters.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub model: Veco,
    pub head: ClassifierHead,
}

impl Classifier {
    /// Adds a fresh head (N(0, init_std) weights, zero bias) to `model`.
    /// Plug-Out drops the cross-attention parameters entirely.
    pub fn new(
        model: Veco,
        mode: ClsMode,
        num_labels: usize,
        seed: u64,
    ) -> std::result::Result<Self, ModelError> {
        let mut model = match mode {
            ClsMode::PlugOut => model.plugged_out()?,
            ClsMode::PlugIn if !model.has_cross() => return Err(ModelError::NoCrossAttention),
            ClsMode::PlugIn => model,
        };
        let d = model.config.d_model;
        let width = if mode == ClsMode::PlugIn { 2 * d } else { d };
        let normal = Normal::new(0.0, model.config.init_std)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..width * num_labels)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let mut w = Tensor::new(vec![width, num_labels], w)?;
        if model.config.storage == crate::model::Precision::F32 {
            w.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let weight = model.store.insert(HEAD_WEIGHT, w);
        let bias = model.store.insert(HEAD_BIAS, Tensor::zeros(&[num_labels]));
        Ok(Classifier {
            model,
            head: ClassifierHead {
                weight,
                bias,
                mode,
                num_labels,
            },
        })
    }

    fn head(&self, fwd: &mut Forward, pooled: Var) -> std::result::Result<Var, ModelError> {
        let w = fwd.bind.var(fwd.tape, self.head.weight);
        let b = fwd.bind.var(fwd.tape, self.head.bias);
        let z = fwd.tape.matmul(pooled, w)?;
        Ok(fwd.tape.add_bias(z, b)?)
    }

    /// `[B, labels]` logits for the x side, plus the y side in Plug-In mode.
    /// Sequences are framed token rows beginning with BOS.
    pub fn logits(
        &self,
        fwd: &mut Forward,
        xs: &[Vec<usize>],
        ys: Option<&[Vec<usize>]>,
    ) -> std::result::Result<(Var, Option<Var>), ModelError> {
        let px = Packed::from_sequences(xs);
        let bos_x: Vec<usize> = px.segments.iter().map(|s| s.start).collect();
        match self.head.mode {
            ClsMode::PlugOut => {
                let h = fwd.encode_h(&px)?;
                let pooled = fwd.tape.select_rows(h.last(), &bos_x)?;
                Ok((self.head(fwd, pooled)?, None))
            }
            ClsMode::PlugIn => {
                let ys = ys.ok_or(ModelError::MissingPair)?;
                if ys.len() != xs.len() {
                    return Err(ModelError::PairCount {
                        own: xs.len(),
                        paired: ys.len(),
                    });
                }
                let py = Packed::from_sequences(ys);
                let bos_y: Vec<usize> = py.segments.iter().map(|s| s.start).collect();
                let st = fwd.encode_pair(&px, &py)?;
                let mut side =
                    |h: Var, s: Var, rows: &[usize]| -> std::result::Result<Var, ModelError> {
                        let hp = fwd.tape.select_rows(h, rows)?;
                        let sp = fwd.tape.select_rows(s, rows)?;
                        let cat = fwd.tape.concat_cols(&[hp, sp])?;
                        self.head(fwd, cat)
                    };
                let lx = side(st.h_x.last(), st.s_x.last(), &bos_x)?;
                let ly = side(st.h_y.last(), st.s_y.last(), &bos_y)?;
                Ok((lx, Some(ly)))
            }
        }
    }
}

fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Label distribution from the encoder alone. Cross-attention parameters
/// are never read.
pub fn plugout_classify(
    clf: &Classifier,
    tokens: &[usize],
) -> std::result::Result<Vec<f64>, ModelError> {
    if clf.head.mode != ClsMode::PlugOut {
        return Err(ModelError::Config(
            "classifier head was built for plug-in".into(),
        ));
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, &clf.model, Binder::frozen(&clf.model.store));
    let (lx, _) = clf.logits(&mut fwd, &[tokens.to_vec()], None)?;
    Ok(softmax_rows(tape.value(lx)).remove(0))
}

/// Label distributions for both sides of a pair. Without a pair the call
/// fails and points at Plug-Out mode.
pub fn plugin_classify(
    clf: &Classifier,
    x: &[usize],
    y: Option<&[usize]>,
) -> std::result::Result<(Vec<f64>, Vec<f64>), ModelError> {
    let y = y.ok_or(ModelError::MissingPair)?;
    if clf.head.mode != ClsMode::PlugIn {
        return Err(ModelError::Config(
            "classifier head was built for plug-out".into(),
        ));
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, &clf.model, Binder::frozen(&clf.model.store));
    let (lx, ly) = clf.logits(&mut fwd, &[x.to_vec()], Some(&[y.to_vec()]))?;
    let px = softmax_rows(tape.value(lx)).remove(0);
    let py = softmax_rows(tape.value(ly.expect("plug-in yields both sides"))).remove(0);
    Ok((px, py))
}

/// One labeled example; `y` and `label_y` are used in Plug-In mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClsExample {
    pub x: Vec<usize>,
    pub y: Option<Vec<usize>>,
    pub label: usize,
    pub label_y: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
}

impl Default for ClsConfig {
    fn default() -> Self {
        ClsConfig {
            steps: 300,
            batch_size: 16,
            warmup_steps: 30,
            adam: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
        }
    }
}

pub const CLS_METRICS_HEADER: &str = "step\tloss\tlr";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

fn batch_of(
    examples: &[ClsExample],
    idx: &[usize],
) -> (
    Vec<Vec<usize>>,
    Option<Vec<Vec<usize>>>,
    Vec<usize>,
    Vec<usize>,
) {
    let xs = idx.iter().map(|&i| examples[i].x.clone()).collect();
    let ys: Option<Vec<Vec<usize>>> = idx.iter().map(|&i| examples[i].y.clone()).collect();
    let lx = idx.iter().map(|&i| examples[i].label).collect();
    let ly = idx.iter().filter_map(|&i| examples[i].label_y).collect();
    (xs, ys, lx, ly)
}

/// Trains every parameter of the classifier with batches drawn uniformly by
/// a `(seed, step)` stream.
pub fn train_classifier(
    clf: &mut Classifier,
    examples: &[ClsExample],
    cfg: &ClsConfig,
    seed: u64,
    mut sink: impl FnMut(&ClsRow),
) -> Result<Vec<ClsRow>> {
    if examples.is_empty() {
        return Err(TrainError::Config("no classification examples".into()));
    }
    let sched = Schedule::new(cfg.adam.lr, cfg.warmup_steps.min(cfg.steps), cfg.steps)?;
    let mut adam = AdamState::new(&clf.model.store);
    let mut rows = Vec::with_capacity(cfg.steps as usize);
    for t in 0..cfg.steps {
        let mut rng = step_rng(seed, t, 3);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..examples.len()))
            .collect();
        let (xs, ys, lx, ly) = batch_of(examples, &idx);
        let mut tape = Tape::new();
        let mut drop_rng = step_rng(seed, t, 4);
        let mut fwd = Forward::train(
            &mut tape,
            &clf.model,
            Binder::all(&clf.model.store),
            &mut drop_rng,
        );
        let (zx, zy) = clf.logits(&mut fwd, &xs, ys.as_deref())?;
        let mut loss = fwd.tape.cross_entropy(zx, &lx)?;
        if let (Some(zy), true) = (zy, ly.len() == lx.len()) {
            let l2 = fwd.tape.cross_entropy(zy, &ly)?;
            let sum = fwd.tape.add(loss, l2)?;
            loss = fwd.tape.scale(sum, 0.5)?;
        }
        let loss_v = tape.value(loss).item();
        let lr = lr_at(t + 1, &sched);
        let storage = clf.model.config.storage;
        apply_update(
            &mut clf.model.store,
            tape,
            loss,
            &mut adam,
            &cfg.adam,
            lr,
            storage,
        )?;
        let row = ClsRow {
            step: t + 1,
            loss: loss_v,
            lr,
        };
        sink(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Fraction of x-side labels predicted correctly (argmax, ties to the
/// lowest label).
pub fn classifier_accuracy(
    clf: &Classifier,
    examples: &[ClsExample],
) -> std::result::Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in (0..examples.len()).collect::<Vec<_>>().chunks(64) {
        let (xs, ys, lx, _) = batch_of(examples, chunk);
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, &clf.model, Binder::frozen(&clf.model.store));
        let (zx, _) = clf.logits(&mut fwd, &xs, ys.as_deref())?;
        let z = tape.value(zx);
        for (r, &label) in lx.iter().enumerate() {
            let row = z.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn parity(sentence: &[usize]) -> usize {
    (sentence[0] - FIRST_CONTENT_ID) % 2
}

/// Single-sequence task: label is the parity of the first content token.
pub fn parity_task(
    syn: &SyntheticConfig,
    n: usize,
    max_seq_len: usize,
    seed: u64,
) -> Vec<ClsExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = random_sentence(syn, &mut rng);
            ClsExample {
                label: parity(&s),
                x: frame(&s, max_seq_len),
                y: None,
                label_y: None,
            }
        })
        .collect()
}

/// Paired task whose label is parity(x) XOR parity(y), shared by both
/// sides. Every x occurs once with an even-parity y and once with an odd
/// one, so x alone carries no information about the label.
pub fn xor_task(
    syn: &SyntheticConfig,
    n_sources: usize,
    max_seq_len: usize,
    seed: u64,
) -> Vec<ClsExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_sources);
    for _ in 0..n_sources {
        let x = random_sentence(syn, &mut rng);
        for want in 0..2 {
            let mut y = random_sentence(syn, &mut rng);
            if parity(&y) != want {
                y[0] = if y[0] + 1 < syn.vocab_end() {
                    y[0] + 1
                } else {
                    y[0] - 1
                };
            }
            let label = parity(&x) ^ want;
            out.push(ClsExample {
                x: frame(&x, max_seq_len),
                y: Some(frame(&y, max_seq_len)),
                label,
                label_y: Some(label),
            });
        }
    }
    out
}

fn random_sentence(syn: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(syn.min_len..=syn.max_len);
    (0..len)
        .map(|_| rng.gen_range(syn.vocab_start..syn.vocab_end()))
        .collect()
}
