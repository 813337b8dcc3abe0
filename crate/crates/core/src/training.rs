//! Optimizer, learning-rate schedule and the two-phase pre-training loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{AdamState, Checkpoint, CheckpointError, CheckpointHeader};
use crate::data::{
    next_batch, step_rng, BatchConfig, BatchKind, DataError, IteratorState, PairBatch,
    PretrainCorpora,
};
use crate::model::{Forward, ModelError, Precision, Veco};
use crate::objective::{ca_mlm_loss, tlm_loss, Objective};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGrad { param: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl TrainError {
    /// NaN/Inf anywhere in the forward or backward pass.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGrad { .. }
                | TrainError::NonFiniteLoss { .. }
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Adam hyperparameters. Weight decay is decoupled from the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Linear warmup to `peak_lr`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        Ok(Schedule {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }
}

pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step >= s.total_steps {
        return 0.0;
    }
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    s.peak_lr * (s.total_steps - step) as f64 / (s.total_steps - s.warmup_steps) as f64
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One bias-corrected Adam update of the parameters listed in `grads` at
/// learning rate `lr`. Parameters without a gradient are left untouched. A
/// non-finite gradient aborts before anything changes.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Vec<f64>)],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(TrainError::NonFiniteGrad {
            param: store.name(*id).to_string(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(*id).data_mut();
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p[k]);
        }
    }
    Ok(())
}

/// Backpropagates `loss`, clips, and applies one Adam update to every
/// parameter that received a gradient. Returns the pre-clip gradient norm.
pub fn apply_update(
    store: &mut ParamStore,
    mut tape: Tape,
    loss: Var,
    adam: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
    storage: Precision,
) -> Result<f64> {
    if !tape.value(loss).item().is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: adam.step + 1,
        });
    }
    tape.backward(loss)?;
    let mut grads: Vec<(ParamId, Vec<f64>)> = tape
        .param_grads()
        .into_iter()
        .map(|(id, g)| (id, g.to_vec()))
        .collect();
    drop(tape);
    let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    adam_step(store, &grads, adam, cfg, lr)?;
    if storage == Precision::F32 {
        store.round_to_f32();
        adam.round_to_f32();
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Steps with only the cross-attention parameters trainable.
    pub phase1_steps: u64,
    /// Joint steps that follow.
    pub phase2_steps: u64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub batch: BatchConfig,
    pub objective: Objective,
    /// Add the TLM loss on bilingual steps.
    pub tlm: bool,
    /// Checkpoint interval used by drivers; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            phase1_steps: 100,
            phase2_steps: 1000,
            warmup_steps: 200,
            adam: AdamConfig::default(),
            batch: BatchConfig::default(),
            objective: Objective::CaMlm,
            tlm: true,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(
            self.adam.lr,
            self.warmup_steps.min(self.total_steps()),
            self.total_steps(),
        )
    }
}

pub const METRICS_HEADER: &str =
    "step\tphase\tkind\tx_self\tx_cross\ty_self\ty_cross\ttlm\ttotal\tlr\tgrad_norm";

/// One pre-training step's losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Number of completed steps including this one.
    pub step: u64,
    pub phase: u8,
    pub kind: BatchKind,
    pub terms: [f64; 4],
    pub tlm: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl MetricsRow {
    /// Pair-loss total without the TLM term.
    pub fn pair_total(&self) -> f64 {
        self.terms.iter().sum()
    }

    /// Tab-separated with shortest round-trip float formatting.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\t{}\t{}", self.step, self.phase, self.kind);
        for v in self
            .terms
            .iter()
            .chain([&self.tlm, &self.total, &self.lr, &self.grad_norm])
        {
            write!(s, "\t{v}").unwrap();
        }
        s
    }
}

/// Pre-training state: model, optimizer moments and batch position.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub model: Veco,
    pub adam: AdamState,
    pub iter: IteratorState,
    pub cfg: PretrainConfig,
    pub seed: u64,
}

impl Pretrainer {
    pub fn new(
        model: Veco,
        cfg: PretrainConfig,
        corpora: &PretrainCorpora,
        seed: u64,
    ) -> Result<Self> {
        cfg.schedule()?;
        if cfg.objective == Objective::CaMlm && !model.has_cross() {
            return Err(ModelError::NoCrossAttention.into());
        }
        Ok(Pretrainer {
            adam: AdamState::new(&model.store),
            iter: IteratorState::new(seed, corpora),
            model,
            cfg,
            seed,
        })
    }

    /// Resumes from a checkpoint holding optimizer and iterator state.
    pub fn from_checkpoint(ckpt: Checkpoint, cfg: PretrainConfig) -> Result<Self> {
        let iter = ckpt.header.iterator.clone().ok_or_else(|| {
            TrainError::Config("checkpoint has no iterator state to resume from".into())
        })?;
        let model = ckpt.model()?;
        let adam = ckpt.adam.unwrap_or_else(|| AdamState::new(&model.store));
        cfg.schedule()?;
        Ok(Pretrainer {
            seed: ckpt.header.seed,
            model,
            adam,
            iter,
            cfg,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.iter.step
    }

    pub fn is_done(&self) -> bool {
        self.iter.step >= self.cfg.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                model: self.model.config.clone(),
                step: self.iter.step,
                seed: self.seed,
                storage: self.model.config.storage,
                adam_step: Some(self.adam.step),
                iterator: Some(self.iter.clone()),
                extra: serde_json::to_value(&self.cfg).unwrap_or_default(),
            },
            params: self.model.store.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    /// Runs one step. On error nothing is updated.
    pub fn step(&mut self, corpora: &PretrainCorpora) -> Result<MetricsRow> {
        let t = self.iter.step;
        let phase = if t < self.cfg.phase1_steps { 1 } else { 2 };
        let mut iter = self.iter.clone();
        let batch = next_batch(corpora, &self.cfg.batch, &mut iter)?;
        let mask: Vec<bool> = if phase == 1 {
            self.model.cross_only_mask()
        } else {
            vec![true; self.model.store.len()]
        };
        let mut rng = step_rng(self.seed, t, 1);
        let mut tape = Tape::new();
        let mut fwd = Forward::train(
            &mut tape,
            &self.model,
            Binder::masked(&self.model.store, &mask),
            &mut rng,
        );
        let pair = ca_mlm_loss(&mut fwd, &batch.pair, self.cfg.objective)?;
        let mut total = pair.total;
        let mut tlm = 0.0;
        if let (Some(rows), true) = (&batch.tlm, self.cfg.tlm) {
            let l = tlm_loss(&mut fwd, rows)?;
            tlm = fwd.tape.value(l).item();
            total = fwd.tape.add(total, l)?;
        }
        let terms = pair.values(&tape);
        let total_v = tape.value(total).item();
        if !total_v.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: t + 1 });
        }
        tape.backward(total)?;
        let mut grads: Vec<(ParamId, Vec<f64>)> = tape
            .param_grads()
            .into_iter()
            .map(|(id, g)| (id, g.to_vec()))
            .collect();
        drop(tape);
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.adam.clip_norm);
        let lr = lr_at(t + 1, &self.cfg.schedule()?);
        let mut store = self.model.store.clone();
        let mut adam = self.adam.clone();
        adam_step(&mut store, &grads, &mut adam, &self.cfg.adam, lr)?;
        if self.model.config.storage == Precision::F32 {
            store.round_to_f32();
            adam.round_to_f32();
        }
        self.model.store = store;
        self.adam = adam;
        self.iter = iter;
        Ok(MetricsRow {
            step: t + 1,
            phase,
            kind: batch.kind,
            terms,
            tlm,
            total: total_v,
            lr,
            grad_norm,
        })
    }

    /// Runs up to `steps` further steps (stopping at the configured total),
    /// handing each row to `sink`.
    pub fn run(
        &mut self,
        corpora: &PretrainCorpora,
        steps: u64,
        mut sink: impl FnMut(&MetricsRow, &Pretrainer) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        for _ in 0..steps {
            if self.is_done() {
                break;
            }
            let row = self.step(corpora)?;
            sink(&row, self)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Runs both phases from a fresh optimizer and returns the final checkpoint
/// with the metrics of every step.
pub fn pretrain(
    model: Veco,
    corpora: &PretrainCorpora,
    cfg: PretrainConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let mut t = Pretrainer::new(model, cfg, corpora, seed)?;
    let n = t.cfg.total_steps();
    let rows = t.run(corpora, n, |_, _| Ok(()))?;
    Ok((t.checkpoint(), rows))
}

/// Mean of the four pair-loss terms over fixed batches, dropout off.
pub fn evaluate_pair_loss(
    model: &Veco,
    batches: &[PairBatch],
    objective: Objective,
) -> Result<[f64; 4]> {
    let mut acc = [0.0; 4];
    for b in batches {
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, model, Binder::frozen(&model.store));
        let l = ca_mlm_loss(&mut fwd, b, objective)?;
        for (a, v) in acc.iter_mut().zip(l.values(&tape)) {
            *a += v / batches.len() as f64;
        }
    }
    Ok(acc)
}
