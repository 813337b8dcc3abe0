//! Pre-training losses and attention inspection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{MaskedBatch, PairBatch, Vocabulary};
use crate::model::{Forward, ModelError, Packed, Result, Veco};
use crate::params::Binder;
use crate::tensor::{Tape, Tensor, Var};

/// Which terms the pair loss includes. `Mlm` keeps only the two H-stream
/// terms, giving an encoder trained without the S-stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    CaMlm,
    Mlm,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::CaMlm => "ca-mlm",
            Objective::Mlm => "mlm",
        })
    }
}

/// Names of the four pair-loss terms, in the order of [`PairLoss::terms`].
pub const TERM_NAMES: [&str; 4] = ["x_self", "x_cross", "y_self", "y_cross"];

/// Total pair loss and its four terms: x from x̂, x from (ŷ, x̂), y from ŷ,
/// y from (x̂, ŷ).
#[derive(Debug, Clone, Copy)]
pub struct PairLoss {
    pub total: Var,
    pub terms: [Var; 4],
}

impl PairLoss {
    pub fn values(&self, tape: &Tape) -> [f64; 4] {
        self.terms.map(|t| tape.value(t).item())
    }
}

/// Packs a batch without padding; returns packed row indices and targets of
/// every masked position.
pub fn pack_masked(batch: &MaskedBatch) -> (Packed, Vec<usize>, Vec<usize>) {
    let seqs: Vec<&[usize]> = batch.rows.iter().map(|r| r.tokens.as_slice()).collect();
    let packed = Packed::from_sequences(&seqs);
    let mut rows = Vec::with_capacity(batch.num_targets());
    let mut targets = Vec::with_capacity(batch.num_targets());
    for (row, seg) in batch.rows.iter().zip(&packed.segments) {
        rows.extend(row.positions.iter().map(|&p| seg.start + p));
        targets.extend_from_slice(&row.targets);
    }
    (packed, rows, targets)
}

/// Sum of the masked-token cross-entropies of both streams on both sides.
/// Each term averages over that side's masked positions and is 0 when the
/// side has none.
pub fn ca_mlm_loss(fwd: &mut Forward, pair: &PairBatch, objective: Objective) -> Result<PairLoss> {
    let (px, rx, tx) = pack_masked(&pair.x);
    let (py, ry, ty) = pack_masked(&pair.y);
    let terms = match objective {
        Objective::CaMlm => {
            let st = fwd.encode_pair(&px, &py)?;
            [
                fwd.masked_lm_loss(st.h_x.last(), &rx, &tx)?,
                fwd.masked_lm_loss(st.s_x.last(), &rx, &tx)?,
                fwd.masked_lm_loss(st.h_y.last(), &ry, &ty)?,
                fwd.masked_lm_loss(st.s_y.last(), &ry, &ty)?,
            ]
        }
        Objective::Mlm => {
            let hx = fwd.encode_h(&px)?;
            let hy = fwd.encode_h(&py)?;
            let zero = fwd.tape.constant(Tensor::scalar(0.0));
            [
                fwd.masked_lm_loss(hx.last(), &rx, &tx)?,
                zero,
                fwd.masked_lm_loss(hy.last(), &ry, &ty)?,
                zero,
            ]
        }
    };
    let total = fwd.tape.add_all(&terms)?;
    Ok(PairLoss { total, terms })
}

/// The pair loss with both cross-attention memories supplied as constants.
/// Given the pair's own final H layers this equals [`ca_mlm_loss`] in value
/// and gradient; finite-difference checks hold the memories fixed this way
/// to reproduce the stop-gradient.
pub fn ca_mlm_loss_with_memory(
    fwd: &mut Forward,
    pair: &PairBatch,
    mem_x: &Tensor,
    mem_y: &Tensor,
) -> Result<PairLoss> {
    let (px, rx, tx) = pack_masked(&pair.x);
    let (py, ry, ty) = pack_masked(&pair.y);
    let x0 = fwd.embed(&px)?;
    let y0 = fwd.embed(&py)?;
    let h_x = fwd.encode_h_from(x0, &px)?;
    let h_y = fwd.encode_h_from(y0, &py)?;
    let mx = fwd.tape.constant(mem_x.clone());
    let my = fwd.tape.constant(mem_y.clone());
    let s_x = fwd.encode_s_from(x0, &px, my, &py)?;
    let s_y = fwd.encode_s_from(y0, &py, mx, &px)?;
    let terms = [
        fwd.masked_lm_loss(h_x.last(), &rx, &tx)?,
        fwd.masked_lm_loss(s_x.last(), &rx, &tx)?,
        fwd.masked_lm_loss(h_y.last(), &ry, &ty)?,
        fwd.masked_lm_loss(s_y.last(), &ry, &ty)?,
    ];
    let total = fwd.tape.add_all(&terms)?;
    Ok(PairLoss { total, terms })
}

/// Final H layers of both sides of `pair` under `model`.
pub fn pair_memories(model: &Veco, pair: &PairBatch) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, model, Binder::frozen(&model.store));
    let hx = fwd.encode_h(&pack_masked(&pair.x).0)?.last();
    let hy = fwd.encode_h(&pack_masked(&pair.y).0)?.last();
    Ok((tape.value(hx).clone(), tape.value(hy).clone()))
}

/// Masked-token cross-entropy of the H-stream over `[BOS, x…, SEP, y…, SEP]`
/// rows, positions running continuously across the separator.
pub fn tlm_loss(fwd: &mut Forward, batch: &MaskedBatch) -> Result<Var> {
    let (packed, rows, targets) = pack_masked(batch);
    let h = fwd.encode_h(&packed)?;
    fwd.masked_lm_loss(h.last(), &rows, &targets)
}

/// Attention sublayer selected for export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnStream {
    HSelf,
    SSelf,
    SCross,
}

impl FromStr for AttnStream {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h-self" => Ok(AttnStream::HSelf),
            "s-self" => Ok(AttnStream::SSelf),
            "s-cross" => Ok(AttnStream::SCross),
            _ => Err(ModelError::InvalidStream(s.to_string())),
        }
    }
}

impl fmt::Display for AttnStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnStream::HSelf => "h-self",
            AttnStream::SSelf => "s-self",
            AttnStream::SCross => "s-cross",
        })
    }
}

/// Head-averaged attention weights with token labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Query tokens.
    pub rows: Vec<String>,
    /// Key tokens.
    pub cols: Vec<String>,
    /// `[rows, cols]`.
    pub weights: Tensor,
}

impl AttentionMap {
    /// Header of key tokens, then one line per query token, 6-decimal
    /// tab-separated weights.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for c in &self.cols {
            s.push('\t');
            s.push_str(c);
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(r);
            for w in self.weights.row(i) {
                s.push_str(&format!("\t{w:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Attention of `x` at `layer` for the chosen stream. The S-streams need the
/// paired sequence `y`; `SCross` has shape `[len(x), len(y)]`.
pub fn export_attention(
    model: &Veco,
    vocab: &Vocabulary,
    x: &[usize],
    y: Option<&[usize]>,
    layer: usize,
    stream: AttnStream,
) -> Result<AttentionMap> {
    let layers = model.config.num_layers;
    if layer >= layers {
        return Err(ModelError::LayerOutOfRange {
            index: layer,
            layers,
        });
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::eval(&mut tape, model, Binder::frozen(&model.store));
    let px = Packed::single(x);
    let (core, keys) = match stream {
        AttnStream::HSelf => (fwd.encode_h(&px)?.self_attn[layer], x),
        AttnStream::SSelf | AttnStream::SCross => {
            let y = y.ok_or(ModelError::MissingPair)?;
            let py = Packed::single(y);
            let hy = fwd.encode_h(&py)?;
            let mem = fwd.tape.stop_gradient(hy.last());
            let s = fwd.encode_s(&px, mem, &py)?;
            if stream == AttnStream::SSelf {
                (s.self_attn[layer], x)
            } else {
                (s.cross_attn[layer], y)
            }
        }
    };
    let w = &tape.attention_weights(core).expect("attention node")[0];
    let (heads, lq, lk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let mut avg = vec![0.0; lq * lk];
    for h in 0..heads {
        for (a, b) in avg
            .iter_mut()
            .zip(&w.data()[h * lq * lk..(h + 1) * lq * lk])
        {
            *a += b;
        }
    }
    avg.iter_mut().for_each(|a| *a /= heads as f64);
    let label = |ids: &[usize]| ids.iter().map(|&i| vocab.token(i).to_string()).collect();
    Ok(AttentionMap {
        rows: label(x),
        cols: label(keys),
        weights: Tensor::new(vec![lq, lk], avg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MaskedRow, MASK};
    use crate::model::{ModelConfig, Precision};

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 16,
            max_seq_len: 12,
            dropout: 0.0,
            init_std: 0.3,
            storage: Precision::F64,
            ..Default::default()
        }
    }

    fn row(tokens: &[usize], positions: &[usize]) -> MaskedRow {
        let mut r = MaskedRow::unmasked(tokens.to_vec());
        for &p in positions {
            r.positions.push(p);
            r.targets.push(tokens[p]);
            r.tokens[p] = MASK;
        }
        r
    }

    fn pair() -> PairBatch {
        PairBatch {
            x: MaskedBatch {
                rows: vec![row(&[1, 7, 8, 9, 2], &[2]), row(&[1, 10, 2], &[1])],
            },
            y: MaskedBatch {
                rows: vec![row(&[1, 9, 8, 7, 2], &[1, 3]), row(&[1, 11, 12, 2], &[2])],
            },
        }
    }

    #[test]
    fn uniform_outputs_give_ln_v_per_term() {
        let mut m = Veco::init(cfg(), 1).unwrap();
        let keep = [m.tok_embed, m.pos_embed];
        for id in m.store.ids().collect::<Vec<_>>() {
            if !keep.contains(&id) {
                m.store
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, &m, Binder::all(&m.store));
        let loss = ca_mlm_loss(&mut fwd, &pair(), Objective::CaMlm).unwrap();
        for t in loss.values(&tape) {
            assert!((t - 16f64.ln()).abs() < 1e-12, "{t}");
        }
    }

    #[test]
    fn no_masks_give_zero() {
        let m = Veco::init(cfg(), 1).unwrap();
        let p = PairBatch {
            x: MaskedBatch {
                rows: vec![MaskedRow::unmasked(vec![1, 7, 2])],
            },
            y: MaskedBatch {
                rows: vec![MaskedRow::unmasked(vec![1, 8, 2])],
            },
        };
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, &m, Binder::all(&m.store));
        let loss = ca_mlm_loss(&mut fwd, &p, Objective::CaMlm).unwrap();
        assert_eq!(tape.value(loss.total).item(), 0.0);
        let mut tape = Tape::new();
        let mut fwd = Forward::eval(&mut tape, &m, Binder::all(&m.store));
        let l = tlm_loss(&mut fwd, &p.x).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn mlm_objective_drops_cross_terms() {
        let m = Veco::init(cfg(), 2).unwrap();
        let run = |obj| {
            let mut tape = Tape::new();
            let mut fwd = Forward::eval(&mut tape, &m, Binder::all(&m.store));
            let l = ca_mlm_loss(&mut fwd, &pair(), obj).unwrap();
            l.values(&tape)
        };
        let full = run(Objective::CaMlm);
        let mlm = run(Objective::Mlm);
        assert_eq!(mlm[0], full[0]);
        assert_eq!(mlm[2], full[2]);
        assert_eq!((mlm[1], mlm[3]), (0.0, 0.0));
    }

    #[test]
    fn export_shapes_and_labels() {
        let m = Veco::init(cfg(), 3).unwrap();
        let v = Vocabulary::synthetic(16);
        let x = [1, 7, 8, 2];
        let y = [1, 9, 2];
        let a = export_attention(&m, &v, &x, Some(&y), 1, AttnStream::SCross).unwrap();
        assert_eq!(a.weights.shape(), &[4, 3]);
        assert_eq!(a.cols, vec!["<s>", "w9", "</s>"]);
        let tsv = a.to_tsv();
        assert_eq!(tsv.lines().count(), 5);
        assert!(tsv.starts_with("\t<s>\tw9\t</s>\n<s>\t"));
        let one = export_attention(&m, &v, &[7], None, 0, AttnStream::HSelf).unwrap();
        assert_eq!(one.weights.data(), &[1.0]);
        assert!(matches!(
            export_attention(&m, &v, &x, None, 0, AttnStream::SSelf),
            Err(ModelError::MissingPair)
        ));
        assert!(matches!(
            export_attention(&m, &v, &x, None, 2, AttnStream::HSelf),
            Err(ModelError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            "x-self".parse::<AttnStream>(),
            Err(ModelError::InvalidStream(_))
        ));
    }
}
