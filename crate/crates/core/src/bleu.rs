//! Corpus-level BLEU over token sequences.

use std::collections::HashMap;
use std::hash::Hash;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BleuError {
    #[error("empty corpus")]
    Empty,
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("max_n must be at least 1")]
    Order,
}

/// Value substituted for a zero n-gram match count when smoothing.
pub const SMOOTHING_EPS: f64 = 1e-9;

pub const BLEU_HEADER: &str = "bleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len\tsmoothed";

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Some precision had zero matches and was replaced by epsilon.
    pub smoothed: bool,
}

impl BleuReport {
    /// One tab-separated line in [`BLEU_HEADER`] order.
    pub fn to_tsv(&self) -> String {
        let mut cells = vec![format!("{:.6}", self.score)];
        cells.extend(self.precisions.iter().map(|p| format!("{p:.6}")));
        cells.push(format!("{:.6}", self.bp));
        cells.push(self.hyp_len.to_string());
        cells.push(self.ref_len.to_string());
        cells.push((self.smoothed as u8).to_string());
        cells.join("\t")
    }
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with clipped n-gram precisions up to `max_n` and the usual
/// brevity penalty. With `smooth`, zero match counts become
/// [`SMOOTHING_EPS`]; without it any zero precision gives a score of 0.
pub fn corpus_bleu<T: Eq + Hash>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
    smooth: bool,
) -> Result<BleuReport, BleuError> {
    if hyps.len() != refs.len() {
        return Err(BleuError::CountMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(BleuError::Empty);
    }
    if max_n == 0 {
        return Err(BleuError::Order);
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut smoothed = false;
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            if m == 0 {
                if smooth {
                    smoothed = true;
                    SMOOTHING_EPS / t.max(1) as f64
                } else {
                    0.0
                }
            } else {
                m as f64 / t as f64
            }
        })
        .collect();
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.contains(&0.0) || bp == 0.0 {
        0.0
    } else {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        bp,
        hyp_len,
        ref_len,
        smoothed,
    })
}

/// Whitespace-tokenized, lowercased BLEU-4 over lines of text.
pub fn text_bleu(hyps: &[String], refs: &[String], smooth: bool) -> Result<BleuReport, BleuError> {
    let tok = |lines: &[String]| -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_lowercase).collect())
            .collect()
    };
    corpus_bleu(&tok(hyps), &tok(refs), 4, smooth)
}
