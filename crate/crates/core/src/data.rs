//! Vocabulary, synthetic corpora, masking and batch assembly.
//!
//! Every pre-training step draws its randomness from a ChaCha stream keyed by
//! `(seed, step)`, so the batch sequence depends only on the seed and the
//! serializable [`IteratorState`].

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const FIRST_CONTENT_ID: usize = 5;

const SPECIAL_TOKENS: [&str; FIRST_CONTENT_ID] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

pub fn is_special(id: usize) -> bool {
    id < FIRST_CONTENT_ID
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown transformation `{0}` (expected reverse, cipher[:seed] or shift:k)")]
    UnknownTransform(String),
    #[error("language counts are empty")]
    EmptyCounts,
    #[error("invalid language count {0}")]
    InvalidCount(f64),
    #[error("parallel files have {src} and {tgt} lines")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("empty sentence at line {0}")]
    EmptySentence(usize),
    #[error("invalid synthetic syn: {0}")]
    Synthetic(String),
    #[error("no corpus registered for {0} batches")]
    NoCorpus(&'static str),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Closed token inventory; ids are line numbers of the vocabulary file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < FIRST_CONTENT_ID || tokens[..FIRST_CONTENT_ID] != SPECIAL_TOKENS {
            return Err(DataError::Vocab(format!(
                "first {FIRST_CONTENT_ID} entries must be {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DataError::Vocab(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Special tokens followed by `w{id}` for every content id below `size`.
    pub fn synthetic(size: usize) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend((FIRST_CONTENT_ID..size).map(|i| format!("w{i}")));
        Self::from_tokens(tokens).expect("synthetic vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map_or(SPECIAL_TOKENS[UNK], String::as_str)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Whitespace tokenization; unknown words map to UNK.
    pub fn tokenize(&self, s: &str) -> Vec<usize> {
        s.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Detokenizes dropping BOS/SEP/PAD framing.
    pub fn detokenize_content(&self, ids: &[usize]) -> String {
        let kept: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&i| !matches!(i, PAD | BOS | SEP))
            .collect();
        self.detokenize(&kept)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Sentence-level mapping from source to target used by the synthetic
/// generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Transform {
    Reverse,
    Cipher { seed: u64 },
    Shift { k: usize },
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Reverse => write!(f, "reverse"),
            Transform::Cipher { seed } => write!(f, "cipher:{seed}"),
            Transform::Shift { k } => write!(f, "shift:{k}"),
        }
    }
}

impl FromStr for Transform {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DataError::UnknownTransform(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("reverse", None) => Ok(Transform::Reverse),
            ("cipher", None) => Ok(Transform::Cipher { seed: 0 }),
            ("cipher", Some(a)) => a
                .parse()
                .map(|seed| Transform::Cipher { seed })
                .map_err(|_| bad()),
            ("shift", Some(a)) => a.parse().map(|k| Transform::Shift { k }).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Transform {
    type Error = DataError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Transform> for String {
    fn from(t: Transform) -> String {
        t.to_string()
    }
}

impl Transform {
    /// Token map for substitution-style transforms over `[start, start+size)`.
    fn table(&self, start: usize, size: usize) -> Option<Vec<usize>> {
        match *self {
            Transform::Reverse => None,
            Transform::Shift { k } => Some((0..size).map(|i| start + (i + k) % size).collect()),
            Transform::Cipher { seed } => {
                let mut perm: Vec<usize> = (start..start + size).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                Some(perm)
            }
        }
    }

    pub fn apply(&self, sentence: &[usize], start: usize, size: usize) -> Vec<usize> {
        match self.table(start, size) {
            None => sentence.iter().rev().copied().collect(),
            Some(t) => sentence
                .iter()
                .map(|&id| {
                    if (start..start + size).contains(&id) {
                        t[id - start]
                    } else {
                        id
                    }
                })
                .collect(),
        }
    }
}

/// Parameters of a synthetic language pair. Source sentences come from a
/// random Markov chain over a sub-vocabulary where each token has
/// `branching` possible successors; `branching == vocab_size` gives
/// uniformly random tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub transform: Transform,
    pub vocab_start: usize,
    pub vocab_size: usize,
    pub pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub branching: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            transform: Transform::Cipher { seed: 7 },
            vocab_start: FIRST_CONTENT_ID,
            vocab_size: 59,
            pairs: 5000,
            min_len: 4,
            max_len: 8,
            branching: 3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_start < FIRST_CONTENT_ID {
            return Err(DataError::Synthetic(
                "sub-vocabulary overlaps special tokens".into(),
            ));
        }
        if self.vocab_size == 0 || self.branching == 0 || self.branching > self.vocab_size {
            return Err(DataError::Synthetic(format!(
                "need 0 < branching ({}) <= vocab_size ({})",
                self.branching, self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::Synthetic(format!(
                "need 0 < min_len ({}) <= max_len ({})",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn vocab_end(&self) -> usize {
        self.vocab_start + self.vocab_size
    }

    pub fn translate(&self, sentence: &[usize]) -> Vec<usize> {
        self.transform
            .apply(sentence, self.vocab_start, self.vocab_size)
    }
}

/// Seeded source-language sentence generator.
struct MarkovChain {
    start: usize,
    successors: Vec<Vec<usize>>,
}

impl MarkovChain {
    fn new(syn: &SyntheticConfig) -> Self {
        // The chain depends only on the config seed so that every corpus
        // drawn from one config shares its grammar.
        let mut rng = ChaCha8Rng::seed_from_u64(syn.seed ^ 0x6d61_726b_6f76);
        let ids: Vec<usize> = (0..syn.vocab_size).collect();
        let successors = (0..syn.vocab_size)
            .map(|_| {
                ids.choose_multiple(&mut rng, syn.branching)
                    .map(|&i| syn.vocab_start + i)
                    .collect()
            })
            .collect();
        MarkovChain {
            start: syn.vocab_start,
            successors,
        }
    }

    fn next(&self, prev: Option<usize>, rng: &mut ChaCha8Rng) -> usize {
        match prev {
            None => self.start + rng.gen_range(0..self.successors.len()),
            Some(p) => *self.successors[p - self.start]
                .choose(rng)
                .expect("branching > 0"),
        }
    }

    fn sentence(&self, len: usize, prev: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut last = prev;
        for _ in 0..len {
            let t = self.next(last, rng);
            out.push(t);
            last = Some(t);
        }
        out
    }
}

/// Index-aligned sentence pairs plus a record of how they were produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub provenance: String,
}

impl ParallelCorpus {
    pub fn new(
        src: Vec<Vec<usize>>,
        tgt: Vec<Vec<usize>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(DataError::LineCountMismatch {
                src: src.len(),
                tgt: tgt.len(),
            });
        }
        if let Some(i) = src
            .iter()
            .zip(&tgt)
            .position(|(a, b)| a.is_empty() || b.is_empty())
        {
            return Err(DataError::EmptySentence(i + 1));
        }
        Ok(ParallelCorpus {
            src,
            tgt,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (ParallelCorpus, ParallelCorpus) {
        let at = self.src.len().saturating_sub(n);
        let tail = ParallelCorpus {
            src: self.src.split_off(at),
            tgt: self.tgt.split_off(at),
            provenance: self.provenance.clone(),
        };
        (self, tail)
    }

    pub fn save(&self, vocab: &Vocabulary, src_path: &Path, tgt_path: &Path) -> Result<()> {
        write_sentences(vocab, &self.src, src_path)?;
        write_sentences(vocab, &self.tgt, tgt_path)
    }

    pub fn load(vocab: &Vocabulary, src_path: &Path, tgt_path: &Path) -> Result<Self> {
        let src = read_sentences(vocab, src_path)?;
        let tgt = read_sentences(vocab, tgt_path)?;
        Self::new(
            src,
            tgt,
            format!("{} | {}", src_path.display(), tgt_path.display()),
        )
    }
}

pub fn write_sentences(vocab: &Vocabulary, sents: &[Vec<usize>], path: &Path) -> Result<()> {
    let mut s = String::new();
    for sent in sents {
        s.push_str(&vocab.detokenize(sent));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_sentences(vocab: &Vocabulary, path: &Path) -> Result<Vec<Vec<usize>>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| vocab.tokenize(l))
        .collect())
}

/// Documents as blank-line separated blocks of one sentence per line.
pub fn write_documents(vocab: &Vocabulary, docs: &[Vec<Vec<usize>>], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for sent in doc {
            s.push_str(&vocab.detokenize(sent));
            s.push('\n');
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_documents(vocab: &Vocabulary, path: &Path) -> Result<Vec<Vec<Vec<usize>>>> {
    let text = fs::read_to_string(path)?;
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(vocab.tokenize(line));
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}

/// Source sentences from the config's Markov chain with targets produced by
/// its transformation. Deterministic in `syn.seed`.
pub fn generate_synthetic_pair_corpus(syn: &SyntheticConfig) -> Result<ParallelCorpus> {
    syn.validate()?;
    let chain = MarkovChain::new(syn);
    let mut rng = ChaCha8Rng::seed_from_u64(syn.seed);
    let mut src = Vec::with_capacity(syn.pairs);
    for _ in 0..syn.pairs {
        let len = rng.gen_range(syn.min_len..=syn.max_len);
        src.push(chain.sentence(len, None, &mut rng));
    }
    let tgt = src.iter().map(|s| syn.translate(s)).collect();
    ParallelCorpus::new(
        src,
        tgt,
        format!("synthetic transform={} seed={}", syn.transform, syn.seed),
    )
}

/// Monolingual documents drawn from the config's chain, sentences continuing
/// the chain across boundaries. `target_side` applies the transformation to
/// every sentence.
pub fn generate_documents(
    syn: &SyntheticConfig,
    docs: usize,
    sentences_per_doc: usize,
    target_side: bool,
    seed: u64,
) -> Result<Vec<Vec<Vec<usize>>>> {
    syn.validate()?;
    let chain = MarkovChain::new(syn);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(docs);
    for _ in 0..docs {
        let mut doc = Vec::with_capacity(sentences_per_doc);
        let mut prev = None;
        for _ in 0..sentences_per_doc {
            let len = rng.gen_range(syn.min_len..=syn.max_len);
            let s = chain.sentence(len, prev, &mut rng);
            prev = s.last().copied();
            doc.push(if target_side { syn.translate(&s) } else { s });
        }
        out.push(doc);
    }
    Ok(out)
}

/// `p_i ∝ counts_i^alpha`.
pub fn smoothed_language_distribution(counts: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(DataError::EmptyCounts);
    }
    if let Some(&c) = counts.iter().find(|&&c| !(c > 0.0 && c.is_finite())) {
        return Err(DataError::InvalidCount(c));
    }
    let w: Vec<f64> = counts.iter().map(|c| c.powf(alpha)).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// `[BOS, s…, SEP]` with `s` cut to `max_seq_len - 2`.
pub fn frame(sentence: &[usize], max_seq_len: usize) -> Vec<usize> {
    let keep = sentence.len().min(max_seq_len.saturating_sub(2));
    let mut out = Vec::with_capacity(keep + 2);
    out.push(BOS);
    out.extend_from_slice(&sentence[..keep]);
    out.push(SEP);
    out
}

/// Consecutive framed sentence pairs of a document.
pub fn make_adjacent_pairs(
    document: &[Vec<usize>],
    max_seq_len: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    document
        .windows(2)
        .map(|w| (frame(&w[0], max_seq_len), frame(&w[1], max_seq_len)))
        .collect()
}

/// How selected positions are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingRule {
    /// Probability a selected position becomes MASK.
    pub mask: f64,
    /// Probability it becomes a random content token; otherwise unchanged.
    pub random: f64,
}

impl Default for MaskingRule {
    fn default() -> Self {
        MaskingRule {
            mask: 0.8,
            random: 0.1,
        }
    }
}

impl MaskingRule {
    pub fn mask_only() -> Self {
        MaskingRule {
            mask: 1.0,
            random: 0.0,
        }
    }
}

/// One corrupted sequence with its prediction targets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskedRow {
    /// Corrupted input tokens.
    pub tokens: Vec<usize>,
    /// Tokens before corruption.
    pub original: Vec<usize>,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    /// `original[p]` for every selected `p`.
    pub targets: Vec<usize>,
    /// Index of the separator between the halves of a TLM row.
    pub boundary: Option<usize>,
}

impl MaskedRow {
    pub fn unmasked(tokens: Vec<usize>) -> Self {
        MaskedRow {
            original: tokens.clone(),
            tokens,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Selects each non-special position with probability `rate` and corrupts
/// the selection under `rule`. When `rate > 0` at least one maskable
/// position is selected.
pub fn apply_mask<R: Rng>(
    tokens: &[usize],
    rate: f64,
    rule: MaskingRule,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedRow {
    let maskable: Vec<usize> = (0..tokens.len())
        .filter(|&i| !is_special(tokens[i]))
        .collect();
    let mut positions = Vec::new();
    if rate > 0.0 {
        for &i in &maskable {
            if rng.gen::<f64>() < rate {
                positions.push(i);
            }
        }
        if positions.is_empty() && !maskable.is_empty() {
            positions.push(maskable[rng.gen_range(0..maskable.len())]);
        }
    }
    let mut corrupted = tokens.to_vec();
    for &p in &positions {
        let r: f64 = rng.gen();
        if r < rule.mask {
            corrupted[p] = MASK;
        } else if r < rule.mask + rule.random && vocab_size > FIRST_CONTENT_ID {
            corrupted[p] = rng.gen_range(FIRST_CONTENT_ID..vocab_size);
        }
    }
    MaskedRow {
        targets: positions.iter().map(|&p| tokens[p]).collect(),
        tokens: corrupted,
        original: tokens.to_vec(),
        positions,
        boundary: None,
    }
}

/// `[BOS, x…, SEP, y…, SEP]` masked at `rate` over both halves. Over-long
/// pairs are truncated in proportion to their lengths.
pub fn make_tlm_row<R: Rng>(
    x: &[usize],
    y: &[usize],
    rate: f64,
    max_seq_len: usize,
    rule: MaskingRule,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedRow {
    let budget = max_seq_len.saturating_sub(3);
    let (mut kx, mut ky) = (x.len(), y.len());
    if kx + ky > budget {
        let total = (kx + ky) as f64;
        kx = ((budget as f64) * kx as f64 / total).round() as usize;
        kx = kx.clamp(budget.min(1).min(x.len()), budget.min(x.len()));
        ky = (budget - kx).min(y.len());
    }
    let mut row = Vec::with_capacity(kx + ky + 3);
    row.push(BOS);
    row.extend_from_slice(&x[..kx]);
    let boundary = row.len();
    row.push(SEP);
    row.extend_from_slice(&y[..ky]);
    row.push(SEP);
    let mut out = apply_mask(&row, rate, rule, vocab_size, rng);
    out.boundary = Some(boundary);
    out
}

/// Rows of one side of a batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskedBatch {
    pub rows: Vec<MaskedRow>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.rows.iter().map(MaskedRow::len).collect()
    }

    /// `[B, T]` token matrix padded with PAD.
    pub fn token_matrix(&self) -> Vec<Vec<usize>> {
        let t = self.lengths().into_iter().max().unwrap_or(0);
        self.rows
            .iter()
            .map(|r| {
                let mut v = r.tokens.clone();
                v.resize(t, PAD);
                v
            })
            .collect()
    }

    pub fn num_targets(&self) -> usize {
        self.rows.iter().map(|r| r.targets.len()).sum()
    }
}

/// Aligned `(x̂, ŷ)` batches for the cross-attention objective.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairBatch {
    pub x: MaskedBatch,
    pub y: MaskedBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchKind {
    Mono,
    Bili,
}

impl fmt::Display for BatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchKind::Mono => "mono",
            BatchKind::Bili => "bili",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub kind: BatchKind,
    /// Index into the monolingual or bilingual corpus list.
    pub source: usize,
    pub pair: PairBatch,
    /// TLM concatenations of the same pairs (bilingual steps only).
    pub tlm: Option<MaskedBatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub mono_mask_rate: f64,
    pub bili_mask_rate: f64,
    pub alpha: f64,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub rule: MaskingRule,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 16,
            mono_mask_rate: 0.15,
            bili_mask_rate: 0.25,
            alpha: 0.5,
            max_seq_len: 64,
            vocab_size: 64,
            rule: MaskingRule::default(),
        }
    }
}

/// A named list of sentence pairs (adjacent segments or translations).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSource {
    pub name: String,
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Corpora registered for pre-training. Monolingual sources hold framed
/// adjacent-segment pairs; bilingual sources hold raw translation pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PretrainCorpora {
    pub mono: Vec<PairSource>,
    pub bili: Vec<PairSource>,
}

impl PretrainCorpora {
    pub fn add_monolingual(&mut self, name: &str, docs: &[Vec<Vec<usize>>], max_seq_len: usize) {
        let pairs = docs
            .iter()
            .flat_map(|d| make_adjacent_pairs(d, max_seq_len))
            .collect();
        self.mono.push(PairSource {
            name: name.to_string(),
            pairs,
        });
    }

    pub fn add_parallel(&mut self, name: &str, corpus: &ParallelCorpus) {
        self.bili.push(PairSource {
            name: name.to_string(),
            pairs: corpus
                .src
                .iter()
                .cloned()
                .zip(corpus.tgt.iter().cloned())
                .collect(),
        });
    }
}

/// Monolingual documents for both sides plus the parallel corpus of `syn`,
/// registered as `src`, `tgt` and `src-tgt`.
pub fn synthetic_pretrain_corpora(
    syn: &SyntheticConfig,
    docs_per_language: usize,
    sentences_per_doc: usize,
    max_seq_len: usize,
) -> Result<PretrainCorpora> {
    let mut c = PretrainCorpora::default();
    let src = generate_documents(
        syn,
        docs_per_language,
        sentences_per_doc,
        false,
        syn.seed.wrapping_add(1),
    )?;
    let tgt = generate_documents(
        syn,
        docs_per_language,
        sentences_per_doc,
        true,
        syn.seed.wrapping_add(2),
    )?;
    c.add_monolingual("src", &src, max_seq_len);
    c.add_monolingual("tgt", &tgt, max_seq_len);
    c.add_parallel("src-tgt", &generate_synthetic_pair_corpus(syn)?);
    Ok(c)
}

/// Resumable position of the batch iterator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct IteratorState {
    pub seed: u64,
    pub step: u64,
    pub mono_cursor: Vec<usize>,
    pub mono_epoch: Vec<usize>,
    pub bili_cursor: Vec<usize>,
    pub bili_epoch: Vec<usize>,
}

impl IteratorState {
    pub fn new(seed: u64, corpora: &PretrainCorpora) -> Self {
        IteratorState {
            seed,
            step: 0,
            mono_cursor: vec![0; corpora.mono.len()],
            mono_epoch: vec![0; corpora.mono.len()],
            bili_cursor: vec![0; corpora.bili.len()],
            bili_epoch: vec![0; corpora.bili.len()],
        }
    }
}

/// Independent random stream for one `(seed, step, purpose)`.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(8).wrapping_add(purpose));
    rng
}

/// Picks an index by the smoothed distribution over non-empty sources.
fn choose_source<R: Rng>(sources: &[PairSource], alpha: f64, rng: &mut R) -> Option<usize> {
    let live: Vec<usize> = (0..sources.len())
        .filter(|&i| !sources[i].pairs.is_empty())
        .collect();
    let counts: Vec<f64> = live
        .iter()
        .map(|&i| sources[i].pairs.len() as f64)
        .collect();
    let probs = smoothed_language_distribution(&counts, alpha).ok()?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Some(live[k]);
        }
    }
    live.last().copied()
}

fn take_pairs<'a>(
    source: &'a PairSource,
    cursor: &mut usize,
    epoch: &mut usize,
    n: usize,
) -> Vec<&'a (Vec<usize>, Vec<usize>)> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(&source.pairs[*cursor]);
        *cursor += 1;
        if *cursor == source.pairs.len() {
            *cursor = 0;
            *epoch += 1;
        }
    }
    out
}

/// Next batch in strict mono/bili alternation (even steps monolingual).
/// When one kind has no corpus the other kind is used for every step.
pub fn next_batch(
    corpora: &PretrainCorpora,
    cfg: &BatchConfig,
    state: &mut IteratorState,
) -> Result<Batch> {
    let step = state.step;
    let mut rng = step_rng(state.seed, step, 0);
    let has_mono = corpora.mono.iter().any(|s| !s.pairs.is_empty());
    let has_bili = corpora.bili.iter().any(|s| !s.pairs.is_empty());
    let kind = match (has_mono, has_bili) {
        (false, false) => return Err(DataError::NoCorpus("any")),
        (true, false) => BatchKind::Mono,
        (false, true) => BatchKind::Bili,
        (true, true) if step.is_multiple_of(2) => BatchKind::Mono,
        _ => BatchKind::Bili,
    };
    let batch = match kind {
        BatchKind::Mono => {
            let i = choose_source(&corpora.mono, cfg.alpha, &mut rng)
                .ok_or(DataError::NoCorpus("mono"))?;
            let pairs = take_pairs(
                &corpora.mono[i],
                &mut state.mono_cursor[i],
                &mut state.mono_epoch[i],
                cfg.batch_size,
            );
            let mut pair = PairBatch::default();
            for (x, y) in pairs {
                pair.x.rows.push(apply_mask(
                    x,
                    cfg.mono_mask_rate,
                    cfg.rule,
                    cfg.vocab_size,
                    &mut rng,
                ));
                pair.y.rows.push(apply_mask(
                    y,
                    cfg.mono_mask_rate,
                    cfg.rule,
                    cfg.vocab_size,
                    &mut rng,
                ));
            }
            Batch {
                kind,
                source: i,
                pair,
                tlm: None,
            }
        }
        BatchKind::Bili => {
            let i = choose_source(&corpora.bili, cfg.alpha, &mut rng)
                .ok_or(DataError::NoCorpus("bili"))?;
            let pairs = take_pairs(
                &corpora.bili[i],
                &mut state.bili_cursor[i],
                &mut state.bili_epoch[i],
                cfg.batch_size,
            );
            let mut pair = PairBatch::default();
            let mut tlm = MaskedBatch::default();
            for (x, y) in pairs {
                let (fx, fy) = (frame(x, cfg.max_seq_len), frame(y, cfg.max_seq_len));
                pair.x.rows.push(apply_mask(
                    &fx,
                    cfg.bili_mask_rate,
                    cfg.rule,
                    cfg.vocab_size,
                    &mut rng,
                ));
                pair.y.rows.push(apply_mask(
                    &fy,
                    cfg.bili_mask_rate,
                    cfg.rule,
                    cfg.vocab_size,
                    &mut rng,
                ));
                tlm.rows.push(make_tlm_row(
                    x,
                    y,
                    cfg.bili_mask_rate,
                    cfg.max_seq_len,
                    cfg.rule,
                    cfg.vocab_size,
                    &mut rng,
                ));
            }
            Batch {
                kind,
                source: i,
                pair,
                tlm: Some(tlm),
            }
        }
    };
    state.step += 1;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smoothing_closed_forms() {
        let p = smoothed_language_distribution(&[3.0, 1.0], 1.0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let p = smoothed_language_distribution(&[7.0, 100.0, 2.0], 0.0).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = smoothed_language_distribution(&[100.0, 1.0], 0.5).unwrap();
        assert!((p[0] - 10.0 / 11.0).abs() < 1e-15 && (p[1] - 1.0 / 11.0).abs() < 1e-15);
        assert!(matches!(
            smoothed_language_distribution(&[], 0.5),
            Err(DataError::EmptyCounts)
        ));
        assert!(smoothed_language_distribution(&[1.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn adjacent_pairs() {
        let doc = vec![vec![10], vec![11], vec![12]];
        let p = make_adjacent_pairs(&doc, 8);
        assert_eq!(
            p,
            vec![
                (vec![BOS, 10, SEP], vec![BOS, 11, SEP]),
                (vec![BOS, 11, SEP], vec![BOS, 12, SEP])
            ]
        );
        assert!(make_adjacent_pairs(&doc[..1], 8).is_empty());
        let long: Vec<Vec<usize>> = (0..1000).map(|i| vec![5 + i % 7]).collect();
        assert_eq!(make_adjacent_pairs(&long, 8).len(), 999);
        let p = make_adjacent_pairs(&[vec![5; 10], vec![6; 3]], 6);
        assert_eq!(p[0].0, vec![BOS, 5, 5, 5, 5, SEP]);
    }

    #[test]
    fn masking_rate_zero_and_mask_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let toks = vec![BOS, 7, 8, 9, SEP];
        let r = apply_mask(&toks, 0.0, MaskingRule::default(), 64, &mut rng);
        assert!(r.positions.is_empty() && r.targets.is_empty());
        assert_eq!(r.tokens, toks);
        let r = apply_mask(&toks, 1.0, MaskingRule::mask_only(), 64, &mut rng);
        assert_eq!(r.tokens, vec![BOS, MASK, MASK, MASK, SEP]);
        assert_eq!(r.targets, vec![7, 8, 9]);
    }

    #[test]
    fn at_least_one_position_is_masked() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = apply_mask(&[BOS, 9, SEP], 1e-9, MaskingRule::default(), 64, &mut rng);
            assert_eq!(r.positions, vec![1]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = apply_mask(&[BOS, SEP], 0.5, MaskingRule::default(), 64, &mut rng);
        assert!(r.positions.is_empty());
    }

    #[test]
    fn mask_fraction_monte_carlo() {
        // 10^6 maskable positions; 0.002 is about 5.6 binomial standard
        // deviations at p = 0.15.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let row: Vec<usize> = (0..1000).map(|i| FIRST_CONTENT_ID + i % 50).collect();
        let mut selected = 0usize;
        for _ in 0..1000 {
            selected += apply_mask(&row, 0.15, MaskingRule::default(), 64, &mut rng)
                .positions
                .len();
        }
        let frac = selected as f64 / 1e6;
        assert!((frac - 0.15).abs() < 0.002, "fraction {frac}");
    }

    #[test]
    fn corruption_split_follows_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let row: Vec<usize> = vec![FIRST_CONTENT_ID; 1000];
        let (mut masked, mut kept, mut other) = (0, 0, 0);
        for _ in 0..200 {
            let r = apply_mask(&row, 0.5, MaskingRule::default(), 64, &mut rng);
            for &p in &r.positions {
                match r.tokens[p] {
                    MASK => masked += 1,
                    FIRST_CONTENT_ID => kept += 1,
                    _ => other += 1,
                }
            }
        }
        let n = (masked + kept + other) as f64;
        assert!((masked as f64 / n - 0.8).abs() < 0.01);
        // random replacements can coincide with the original token
        assert!(((kept + other) as f64 / n - 0.2).abs() < 0.01);
    }

    #[test]
    fn tlm_framing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = make_tlm_row(
            &[10, 11, 12],
            &[20, 21, 22, 23],
            0.0,
            64,
            MaskingRule::default(),
            64,
            &mut rng,
        );
        assert_eq!(r.len(), 10);
        assert_eq!(r.tokens[4], SEP);
        assert_eq!(r.tokens[9], SEP);
        assert_eq!(r.boundary, Some(4));
        assert!(r.targets.is_empty());

        let x: Vec<usize> = (0..30).map(|i| 5 + i % 20).collect();
        let y: Vec<usize> = (0..10).map(|i| 5 + i % 20).collect();
        let r = make_tlm_row(&x, &y, 0.25, 16, MaskingRule::default(), 64, &mut rng);
        assert_eq!(r.len(), 16);
        let b = r.boundary.unwrap();
        assert_eq!(r.original[0], BOS);
        assert_eq!(r.original[b], SEP);
        assert_eq!(*r.original.last().unwrap(), SEP);
        assert_eq!(r.original.iter().filter(|&&t| t == SEP).count(), 2);
        assert!(b > 1 && b < 14);
    }

    #[test]
    fn synthetic_transforms() {
        assert_eq!(Transform::Reverse.apply(&[7, 8, 9], 5, 10), vec![9, 8, 7]);
        assert_eq!(
            Transform::Shift { k: 2 }.apply(&[10, 11], 10, 10),
            vec![12, 13]
        );
        assert_eq!(Transform::Shift { k: 2 }.apply(&[19], 10, 10), vec![11]);
        let c = Transform::Cipher { seed: 5 };
        let img: Vec<usize> = c.apply(&(10..20).collect::<Vec<_>>(), 10, 10);
        let mut sorted = img.clone();
        sorted.sort();
        assert_eq!(sorted, (10..20).collect::<Vec<_>>());
        assert_eq!(
            "shift:3".parse::<Transform>().unwrap(),
            Transform::Shift { k: 3 }
        );
        assert_eq!(
            "cipher:9".parse::<Transform>().unwrap(),
            Transform::Cipher { seed: 9 }
        );
        assert!(matches!(
            "rot13".parse::<Transform>(),
            Err(DataError::UnknownTransform(_))
        ));
        assert!("shift".parse::<Transform>().is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_consistent() {
        let syn = SyntheticConfig {
            pairs: 200,
            ..Default::default()
        };
        let a = generate_synthetic_pair_corpus(&syn).unwrap();
        let b = generate_synthetic_pair_corpus(&syn).unwrap();
        assert_eq!(a, b);
        for (s, t) in a.src.iter().zip(&a.tgt) {
            assert!((syn.min_len..=syn.max_len).contains(&s.len()));
            assert!(s
                .iter()
                .all(|&id| (syn.vocab_start..syn.vocab_end()).contains(&id)));
            assert_eq!(&syn.translate(s), t);
        }
        let other = generate_synthetic_pair_corpus(&SyntheticConfig { seed: 1, ..syn }).unwrap();
        assert_ne!(a.src, other.src);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::synthetic(20);
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert_eq!(v.tokenize("w5 nonsense w19"), vec![5, UNK, 19]);
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn parallel_files_must_align() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::synthetic(20);
        let (s, t) = (dir.path().join("a"), dir.path().join("b"));
        fs::write(&s, "w5 w6\nw7\n").unwrap();
        fs::write(&t, "w8\n").unwrap();
        assert!(matches!(
            ParallelCorpus::load(&v, &s, &t),
            Err(DataError::LineCountMismatch { src: 2, tgt: 1 })
        ));
    }

    #[test]
    fn documents_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::synthetic(64);
        let syn = SyntheticConfig::default();
        let docs = generate_documents(&syn, 3, 4, true, 9).unwrap();
        let p = dir.path().join("mono.txt");
        write_documents(&v, &docs, &p).unwrap();
        assert_eq!(read_documents(&v, &p).unwrap(), docs);
    }

    fn corpora() -> PretrainCorpora {
        let syn = SyntheticConfig {
            pairs: 40,
            ..Default::default()
        };
        let mut c = PretrainCorpora::default();
        c.add_monolingual(
            "src",
            &generate_documents(&syn, 4, 6, false, 1).unwrap(),
            16,
        );
        c.add_monolingual("tgt", &generate_documents(&syn, 1, 6, true, 2).unwrap(), 16);
        c.add_parallel("src-tgt", &generate_synthetic_pair_corpus(&syn).unwrap());
        c
    }

    #[test]
    fn batches_alternate_and_are_deterministic() {
        let c = corpora();
        let cfg = BatchConfig {
            batch_size: 4,
            max_seq_len: 16,
            ..Default::default()
        };
        let mut s1 = IteratorState::new(5, &c);
        let mut s2 = IteratorState::new(5, &c);
        let mut kinds = Vec::new();
        for _ in 0..6 {
            let a = next_batch(&c, &cfg, &mut s1).unwrap();
            let b = next_batch(&c, &cfg, &mut s2).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.tlm.is_some(), a.kind == BatchKind::Bili);
            kinds.push(a.kind);
        }
        use BatchKind::*;
        assert_eq!(kinds, vec![Mono, Bili, Mono, Bili, Mono, Bili]);
    }

    #[test]
    fn exhausted_corpus_wraps_and_counts_epochs() {
        let c = corpora();
        let cfg = BatchConfig {
            batch_size: 16,
            max_seq_len: 16,
            ..Default::default()
        };
        let mut s = IteratorState::new(0, &c);
        for _ in 0..8 {
            next_batch(&c, &cfg, &mut s).unwrap();
        }
        // 4 bilingual batches of 16 over 40 pairs
        assert_eq!(s.bili_epoch[0], 1);
        assert_eq!(s.bili_cursor[0], 64 - 40);
    }

    #[test]
    fn empty_language_is_dropped_from_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sources = vec![
            PairSource {
                name: "a".into(),
                pairs: vec![(vec![1], vec![2]); 4],
            },
            PairSource {
                name: "b".into(),
                pairs: vec![],
            },
            PairSource {
                name: "c".into(),
                pairs: vec![(vec![1], vec![2]); 1],
            },
        ];
        let mut hits = [0usize; 3];
        for _ in 0..30_000 {
            hits[choose_source(&sources, 0.5, &mut rng).unwrap()] += 1;
        }
        assert_eq!(hits[1], 0);
        // sqrt(4) : sqrt(1) = 2/3 : 1/3
        assert!((hits[0] as f64 / 30_000.0 - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn language_sampling_matches_smoothed_distribution() {
        let counts = [5000usize, 800, 100, 20];
        let sources: Vec<PairSource> = counts
            .iter()
            .map(|&n| PairSource {
                name: String::new(),
                pairs: vec![(vec![], vec![]); n],
            })
            .collect();
        let probs = smoothed_language_distribution(&counts.map(|c| c as f64), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let mut hits = [0usize; 4];
        for _ in 0..draws {
            hits[choose_source(&sources, 0.5, &mut rng).unwrap()] += 1;
        }
        for (h, p) in hits.iter().zip(&probs) {
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            assert!(
                (*h as f64 / draws as f64 - p).abs() < 3.0 * sigma,
                "{h} vs {p}"
            );
        }
    }

    proptest! {
        #[test]
        fn masked_targets_match_original(seed in 0u64..10_000, len in 0usize..30, rate in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut toks = vec![BOS];
            toks.extend((0..len).map(|i| FIRST_CONTENT_ID + (i * 7 + seed as usize) % 40));
            toks.push(SEP);
            let r = apply_mask(&toks, rate, MaskingRule::default(), 64, &mut rng);
            prop_assert_eq!(&r.original, &toks);
            prop_assert_eq!(r.positions.len(), r.targets.len());
            for (&p, &t) in r.positions.iter().zip(&r.targets) {
                prop_assert_eq!(toks[p], t);
                prop_assert!(!is_special(t));
            }
            for i in 0..toks.len() {
                if !r.positions.contains(&i) {
                    prop_assert_eq!(r.tokens[i], toks[i]);
                }
            }
        }

        #[test]
        fn tokenize_detokenize_round_trip(seed in 0u64..1000) {
            let v = Vocabulary::synthetic(64);
            let syn = SyntheticConfig { pairs: 5, seed, ..Default::default() };
            let c = generate_synthetic_pair_corpus(&syn).unwrap();
            for s in c.src.iter().chain(&c.tgt) {
                let text = v.detokenize(s);
                prop_assert_eq!(v.detokenize(&v.tokenize(&text)), text.clone());
                prop_assert_eq!(&v.tokenize(&text), s);
            }
        }
    }
}
