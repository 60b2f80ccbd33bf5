//! Corpora, bag folding, label shifting and batch streams.
//!
//! Token windows are cut from one contiguous stream. A superposition batch
//! stretches each row to `s * L_base` data tokens, folds inputs into
//! `(B, L_base, s)` bags and shifts the next-token labels left by `s - 1`
//! before bagging them, so bag `j` is trained against the data tokens that
//! immediately follow it.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from every loss.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub vocab_size: usize,
    pub source: String,
}

impl Corpus {
    pub fn new(tokens: Vec<u32>, vocab_size: usize, source: impl Into<String>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Input(format!("vocab size {vocab_size} < 2")));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Data(format!("token {bad} >= vocab {vocab_size}")));
        }
        Ok(Corpus {
            tokens,
            vocab_size,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Split off the last `holdout` tokens as an evaluation corpus.
    pub fn split_holdout(&self, holdout: usize) -> Result<(Corpus, Corpus)> {
        if holdout >= self.len() {
            return Err(Error::Input(format!(
                "holdout {holdout} leaves no training data out of {}",
                self.len()
            )));
        }
        let cut = self.len() - holdout;
        Ok((
            Corpus {
                tokens: self.tokens[..cut].to_vec(),
                vocab_size: self.vocab_size,
                source: format!("{}[train]", self.source),
            },
            Corpus {
                tokens: self.tokens[cut..].to_vec(),
                vocab_size: self.vocab_size,
                source: format!("{}[holdout]", self.source),
            },
        ))
    }
}

/// A fixed order-`k` Markov chain over `vocab` symbols.
///
/// States are the last `k` tokens packed base-`vocab`, most recent token in
/// the lowest digit. `probs[state * vocab + x]` is `P(next = x | state)`.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub order: usize,
    pub vocab: usize,
    pub probs: Vec<f64>,
}

impl MarkovChain {
    pub fn from_transitions(order: usize, vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if order == 0 || vocab < 2 {
            return Err(Error::Input(format!(
                "markov chain needs order >= 1 and vocab >= 2 (got {order}, {vocab})"
            )));
        }
        let states = vocab
            .checked_pow(order as u32)
            .filter(|&s| s <= 1 << 24)
            .ok_or_else(|| Error::Input(format!("state space {vocab}^{order} too large")))?;
        if probs.len() != states * vocab {
            return Err(Error::Input(format!(
                "expected {} transition probabilities, got {}",
                states * vocab,
                probs.len()
            )));
        }
        for row in probs.chunks(vocab) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Input("transition rows must be distributions".into()));
            }
        }
        Ok(MarkovChain {
            order,
            vocab,
            probs,
        })
    }

    /// Random chain whose rows are Dirichlet(`concentration`) draws.
    ///
    /// Small concentrations give peaked, low-entropy transitions.
    pub fn random(order: usize, vocab: usize, concentration: f64, seed: u64) -> Result<Self> {
        if order == 0 || vocab < 2 {
            return Err(Error::Input(format!(
                "markov chain needs order >= 1 and vocab >= 2 (got {order}, {vocab})"
            )));
        }
        let states = vocab
            .checked_pow(order as u32)
            .filter(|&s| s <= 1 << 24)
            .ok_or_else(|| Error::Input(format!("state space {vocab}^{order} too large")))?;
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| Error::Input(format!("concentration {concentration}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::with_capacity(states * vocab);
        for _ in 0..states {
            let mut row: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            probs.extend(row);
        }
        Ok(MarkovChain {
            order,
            vocab,
            probs,
        })
    }

    pub fn num_states(&self) -> usize {
        self.probs.len() / self.vocab
    }

    fn next_state(&self, state: usize, token: usize) -> usize {
        (state * self.vocab + token) % self.num_states()
    }

    /// Sample `length` tokens after a burn-in from a uniform random context.
    pub fn sample(&self, length: usize, seed: u64) -> Vec<u32> {
        const BURN_IN: usize = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unif = Uniform::new(0.0f64, 1.0).expect("valid range");
        let mut state = (unif.sample(&mut rng) * self.num_states() as f64) as usize % self.num_states();
        let mut out = Vec::with_capacity(length);
        for i in 0..BURN_IN + length {
            let row = &self.probs[state * self.vocab..(state + 1) * self.vocab];
            let u = unif.sample(&mut rng);
            let mut acc = 0.0;
            let mut tok = self.vocab - 1;
            for (x, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = x;
                    break;
                }
            }
            if i >= BURN_IN {
                out.push(tok as u32);
            }
            state = self.next_state(state, tok);
        }
        out
    }

    /// Stationary distribution over states by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.num_states();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..20_000 {
            let next = self.propagate(&pi);
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-14 {
                break;
            }
        }
        pi
    }

    fn propagate(&self, dist: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; dist.len()];
        for (s, &w) in dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &self.probs[s * self.vocab..(s + 1) * self.vocab];
            for (x, &p) in row.iter().enumerate() {
                next[self.next_state(s, x)] += w * p;
            }
        }
        next
    }

    /// Exact mutual information (nats) between `x_t` and `x_{t+d}` under the
    /// stationary chain, for `d = 1..=max_distance`.
    pub fn exact_mi(&self, max_distance: usize) -> Vec<f64> {
        let v = self.vocab;
        let pi = self.stationary();
        let mut unigram = vec![0.0; v];
        for (s, &p) in pi.iter().enumerate() {
            unigram[s % v] += p;
        }
        // joint[d][a][b]
        let mut joint = vec![vec![0.0; v * v]; max_distance];
        for a in 0..v {
            let mut u: Vec<f64> = pi
                .iter()
                .enumerate()
                .map(|(s, &p)| if s % v == a { p } else { 0.0 })
                .collect();
            for jd in joint.iter_mut() {
                u = self.propagate(&u);
                for (s, &w) in u.iter().enumerate() {
                    jd[a * v + s % v] += w;
                }
            }
        }
        joint
            .iter()
            .map(|j| {
                let mut mi = 0.0;
                for a in 0..v {
                    for b in 0..v {
                        let p = j[a * v + b];
                        if p > 0.0 {
                            mi += p * (p / (unigram[a] * unigram[b])).ln();
                        }
                    }
                }
                mi.max(0.0)
            })
            .collect()
    }
}

/// Tokens sampled from a seeded random order-`order` Markov chain.
///
/// The chain is derived from `seed`; the sample path from `seed + 1`.
pub fn synth_markov_corpus(order: usize, vocab: usize, length: usize, seed: u64) -> Result<Corpus> {
    synth_markov_corpus_with(order, vocab, length, seed, 0.2)
}

pub fn synth_markov_corpus_with(
    order: usize,
    vocab: usize,
    length: usize,
    seed: u64,
    concentration: f64,
) -> Result<Corpus> {
    if length < order {
        return Err(Error::Input(format!(
            "corpus length {length} shorter than chain order {order}"
        )));
    }
    let chain = MarkovChain::random(order, vocab, concentration, seed)?;
    let tokens = chain.sample(length, seed.wrapping_add(1));
    Corpus::new(
        tokens,
        vocab,
        format!("markov(order={order},vocab={vocab},seed={seed},alpha={concentration})"),
    )
}

/// On-disk width of token IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenWidth {
    U16,
    U32,
}

const TOKEN_MAGIC: &[u8; 4] = b"TSTK";
const TOKEN_VERSION: u32 = 1;

/// Write a token file: magic, version, id width, vocab, count, then the IDs,
/// all little-endian.
pub fn write_token_file(path: &Path, corpus: &Corpus, width: TokenWidth) -> Result<()> {
    let bytes_per = match width {
        TokenWidth::U16 => {
            if corpus.vocab_size > 1 << 16 {
                return Err(Error::Input(format!(
                    "vocab {} does not fit 16-bit ids",
                    corpus.vocab_size
                )));
            }
            2u32
        }
        TokenWidth::U32 => 4,
    };
    let mut buf = Vec::with_capacity(24 + corpus.len() * bytes_per as usize);
    buf.extend_from_slice(TOKEN_MAGIC);
    buf.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    buf.extend_from_slice(&bytes_per.to_le_bytes());
    buf.extend_from_slice(&(corpus.vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for &t in &corpus.tokens {
        match width {
            TokenWidth::U16 => buf.extend_from_slice(&(t as u16).to_le_bytes()),
            TokenWidth::U32 => buf.extend_from_slice(&t.to_le_bytes()),
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_corpus_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_token_file(path: &Path) -> Result<Corpus> {
    let bytes = read_corpus_bytes(path)?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 24 || &bytes[..4] != TOKEN_MAGIC {
        return Err(bad("not a token file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != TOKEN_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let width = u32_at(8) as usize;
    let vocab = u32_at(12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if width != 2 && width != 4 {
        return Err(bad(&format!("id width {width}")));
    }
    let body = &bytes[24..];
    if body.len() != count * width {
        return Err(bad(&format!(
            "header says {count} ids, body holds {} bytes",
            body.len()
        )));
    }
    let tokens = body
        .chunks_exact(width)
        .map(|c| match width {
            2 => u16::from_le_bytes([c[0], c[1]]) as u32,
            _ => u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
        })
        .collect();
    Corpus::new(tokens, vocab, path.display().to_string())
}

/// Byte-level corpus (V = 256).
pub fn read_text_file(path: &Path) -> Result<Corpus> {
    let bytes = read_corpus_bytes(path)?;
    Corpus::new(
        bytes.into_iter().map(u32::from).collect(),
        256,
        path.display().to_string(),
    )
}

/// Integer tensor for token IDs and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

impl TokenTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "token tensor {shape:?} with {} entries",
                data.len()
            )));
        }
        Ok(TokenTensor { shape, data })
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// IDs as `usize`, rejecting the ignore value and negatives.
    pub fn ids(&self) -> Result<Vec<usize>> {
        self.data
            .iter()
            .map(|&t| {
                usize::try_from(t).map_err(|_| Error::Index(format!("token id {t} is not an input")))
            })
            .collect()
    }

    fn rows(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [b, l] => Ok((b, l)),
            _ => Err(Error::shape(format!("expected (B, L), got {:?}", self.shape))),
        }
    }
}

/// Reshape `(B, L)` tokens into `(B, L/s, s)` bags.
pub fn fold_inputs(tokens: &TokenTensor, s: usize) -> Result<TokenTensor> {
    let (b, l) = tokens.rows()?;
    if s == 0 || l % s != 0 {
        return Err(Error::contract(format!(
            "sequence length {l} is not a multiple of bag size {s}"
        )));
    }
    TokenTensor::new(vec![b, l / s, s], tokens.data.clone())
}

/// Bag next-token labels so each bag targets the `s` tokens that follow it.
///
/// Right-pads with `s - 1` ignore values, drops the first `s - 1` labels and
/// reshapes to `(B, L/s, s)`.
pub fn shift_labels(labels: &TokenTensor, s: usize) -> Result<TokenTensor> {
    let (b, l) = labels.rows()?;
    if s == 0 || l % s != 0 {
        return Err(Error::contract(format!(
            "sequence length {l} is not a multiple of bag size {s}"
        )));
    }
    let off = s - 1;
    let mut data = Vec::with_capacity(b * l);
    for row in labels.data.chunks(l) {
        data.extend((0..l).map(|t| row.get(t + off).copied().unwrap_or(IGNORE_INDEX)));
    }
    TokenTensor::new(vec![b, l / s, s], data)
}

/// Per-position bags of the next `s` labels, without folding: `(B, L, s)`.
///
/// Entry `(t, i)` is label `t + i`, or the ignore value past the row end.
pub fn window_labels(labels: &TokenTensor, s: usize) -> Result<TokenTensor> {
    let (b, l) = labels.rows()?;
    if s == 0 {
        return Err(Error::contract("bag size must be >= 1"));
    }
    let mut data = Vec::with_capacity(b * l * s);
    for row in labels.data.chunks(l) {
        for t in 0..l {
            data.extend((0..s).map(|i| row.get(t + i).copied().unwrap_or(IGNORE_INDEX)));
        }
    }
    TokenTensor::new(vec![b, l, s], data)
}

/// How a batch is laid out for the model and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchLayout {
    /// Flat `(B, L)` inputs with next-token labels.
    Standard,
    /// Folded `(B, L, s)` inputs over `s * L` data tokens, bagged labels.
    Superposed { s: usize },
    /// Folded inputs, single next-token label per bag: `(B, L)`.
    InputOnly { s: usize },
    /// Flat inputs, a bag of the next `s` labels per position: `(B, L, s)`.
    OutputOnly { s: usize },
}

impl BatchLayout {
    pub fn bag_size(&self) -> usize {
        match *self {
            BatchLayout::Standard => 1,
            BatchLayout::Superposed { s }
            | BatchLayout::InputOnly { s }
            | BatchLayout::OutputOnly { s } => s,
        }
    }

    /// Data tokens per row for a latent length of `l_base`.
    pub fn data_len(&self, l_base: usize) -> usize {
        match *self {
            BatchLayout::Superposed { s } | BatchLayout::InputOnly { s } => s * l_base,
            BatchLayout::Standard | BatchLayout::OutputOnly { .. } => l_base,
        }
    }
}

/// One training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaggedBatch {
    /// `(B, l, s)` when folded, `(B, L)` otherwise.
    pub inputs: TokenTensor,
    /// `(B, l, s)` when bagged, `(B, L)` for single targets.
    pub labels: TokenTensor,
    pub bag_size: usize,
    pub latent_len: usize,
    pub data_tokens: usize,
}

impl BaggedBatch {
    pub fn inputs_folded(&self) -> bool {
        self.inputs.ndim() == 3
    }

    pub fn labels_bagged(&self) -> bool {
        self.labels.ndim() == 3
    }
}

/// Build one batch from raw `(B, L_data + 1)` windows.
pub fn batch_from_windows(
    windows: &[&[u32]],
    l_base: usize,
    layout: BatchLayout,
) -> Result<BaggedBatch> {
    let b = windows.len();
    let l_data = layout.data_len(l_base);
    let mut inputs = Vec::with_capacity(b * l_data);
    let mut labels = Vec::with_capacity(b * l_data);
    for w in windows {
        if w.len() != l_data + 1 {
            return Err(Error::contract(format!(
                "window of {} tokens, need {}",
                w.len(),
                l_data + 1
            )));
        }
        inputs.extend(w[..l_data].iter().map(|&t| t as i64));
        labels.extend(w[1..].iter().map(|&t| t as i64));
    }
    let inputs = TokenTensor::new(vec![b, l_data], inputs)?;
    let labels = TokenTensor::new(vec![b, l_data], labels)?;
    let s = layout.bag_size();
    let (inputs, labels) = match layout {
        BatchLayout::Standard => (inputs, labels),
        BatchLayout::Superposed { s } => (fold_inputs(&inputs, s)?, shift_labels(&labels, s)?),
        BatchLayout::InputOnly { s } => {
            let bags = shift_labels(&labels, s)?;
            let first = bags.data.iter().step_by(s).copied().collect();
            (fold_inputs(&inputs, s)?, TokenTensor::new(vec![b, l_base], first)?)
        }
        BatchLayout::OutputOnly { s } => {
            let bags = window_labels(&labels, s)?;
            (inputs, bags)
        }
    };
    Ok(BaggedBatch {
        inputs,
        labels,
        bag_size: s,
        latent_len: l_base,
        data_tokens: b * l_data,
    })
}

/// Sequential, non-overlapping windows over a corpus.
///
/// Each row reads `L_data + 1` tokens and advances the cursor by `L_data`.
/// Partial batches at the end of the corpus are dropped. With `wrap` the
/// stream restarts from the beginning and bumps `epoch`; otherwise it ends.
#[derive(Debug, Clone)]
pub struct BatchStream {
    corpus: Arc<Corpus>,
    batch_rows: usize,
    l_base: usize,
    layout: BatchLayout,
    wrap: bool,
    pub cursor: usize,
    pub epoch: usize,
    pub tokens_consumed: u64,
}

impl BatchStream {
    pub fn layout(&self) -> BatchLayout {
        self.layout
    }

    /// Continue from another stream's position with a different layout.
    pub fn relayout(&self, layout: BatchLayout) -> Result<BatchStream> {
        let mut s = make_batches(self.corpus.clone(), self.batch_rows, self.l_base, layout)?;
        s.wrap = self.wrap;
        s.cursor = self.cursor;
        s.epoch = self.epoch;
        s.tokens_consumed = self.tokens_consumed;
        Ok(s)
    }

    pub fn wrapping(mut self, wrap: bool) -> Self {
        self.wrap = wrap;
        self
    }

    pub fn seek(&mut self, cursor: usize, epoch: usize, tokens_consumed: u64) {
        self.cursor = cursor;
        self.epoch = epoch;
        self.tokens_consumed = tokens_consumed;
    }

    fn fits(&self, cursor: usize) -> bool {
        let l_data = self.layout.data_len(self.l_base);
        cursor + (self.batch_rows - 1) * l_data + l_data + 1 <= self.corpus.len()
    }

    pub fn next_batch(&mut self) -> Option<Result<BaggedBatch>> {
        if !self.fits(self.cursor) {
            if !self.wrap {
                return None;
            }
            self.cursor = 0;
            self.epoch += 1;
        }
        let l_data = self.layout.data_len(self.l_base);
        let toks = &self.corpus.tokens;
        let windows: Vec<&[u32]> = (0..self.batch_rows)
            .map(|r| {
                let start = self.cursor + r * l_data;
                &toks[start..start + l_data + 1]
            })
            .collect();
        let batch = batch_from_windows(&windows, self.l_base, self.layout);
        self.cursor += self.batch_rows * l_data;
        if let Ok(b) = &batch {
            self.tokens_consumed += b.data_tokens as u64;
        }
        Some(batch)
    }
}

impl Iterator for BatchStream {
    type Item = Result<BaggedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch()
    }
}

/// Stream of batches of `batch_rows` rows at latent length `l_base`.
pub fn make_batches(
    corpus: Arc<Corpus>,
    batch_rows: usize,
    l_base: usize,
    layout: BatchLayout,
) -> Result<BatchStream> {
    if batch_rows == 0 || l_base == 0 || layout.bag_size() == 0 {
        return Err(Error::Input("batch rows, length and bag size must be >= 1".into()));
    }
    let stream = BatchStream {
        corpus,
        batch_rows,
        l_base,
        layout,
        wrap: false,
        cursor: 0,
        epoch: 0,
        tokens_consumed: 0,
    };
    if !stream.fits(0) {
        return Err(Error::Input(format!(
            "corpus of {} tokens cannot fill one batch of {batch_rows} x {}",
            stream.corpus.len(),
            layout.data_len(l_base) + 1
        )));
    }
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tt(shape: Vec<usize>, data: &[i64]) -> TokenTensor {
        TokenTensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn fold_is_a_reshape() {
        let x = tt(vec![1, 6], &[10, 11, 12, 13, 14, 15]);
        let f = fold_inputs(&x, 2).unwrap();
        assert_eq!(f.shape, vec![1, 3, 2]);
        assert_eq!(f.data, x.data);
        let one = fold_inputs(&x, 1).unwrap();
        assert_eq!(one.shape, vec![1, 6, 1]);
        assert_eq!(one.data, x.data);
    }

    #[test]
    fn fold_rejects_ragged_length() {
        let x = tt(vec![1, 5], &[0; 5]);
        assert!(matches!(fold_inputs(&x, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn shift_matches_pad_then_slice() {
        // labels l0..l5 as 100..105
        let lab = tt(vec![1, 6], &[100, 101, 102, 103, 104, 105]);
        let s = shift_labels(&lab, 3).unwrap();
        assert_eq!(s.shape, vec![1, 2, 3]);
        assert_eq!(s.data, vec![102, 103, 104, 105, -100, -100]);
        let s1 = shift_labels(&lab, 1).unwrap();
        assert_eq!(s1.data, lab.data);
    }

    #[test]
    fn window_labels_pad_at_row_end() {
        let lab = tt(vec![1, 3], &[7, 8, 9]);
        let w = window_labels(&lab, 2).unwrap();
        assert_eq!(w.shape, vec![1, 3, 2]);
        assert_eq!(w.data, vec![7, 8, 8, 9, 9, -100]);
    }

    #[test]
    fn markov_determinism() {
        let a = synth_markov_corpus(2, 8, 500, 42).unwrap();
        let b = synth_markov_corpus(2, 8, 500, 42).unwrap();
        let c = synth_markov_corpus(2, 8, 500, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tokens, c.tokens);
        assert!(a.tokens.iter().all(|&t| t < 8));
    }

    #[test]
    fn short_corpus_is_input_error() {
        assert!(matches!(synth_markov_corpus(3, 4, 2, 0), Err(Error::Input(_))));
    }

    #[test]
    fn token_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_markov_corpus(1, 300, 1000, 5).unwrap();
        for w in [TokenWidth::U16, TokenWidth::U32] {
            let p = dir.path().join(format!("{w:?}.tok"));
            write_token_file(&p, &c, w).unwrap();
            let back = read_token_file(&p).unwrap();
            assert_eq!(back.tokens, c.tokens);
            assert_eq!(back.vocab_size, 300);
        }
        let p = dir.path().join("junk.tok");
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(read_token_file(&p), Err(Error::Data(_))));
    }

    #[test]
    fn superposed_batch_shapes_and_accounting() {
        let corpus = Arc::new(Corpus::new((0..10_000).map(|i| i % 50).collect(), 50, "ramp").unwrap());
        let mut st = make_batches(corpus.clone(), 3, 32, BatchLayout::Superposed { s: 4 }).unwrap();
        let b = st.next_batch().unwrap().unwrap();
        assert_eq!(b.inputs.shape, vec![3, 32, 4]);
        assert_eq!(b.labels.shape, vec![3, 32, 4]);
        assert_eq!(b.data_tokens, 3 * 128);
        let mut flat = make_batches(corpus, 3, 32, BatchLayout::Standard).unwrap();
        let f = flat.next_batch().unwrap().unwrap();
        assert_eq!(f.inputs.shape, vec![3, 32]);
        assert_eq!(f.labels.shape, vec![3, 32]);
        for _ in 0..9 {
            st.next_batch().unwrap().unwrap();
        }
        assert_eq!(st.tokens_consumed, 10 * 3 * 32 * 4);
    }

    #[test]
    fn stream_ends_or_wraps() {
        let corpus = Arc::new(Corpus::new((0..100).map(|i| i % 7).collect(), 7, "tiny").unwrap());
        let st = make_batches(corpus.clone(), 2, 10, BatchLayout::Standard).unwrap();
        assert_eq!(st.count(), 4);
        let mut w = make_batches(corpus, 2, 10, BatchLayout::Standard)
            .unwrap()
            .wrapping(true);
        for _ in 0..9 {
            w.next_batch().unwrap().unwrap();
        }
        assert_eq!(w.epoch, 2);
    }
}
