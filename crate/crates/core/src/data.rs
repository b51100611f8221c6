//! Deterministic synthetic interleaved text/image token corpora.
//!
//! Text and image tokens share one id space. Image ids occupy the top
//! `image_vocab_size` ids; each modality is drawn from its own first-order
//! Markov chain so that modality-specialised experts have something to
//! learn. Image tokens always come in fixed-length spans.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub text_vocab_size: usize,
    pub image_vocab_size: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec {
            text_vocab_size: 512,
            image_vocab_size: 64,
        }
    }
}

impl VocabSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_vocab_size == 0 || self.image_vocab_size >= self.text_vocab_size {
            return Err(Error::Config(format!(
                "image vocab {} must be in [1, text vocab {})",
                self.image_vocab_size, self.text_vocab_size
            )));
        }
        Ok(())
    }

    /// Size of the unified id space.
    pub fn size(&self) -> usize {
        self.text_vocab_size
    }

    pub fn image_base(&self) -> usize {
        self.text_vocab_size - self.image_vocab_size
    }

    pub fn modality_of(&self, id: u32) -> Modality {
        if (id as usize) >= self.image_base() {
            Modality::Image
        } else {
            Modality::Text
        }
    }
}

fn default_text_branching() -> usize {
    8
}
fn default_text_sharpness() -> f64 {
    1.5
}
fn default_image_branching() -> usize {
    16
}
fn default_image_sharpness() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Target fraction of image tokens per batch.
    pub text_image_ratio: f64,
    pub image_span_length: usize,
    pub vocab: VocabSpec,
    /// Successor count per text state.
    #[serde(default = "default_text_branching")]
    pub text_branching: usize,
    /// Log-weight scale of text transitions; larger is more predictable.
    #[serde(default = "default_text_sharpness")]
    pub text_sharpness: f64,
    #[serde(default = "default_image_branching")]
    pub image_branching: usize,
    #[serde(default = "default_image_sharpness")]
    pub image_sharpness: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            text_image_ratio: 0.5,
            image_span_length: 16,
            vocab: VocabSpec::default(),
            text_branching: default_text_branching(),
            text_sharpness: default_text_sharpness(),
            image_branching: default_image_branching(),
            image_sharpness: default_image_sharpness(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if !(0.0..1.0).contains(&self.text_image_ratio) {
            return Err(Error::Config(format!(
                "text_image_ratio {} outside [0, 1)",
                self.text_image_ratio
            )));
        }
        if self.image_span_length == 0 {
            return Err(Error::Config("image_span_length must be >= 1".into()));
        }
        if self.text_branching == 0 || self.image_branching == 0 {
            return Err(Error::Config("branching must be >= 1".into()));
        }
        Ok(())
    }
}

/// Interleaved token ids with per-position modality labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub modality: Vec<Modality>,
    pub targets: Vec<u32>,
    pub target_modality: Vec<Modality>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.modality.iter().filter(|&&m| m == Modality::Image).count()
    }

    pub fn image_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.image_count() as f64 / self.len() as f64
        }
    }

    /// Build a batch from raw rows of `seq_len + 1` ids each.
    pub fn from_streams(vocab: &VocabSpec, seq_len: usize, streams: &[Vec<u32>]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(streams.len() * seq_len);
        let mut targets = Vec::with_capacity(streams.len() * seq_len);
        for s in streams {
            if s.len() != seq_len + 1 {
                return Err(Error::Data(format!(
                    "stream of length {} for seq_len {seq_len}",
                    s.len()
                )));
            }
            if let Some(bad) = s.iter().find(|&&t| t as usize >= vocab.size()) {
                return Err(Error::Data(format!("token id {bad} outside vocab")));
            }
            tokens.extend_from_slice(&s[..seq_len]);
            targets.extend_from_slice(&s[1..]);
        }
        Ok(TokenBatch {
            batch: streams.len(),
            seq_len,
            modality: tokens.iter().map(|&t| vocab.modality_of(t)).collect(),
            target_modality: targets.iter().map(|&t| vocab.modality_of(t)).collect(),
            tokens,
            targets,
        })
    }
}

/// First-order Markov chain with sparse random transitions.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    /// Per state: successors with cumulative probabilities.
    transitions: Vec<Vec<(u32, f64)>>,
}

impl MarkovChain {
    pub fn random(states: usize, branching: usize, sharpness: f64, rng: &mut ChaCha8Rng) -> Self {
        let branching = branching.min(states);
        let transitions = (0..states)
            .map(|_| {
                let succ = sample(rng, states, branching).into_vec();
                let weights: Vec<f64> = succ
                    .iter()
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        (sharpness * z).exp()
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                succ.into_iter()
                    .zip(weights)
                    .map(|(s, w)| {
                        acc += w / total;
                        (s as u32, acc)
                    })
                    .collect()
            })
            .collect();
        MarkovChain { transitions }
    }

    pub fn states(&self) -> usize {
        self.transitions.len()
    }

    pub fn step(&self, state: u32, rng: &mut ChaCha8Rng) -> u32 {
        let row = &self.transitions[state as usize];
        let u: f64 = rng.random();
        row.iter()
            .find(|(_, c)| u < *c)
            .map(|(s, _)| *s)
            .unwrap_or(row[row.len() - 1].0)
    }

    /// Transition probability `P(next | state)`.
    pub fn prob(&self, state: u32, next: u32) -> f64 {
        let mut prev = 0.0;
        for &(s, c) in &self.transitions[state as usize] {
            if s == next {
                return c - prev;
            }
            prev = c;
        }
        0.0
    }
}

/// Segment of a row layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Text(usize),
    Image,
}

/// Corpus generator with its Markov chains built from the config seed.
#[derive(Debug, Clone)]
pub struct Corpus {
    cfg: CorpusConfig,
    text: MarkovChain,
    image: MarkovChain,
}

/// SplitMix-style combination of two words.
pub fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a combined word
    let mut z = a ^ b.wrapping_mul(0x9E3779B97F4A7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for a `(seed, stream, index)` triple.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, stream), index))
}

impl Corpus {
    pub fn new(cfg: CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, 0xC0, 0);
        let text_states = cfg.vocab.image_base();
        let text = MarkovChain::random(text_states, cfg.text_branching, cfg.text_sharpness, &mut rng);
        let image = MarkovChain::random(
            cfg.vocab.image_vocab_size,
            cfg.image_branching,
            cfg.image_sharpness,
            &mut rng,
        );
        Ok(Corpus { cfg, text, image })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.cfg.vocab
    }

    pub fn text_chain(&self) -> &MarkovChain {
        &self.text
    }

    pub fn image_chain(&self) -> &MarkovChain {
        &self.image
    }

    fn check_len(&self, seq_len: usize) -> Result<()> {
        if seq_len < self.cfg.image_span_length {
            return Err(Error::Config(format!(
                "seq_len {seq_len} shorter than image span {}",
                self.cfg.image_span_length
            )));
        }
        Ok(())
    }

    /// Per-row image span counts for batch `index` at the target ratio.
    pub fn span_counts(&self, index: u64, batch: usize, seq_len: usize) -> Vec<usize> {
        let mut rng = stream_rng(self.cfg.seed, 0xA1, index);
        let s = self.cfg.image_span_length;
        let cap = seq_len / s;
        let expected = self.cfg.text_image_ratio * (batch * seq_len) as f64 / s as f64;
        let mut n = expected.floor() as usize;
        if rng.random::<f64>() < expected - expected.floor() {
            n += 1;
        }
        let n = n.min(cap * batch);
        let mut counts = vec![n / batch; batch];
        let extra = n % batch;
        for r in sample(&mut rng, batch, extra) {
            counts[r] += 1;
        }
        // Respect the per-row cap by pushing overflow to rows with room.
        let mut spill = 0;
        for c in counts.iter_mut() {
            if *c > cap {
                spill += *c - cap;
                *c = cap;
            }
        }
        for c in counts.iter_mut() {
            let room = cap - *c;
            let take = room.min(spill);
            *c += take;
            spill -= take;
        }
        counts
    }

    /// Random interleaving of `spans` image spans with text for one row.
    pub fn row_layout(&self, spans: usize, seq_len: usize, rng: &mut ChaCha8Rng) -> Vec<Segment> {
        let s = self.cfg.image_span_length;
        let text = seq_len - spans * s;
        let items = spans + text;
        let mut is_span = vec![false; items];
        for i in sample(rng, items, spans) {
            is_span[i] = true;
        }
        let mut out = Vec::new();
        let mut run = 0;
        for span in is_span {
            if span {
                if run > 0 {
                    out.push(Segment::Text(run));
                    run = 0;
                }
                out.push(Segment::Image);
            } else {
                run += 1;
            }
        }
        if run > 0 {
            out.push(Segment::Text(run));
        }
        out
    }

    /// Concrete ids for a layout plus one trailing text target token.
    pub fn realize_row(&self, layout: &[Segment], rng: &mut ChaCha8Rng) -> Vec<u32> {
        let base = self.cfg.vocab.image_base() as u32;
        let mut out = Vec::new();
        let mut text_state: u32 = rng.random_range(0..self.text.states() as u32);
        let mut first_text = true;
        let mut emit_text = |out: &mut Vec<u32>, rng: &mut ChaCha8Rng| {
            if first_text {
                first_text = false;
            } else {
                text_state = self.text.step(text_state, rng);
            }
            out.push(text_state);
        };
        for seg in layout {
            match *seg {
                Segment::Text(n) => {
                    for _ in 0..n {
                        emit_text(&mut out, rng);
                    }
                }
                Segment::Image => {
                    let mut st: u32 = rng.random_range(0..self.image.states() as u32);
                    for i in 0..self.cfg.image_span_length {
                        if i > 0 {
                            st = self.image.step(st, rng);
                        }
                        out.push(base + st);
                    }
                }
            }
        }
        emit_text(&mut out, rng);
        out
    }

    /// Batch number `index`; a pure function of `(seed, index, batch, seq_len)`.
    pub fn generate_batch(&self, index: u64, batch: usize, seq_len: usize) -> Result<TokenBatch> {
        self.check_len(seq_len)?;
        let counts = self.span_counts(index, batch, seq_len);
        let streams: Vec<Vec<u32>> = counts
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                let mut rng = stream_rng(self.cfg.seed, 0xB2, index.wrapping_mul(1 << 20) + r as u64);
                let layout = self.row_layout(c, seq_len, &mut rng);
                self.realize_row(&layout, &mut rng)
            })
            .collect();
        TokenBatch::from_streams(&self.cfg.vocab, seq_len, &streams)
    }
}

/// One-shot form of [`Corpus::generate_batch`].
pub fn generate_batch(cfg: &CorpusConfig, index: u64, batch: usize, seq_len: usize) -> Result<TokenBatch> {
    Corpus::new(cfg.clone())?.generate_batch(index, batch, seq_len)
}

/// Flattened positions split by modality, each in ascending order.
pub fn modality_partition(batch: &TokenBatch) -> (Vec<usize>, Vec<usize>) {
    partition_labels(&batch.modality)
}

pub fn partition_labels(labels: &[Modality]) -> (Vec<usize>, Vec<usize>) {
    let mut text = Vec::new();
    let mut image = Vec::new();
    for (i, m) in labels.iter().enumerate() {
        match m {
            Modality::Text => text.push(i),
            Modality::Image => image.push(i),
        }
    }
    (text, image)
}

/// Empirical unigram entropy (nats) of the ids labelled `which`.
pub fn unigram_entropy(batch: &TokenBatch, which: Modality) -> f64 {
    let mut counts = std::collections::HashMap::new();
    let mut total = 0usize;
    for (&t, &m) in batch.tokens.iter().zip(&batch.modality) {
        if m == which {
            *counts.entry(t).or_insert(0usize) += 1;
            total += 1;
        }
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

const CORPUS_MAGIC: &[u8; 8] = b"MOMACORP";
const CORPUS_VERSION: u32 = 1;

/// Header of an exported corpus file.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusHeader {
    pub vocab: VocabSpec,
    pub text_image_ratio: f64,
    pub image_span_length: usize,
}

/// Little-endian corpus file: magic, version, vocab spec, ratio, span
/// length, row count, sequence length, then `u32` tokens, `u8` modality
/// mask (0 text, 1 image) and `u32` targets.
pub fn encode_corpus(header: &CorpusHeader, batch: &TokenBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + batch.len() * 9);
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.vocab.text_vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&(header.vocab.image_vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&header.text_image_ratio.to_le_bytes());
    out.extend_from_slice(&(header.image_span_length as u32).to_le_bytes());
    out.extend_from_slice(&(batch.batch as u32).to_le_bytes());
    out.extend_from_slice(&(batch.seq_len as u32).to_le_bytes());
    for t in &batch.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out.extend(batch.modality.iter().map(|m| (*m == Modality::Image) as u8));
    for t in &batch.targets {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode_corpus(bytes: &[u8]) -> Result<(CorpusHeader, TokenBatch)> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Data("corpus file truncated".into()));
        }
        let (a, b) = cur.split_at(n);
        cur = b;
        Ok(a)
    };
    if take(8)? != CORPUS_MAGIC {
        return Err(Error::Data("bad corpus magic".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != CORPUS_VERSION {
        return Err(Error::Data(format!("unsupported corpus version {version}")));
    }
    let vocab = VocabSpec {
        text_vocab_size: u32_at(take(4)?) as usize,
        image_vocab_size: u32_at(take(4)?) as usize,
    };
    vocab.validate().map_err(|e| Error::Data(e.to_string()))?;
    let ratio = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let span = u32_at(take(4)?) as usize;
    let rows = u32_at(take(4)?) as usize;
    let seq_len = u32_at(take(4)?) as usize;
    let n = rows * seq_len;
    let tokens: Vec<u32> = take(4 * n)?.chunks_exact(4).map(u32_at).collect();
    let mask = take(n)?.to_vec();
    let targets: Vec<u32> = take(4 * n)?.chunks_exact(4).map(u32_at).collect();
    let mut modality = Vec::with_capacity(n);
    for (&t, &m) in tokens.iter().zip(&mask) {
        let label = match m {
            0 => Modality::Text,
            1 => Modality::Image,
            _ => return Err(Error::Data(format!("bad modality byte {m}"))),
        };
        if t as usize >= vocab.size() || vocab.modality_of(t) != label {
            return Err(Error::Data(format!("token {t} inconsistent with its mask")));
        }
        modality.push(label);
    }
    if let Some(bad) = targets.iter().find(|&&t| t as usize >= vocab.size()) {
        return Err(Error::Data(format!("target {bad} outside vocab")));
    }
    let target_modality = targets.iter().map(|&t| vocab.modality_of(t)).collect();
    Ok((
        CorpusHeader {
            vocab,
            text_image_ratio: ratio,
            image_span_length: span,
        },
        TokenBatch {
            batch: rows,
            seq_len,
            tokens,
            modality,
            targets,
            target_modality,
        },
    ))
}
