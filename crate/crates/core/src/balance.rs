//! Batch composition that holds the image-token share of every batch near
//! a target, plus a running audit of the realised shares.
//!
//! Image spans are atomic, so a batch is composed by choosing the span
//! count nearest the target and filling rows from carry-over buffers of
//! text tokens and whole spans drawn from the corpus.

use std::collections::VecDeque;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Corpus, Segment, TokenBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixPolicy {
    pub target_image_fraction: f64,
    pub tolerance: f64,
    /// Batches per audit window.
    pub window: usize,
}

impl Default for MixPolicy {
    fn default() -> Self {
        MixPolicy {
            target_image_fraction: 0.5,
            tolerance: 0.05,
            window: 100,
        }
    }
}

impl MixPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_image_fraction > 0.0 && self.target_image_fraction < 1.0) {
            return Err(Error::Config(format!(
                "target image fraction {} outside (0, 1)",
                self.target_image_fraction
            )));
        }
        if !(self.tolerance > 0.0) || self.window == 0 {
            return Err(Error::Config("tolerance and window must be positive".into()));
        }
        Ok(())
    }

    /// Image span count per batch nearest the target fraction.
    pub fn span_target(&self, batch: usize, seq_len: usize, span: usize) -> usize {
        let cap = batch * (seq_len / span);
        let want = self.target_image_fraction * (batch * seq_len) as f64 / span as f64;
        (want.round() as usize).min(cap)
    }
}

/// Composer state; serialisable so training can resume exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComposerState {
    /// Next corpus batch index to draw from.
    pub next_index: u64,
    /// Batches composed so far.
    pub composed: u64,
    pub text: VecDeque<u32>,
    pub spans: VecDeque<Vec<u32>>,
    pub generated_tokens: u64,
    pub emitted_tokens: u64,
    pub fractions: Vec<f64>,
}

impl ComposerState {
    pub fn buffered_tokens(&self) -> u64 {
        self.text.len() as u64 + self.spans.iter().map(|s| s.len() as u64).sum::<u64>()
    }
}

/// Pulls corpus batches and re-packs them at the policy's image share.
#[derive(Debug, Clone)]
pub struct BatchComposer {
    pub policy: MixPolicy,
    pub state: ComposerState,
    seed: u64,
}

/// Give up after this many consecutive draws that add nothing needed.
const MAX_DRAWS: usize = 64;

impl BatchComposer {
    pub fn new(policy: MixPolicy, seed: u64, first_index: u64) -> Result<Self> {
        policy.validate()?;
        Ok(BatchComposer {
            policy,
            state: ComposerState {
                next_index: first_index,
                ..Default::default()
            },
            seed,
        })
    }

    pub fn from_state(policy: MixPolicy, seed: u64, state: ComposerState) -> Result<Self> {
        policy.validate()?;
        Ok(BatchComposer { policy, state, seed })
    }

    fn absorb(&mut self, batch: &TokenBatch, span: usize, image_base: u32) {
        let l = batch.seq_len;
        for r in 0..batch.batch {
            let mut row: Vec<u32> = batch.tokens[r * l..(r + 1) * l].to_vec();
            row.push(batch.targets[(r + 1) * l - 1]);
            self.state.generated_tokens += row.len() as u64;
            let mut i = 0;
            while i < row.len() {
                if row[i] >= image_base {
                    self.state.spans.push_back(row[i..i + span].to_vec());
                    i += span;
                } else {
                    self.state.text.push_back(row[i]);
                    i += 1;
                }
            }
        }
    }

    /// Next batch with the span count nearest the target fraction.
    pub fn compose_batch(&mut self, corpus: &Corpus, batch: usize, seq_len: usize) -> Result<TokenBatch> {
        let span = corpus.config().image_span_length;
        let image_base = corpus.vocab().image_base() as u32;
        let n_star = self.policy.span_target(batch, seq_len, span);
        if self.state.text.is_empty() && self.state.spans.is_empty() {
            let natural = corpus.generate_batch(self.state.next_index, batch, seq_len)?;
            if natural.image_count() == n_star * span {
                self.state.next_index += 1;
                let n = (batch * (seq_len + 1)) as u64;
                self.state.generated_tokens += n;
                return Ok(self.emit(natural, n));
            }
        }
        let text_needed = batch * (seq_len + 1) - n_star * span;
        let mut idle = 0;
        while self.state.spans.len() < n_star || self.state.text.len() < text_needed {
            let (spans_before, text_before) = (self.state.spans.len(), self.state.text.len());
            let natural = corpus.generate_batch(self.state.next_index, batch, seq_len)?;
            self.state.next_index += 1;
            self.absorb(&natural, span, image_base);
            let gained_spans = self.state.spans.len() > spans_before;
            let gained_text = self.state.text.len() > text_before;
            let useful = (self.state.spans.len() < n_star && gained_spans)
                || (self.state.text.len() < text_needed && gained_text)
                || (self.state.spans.len() >= n_star && self.state.text.len() >= text_needed);
            idle = if useful { 0 } else { idle + 1 };
            if idle >= MAX_DRAWS {
                let which = if self.state.spans.len() < n_star { "image" } else { "text" };
                return Err(Error::Data(format!("generator exhausted for {which} tokens")));
            }
        }
        let mut rng = stream_rng(self.seed, 0xBA, self.state.composed);
        let mut counts = vec![n_star / batch; batch];
        for r in sample(&mut rng, batch, n_star % batch) {
            counts[r] += 1;
        }
        let mut streams = Vec::with_capacity(batch);
        for &c in &counts {
            let layout = corpus.row_layout(c, seq_len, &mut rng);
            let mut row = Vec::with_capacity(seq_len + 1);
            for seg in layout {
                match seg {
                    Segment::Text(n) => row.extend(self.state.text.drain(..n)),
                    Segment::Image => row.extend(self.state.spans.pop_front().unwrap()),
                }
            }
            row.push(self.state.text.pop_front().unwrap());
            streams.push(row);
        }
        let out = TokenBatch::from_streams(corpus.vocab(), seq_len, &streams)?;
        Ok(self.emit(out, (batch * (seq_len + 1)) as u64))
    }

    fn emit(&mut self, batch: TokenBatch, tokens: u64) -> TokenBatch {
        self.state.emitted_tokens += tokens;
        self.state.composed += 1;
        self.state.fractions.push(batch.image_fraction());
        batch
    }

    pub fn audit(&self) -> MixAudit {
        MixAudit {
            target: self.policy.target_image_fraction,
            tolerance: self.policy.tolerance,
            fractions: self.state.fractions.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub start: usize,
    pub batches: usize,
    /// Absolute deviation of the realised image fraction from target.
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub exceeded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub windows: Vec<WindowStats>,
    pub flagged: usize,
    pub overall_mean: f64,
    pub overall_max: f64,
}

/// Realised image fractions and their deviation from target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixAudit {
    pub target: f64,
    pub tolerance: f64,
    pub fractions: Vec<f64>,
}

impl MixAudit {
    pub fn observe(&mut self, fraction: f64) {
        self.fractions.push(fraction);
    }

    /// Statistics over consecutive windows of `window` batches (the last
    /// window may be shorter).
    pub fn report(&self, window: usize) -> Result<AuditReport> {
        if self.fractions.is_empty() || window == 0 {
            return Err(Error::Contract("audit window is empty".into()));
        }
        let devs: Vec<f64> = self.fractions.iter().map(|f| (f - self.target).abs()).collect();
        let windows: Vec<WindowStats> = devs
            .chunks(window)
            .enumerate()
            .map(|(i, w)| {
                let max = w.iter().copied().fold(0.0, f64::max);
                WindowStats {
                    start: i * window,
                    batches: w.len(),
                    min: w.iter().copied().fold(f64::INFINITY, f64::min),
                    mean: w.iter().sum::<f64>() / w.len() as f64,
                    max,
                    exceeded: max > self.tolerance,
                }
            })
            .collect();
        Ok(AuditReport {
            flagged: windows.iter().filter(|w| w.exceeded).count(),
            overall_mean: devs.iter().sum::<f64>() / devs.len() as f64,
            overall_max: devs.iter().copied().fold(0.0, f64::max),
            windows,
        })
    }
}
