//! Compute accounting and architecture comparison: analytic FLOPs per
//! token, smoothed loss curves, the speed-up factor, the depth-router noise
//! sweep, and a step-latency simulator for mixed-modality batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::config::{FfnLayout, GroupTag, ModelConfig};
use crate::data::{mix, Corpus, Modality};
use crate::depth::DepthNoise;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, LossBreakdown, Model, Trainable};
use crate::scalar::Scalar;

/// Forward FLOPs per token by component (2 FLOPs per multiply-accumulate).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub attention: f64,
    pub ffn: f64,
    pub router: f64,
    pub head: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.attention + self.ffn + self.router + self.head
    }

    fn blend(a: &Self, b: &Self, w: f64) -> Self {
        let f = |x: f64, y: f64| (1.0 - w) * x + w * y;
        FlopsBreakdown {
            attention: f(a.attention, b.attention),
            ffn: f(a.ffn, b.ffn),
            router: f(a.router, b.router),
            head: f(a.head, b.head),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub text: FlopsBreakdown,
    pub image: FlopsBreakdown,
}

impl FlopsReport {
    /// Per-token average for a batch with the given image-token fraction.
    pub fn per_token(&self, image_fraction: f64) -> FlopsBreakdown {
        FlopsBreakdown::blend(&self.text, &self.image, image_fraction)
    }

    pub fn total(&self, image_fraction: f64) -> f64 {
        self.per_token(image_fraction).total()
    }
}

/// Analytic forward FLOPs per token at the configured sequence length.
///
/// Attention context is averaged over causal positions. Depth-routed layers
/// charge their router on every token and everything else on the capacity
/// fraction, with attention context shrunk to the selected tokens. Routed
/// expert groups charge `experts * capacity` expert evaluations per token.
pub fn count_flops(cfg: &ModelConfig) -> FlopsReport {
    let (d, f, l) = (cfg.hidden as f64, cfg.ffn as f64, cfg.seq_len as f64);
    let groups = cfg.groups();
    let group_for = |m: Modality| groups.iter().find(|g| g.tag.accepts(m)).copied();
    let per_modality = |m: Modality| {
        let mut out = FlopsBreakdown::default();
        let g = group_for(m);
        for j in 0..cfg.layers {
            let (frac, ctx) = if cfg.is_depth_routed(j) {
                out.router += d;
                (cfg.mod_capacity, cfg.mod_capacity * l)
            } else {
                (1.0, l)
            };
            out.attention += frac * (4.0 * d * d + (ctx + 1.0) * d);
            if let Some(g) = g {
                if g.tag == GroupTag::Dense {
                    out.ffn += frac * 3.0 * d * f;
                } else {
                    out.router += frac * d * g.experts as f64;
                    out.ffn += frac * g.experts as f64 * g.capacity * 3.0 * d * f;
                }
            }
        }
        out.head = d * cfg.vocab.size() as f64;
        FlopsBreakdown {
            attention: 2.0 * out.attention,
            ffn: 2.0 * out.ffn,
            router: 2.0 * out.router,
            head: 2.0 * out.head,
        }
    };
    FlopsReport {
        text: per_modality(Modality::Text),
        image: per_modality(Modality::Image),
    }
}

/// FFN FLOPs per token of the layout-equivalent dense model.
pub fn dense_ffn_flops(cfg: &ModelConfig) -> f64 {
    let frac: f64 = (0..cfg.layers)
        .map(|j| if cfg.is_depth_routed(j) { cfg.mod_capacity } else { 1.0 })
        .sum();
    2.0 * frac * 3.0 * (cfg.hidden * cfg.ffn) as f64
}

/// Whether every routed group's capacity keeps FFN cost at dense parity.
pub fn ffn_parity(cfg: &ModelConfig) -> bool {
    match cfg.ffn_layout {
        FfnLayout::Dense => true,
        _ => cfg
            .groups()
            .iter()
            .all(|g| g.experts as f64 * g.capacity == 1.0),
    }
}

/// Exponential moving average with the given half-life in samples,
/// started at the first value.
pub fn ema(values: &[f64], half_life: f64) -> Vec<f64> {
    let alpha = 1.0 - 0.5f64.powf(1.0 / half_life.max(f64::MIN_POSITIVE));
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => a + alpha * (v - a),
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// `(cumulative FLOPs, loss)` samples with strictly increasing FLOPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    points: Vec<(f64, f64)>,
}

impl LossCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("loss curve has no points".into()));
        }
        if let Some(w) = points.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Contract(format!(
                "loss curve FLOPs not increasing: {} then {}",
                w[0].0, w[1].0
            )));
        }
        Ok(LossCurve { points })
    }

    /// Curve from per-step raw losses, a fixed FLOPs cost per step, and an
    /// EMA half-life (0 keeps raw values).
    pub fn from_steps(steps: &[(u64, f64)], flops_per_step: f64, half_life: f64) -> Result<Self> {
        let raw: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let smooth = if half_life > 0.0 { ema(&raw, half_life) } else { raw };
        LossCurve::new(
            steps
                .iter()
                .zip(smooth)
                .map(|(&(s, _), l)| (s as f64 * flops_per_step, l))
                .collect(),
        )
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn final_loss(&self) -> f64 {
        self.points.last().unwrap().1
    }

    pub fn total_flops(&self) -> f64 {
        self.points.last().unwrap().0
    }

    /// First FLOPs coordinate at which the curve reaches `target`, linearly
    /// interpolated between samples.
    pub fn flops_to_reach(&self, target: f64) -> Option<f64> {
        let p = &self.points;
        if p[0].1 <= target {
            return Some(p[0].0);
        }
        p.windows(2).find(|w| w[1].1 <= target).map(|w| {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            x0 + (x1 - x0) * (y0 - target) / (y0 - y1)
        })
    }

    pub fn scaled(&self, factor: f64) -> LossCurve {
        LossCurve {
            points: self.points.iter().map(|&(x, y)| (x * factor, y)).collect(),
        }
    }

    pub fn shifted(&self, offset: f64) -> LossCurve {
        LossCurve {
            points: self.points.iter().map(|&(x, y)| (x + offset, y)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Speedup {
    Factor { eta: f64, flops_at_match: f64 },
    NotReached,
}

impl Speedup {
    pub fn eta(&self) -> Option<f64> {
        match self {
            Speedup::Factor { eta, .. } => Some(*eta),
            Speedup::NotReached => None,
        }
    }
}

/// Dense total FLOPs over the FLOPs the sparse curve needs to first reach
/// the dense final loss.
pub fn speedup_eta(sparse: &LossCurve, dense: &LossCurve) -> Speedup {
    match sparse.flops_to_reach(dense.final_loss()) {
        Some(at) if at > 0.0 => Speedup::Factor {
            eta: dense.total_flops() / at,
            flops_at_match: at,
        },
        _ => Speedup::NotReached,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    /// `(sigma, mean eval loss)` in input order.
    pub rows: Vec<(f64, f64)>,
    pub monotone: bool,
}

/// Non-decreasing check with an absolute slack.
pub fn is_non_decreasing(values: &[f64], slack: f64) -> bool {
    values.windows(2).all(|w| w[1] >= w[0] - slack)
}

/// Mean loss over `batches` held-out batches starting at `first_index`,
/// with depth selections perturbed at each sigma.
pub fn noise_sensitivity_sweep<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    sigmas: &[f64],
    batch_size: usize,
    first_index: u64,
    batches: usize,
    noise_seed: u64,
) -> Result<NoiseSweep> {
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::Config(format!("noise sigma {sigma} outside [0, 1]")));
        }
        let mut parts = Vec::with_capacity(batches);
        for b in 0..batches {
            let index = first_index + b as u64;
            let batch = corpus.generate_batch(index, batch_size, model.config.seq_len)?;
            let opts = ForwardOptions {
                depth_noise: Some(DepthNoise {
                    sigma,
                    seed: mix(noise_seed, index),
                }),
                trainable: Trainable::Nothing,
                ..ForwardOptions::train()
            };
            parts.push(model.evaluate(&batch, &opts)?);
        }
        rows.push((sigma, LossBreakdown::combine(&parts).total));
    }
    let losses: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(NoiseSweep {
        monotone: is_non_decreasing(&losses, 0.0),
        rows,
    })
}

/// Per-device token mix for one simulated step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixSampler {
    /// Same mix on every device every step.
    Constant { text: usize, image: usize },
    /// Image spans drawn independently at the target fraction, so the mix
    /// matches it in expectation with binomial spread.
    Balanced {
        tokens: usize,
        span: usize,
        image_fraction: f64,
    },
    /// Each device's batch holds `rows` sequences, each text-heavy or
    /// image-heavy (`image_fraction -/+ spread`) with equal probability;
    /// the mean fraction equals `image_fraction`.
    Skewed {
        tokens: usize,
        image_fraction: f64,
        spread: f64,
        rows: usize,
    },
}

impl MixSampler {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
        match *self {
            MixSampler::Constant { text, image } => Ok((text, image)),
            MixSampler::Balanced {
                tokens,
                span,
                image_fraction,
            } => {
                let spans = tokens / span.max(1);
                let dist = Binomial::new(spans as u64, image_fraction)
                    .map_err(|e| Error::Config(format!("balanced sampler: {e}")))?;
                let image = dist.sample(rng) as usize * span;
                Ok((tokens - image, image))
            }
            MixSampler::Skewed {
                tokens,
                image_fraction,
                spread,
                rows,
            } => {
                if rows == 0 || rows > tokens {
                    return Err(Error::Config(format!("skewed sampler: {rows} rows for {tokens} tokens")));
                }
                let mut image = 0;
                for r in 0..rows {
                    let len = tokens / rows + usize::from(r < tokens % rows);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let frac = (image_fraction + sign * spread).clamp(0.0, 1.0);
                    image += (frac * len as f64).round() as usize;
                }
                Ok((tokens - image, image))
            }
        }
    }
}

/// Cost of one token on its modality's expert path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenCosts {
    pub text: f64,
    pub image: f64,
}

impl TokenCosts {
    /// Costs for a device holding `text_experts` and `image_experts` that
    /// execute one modality after the other: a token's cost scales inversely
    /// with its modality's expert share.
    pub fn from_allocation(text_experts: usize, image_experts: usize, per_token: f64) -> Self {
        let total = (text_experts + image_experts) as f64;
        TokenCosts {
            text: per_token * total / (2.0 * text_experts as f64),
            image: per_token * total / (2.0 * image_experts as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub devices: usize,
    pub steps: usize,
    pub mean: f64,
    pub std: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
    pub samples: Vec<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Step latency is the slowest device's `text * cost_t + image * cost_i`.
pub fn simulate_step_latency(
    devices: usize,
    sampler: &MixSampler,
    costs: TokenCosts,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LatencyStats> {
    if devices == 0 || steps == 0 {
        return Err(Error::Config("latency simulation needs devices and steps".into()));
    }
    if !(costs.text > 0.0 && costs.image > 0.0) {
        return Err(Error::Config("token costs must be positive".into()));
    }
    let mut samples = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut worst = 0.0f64;
        for _ in 0..devices {
            let (t, i) = sampler.sample(rng)?;
            worst = worst.max(t as f64 * costs.text + i as f64 * costs.image);
        }
        samples.push(worst);
    }
    let n = steps as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        devices,
        steps,
        mean,
        std,
        p50: percentile(&sorted, 0.5),
        p90: percentile(&sorted, 0.9),
        p99: percentile(&sorted, 0.99),
        max: *sorted.last().unwrap(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_constant_is_constant() {
        assert_eq!(ema(&[2.0; 5], 10.0), vec![2.0; 5]);
    }

    #[test]
    fn ema_half_life() {
        let mut v = vec![0.0];
        v.extend(std::iter::repeat_n(1.0, 100));
        let s = ema(&v, 100.0);
        assert!((s[100] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn curve_rejects_flat_flops() {
        assert!(LossCurve::new(vec![(1.0, 2.0), (1.0, 1.5)]).is_err());
    }
}
