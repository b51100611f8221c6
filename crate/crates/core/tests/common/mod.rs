#![allow(dead_code)]

use moma_core::config::{FfnLayout, GroupTag};
use moma_core::data::{CorpusConfig, Modality, TokenBatch, VocabSpec};
use moma_core::params::names;
use moma_core::{Arch, BaseDims, Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn micro(arch: Arch) -> ModelConfig {
    ModelConfig::named(arch, BaseDims::micro())
}

pub fn micro_layout(layout: FfnLayout, mod_interval: Option<usize>) -> ModelConfig {
    let mut cfg = micro(Arch::Dense);
    cfg.arch = None;
    cfg.ffn_layout = layout;
    cfg.mod_interval = mod_interval;
    cfg
}

pub fn model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    Model::new(cfg, &mut rng(seed)).unwrap()
}

/// Redraw every router (expert and depth) with unit scale so scores spread.
pub fn spread_routers(m: &mut Model<f64>, seed: u64) {
    let mut r = rng(seed);
    let targets: Vec<String> = m
        .params
        .names()
        .filter(|n| n.contains("router") && !n.starts_with("aux."))
        .cloned()
        .collect();
    for n in targets {
        let t = m.params.get_mut(&n).unwrap();
        *t = Tensor::randn(t.shape(), 1.0, &mut r);
    }
}

pub fn random_mask(n: usize, r: &mut ChaCha8Rng) -> Vec<Modality> {
    (0..n)
        .map(|_| if r.random::<bool>() { Modality::Image } else { Modality::Text })
        .collect()
}

pub fn micro_corpus(seed: u64) -> CorpusConfig {
    CorpusConfig {
        seed,
        text_image_ratio: 0.5,
        image_span_length: 4,
        vocab: BaseDims::micro().vocab,
        ..Default::default()
    }
}

/// Random batch of `rows` sequences with whole image spans of length 4.
pub fn random_batch(vocab: &VocabSpec, rows: usize, seq_len: usize, r: &mut ChaCha8Rng) -> TokenBatch {
    let base = vocab.image_base() as u32;
    let streams: Vec<Vec<u32>> = (0..rows)
        .map(|_| {
            let mut s = Vec::new();
            while s.len() < seq_len + 1 {
                if r.random::<f64>() < 0.15 {
                    for _ in 0..4 {
                        s.push(base + r.random_range(0..vocab.image_vocab_size as u32));
                    }
                } else {
                    s.push(r.random_range(0..base));
                }
            }
            s.truncate(seq_len + 1);
            s
        })
        .collect();
    TokenBatch::from_streams(vocab, seq_len, &streams).unwrap()
}

/// Same rows with every position from `t` on redrawn.
pub fn change_suffix(b: &TokenBatch, t: usize, seed: u64) -> TokenBatch {
    let vocab = BaseDims::micro().vocab;
    let mut r = rng(seed);
    let l = b.seq_len;
    let streams: Vec<Vec<u32>> = (0..b.batch)
        .map(|row| {
            let mut s: Vec<u32> = b.tokens[row * l..(row + 1) * l].to_vec();
            s.push(b.targets[(row + 1) * l - 1]);
            for v in &mut s[t..] {
                *v = r.random_range(0..vocab.size() as u32);
            }
            s
        })
        .collect();
    TokenBatch::from_streams(&vocab, l, &streams).unwrap()
}

// Independent plain-loop arithmetic used by the oracles below.

pub fn matmul(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += a[i * inner + k] * b[k * cols + j];
            }
            out[i * cols + j] = s;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// SwiGLU of one row.
pub fn swiglu_row(x: &[f64], w_in: &Tensor<f64>, w_gate: &Tensor<f64>, w_out: &Tensor<f64>) -> Vec<f64> {
    let d = x.len();
    let f = w_in.cols();
    let up = matmul(x, 1, d, w_in.data(), f);
    let gate = matmul(x, 1, d, w_gate.data(), f);
    let h: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    matmul(&h, 1, f, w_out.data(), d)
}

pub fn layer_norm_row(x: &[f64], scale: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(scale)
        .map(|(v, s)| (v - mean) / (var + eps).sqrt() * s)
        .collect()
}

/// Top-k by full sort, ties to the lower index, returned ascending.
pub fn top_k_sorted(col: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[b].partial_cmp(&col[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k.min(col.len())].to_vec();
    top.sort_unstable();
    top
}

/// Expert block of `layer` computed from scratch: per-modality pools,
/// per-expert top-k, gate-weighted SwiGLU sum, residual + post-norm.
/// Returns `(out, mixture)` as flat row-major vectors.
pub fn moma_oracle(m: &Model<f64>, layer: usize, hidden: &Tensor<f64>, mask: &[Modality]) -> (Vec<f64>, Vec<f64>) {
    let cfg = &m.config;
    let (n, d) = (hidden.rows(), cfg.hidden);
    let mut y = vec![0.0; n * d];
    for g in cfg.groups() {
        let pool: Vec<usize> = (0..n).filter(|&i| g.tag.accepts(mask[i])).collect();
        if pool.is_empty() {
            continue;
        }
        let expert = |e: usize, mat: &str| m.params.get(&names::expert(layer, g.tag, e, mat)).unwrap();
        if g.tag == GroupTag::Dense {
            for &i in &pool {
                let out = swiglu_row(hidden.row(i), expert(0, "w_in"), expert(0, "w_gate"), expert(0, "w_out"));
                y[i * d..(i + 1) * d].copy_from_slice(&out);
            }
            continue;
        }
        let w = m.params.get(&names::router(layer, g.tag)).unwrap();
        let k = ((g.capacity * pool.len() as f64 + 1e-9).floor() as usize).max(1).min(pool.len());
        for e in 0..g.experts {
            let scores: Vec<f64> = pool
                .iter()
                .map(|&i| {
                    let logit: f64 = (0..d).map(|c| hidden.row(i)[c] * w.data()[c * g.experts + e]).sum();
                    sigmoid(logit)
                })
                .collect();
            for p in top_k_sorted(&scores, k) {
                let i = pool[p];
                let out = swiglu_row(hidden.row(i), expert(e, "w_in"), expert(e, "w_gate"), expert(e, "w_out"));
                for c in 0..d {
                    y[i * d + c] += scores[p] * out[c];
                }
            }
        }
    }
    let scale = m.params.get(&names::post_norm(layer)).unwrap().data().to_vec();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let ln = layer_norm_row(&y[i * d..(i + 1) * d], &scale, cfg.norm_eps);
        out.extend(hidden.row(i).iter().zip(&ln).map(|(h, l)| h + l));
    }
    (out, y)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Run configuration on the micro dimensions and micro corpus.
pub fn micro_run(arch: Arch, seed: u64, total_steps: usize) -> moma_core::train::RunConfig {
    moma_core::train::RunConfig {
        arch,
        base: BaseDims::micro(),
        corpus: micro_corpus(0),
        schedule: moma_core::optim::Schedule {
            peak_lr: 3e-3,
            end_lr: 3e-5,
            warmup_steps: (total_steps / 10).max(1),
            total_steps,
        },
        batch_size: 4,
        seed,
        eval_batches: 2,
        ..Default::default()
    }
}

/// Overwrite every auxiliary router with fresh unit-scale weights.
pub fn random_aux(m: &mut Model<f64>, seed: u64) {
    let cfg = m.config.clone();
    moma_core::params::init_aux_params(&cfg, &mut m.params, &mut rng(seed)).unwrap();
    let mut r = rng(seed + 1);
    let aux: Vec<String> = m.params.names().filter(|n| n.starts_with("aux.")).cloned().collect();
    for n in aux {
        let t = m.params.get_mut(&n).unwrap();
        *t = Tensor::randn(t.shape(), 1.0, &mut r);
    }
}
