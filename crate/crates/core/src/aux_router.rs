//! Auxiliary routers: small per-token predictors of batch top-k membership,
//! trained after the main model on its frozen routing decisions.
//!
//! `score(x) = sigmoid(silu(x W_a1) W_a2)` with `W_a1: [d, d/2]`. A token
//! joins a target when its score is strictly above one half.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, RoutingTrace, Trainable};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::params::{names, ParamStore};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AuxRouterParams<T> {
    pub w_a1: Tensor<T>,
    pub w_a2: Tensor<T>,
}

impl<T: Scalar> AuxRouterParams<T> {
    pub fn new(w_a1: Tensor<T>, w_a2: Tensor<T>) -> Result<Self> {
        let (a, b) = (w_a1.shape(), w_a2.shape());
        if a.len() != 2 || b.len() != 2 || a[0] % 2 != 0 || a[1] != a[0] / 2 || b[0] != a[1] {
            return Err(Error::Config(format!(
                "auxiliary router shapes {a:?} and {b:?} are not [d, d/2] and [d/2, targets]"
            )));
        }
        Ok(AuxRouterParams { w_a1, w_a2 })
    }

    pub fn targets(&self) -> usize {
        self.w_a2.shape()[1]
    }

    pub fn score(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        aux_score(hidden, &self.w_a1, &self.w_a2)
    }
}

/// Per-token scores `[b, targets]`.
pub fn aux_score<T: Scalar>(hidden: &Tensor<T>, w_a1: &Tensor<T>, w_a2: &Tensor<T>) -> Result<Tensor<T>> {
    let d = hidden.cols();
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("auxiliary routers need an even hidden size, got {d}")));
    }
    if w_a1.shape() != [d, d / 2] || w_a2.shape().len() != 2 || w_a2.shape()[0] != d / 2 {
        return Err(Error::Shape {
            op: "aux_score",
            lhs: w_a1.shape().to_vec(),
            rhs: w_a2.shape().to_vec(),
        });
    }
    let (b, h, t) = (hidden.rows(), d / 2, w_a2.shape()[1]);
    let mut mid = vec![T::zero(); b * h];
    gemm(b, d, h, T::one(), hidden.data(), Layout::N, w_a1.data(), Layout::N, T::zero(), &mut mid);
    for v in mid.iter_mut() {
        let s = *v / (T::one() + (-*v).exp());
        *v = s;
    }
    let mut out = vec![T::zero(); b * t];
    gemm(b, h, t, T::one(), &mid, Layout::N, w_a2.data(), Layout::N, T::zero(), &mut out);
    for v in out.iter_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
    Tensor::new(vec![b, t], out)
}

/// Membership per score: selected iff strictly above 0.5.
pub fn causal_select<T: Scalar>(scores: &Tensor<T>) -> Vec<bool> {
    let half = T::from_f64_lossy(0.5);
    scores.data().iter().map(|&s| s > half).collect()
}

/// One distillation example set: router inputs and 0/1 membership labels.
#[derive(Debug, Clone)]
pub struct AuxExample<T> {
    /// Parameter prefix, e.g. `aux.layer.1.moma.text`.
    pub slot: String,
    pub inputs: Tensor<T>,
    /// Row-major `[rows, targets]`.
    pub labels: Vec<T>,
}

/// Turn the routing trace of a captured training-mode forward pass into
/// per-router distillation examples.
pub fn examples_from_trace<T: Scalar>(trace: &RoutingTrace<T>) -> Result<Vec<AuxExample<T>>> {
    let mut out = Vec::new();
    for g in &trace.groups {
        let inputs = g
            .inputs
            .clone()
            .ok_or_else(|| Error::Contract("routing trace captured without inputs".into()))?;
        let experts = g.assignment.selections.len();
        let mut labels = vec![T::zero(); g.pool.len() * experts];
        for (e, sel) in g.assignment.selections.iter().enumerate() {
            for &i in sel {
                labels[i * experts + e] = T::one();
            }
        }
        out.push(AuxExample {
            slot: format!("aux.layer.{}.moma.{}", g.layer, g.tag.name()),
            inputs,
            labels,
        });
    }
    for dtr in &trace.depth {
        let inputs = dtr
            .inputs
            .clone()
            .ok_or_else(|| Error::Contract("routing trace captured without inputs".into()))?;
        let mut labels = vec![T::zero(); dtr.pool_size];
        for &i in &dtr.selected {
            labels[i] = T::one();
        }
        out.push(AuxExample {
            slot: format!("aux.layer.{}.mod_router", dtr.layer),
            inputs,
            labels,
        });
    }
    Ok(out)
}

/// BCE loss and gradients of one auxiliary router on one example set.
pub fn aux_loss_grads<T: Scalar>(
    params: &AuxRouterParams<T>,
    inputs: &Tensor<T>,
    labels: &[T],
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone())?;
    let w1 = tape.leaf(params.w_a1.clone(), true)?;
    let w2 = tape.leaf(params.w_a2.clone(), true)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.silu(h)?;
    let logits = tape.matmul(h, w2)?;
    let loss = tape.bce_with_logits(logits, labels)?;
    let grads = tape.backward(loss)?;
    let g1 = grads.wrt(w1).cloned().unwrap_or_else(|| Tensor::zeros(params.w_a1.shape()));
    let g2 = grads.wrt(w2).cloned().unwrap_or_else(|| Tensor::zeros(params.w_a2.shape()));
    Ok((tape.value(loss).item().as_f64(), g1, g2))
}

/// Fraction of membership decisions that match the labels.
pub fn agreement<T: Scalar>(params: &AuxRouterParams<T>, inputs: &Tensor<T>, labels: &[T]) -> Result<f64> {
    let member = causal_select(&params.score(inputs)?);
    if member.is_empty() {
        return Ok(1.0);
    }
    let hits = member
        .iter()
        .zip(labels)
        .filter(|(&m, &l)| m == (l > T::from_f64_lossy(0.5)))
        .count();
    Ok(hits as f64 / member.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxTrainConfig {
    pub steps: usize,
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// First corpus batch index used for distillation.
    pub data_offset: u64,
    /// Held-out batches used for the final agreement.
    pub eval_batches: usize,
    pub log_every: usize,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        AuxTrainConfig {
            steps: 2000,
            peak_lr: 1e-4,
            end_lr: 1e-6,
            warmup_steps: 200,
            batch_size: 8,
            seq_len: 256,
            data_offset: 1 << 32,
            eval_batches: 4,
            log_every: 50,
        }
    }
}

impl AuxTrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            end_lr: self.end_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuxTrainReport {
    /// `(step, mean BCE over routers)` at every logging interval.
    pub losses: Vec<(usize, f64)>,
    /// Held-out agreement per router slot.
    pub agreement: BTreeMap<String, f64>,
}

fn router_at<T: Scalar>(store: &ParamStore<T>, slot: &str) -> Result<AuxRouterParams<T>> {
    AuxRouterParams::new(
        store.get(&format!("{slot}.w_a1"))?.clone(),
        store.get(&format!("{slot}.w_a2"))?.clone(),
    )
}

fn captured_examples<T: Scalar>(model: &Model<T>, corpus: &Corpus, index: u64, cfg: &AuxTrainConfig) -> Result<Vec<AuxExample<T>>> {
    let batch = corpus.generate_batch(index, cfg.batch_size, cfg.seq_len)?;
    let opts = ForwardOptions {
        capture: true,
        trainable: Trainable::Nothing,
        ..ForwardOptions::train()
    };
    let pass = model.forward(&batch, &opts)?;
    examples_from_trace(&pass.trace)
}

/// Distil every router of a frozen model into its auxiliary router. The
/// model must already hold `aux.` parameters (see `init_aux_params`); only
/// those are updated.
pub fn train_aux_routers<T: Scalar>(
    model: &mut Model<T>,
    corpus: &Corpus,
    cfg: &AuxTrainConfig,
) -> Result<AuxTrainReport> {
    cfg.schedule().validate()?;
    if !model.params.has_aux() {
        return Err(Error::Contract("model has no auxiliary router parameters".into()));
    }
    let frozen = model.params.checksum(|n| !names::is_aux(n));
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut report = AuxTrainReport::default();
    let mut running = 0.0;
    let mut running_n = 0usize;
    for step in 1..=cfg.steps {
        let examples = captured_examples(model, corpus, cfg.data_offset + step as u64, cfg)?;
        let mut grads = BTreeMap::new();
        let mut total = 0.0;
        for ex in &examples {
            let r = router_at(&model.params, &ex.slot)?;
            let (loss, g1, g2) = aux_loss_grads(&r, &ex.inputs, &ex.labels)?;
            total += loss;
            grads.insert(format!("{}.w_a1", ex.slot), g1);
            grads.insert(format!("{}.w_a2", ex.slot), g2);
        }
        if !examples.is_empty() {
            running += total / examples.len() as f64;
            running_n += 1;
        }
        opt.update(&mut model.params, &grads, schedule.lr(step))?;
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            if running_n > 0 {
                report.losses.push((step, running / running_n as f64));
            }
            running = 0.0;
            running_n = 0;
        }
    }
    if model.params.checksum(|n| !names::is_aux(n)) != frozen {
        return Err(Error::Contract("main model parameters changed during auxiliary training".into()));
    }
    report.agreement = evaluate_agreement(model, corpus, cfg)?;
    Ok(report)
}

/// Held-out agreement per router slot against batch top-k labels.
pub fn evaluate_agreement<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    cfg: &AuxTrainConfig,
) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for i in 0..cfg.eval_batches {
        let index = cfg.data_offset.wrapping_sub(1 + i as u64);
        for ex in captured_examples(model, corpus, index, cfg)? {
            let r = router_at(&model.params, &ex.slot)?;
            let a = agreement(&r, &ex.inputs, &ex.labels)?;
            let e = sums.entry(ex.slot).or_default();
            e.0 += a;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_score_half() {
        let x = Tensor::<f64>::from_f64(&[3, 4], &[0.3, -1.0, 2.0, 0.1, 1.0, 1.0, 1.0, 1.0, 0.0, 5.0, -2.0, 0.4]);
        let s = aux_score(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2, 3])).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
        assert!(causal_select(&s).iter().all(|&m| !m));
    }

    #[test]
    fn odd_hidden_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let err = aux_score(&x, &Tensor::zeros(&[3, 1]), &Tensor::zeros(&[1, 1])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn strict_threshold() {
        let s = Tensor::<f64>::from_f64(&[3], &[0.5, 0.6, 0.4999]);
        assert_eq!(causal_select(&s), vec![false, true, false]);
    }
}
