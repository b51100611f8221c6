//! Causal decoder assembly: embeddings, pre-norm rotary attention, the
//! expert feed-forward block with post-normalisation, optional depth
//! routing, and the unified-vocabulary output head.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Category, Grads, RopeTable, Tape, Var};
use crate::config::ModelConfig;
use crate::data::{Modality, TokenBatch};
use crate::depth::{mod_layer, DepthNoise, DepthTrace};
use crate::error::{Error, Result};
use crate::moma::{moma_block, moma_mixture, moma_reference_mixture, GroupTrace};
use crate::params::{init_params, names, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch-level top-k routing.
    #[default]
    Train,
    /// Per-token auxiliary-router thresholding; causal.
    Infer,
}

/// Which parameters are recorded as gradient-requiring leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Trainable {
    #[default]
    Main,
    Aux,
    Nothing,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Replace every router gate by exactly 1.
    pub unit_gates: bool,
    /// Gumbel-Sigmoid noise on expert routers, seeded per call.
    pub gumbel_seed: Option<u64>,
    pub depth_noise: Option<DepthNoise>,
    /// Keep router inputs in the trace.
    pub capture: bool,
    pub trainable: Trainable,
    /// Reject non-finite op outputs.
    pub validate: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions::default()
    }

    pub fn infer() -> Self {
        ForwardOptions {
            mode: Mode::Infer,
            trainable: Trainable::Nothing,
            ..Default::default()
        }
    }
}

/// Routing records of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct RoutingTrace<T> {
    pub groups: Vec<GroupTrace<T>>,
    pub depth: Vec<DepthTrace<T>>,
}

pub(crate) struct Ctx<'a, T: Scalar> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore<T>,
    pub opts: &'a ForwardOptions,
    pub rope: &'a Arc<RopeTable<T>>,
    pub seq_len: usize,
    bound: BTreeMap<String, Var>,
    trace: RoutingTrace<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn bind(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let grad = match self.opts.trainable {
            Trainable::Main => !names::is_aux(name),
            Trainable::Aux => names::is_aux(name),
            Trainable::Nothing => false,
        };
        let v = tape.leaf(self.params.get(name)?.clone(), grad)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn push_group(&mut self, t: GroupTrace<T>) {
        self.trace.groups.push(t);
    }

    pub fn push_depth(&mut self, t: DepthTrace<T>) {
        self.trace.depth.push(t);
    }
}

/// Consecutive row runs sharing a sequence, from ascending flat positions.
fn segments(positions: &[usize], seq_len: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (r, &p) in positions.iter().enumerate() {
        match out.last_mut() {
            Some((start, len)) if positions[*start] / seq_len == p / seq_len => *len += 1,
            _ => out.push((r, 1)),
        }
        debug_assert!(r == 0 || positions[r - 1] < p, "positions must ascend");
    }
    out
}

fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    x: Var,
    positions: &[usize],
) -> Result<Var> {
    let norm = ctx.bind(tape, &names::attn(layer, "norm"))?;
    let xn = tape.layer_norm(x, norm, ctx.cfg.norm_eps)?;
    let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|m| ctx.bind(tape, &names::attn(layer, m)));
    let prev = tape.set_category(Category::Attention);
    let q = tape.matmul(xn, wq?)?;
    let k = tape.matmul(xn, wk?)?;
    let v = tape.matmul(xn, wv?)?;
    let pos: Vec<usize> = positions.iter().map(|&p| p % ctx.seq_len).collect();
    let q = tape.rope(q, &pos, ctx.cfg.heads, ctx.rope)?;
    let k = tape.rope(k, &pos, ctx.cfg.heads, ctx.rope)?;
    let segs = segments(positions, ctx.seq_len);
    let a = tape.causal_attention(q, k, v, &segs, ctx.cfg.heads)?;
    let out = tape.matmul(a, wo?)?;
    tape.set_category(prev);
    Ok(out)
}

/// Residual contribution of a full layer: attention output plus the
/// post-normalised expert block evaluated on `x + attention`.
pub(crate) fn layer_branch<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    x: Var,
    positions: &[usize],
    labels: &[Modality],
) -> Result<Var> {
    let a = attention(tape, ctx, layer, x, positions)?;
    let h = tape.add(x, a)?;
    let f = moma_block(tape, ctx, layer, h, positions, labels)?;
    tape.add(a, f)
}

/// Result of [`Model::forward`].
pub struct ForwardPass<T: Scalar> {
    pub tape: Tape<T>,
    /// `[batch, seq, vocab]`.
    pub logits: Var,
    pub bound: BTreeMap<String, Var>,
    pub trace: RoutingTrace<T>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Gradients keyed by parameter name for every bound trainable leaf.
    pub fn named_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| grads.wrt(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Mean next-token cross-entropy split by target modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub text_loss: Option<f64>,
    pub image_loss: Option<f64>,
    pub text_count: usize,
    pub image_count: usize,
}

impl LossBreakdown {
    pub fn from_rows(nll: &[f64], target_modality: &[Modality]) -> Self {
        let (mut ts, mut tc, mut is, mut ic) = (0.0, 0usize, 0.0, 0usize);
        for (&l, &m) in nll.iter().zip(target_modality) {
            match m {
                Modality::Text => {
                    ts += l;
                    tc += 1;
                }
                Modality::Image => {
                    is += l;
                    ic += 1;
                }
            }
        }
        let n = (tc + ic).max(1) as f64;
        LossBreakdown {
            total: (ts + is) / n,
            text_loss: (tc > 0).then(|| ts / tc as f64),
            image_loss: (ic > 0).then(|| is / ic as f64),
            text_count: tc,
            image_count: ic,
        }
    }
}

impl LossBreakdown {
    /// Token-weighted merge of several breakdowns.
    pub fn combine(parts: &[LossBreakdown]) -> LossBreakdown {
        let (mut ts, mut tc, mut is, mut ic) = (0.0, 0usize, 0.0, 0usize);
        for p in parts {
            ts += p.text_loss.unwrap_or(0.0) * p.text_count as f64;
            is += p.image_loss.unwrap_or(0.0) * p.image_count as f64;
            tc += p.text_count;
            ic += p.image_count;
        }
        LossBreakdown {
            total: (ts + is) / (tc + ic).max(1) as f64,
            text_loss: (tc > 0).then(|| ts / tc as f64),
            image_loss: (ic > 0).then(|| is / ic as f64),
            text_count: tc,
            image_count: ic,
        }
    }
}

/// Per-row `-ln softmax(logits)[target]`, computed in f64.
pub fn row_nll<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Vec<f64> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
            lse - row[targets[r] as usize].as_f64()
        })
        .collect()
}

/// Output of a stand-alone expert block evaluation.
pub struct MomaOutput<T> {
    /// `hidden + post_norm(y)`.
    pub out: Tensor<T>,
    /// Pre-normalisation mixture `y`.
    pub mixture: Tensor<T>,
    pub traces: Vec<GroupTrace<T>>,
    pub counter: crate::autodiff::OpCounter,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    rope: Arc<RopeTable<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let rope = Arc::new(RopeTable::new(config.seq_len, config.head_dim(), config.rope_base));
        Ok(Model {
            config,
            params,
            rope,
        })
    }

    fn ctx<'a>(&'a self, opts: &'a ForwardOptions, seq_len: usize) -> Ctx<'a, T> {
        Ctx {
            cfg: &self.config,
            params: &self.params,
            opts,
            rope: &self.rope,
            seq_len,
            bound: BTreeMap::new(),
            trace: RoutingTrace::default(),
        }
    }

    fn check_mode(&self, opts: &ForwardOptions) -> Result<()> {
        if opts.mode == Mode::Infer && self.config.has_routers() && !self.params.has_aux() {
            return Err(Error::Contract(
                "inference mode needs auxiliary routers, none are loaded".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &TokenBatch, opts: &ForwardOptions) -> Result<ForwardPass<T>> {
        self.check_mode(opts)?;
        if batch.seq_len > self.config.seq_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds configured {}",
                batch.seq_len, self.config.seq_len
            )));
        }
        let vocab = self.config.vocab.size();
        if let Some(bad) = batch.tokens.iter().chain(&batch.targets).find(|&&t| t as usize >= vocab) {
            return Err(Error::Data(format!("token id {bad} out of range for vocab {vocab}")));
        }
        let mut tape = Tape::new();
        tape.set_validate(opts.validate);
        let mut ctx = self.ctx(opts, batch.seq_len);
        let ids: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let embed = ctx.bind(&mut tape, names::EMBED)?;
        let mut x = tape.embedding(embed, &ids)?;
        for j in 0..self.config.layers {
            x = if self.config.is_depth_routed(j) {
                mod_layer(&mut tape, &mut ctx, j, x, &positions, &batch.modality)?
            } else {
                let branch = layer_branch(&mut tape, &mut ctx, j, x, &positions, &batch.modality)?;
                tape.add(x, branch)?
            };
        }
        let norm = ctx.bind(&mut tape, names::FINAL_NORM)?;
        let xf = tape.layer_norm(x, norm, self.config.norm_eps)?;
        let head = ctx.bind(&mut tape, names::HEAD)?;
        let prev = tape.set_category(Category::Head);
        let logits = tape.matmul(xf, head)?;
        tape.set_category(prev);
        let logits = tape.reshape(logits, &[batch.batch, batch.seq_len, vocab])?;
        Ok(ForwardPass {
            tape,
            logits,
            bound: ctx.bound,
            trace: ctx.trace,
        })
    }

    /// Forward pass plus the mean cross-entropy node and its breakdown.
    pub fn loss(&self, batch: &TokenBatch, opts: &ForwardOptions) -> Result<(ForwardPass<T>, Var, LossBreakdown)> {
        let mut pass = self.forward(batch, opts)?;
        let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
        let loss = pass.tape.cross_entropy(pass.logits, &targets)?;
        let nll = row_nll(pass.tape.value(pass.logits), &batch.targets);
        let breakdown = LossBreakdown::from_rows(&nll, &batch.target_modality);
        Ok((pass, loss, breakdown))
    }

    pub fn evaluate(&self, batch: &TokenBatch, opts: &ForwardOptions) -> Result<LossBreakdown> {
        let pass = self.forward(batch, opts)?;
        let nll = row_nll(pass.tape.value(pass.logits), &batch.targets);
        Ok(LossBreakdown::from_rows(&nll, &batch.target_modality))
    }

    /// Loss breakdown and named parameter gradients for one batch.
    pub fn gradients(
        &self,
        batch: &TokenBatch,
        opts: &ForwardOptions,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor<T>>, RoutingTrace<T>)> {
        let (pass, loss, breakdown) = self.loss(batch, opts)?;
        let grads = pass.tape.backward(loss)?;
        let named = pass.named_grads(&grads);
        Ok((breakdown, named, pass.trace))
    }

    /// Evaluate layer `layer`'s expert block alone on `hidden[b, d]`.
    pub fn moma_forward(
        &self,
        layer: usize,
        hidden: &Tensor<T>,
        mask: &[Modality],
        opts: &ForwardOptions,
    ) -> Result<MomaOutput<T>> {
        self.check_mode(opts)?;
        let mut tape = Tape::new();
        let mut ctx = self.ctx(opts, hidden.rows());
        let h = tape.constant(hidden.clone())?;
        let positions: Vec<usize> = (0..hidden.rows()).collect();
        let y = moma_mixture(&mut tape, &mut ctx, layer, h, &positions, mask)?;
        let scale = ctx.bind(&mut tape, &names::post_norm(layer))?;
        let post = tape.layer_norm(y, scale, self.config.norm_eps)?;
        let out = tape.add(h, post)?;
        Ok(MomaOutput {
            out: tape.value(out).clone(),
            mixture: tape.value(y).clone(),
            traces: ctx.trace.groups,
            counter: tape.counter().clone(),
        })
    }

    /// The same block computed by running every expert on every row and
    /// masking with the selections in `traces`. Returns `(out, mixture)`.
    pub fn moma_reference(
        &self,
        layer: usize,
        hidden: &Tensor<T>,
        mask: &[Modality],
        traces: &[GroupTrace<T>],
        opts: &ForwardOptions,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let mut ctx = self.ctx(opts, hidden.rows());
        let h = tape.constant(hidden.clone())?;
        let y = moma_reference_mixture(&mut tape, &mut ctx, layer, h, mask, traces)?;
        let scale = ctx.bind(&mut tape, &names::post_norm(layer))?;
        let post = tape.layer_norm(y, scale, self.config.norm_eps)?;
        let out = tape.add(h, post)?;
        Ok((tape.value(out).clone(), tape.value(y).clone()))
    }

    /// Rows `x[b*seq, d]` through layer `layer` (depth routing included when
    /// the layer has it); returns the new hidden state and the trace.
    pub fn layer_forward(
        &self,
        layer: usize,
        x: &Tensor<T>,
        seq_len: usize,
        labels: &[Modality],
        opts: &ForwardOptions,
    ) -> Result<(Tensor<T>, RoutingTrace<T>)> {
        self.check_mode(opts)?;
        let mut tape = Tape::new();
        let mut ctx = self.ctx(opts, seq_len);
        let xv = tape.constant(x.clone())?;
        let positions: Vec<usize> = (0..x.rows()).collect();
        let out = if self.config.is_depth_routed(layer) {
            mod_layer(&mut tape, &mut ctx, layer, xv, &positions, labels)?
        } else {
            let b = layer_branch(&mut tape, &mut ctx, layer, xv, &positions, labels)?;
            tape.add(xv, b)?
        };
        Ok((tape.value(out).clone(), ctx.trace))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count(|n| !names::is_aux(n))
    }
}
