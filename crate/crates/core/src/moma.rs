//! Modality-aware expert feed-forward block.
//!
//! Tokens are first split by modality into their expert group, then each
//! expert of the group picks its own top-k tokens (training) or accepts
//! the tokens its auxiliary router votes for (inference). A token's block
//! output is the gate-weighted sum of the experts that picked it, followed
//! by a post-normalisation; the caller adds the residual.

use crate::autodiff::{Category, Tape, Var};
use crate::aux_router::{aux_score, causal_select};
use crate::config::GroupTag;
use crate::data::{stream_rng, Modality};
use crate::error::{Error, Result};
use crate::model::{Ctx, Mode};
use crate::params::names;
use crate::routing::{capacity, gumbel_difference, select_columns, RoutingAssignment};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Routing record of one expert group in one layer.
#[derive(Debug, Clone)]
pub struct GroupTrace<T> {
    pub layer: usize,
    pub tag: GroupTag,
    pub mode: Mode,
    /// Block-local rows routed to this group, ascending.
    pub pool: Vec<usize>,
    /// Flattened batch positions of those rows.
    pub positions: Vec<usize>,
    /// Selections index into `pool`. Capacity is 0 in inference mode, where
    /// per-expert counts vary.
    pub assignment: RoutingAssignment,
    /// Router inputs (the pool rows), kept when capture is requested.
    pub inputs: Option<Tensor<T>>,
}

impl<T> GroupTrace<T> {
    /// Pool fraction selected by no expert.
    pub fn dropped_fraction(&self) -> f64 {
        if self.pool.is_empty() {
            return 0.0;
        }
        let mut hit = vec![false; self.pool.len()];
        for sel in &self.assignment.selections {
            for &i in sel {
                hit[i] = true;
            }
        }
        hit.iter().filter(|&&h| !h).count() as f64 / self.pool.len() as f64
    }

    pub fn mean_gate(&self) -> f64 {
        let (s, n) = self
            .assignment
            .gates
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), &g| (s + g, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// `(silu(x W_gate) * (x W_in)) W_out` on the tape.
pub fn swiglu<T: Scalar>(tape: &mut Tape<T>, x: Var, w_in: Var, w_gate: Var, w_out: Var) -> Result<Var> {
    let prev = tape.set_category(Category::Ffn);
    let gate = tape.matmul(x, w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(x, w_in)?;
    let h = tape.mul(gate, up)?;
    let out = tape.matmul(h, w_out)?;
    tape.set_category(prev);
    Ok(out)
}

/// Stand-alone SwiGLU evaluation of `x[k, d]`.
pub fn swiglu_ffn<T: Scalar>(
    x: &Tensor<T>,
    w_in: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = [x, w_in, w_gate, w_out].map(|t| tape.constant(t.clone()));
    let [x, wi, wg, wo] = vars;
    let y = swiglu(&mut tape, x?, wi?, wg?, wo?)?;
    Ok(tape.value(y).clone())
}

fn expert_vars<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    tag: GroupTag,
    e: usize,
) -> Result<(Var, Var, Var)> {
    Ok((
        ctx.bind(tape, &names::expert(layer, tag, e, "w_in"))?,
        ctx.bind(tape, &names::expert(layer, tag, e, "w_gate"))?,
        ctx.bind(tape, &names::expert(layer, tag, e, "w_out"))?,
    ))
}

/// Scores `[pool, experts]` for a group, with Gumbel noise when enabled.
fn group_scores<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    tag: GroupTag,
    xg: Var,
) -> Result<Var> {
    let w = ctx.bind(tape, &names::router(layer, tag))?;
    let prev = tape.set_category(Category::Router);
    let mut logits = tape.matmul(xg, w)?;
    tape.set_category(prev);
    if let Some(seed) = ctx.opts.gumbel_seed {
        let mut rng = stream_rng(seed, 0x6B + layer as u64, tag as u64);
        let noise = gumbel_difference::<T, _>(tape.shape(logits), &mut rng);
        let noise = tape.constant(noise)?;
        logits = tape.add(logits, noise)?;
    }
    tape.sigmoid(logits)
}

/// Expert selections for one group, as pool-local ascending index lists.
fn select_group<T: Scalar>(
    tape: &Tape<T>,
    ctx: &Ctx<'_, T>,
    layer: usize,
    tag: GroupTag,
    capacity_factor: f64,
    xg: Var,
    scores: Var,
) -> Result<(usize, Vec<Vec<usize>>)> {
    let sv = tape.value(scores);
    let (pool, experts) = (sv.rows(), sv.cols());
    match ctx.opts.mode {
        Mode::Train => {
            let k = capacity(capacity_factor, pool);
            Ok((k, select_columns(sv.data(), pool, experts, k)))
        }
        Mode::Infer => {
            let w1 = ctx.params.get(&names::aux_group(layer, tag, "w_a1"))?;
            let w2 = ctx.params.get(&names::aux_group(layer, tag, "w_a2"))?;
            let aux = aux_score(tape.value(xg), w1, w2)?;
            let member = causal_select(&aux);
            let sel = (0..experts)
                .map(|e| (0..pool).filter(|&i| member[i * experts + e]).collect())
                .collect();
            Ok((0, sel))
        }
    }
}

/// Block output `post_norm(y)` for rows `h[n, d]`; `positions` gives each
/// row's flattened batch position and `labels` its modality.
pub(crate) fn moma_block<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    h: Var,
    positions: &[usize],
    labels: &[Modality],
) -> Result<Var> {
    let y = moma_mixture(tape, ctx, layer, h, positions, labels)?;
    let scale = ctx.bind(tape, &names::post_norm(layer))?;
    tape.layer_norm(y, scale, ctx.cfg.norm_eps)
}

/// Pre-normalisation mixture `y` of the block.
pub(crate) fn moma_mixture<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    h: Var,
    positions: &[usize],
    labels: &[Modality],
) -> Result<Var> {
    let n = tape.value(h).rows();
    let d = ctx.cfg.hidden;
    if labels.len() != n || positions.len() != n {
        return Err(Error::Contract(format!(
            "modality mask of length {} for {n} rows",
            labels.len()
        )));
    }
    let mut y = tape.constant(Tensor::zeros(&[n, d]))?;
    for g in ctx.cfg.groups() {
        let pool: Vec<usize> = (0..n).filter(|&i| g.tag.accepts(labels[i])).collect();
        if pool.is_empty() {
            continue;
        }
        let xg = tape.gather_rows(h, &pool)?;
        if !g.tag.is_routed() {
            let (wi, wg, wo) = expert_vars(tape, ctx, layer, g.tag, 0)?;
            let out = swiglu(tape, xg, wi, wg, wo)?;
            *tape.counter_mut().expert_rows.entry(g.tag.name().into()).or_default() += pool.len() as u64;
            y = tape.scatter_add_rows(y, out, &pool)?;
            continue;
        }
        let scores = group_scores(tape, ctx, layer, g.tag, xg)?;
        let (k, selections) = select_group(tape, ctx, layer, g.tag, g.capacity, xg, scores)?;
        let mut gates_out = Vec::with_capacity(g.experts);
        for (e, sel) in selections.iter().enumerate() {
            let flat: Vec<usize> = sel.iter().map(|&i| i * g.experts + e).collect();
            gates_out.push(
                flat.iter()
                    .map(|&f| tape.value(scores).data()[f].as_f64())
                    .collect::<Vec<f64>>(),
            );
            if sel.is_empty() {
                continue;
            }
            let xe = tape.gather_rows(xg, sel)?;
            let (wi, wg, wo) = expert_vars(tape, ctx, layer, g.tag, e)?;
            let mut out = swiglu(tape, xe, wi, wg, wo)?;
            *tape.counter_mut().expert_rows.entry(g.tag.name().into()).or_default() += sel.len() as u64;
            if !ctx.opts.unit_gates {
                let gate = tape.gather_flat(scores, &flat)?;
                out = tape.scale_rows(out, gate)?;
            }
            let rows: Vec<usize> = sel.iter().map(|&i| pool[i]).collect();
            y = tape.scatter_add_rows(y, out, &rows)?;
        }
        let inputs = ctx.opts.capture.then(|| tape.value(xg).clone());
        ctx.push_group(GroupTrace {
            layer,
            tag: g.tag,
            mode: ctx.opts.mode,
            positions: pool.iter().map(|&i| positions[i]).collect(),
            pool,
            assignment: RoutingAssignment {
                capacity: k,
                selections,
                gates: gates_out,
            },
            inputs,
        });
    }
    Ok(y)
}

/// Reference mixture that runs every expert on every row and masks by the
/// recorded selections. Agrees with [`moma_mixture`] when the kernels are
/// row-independent.
pub(crate) fn moma_reference_mixture<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    h: Var,
    labels: &[Modality],
    traces: &[GroupTrace<T>],
) -> Result<Var> {
    let n = tape.value(h).rows();
    let d = ctx.cfg.hidden;
    let mut y = tape.constant(Tensor::zeros(&[n, d]))?;
    for g in ctx.cfg.groups() {
        let member: Vec<bool> = labels.iter().map(|&m| g.tag.accepts(m)).collect();
        if !member.iter().any(|&b| b) {
            continue;
        }
        if !g.tag.is_routed() {
            let (wi, wg, wo) = expert_vars(tape, ctx, layer, g.tag, 0)?;
            let out = swiglu(tape, h, wi, wg, wo)?;
            let mask: Vec<T> = member.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
            let mask = tape.constant(Tensor::new(vec![n], mask)?)?;
            let out = tape.scale_rows(out, mask)?;
            y = tape.add(y, out)?;
            continue;
        }
        let trace = traces
            .iter()
            .find(|t| t.layer == layer && t.tag == g.tag)
            .ok_or_else(|| Error::Contract(format!("no trace for group {}", g.tag.name())))?;
        let w = ctx.bind(tape, &names::router(layer, g.tag))?;
        let logits = tape.matmul(h, w)?;
        let scores = tape.sigmoid(logits)?;
        for e in 0..g.experts {
            let (wi, wg, wo) = expert_vars(tape, ctx, layer, g.tag, e)?;
            let out = swiglu(tape, h, wi, wg, wo)?;
            let mut chosen = vec![false; n];
            for &i in &trace.assignment.selections[e] {
                chosen[trace.pool[i]] = true;
            }
            let flat: Vec<usize> = (0..n).map(|r| r * g.experts + e).collect();
            let gate = tape.gather_flat(scores, &flat)?;
            let mask: Vec<T> = chosen.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
            let mask = tape.constant(Tensor::new(vec![n], mask)?)?;
            let gate = if ctx.opts.unit_gates { mask } else { tape.mul(gate, mask)? };
            let out = tape.scale_rows(out, gate)?;
            y = tape.add(y, out)?;
        }
    }
    Ok(y)
}
