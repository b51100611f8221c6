//! Depth routing: a learned per-layer router picks which tokens take the
//! layer's compute path; the others skip it through the identity residual.
//!
//! Selected token `x` leaves as `x + g(x) * branch(x)` where `branch` is
//! the wrapped layer's residual contribution and `g = sigmoid(x . w)` keeps
//! the router on the differentiable path. Selected tokens attend only to
//! other selected tokens of their own sequence.

use crate::autodiff::{Category, Tape, Var};
use crate::aux_router::{aux_score, causal_select};
use crate::data::{stream_rng, Modality};
use crate::error::Result;
use crate::model::{layer_branch, Ctx, Mode};
use crate::params::names;
use crate::routing::{capacity, perturb_indices, select_columns};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Routing record of one depth-routed layer.
#[derive(Debug, Clone)]
pub struct DepthTrace<T> {
    pub layer: usize,
    pub mode: Mode,
    pub pool_size: usize,
    /// `k_d` in training mode, 0 in inference mode.
    pub capacity: usize,
    /// Flattened positions that took the compute path, ascending.
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
    /// Selected / total counts for text and image tokens.
    pub text_selected: (usize, usize),
    pub image_selected: (usize, usize),
    /// Router inputs for every pool row, when capture is requested.
    pub inputs: Option<Tensor<T>>,
}

impl<T> DepthTrace<T> {
    pub fn selected_fraction(&self) -> f64 {
        if self.pool_size == 0 {
            0.0
        } else {
            self.selected.len() as f64 / self.pool_size as f64
        }
    }
}

/// Noise injected into training-mode depth selections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthNoise {
    pub sigma: f64,
    pub seed: u64,
}

/// Depth-routed layer over rows `x[n, d]` (all positions of the batch).
pub(crate) fn mod_layer<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    x: Var,
    positions: &[usize],
    labels: &[Modality],
) -> Result<Var> {
    let n = tape.value(x).rows();
    let w = ctx.bind(tape, &names::mod_router(layer))?;
    let prev = tape.set_category(Category::Router);
    let logits = tape.matmul(x, w)?;
    tape.set_category(prev);
    let scores = tape.sigmoid(logits)?;

    let (k, selected) = match ctx.opts.mode {
        Mode::Train => {
            let k = capacity(ctx.cfg.mod_capacity, n);
            let mut sel = select_columns(tape.value(scores).data(), n, 1, k).remove(0);
            if let Some(noise) = ctx.opts.depth_noise {
                if noise.sigma > 0.0 {
                    let mut rng = stream_rng(noise.seed, 0x40D, layer as u64);
                    sel = perturb_indices(&sel, n, noise.sigma, &mut rng);
                }
            }
            (k, sel)
        }
        Mode::Infer => {
            let w1 = ctx.params.get(&names::aux_depth(layer, "w_a1"))?;
            let w2 = ctx.params.get(&names::aux_depth(layer, "w_a2"))?;
            let aux = aux_score(tape.value(x), w1, w2)?;
            let member = causal_select(&aux);
            (0, (0..n).filter(|&i| member[i]).collect())
        }
    };

    let count = |m: Modality| {
        let total = labels.iter().filter(|&&l| l == m).count();
        let hit = selected.iter().filter(|&&i| labels[i] == m).count();
        (hit, total)
    };
    let gates: Vec<f64> = selected
        .iter()
        .map(|&i| tape.value(scores).data()[i].as_f64())
        .collect();
    ctx.push_depth(DepthTrace {
        layer,
        mode: ctx.opts.mode,
        pool_size: n,
        capacity: k,
        text_selected: count(Modality::Text),
        image_selected: count(Modality::Image),
        selected: selected.iter().map(|&i| positions[i]).collect(),
        gates,
        inputs: ctx.opts.capture.then(|| tape.value(x).clone()),
    });

    if selected.is_empty() {
        return Ok(x);
    }
    let xs = tape.gather_rows(x, &selected)?;
    let sub_pos: Vec<usize> = selected.iter().map(|&i| positions[i]).collect();
    let sub_labels: Vec<Modality> = selected.iter().map(|&i| labels[i]).collect();
    let mut branch = layer_branch(tape, ctx, layer, xs, &sub_pos, &sub_labels)?;
    if !ctx.opts.unit_gates {
        let gate = tape.gather_flat(scores, &selected)?;
        branch = tape.scale_rows(branch, gate)?;
    }
    tape.scatter_add_rows(x, branch, &selected)
}
