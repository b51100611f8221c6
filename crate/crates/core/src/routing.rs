//! Expert-choice selection shared by width (expert) and depth routing.
//!
//! Every routing target (an expert, or a depth layer) picks the `k` tokens
//! with the highest sigmoid affinity from its pool. Scores are computed per
//! token, so a token's score never depends on its neighbours; only the
//! top-k comparison looks across the pool.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::sigmoid_scalar;
use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::{top_k_indices, Tensor};

/// Router projection `[d, num_targets]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<T> {
    pub weight: Tensor<T>,
}

impl<T: Scalar> RouterParams<T> {
    pub fn new(weight: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "router weight must be 2-D, got {:?}",
                weight.shape()
            )));
        }
        if !weight.is_finite() {
            return Err(Error::NonFinite("router weight".into()));
        }
        Ok(RouterParams { weight })
    }

    pub fn hidden(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn targets(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Capacity rule `k = max(1, floor(c * b))`, clamped to the pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacitySpec {
    pub capacity_factor: f64,
    pub pool_size: usize,
}

impl CapacitySpec {
    pub fn new(capacity_factor: f64, pool_size: usize) -> Self {
        CapacitySpec {
            capacity_factor,
            pool_size,
        }
    }

    /// Tokens each target processes; zero only for an empty pool.
    pub fn k(&self) -> usize {
        capacity(self.capacity_factor, self.pool_size)
    }
}

pub fn capacity(factor: f64, pool: usize) -> usize {
    if pool == 0 {
        return 0;
    }
    // Guard against 0.25 * 16 landing a hair under 4.
    let raw = (factor * pool as f64 + 1e-9).floor() as usize;
    raw.clamp(1, pool)
}

/// Selected pool indices (ascending) and their gate values, per target.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingAssignment {
    pub capacity: usize,
    pub selections: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
}

impl RoutingAssignment {
    pub fn targets(&self) -> usize {
        self.selections.len()
    }

    /// Number of targets that selected each pool position.
    pub fn slots_per_token(&self, pool: usize) -> Vec<usize> {
        let mut out = vec![0; pool];
        for sel in &self.selections {
            for &i in sel {
                out[i] += 1;
            }
        }
        out
    }

    /// Check capacity exactness, distinct in-range indices and open gates.
    pub fn validate(&self, pool: usize) -> Result<()> {
        for (j, (sel, gates)) in self.selections.iter().zip(&self.gates).enumerate() {
            if sel.len() != self.capacity || gates.len() != self.capacity {
                return Err(Error::Contract(format!(
                    "target {j} holds {} tokens, capacity {}",
                    sel.len(),
                    self.capacity
                )));
            }
            if sel.windows(2).any(|w| w[0] >= w[1]) || sel.iter().any(|&i| i >= pool) {
                return Err(Error::Contract(format!(
                    "target {j} selection not distinct ascending in-range"
                )));
            }
            if gates.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
                return Err(Error::Contract(format!("target {j} gate outside (0,1)")));
            }
        }
        Ok(())
    }

    /// One line per target: `target<TAB>indices<TAB>gates`.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        for (j, (sel, gates)) in self.selections.iter().zip(&self.gates).enumerate() {
            let idx: Vec<String> = sel.iter().map(|i| i.to_string()).collect();
            let g: Vec<String> = gates.iter().map(|g| format!("{g:?}")).collect();
            let _ = writeln!(s, "{j}\t{}\t{}", idx.join(","), g.join(","));
        }
        s
    }

    pub fn from_record(record: &str) -> Result<Self> {
        let mut selections = Vec::new();
        let mut gates = Vec::new();
        for (line_no, line) in record.lines().enumerate() {
            let mut cols = line.split('\t');
            let bad = || Error::Data(format!("malformed routing record line {line_no}"));
            let j: usize = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            if j != line_no {
                return Err(bad());
            }
            let parse_list = |c: Option<&str>| -> Option<Vec<String>> {
                let c = c?;
                Some(if c.is_empty() {
                    vec![]
                } else {
                    c.split(',').map(str::to_string).collect()
                })
            };
            let idx = parse_list(cols.next()).ok_or_else(bad)?;
            let gs = parse_list(cols.next()).ok_or_else(bad)?;
            selections.push(
                idx.iter()
                    .map(|v| v.parse().map_err(|_| bad()))
                    .collect::<Result<Vec<usize>>>()?,
            );
            gates.push(
                gs.iter()
                    .map(|v| v.parse().map_err(|_| bad()))
                    .collect::<Result<Vec<f64>>>()?,
            );
        }
        let capacity = selections.first().map_or(0, Vec::len);
        Ok(RoutingAssignment {
            capacity,
            selections,
            gates,
        })
    }
}

/// Raw router logits `hidden[b, d] x W[d, t]`.
pub fn router_logits<T: Scalar>(hidden: &Tensor<T>, router: &RouterParams<T>) -> Result<Tensor<T>> {
    let d = router.hidden();
    if hidden.shape().len() != 2 || hidden.cols() != d {
        return Err(Error::Shape {
            op: "affinity_scores",
            lhs: hidden.shape().to_vec(),
            rhs: router.weight.shape().to_vec(),
        });
    }
    let (b, t) = (hidden.rows(), router.targets());
    let mut out = vec![T::zero(); b * t];
    gemm(b, d, t, T::one(), hidden.data(), Layout::N, router.weight.data(), Layout::N, T::zero(), &mut out);
    Tensor::new(vec![b, t], out)
}

/// `sigmoid(hidden . W)`, one row per token.
pub fn affinity_scores<T: Scalar>(hidden: &Tensor<T>, router: &RouterParams<T>) -> Result<Tensor<T>> {
    Ok(router_logits(hidden, router)?.map(sigmoid_scalar))
}

/// Standard Gumbel sample `-ln(-ln u)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Logistic noise `G' - G''` for every entry of a `shape` tensor.
pub fn gumbel_difference<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(sample_gumbel(rng) - sample_gumbel(rng)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `sigmoid(logits + G' - G'')`; reduces to [`affinity_scores`] when `rng`
/// is `None`.
pub fn gumbel_sigmoid_scores<T: Scalar, R: Rng + ?Sized>(
    hidden: &Tensor<T>,
    router: &RouterParams<T>,
    rng: Option<&mut R>,
) -> Result<Tensor<T>> {
    let logits = router_logits(hidden, router)?;
    let Some(rng) = rng else {
        return Ok(logits.map(sigmoid_scalar));
    };
    let noise = gumbel_difference::<T, R>(logits.shape(), rng);
    let data = logits
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&l, &n)| sigmoid_scalar(l + n))
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}

/// Per-column top-k over a `[b, t]` score matrix; each list ascending.
pub fn select_columns<T: Scalar>(scores: &[T], rows: usize, cols: usize, k: usize) -> Vec<Vec<usize>> {
    let mut column = Vec::with_capacity(rows);
    (0..cols)
        .map(|j| {
            column.clear();
            column.extend((0..rows).map(|i| scores[i * cols + j]));
            let mut sel = top_k_indices(&column, k);
            sel.sort_unstable();
            sel
        })
        .collect()
}

/// Each target independently keeps its `k` best-scoring tokens.
pub fn expert_choice_select<T: Scalar>(scores: &Tensor<T>, cap: CapacitySpec) -> RoutingAssignment {
    let (b, t) = (scores.rows(), scores.cols());
    let k = CapacitySpec::new(cap.capacity_factor, b).k();
    let selections = select_columns(scores.data(), b, t, k);
    let gates = gates_for(scores, &selections);
    RoutingAssignment {
        capacity: k,
        selections,
        gates,
    }
}

fn gates_for<T: Scalar>(scores: &Tensor<T>, selections: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let t = scores.cols();
    selections
        .iter()
        .enumerate()
        .map(|(j, sel)| sel.iter().map(|&i| scores.data()[i * t + j].as_f64()).collect())
        .collect()
}

/// Swap `floor(sigma * k)` selected tokens per target for uniformly chosen
/// unselected ones. Permutations are drawn in full before truncation, so
/// with a shared seed a smaller `sigma` swaps a subset of what a larger
/// one swaps.
pub fn perturb_indices<R: Rng + ?Sized>(selected: &[usize], pool: usize, sigma: f64, rng: &mut R) -> Vec<usize> {
    let k = selected.len();
    let mut chosen = vec![false; pool];
    for &i in selected {
        chosen[i] = true;
    }
    let mut inside: Vec<usize> = selected.to_vec();
    let mut outside: Vec<usize> = (0..pool).filter(|&i| !chosen[i]).collect();
    inside.shuffle(rng);
    outside.shuffle(rng);
    let swaps = ((sigma * k as f64 + 1e-9).floor() as usize)
        .min(k)
        .min(outside.len());
    for s in 0..swaps {
        chosen[inside[s]] = false;
        chosen[outside[s]] = true;
    }
    (0..pool).filter(|&i| chosen[i]).collect()
}

pub fn perturb_selection<T: Scalar, R: Rng + ?Sized>(
    assign: &RoutingAssignment,
    scores: &Tensor<T>,
    sigma: f64,
    rng: &mut R,
) -> Result<RoutingAssignment> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Config(format!("noise ratio {sigma} outside [0, 1]")));
    }
    let pool = scores.rows();
    let selections: Vec<Vec<usize>> = assign
        .selections
        .iter()
        .map(|sel| perturb_indices(sel, pool, sigma, rng))
        .collect();
    let gates = gates_for(scores, &selections);
    Ok(RoutingAssignment {
        capacity: assign.capacity,
        selections,
        gates,
    })
}
