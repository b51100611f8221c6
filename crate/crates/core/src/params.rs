//! Named parameter storage and initialisation.
//!
//! Parameters live in one ordered map keyed by canonical path, e.g.
//! `layer.3.moma.text.expert_1.w_in` or `layer.0.mod_router.weight`.
//! Auxiliary routers share the store under the `aux.` prefix.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::config::{GroupTag, ModelConfig};
use crate::error::{Error, Result};
use crate::routing::RouterParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

pub mod names {
    use crate::config::GroupTag;

    pub const EMBED: &str = "embed";
    pub const HEAD: &str = "head";
    pub const FINAL_NORM: &str = "final_norm";
    pub const AUX_PREFIX: &str = "aux.";

    pub fn attn(layer: usize, matrix: &str) -> String {
        format!("layer.{layer}.attn.{matrix}")
    }

    pub fn expert(layer: usize, tag: GroupTag, expert: usize, matrix: &str) -> String {
        format!("layer.{layer}.moma.{}.expert_{expert}.{matrix}", tag.name())
    }

    pub fn router(layer: usize, tag: GroupTag) -> String {
        format!("layer.{layer}.moma.{}.router", tag.name())
    }

    pub fn post_norm(layer: usize) -> String {
        format!("layer.{layer}.moma.post_norm")
    }

    pub fn mod_router(layer: usize) -> String {
        format!("layer.{layer}.mod_router.weight")
    }

    pub fn aux_group(layer: usize, tag: GroupTag, matrix: &str) -> String {
        format!("aux.layer.{layer}.moma.{}.{matrix}", tag.name())
    }

    pub fn aux_depth(layer: usize, matrix: &str) -> String {
        format!("aux.layer.{layer}.mod_router.{matrix}")
    }

    pub fn is_aux(name: &str) -> bool {
        name.starts_with(AUX_PREFIX)
    }
}

pub const EXPERT_MATRICES: [&str; 3] = ["w_in", "w_gate", "w_out"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.map.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Scalar parameter count, optionally restricted by a name filter.
    pub fn count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Hash over names and raw bits of the parameters passing `filter`.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (k, t) in self.map.iter().filter(|(k, _)| filter(k)) {
            for b in k.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= t.checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn has_aux(&self) -> bool {
        self.map.keys().any(|k| names::is_aux(k))
    }

    pub fn remove_aux(&mut self) {
        self.map.retain(|k, _| !names::is_aux(k));
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(shape, std, rng)
}

/// Fresh main-model parameters (no auxiliary routers).
pub fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let (d, v, f) = (cfg.hidden, cfg.vocab.size(), cfg.ffn);
    let out_std = INIT_STD / (2.0 * cfg.layers as f64).sqrt();
    let mut p = ParamStore::new();
    p.insert(names::EMBED, normal(&[v, d], INIT_STD, rng));
    for j in 0..cfg.layers {
        p.insert(names::attn(j, "norm"), Tensor::full(&[d], T::one()));
        for m in ["wq", "wk", "wv"] {
            p.insert(names::attn(j, m), normal(&[d, d], INIT_STD, rng));
        }
        p.insert(names::attn(j, "wo"), normal(&[d, d], out_std, rng));
        for g in cfg.groups() {
            for e in 0..g.experts {
                p.insert(names::expert(j, g.tag, e, "w_in"), normal(&[d, f], INIT_STD, rng));
                p.insert(names::expert(j, g.tag, e, "w_gate"), normal(&[d, f], INIT_STD, rng));
                p.insert(names::expert(j, g.tag, e, "w_out"), normal(&[f, d], out_std, rng));
            }
            if g.tag.is_routed() {
                p.insert(names::router(j, g.tag), normal(&[d, g.experts], INIT_STD, rng));
            }
        }
        p.insert(names::post_norm(j), Tensor::full(&[d], T::one()));
        if cfg.is_depth_routed(j) {
            p.insert(names::mod_router(j), normal(&[d, 1], INIT_STD, rng));
        }
    }
    p.insert(names::FINAL_NORM, Tensor::full(&[d], T::one()));
    p.insert(names::HEAD, normal(&[d, v], INIT_STD, rng));
    Ok(p)
}

/// Names of every routing target that gets an auxiliary router:
/// `(prefix, num_targets)` pairs.
pub fn aux_router_slots(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for j in 0..cfg.layers {
        if cfg.is_depth_routed(j) {
            out.push((format!("aux.layer.{j}.mod_router"), 1));
        }
        for g in cfg.groups().into_iter().filter(|g| g.tag.is_routed()) {
            out.push((format!("aux.layer.{j}.moma.{}", g.tag.name()), g.experts));
        }
    }
    out
}

/// Insert freshly initialised auxiliary routers (`d -> d/2 -> targets`).
pub fn init_aux_params<T: Scalar>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if !cfg.hidden.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "auxiliary routers need an even hidden size, got {}",
            cfg.hidden
        )));
    }
    let (d, h) = (cfg.hidden, cfg.hidden / 2);
    for (prefix, targets) in aux_router_slots(cfg) {
        store.insert(format!("{prefix}.w_a1"), normal(&[d, h], INIT_STD, rng));
        store.insert(format!("{prefix}.w_a2"), normal(&[h, targets], INIT_STD, rng));
    }
    Ok(())
}

/// SwiGLU expert weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T> {
    pub w_in: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGroup<T> {
    pub tag: GroupTag,
    pub experts: Vec<ExpertParams<T>>,
    pub router: Option<RouterParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomaLayerParams<T> {
    pub groups: Vec<ExpertGroup<T>>,
    pub post_norm: Tensor<T>,
}

impl<T: Scalar> MomaLayerParams<T> {
    pub fn from_store(store: &ParamStore<T>, cfg: &ModelConfig, layer: usize) -> Result<Self> {
        let mut groups = Vec::new();
        for g in cfg.groups() {
            let experts = (0..g.experts)
                .map(|e| {
                    Ok(ExpertParams {
                        w_in: store.get(&names::expert(layer, g.tag, e, "w_in"))?.clone(),
                        w_gate: store.get(&names::expert(layer, g.tag, e, "w_gate"))?.clone(),
                        w_out: store.get(&names::expert(layer, g.tag, e, "w_out"))?.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let router = if g.tag.is_routed() {
                Some(RouterParams::new(store.get(&names::router(layer, g.tag))?.clone())?)
            } else {
                None
            };
            groups.push(ExpertGroup {
                tag: g.tag,
                experts,
                router,
            });
        }
        Ok(MomaLayerParams {
            groups,
            post_norm: store.get(&names::post_norm(layer))?.clone(),
        })
    }

    /// Write back into `store`, replacing the layer's expert, router and
    /// post-norm entries.
    pub fn write_to(&self, store: &mut ParamStore<T>, layer: usize) -> Result<()> {
        let d = self.post_norm.numel();
        for g in &self.groups {
            if g.experts.is_empty() {
                return Err(Error::Contract(format!("group {} has no experts", g.tag.name())));
            }
            let shape = g.experts[0].w_in.shape().to_vec();
            for (e, ex) in g.experts.iter().enumerate() {
                if ex.w_in.shape() != shape.as_slice() || ex.w_in.shape()[0] != d {
                    return Err(Error::Contract(format!(
                        "expert {e} of group {} is not homogeneous",
                        g.tag.name()
                    )));
                }
                store.insert(names::expert(layer, g.tag, e, "w_in"), ex.w_in.clone());
                store.insert(names::expert(layer, g.tag, e, "w_gate"), ex.w_gate.clone());
                store.insert(names::expert(layer, g.tag, e, "w_out"), ex.w_out.clone());
            }
            if let Some(r) = &g.router {
                store.insert(names::router(layer, g.tag), r.weight.clone());
            }
        }
        store.insert(names::post_norm(layer), self.post_norm.clone());
        Ok(())
    }
}
