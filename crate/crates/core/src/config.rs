//! Architecture configuration and the named desk-scale variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Modality, VocabSpec};
use crate::error::{Error, Result};
use crate::scalar::DType;

/// Named architecture variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "moe_8x")]
    Moe8x,
    #[serde(rename = "moe_1t1i")]
    Moe1t1i,
    #[serde(rename = "moe_4t4i")]
    Moe4t4i,
    #[serde(rename = "moe_7t1i")]
    Moe7t1i,
    #[serde(rename = "moe_6t2i")]
    Moe6t2i,
    #[serde(rename = "mod_moe_1t1i")]
    ModMoe1t1i,
    #[serde(rename = "mod_moe_4t4i")]
    ModMoe4t4i,
}

impl Arch {
    pub const ALL: [Arch; 8] = [
        Arch::Dense,
        Arch::Moe8x,
        Arch::Moe1t1i,
        Arch::Moe4t4i,
        Arch::Moe7t1i,
        Arch::Moe6t2i,
        Arch::ModMoe1t1i,
        Arch::ModMoe4t4i,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Dense => "dense",
            Arch::Moe8x => "moe_8x",
            Arch::Moe1t1i => "moe_1t1i",
            Arch::Moe4t4i => "moe_4t4i",
            Arch::Moe7t1i => "moe_7t1i",
            Arch::Moe6t2i => "moe_6t2i",
            Arch::ModMoe1t1i => "mod_moe_1t1i",
            Arch::ModMoe4t4i => "mod_moe_4t4i",
        }
    }

    pub fn is_sparse(self) -> bool {
        self != Arch::Dense
    }

    pub fn ffn_layout(self) -> FfnLayout {
        match self {
            Arch::Dense => FfnLayout::Dense,
            Arch::Moe8x => FfnLayout::Mixed { experts: 8 },
            Arch::Moe1t1i | Arch::ModMoe1t1i => FfnLayout::ModalityAware { text: 1, image: 1 },
            Arch::Moe4t4i | Arch::ModMoe4t4i => FfnLayout::ModalityAware { text: 4, image: 4 },
            Arch::Moe7t1i => FfnLayout::ModalityAware { text: 7, image: 1 },
            Arch::Moe6t2i => FfnLayout::ModalityAware { text: 6, image: 2 },
        }
    }

    pub fn uses_depth_routing(self) -> bool {
        matches!(self, Arch::ModMoe1t1i | Arch::ModMoe4t4i)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture '{s}'")))
    }
}

/// How the feed-forward sublayer is split into experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FfnLayout {
    /// One ungated FFN shared by every token.
    Dense,
    /// One routed group receiving every token regardless of modality.
    Mixed { experts: usize },
    /// A routed group per modality.
    ModalityAware { text: usize, image: usize },
}

/// Which tokens a group receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupTag {
    Dense,
    Mixed,
    Text,
    Image,
}

impl GroupTag {
    pub fn name(self) -> &'static str {
        match self {
            GroupTag::Dense => "dense",
            GroupTag::Mixed => "mixed",
            GroupTag::Text => "text",
            GroupTag::Image => "image",
        }
    }

    pub fn accepts(self, m: Modality) -> bool {
        match self {
            GroupTag::Dense | GroupTag::Mixed => true,
            GroupTag::Text => m == Modality::Text,
            GroupTag::Image => m == Modality::Image,
        }
    }

    pub fn is_routed(self) -> bool {
        self != GroupTag::Dense
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSpec {
    pub tag: GroupTag,
    pub experts: usize,
    /// Expert capacity factor `c_e`.
    pub capacity: f64,
}

fn default_eps() -> f64 {
    1e-5
}
fn default_rope_base() -> f64 {
    10000.0
}
fn default_mod_capacity() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub arch: Option<Arch>,
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub ffn_layout: FfnLayout,
    /// Text (or mixed) group capacity; `None` means `1 / group size`.
    #[serde(default)]
    pub text_capacity: Option<f64>,
    #[serde(default)]
    pub image_capacity: Option<f64>,
    /// Depth routing every `i` layers starting at layer 0; `None` disables.
    #[serde(default)]
    pub mod_interval: Option<usize>,
    #[serde(default = "default_mod_capacity")]
    pub mod_capacity: f64,
    pub vocab: VocabSpec,
    pub seq_len: usize,
    #[serde(default = "default_precision")]
    pub precision: DType,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_precision() -> DType {
    DType::F32
}

/// Shared dimensions that every named variant starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseDims {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab: VocabSpec,
}

impl Default for BaseDims {
    fn default() -> Self {
        BaseDims {
            layers: 4,
            hidden: 64,
            ffn: 256,
            heads: 4,
            seq_len: 256,
            vocab: VocabSpec::default(),
        }
    }
}

impl BaseDims {
    /// Two-layer, 16-wide configuration for exhaustive checks.
    pub fn micro() -> Self {
        BaseDims {
            layers: 2,
            hidden: 16,
            ffn: 32,
            heads: 2,
            seq_len: 16,
            vocab: VocabSpec {
                text_vocab_size: 48,
                image_vocab_size: 16,
            },
        }
    }
}

/// Layer count that keeps per-token compute near a dense stack of `layers`
/// when every `interval`-th layer processes only a `capacity` fraction.
pub fn depth_matched_layers(layers: usize, interval: usize, capacity: f64) -> usize {
    let i = interval as f64;
    let per_layer = (1.0 - 1.0 / i) + capacity / i;
    ((layers as f64 / per_layer).round() as usize).max(1)
}

impl ModelConfig {
    pub fn named(arch: Arch, base: BaseDims) -> Self {
        let (layers, mod_interval) = if arch.uses_depth_routing() {
            (depth_matched_layers(base.layers, 2, 0.25), Some(2))
        } else {
            (base.layers, None)
        };
        ModelConfig {
            arch: Some(arch),
            layers,
            hidden: base.hidden,
            ffn: base.ffn,
            heads: base.heads,
            ffn_layout: arch.ffn_layout(),
            text_capacity: None,
            image_capacity: None,
            mod_interval,
            mod_capacity: 0.25,
            vocab: base.vocab,
            seq_len: base.seq_len,
            precision: DType::F32,
            norm_eps: default_eps(),
            rope_base: default_rope_base(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.layers == 0 || self.hidden == 0 || self.ffn == 0 || self.seq_len == 0 {
            return Err(Error::Config("layers, hidden, ffn and seq_len must be positive".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(self.hidden / self.heads).is_multiple_of(2) {
            return Err(Error::Config("rotary encoding needs an even head dim".into()));
        }
        match self.ffn_layout {
            FfnLayout::Dense => {}
            FfnLayout::Mixed { experts: 0 } => {
                return Err(Error::Config("mixed group needs >= 1 expert".into()))
            }
            FfnLayout::ModalityAware { text, image } if text == 0 || image == 0 => {
                return Err(Error::Config("each modality group needs >= 1 expert".into()))
            }
            _ => {}
        }
        for c in [self.text_capacity, self.image_capacity].into_iter().flatten() {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Config(format!("expert capacity {c} outside (0, 1]")));
            }
        }
        if let Some(i) = self.mod_interval {
            if i == 0 {
                return Err(Error::Config("depth routing interval must be >= 1".into()));
            }
            if !(self.mod_capacity > 0.0 && self.mod_capacity <= 1.0) {
                return Err(Error::Config(format!(
                    "depth capacity {} outside (0, 1]",
                    self.mod_capacity
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn groups(&self) -> Vec<GroupSpec> {
        let cap = |given: Option<f64>, n: usize| given.unwrap_or(1.0 / n as f64);
        match self.ffn_layout {
            FfnLayout::Dense => vec![GroupSpec {
                tag: GroupTag::Dense,
                experts: 1,
                capacity: 1.0,
            }],
            FfnLayout::Mixed { experts } => vec![GroupSpec {
                tag: GroupTag::Mixed,
                experts,
                capacity: cap(self.text_capacity, experts),
            }],
            FfnLayout::ModalityAware { text, image } => vec![
                GroupSpec {
                    tag: GroupTag::Text,
                    experts: text,
                    capacity: cap(self.text_capacity, text),
                },
                GroupSpec {
                    tag: GroupTag::Image,
                    experts: image,
                    capacity: cap(self.image_capacity, image),
                },
            ],
        }
    }

    pub fn is_depth_routed(&self, layer: usize) -> bool {
        build_mod_schedule(self.layers, self.mod_interval)[layer]
    }

    pub fn has_routers(&self) -> bool {
        self.mod_interval.is_some() || self.ffn_layout != FfnLayout::Dense
    }

    pub fn name(&self) -> String {
        self.arch.map(|a| a.name().to_string()).unwrap_or_else(|| "custom".into())
    }
}

/// Depth-routed layer flags: layer `j` is routed iff `j % interval == 0`.
pub fn build_mod_schedule(total_layers: usize, interval: Option<usize>) -> Vec<bool> {
    (0..total_layers)
        .map(|j| interval.is_some_and(|i| i >= 1 && j % i == 0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = build_mod_schedule(14, Some(2));
        let on: Vec<usize> = (0..14).filter(|&j| s[j]).collect();
        assert_eq!(on, vec![0, 2, 4, 6, 8, 10, 12]);
        assert!(build_mod_schedule(5, Some(1)).iter().all(|&b| b));
        let s = build_mod_schedule(3, Some(7));
        assert_eq!(s, vec![true, false, false]);
        assert!(build_mod_schedule(4, None).iter().all(|&b| !b));
    }

    #[test]
    fn named_configs_resolve() {
        for arch in Arch::ALL {
            let cfg = ModelConfig::named(arch, BaseDims::default());
            cfg.validate().unwrap();
            assert_eq!(arch.name().parse::<Arch>().unwrap(), arch);
        }
        let c = ModelConfig::named(Arch::Moe4t4i, BaseDims::default());
        let g = c.groups();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].capacity, 0.25);
        let c = ModelConfig::named(Arch::Moe8x, BaseDims::default());
        assert_eq!(c.groups()[0].tag, GroupTag::Mixed);
        assert_eq!(c.groups()[0].capacity, 0.125);
        let c = ModelConfig::named(Arch::ModMoe4t4i, BaseDims::default());
        assert_eq!(c.layers, 6);
        assert_eq!(c.mod_interval, Some(2));
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut c = ModelConfig::named(Arch::Dense, BaseDims::default());
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_roundtrip() {
        let c = ModelConfig::named(Arch::ModMoe1t1i, BaseDims::micro());
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
