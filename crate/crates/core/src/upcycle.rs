//! Growing a multi-expert model from a one-expert-per-modality seed.
//!
//! Every target expert starts as an exact copy of the seed expert of its
//! modality. Widened routers get fresh columns. Training resumes with a
//! fresh schedule and optimizer but the seed's data cursor.

use serde::{Deserialize, Serialize};

use crate::analysis::LossCurve;
use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::{Arch, FfnLayout, GroupTag, ModelConfig};
use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::optim::Schedule;
use crate::params::{init_params, names, ParamStore, EXPERT_MATRICES, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpcyclePlan {
    pub text_experts: usize,
    pub image_experts: usize,
    /// Gumbel-Sigmoid router noise in the second stage.
    pub gumbel_noise: bool,
    /// Seed for the fresh router columns.
    pub router_seed: u64,
    /// Second-stage schedule; the seed's schedule is reused when absent.
    pub schedule: Option<Schedule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyAction {
    Copied,
    Replicated,
    FreshInit,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyEntry {
    pub target: String,
    pub source: Option<String>,
    pub action: CopyAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpcycleReport {
    pub seed_steps: u64,
    pub seed_flops: f64,
    pub entries: Vec<CopyEntry>,
}

impl UpcycleReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let action = match e.action {
                CopyAction::Copied => "copy",
                CopyAction::Replicated => "replicate",
                CopyAction::FreshInit => "fresh",
                CopyAction::Dropped => "drop",
            };
            s.push_str(&format!(
                "{action:<9} {} <- {}\n",
                e.target,
                e.source.as_deref().unwrap_or("-")
            ));
        }
        s
    }
}

fn arch_for(layout: FfnLayout, depth: bool) -> Option<Arch> {
    Arch::ALL
        .iter()
        .copied()
        .find(|a| a.ffn_layout() == layout && a.uses_depth_routing() == depth)
}

/// Target model configuration for a seed configuration and plan.
pub fn upcycled_config(seed: &ModelConfig, plan: &UpcyclePlan) -> Result<ModelConfig> {
    if seed.ffn_layout != (FfnLayout::ModalityAware { text: 1, image: 1 }) {
        return Err(Error::Config(format!(
            "upcycling needs a seed with one expert per modality, got {:?}",
            seed.ffn_layout
        )));
    }
    if plan.text_experts == 0 || plan.image_experts == 0 {
        return Err(Error::Config("target expert counts must be >= 1".into()));
    }
    let layout = FfnLayout::ModalityAware {
        text: plan.text_experts,
        image: plan.image_experts,
    };
    let mut cfg = seed.clone();
    cfg.ffn_layout = layout;
    cfg.arch = arch_for(layout, seed.mod_interval.is_some());
    cfg.text_capacity = None;
    cfg.image_capacity = None;
    cfg.validate()?;
    Ok(cfg)
}

/// Convert a seed checkpoint into the multi-expert checkpoint described
/// by `plan`, along with a per-tensor copy manifest.
pub fn upcycle_checkpoint<T: Scalar>(
    seed: &Checkpoint<T>,
    plan: &UpcyclePlan,
) -> Result<(Checkpoint<T>, UpcycleReport)> {
    let seed_cfg = seed.run.model_config();
    let cfg = upcycled_config(&seed_cfg, plan)?;
    let mut shape_rng = stream_rng(0, 0, 0);
    let template: ParamStore<T> = init_params(&cfg, &mut shape_rng)?;
    let mut rng = stream_rng(plan.router_seed, 0x0C7C, 0);
    let mut out = ParamStore::new();
    let mut entries = Vec::new();
    let mut mismatched = Vec::new();

    let group_count = |tag: GroupTag| match tag {
        GroupTag::Text => plan.text_experts,
        _ => plan.image_experts,
    };
    for (name, want) in template.iter() {
        let source = source_of(name, &cfg);
        match source {
            Source::Same => {
                let t = seed.params.get(name)?;
                if t.shape() != want.shape() {
                    mismatched.push(format!("{name}: seed {:?}, target {:?}", t.shape(), want.shape()));
                    continue;
                }
                out.insert(name.clone(), t.clone());
                entries.push(CopyEntry {
                    target: name.clone(),
                    source: Some(name.clone()),
                    action: CopyAction::Copied,
                });
            }
            Source::Expert(src) => {
                let t = seed.params.get(&src)?;
                if t.shape() != want.shape() {
                    mismatched.push(format!("{name}: seed {:?}, target {:?}", t.shape(), want.shape()));
                    continue;
                }
                let action = if &src == name { CopyAction::Copied } else { CopyAction::Replicated };
                out.insert(name.clone(), t.clone());
                entries.push(CopyEntry {
                    target: name.clone(),
                    source: Some(src),
                    action,
                });
            }
            Source::Router(tag, src) => {
                if group_count(tag) == 1 {
                    let t = seed.params.get(&src)?;
                    if t.shape() != want.shape() {
                        mismatched.push(format!("{name}: seed {:?}, target {:?}", t.shape(), want.shape()));
                        continue;
                    }
                    out.insert(name.clone(), t.clone());
                    entries.push(CopyEntry {
                        target: name.clone(),
                        source: Some(src),
                        action: CopyAction::Copied,
                    });
                } else {
                    out.insert(name.clone(), Tensor::randn(want.shape(), INIT_STD, &mut rng));
                    entries.push(CopyEntry {
                        target: name.clone(),
                        source: None,
                        action: CopyAction::FreshInit,
                    });
                }
            }
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Checkpoint(format!(
            "seed does not fit the target shapes:\n  {}",
            mismatched.join("\n  ")
        )));
    }
    for name in seed.params.names() {
        if !out.contains(name) && !template.contains(name) {
            entries.push(CopyEntry {
                target: name.clone(),
                source: Some(name.clone()),
                action: CopyAction::Dropped,
            });
        }
    }

    let mut run = seed.run.clone();
    run.model = Some(cfg.clone());
    if let Some(a) = cfg.arch {
        run.arch = a;
    }
    run.gumbel_noise = plan.gumbel_noise;
    if let Some(s) = plan.schedule {
        run.schedule = s;
    }
    let state = TrainState {
        step: 0,
        cursor: seed.state.cursor,
        opt_step: 0,
        cumulative_flops: 0.0,
        prior_flops: seed.state.prior_flops + seed.state.cumulative_flops,
        composer: seed.state.composer.clone(),
    };
    let report = UpcycleReport {
        seed_steps: seed.state.step,
        seed_flops: state.prior_flops,
        entries,
    };
    Ok((
        Checkpoint {
            run,
            state,
            params: out,
            opt_m: Default::default(),
            opt_v: Default::default(),
        },
        report,
    ))
}

enum Source {
    Same,
    Expert(String),
    Router(GroupTag, String),
}

/// Seed tensor a target tensor is taken from.
fn source_of(name: &str, cfg: &ModelConfig) -> Source {
    for j in 0..cfg.layers {
        for g in cfg.groups() {
            if name == names::router(j, g.tag) {
                return Source::Router(g.tag, names::router(j, g.tag));
            }
            for e in 0..g.experts {
                for m in EXPERT_MATRICES {
                    if name == names::expert(j, g.tag, e, m) {
                        return Source::Expert(names::expert(j, g.tag, 0, m));
                    }
                }
            }
        }
    }
    Source::Same
}

/// Parameters added per group by upcycling: extra experts plus router growth.
pub fn added_parameters(cfg: &ModelConfig, plan: &UpcyclePlan) -> usize {
    let per_expert = 3 * cfg.hidden * cfg.ffn;
    let mut total = 0;
    for n in [plan.text_experts, plan.image_experts] {
        total += (n - 1) * per_expert + (n - 1) * cfg.hidden;
    }
    total * cfg.layers
}

/// Stage-two curve shifted by the stage-one cost and appended to the part
/// of stage one that preceded it.
pub fn flops_adjusted_curve(
    stage1: Option<&LossCurve>,
    stage2: &LossCurve,
    stage1_flops: f64,
) -> Result<LossCurve> {
    let mut points: Vec<(f64, f64)> = stage1
        .map(|c| c.points().iter().copied().filter(|p| p.0 <= stage1_flops).collect())
        .unwrap_or_default();
    points.extend(stage2.shifted(stage1_flops).points().iter().copied());
    LossCurve::new(points)
}
