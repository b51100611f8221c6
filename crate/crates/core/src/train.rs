//! Run configuration, the training loop, metrics records, and evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::count_flops;
use crate::balance::{BatchComposer, MixPolicy};
use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::{Arch, BaseDims, ModelConfig};
use crate::data::{mix, stream_rng, Corpus, CorpusConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, LossBreakdown, Mode, Model, RoutingTrace, Trainable};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::params::names;
use crate::scalar::Scalar;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// First corpus index of the held-out evaluation slice.
pub const EVAL_INDEX_BASE: u64 = 1 << 62;

/// Backward costs about twice the forward pass.
pub const TRAIN_FLOPS_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub arch: Arch,
    pub base: BaseDims,
    /// Full model description; overrides `arch` and `base` when present.
    pub model: Option<ModelConfig>,
    pub corpus: CorpusConfig,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Gumbel-Sigmoid noise on expert routers during training.
    pub gumbel_noise: bool,
    pub balance: Option<MixPolicy>,
    pub log_every: usize,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub eval_batches: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::Dense,
            base: BaseDims::default(),
            model: None,
            corpus: CorpusConfig::default(),
            schedule: Schedule {
                peak_lr: 3e-3,
                end_lr: 3e-5,
                warmup_steps: 200,
                total_steps: 5000,
            },
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            seed: 0,
            gumbel_noise: false,
            balance: None,
            log_every: 1,
            checkpoint_every: 0,
            eval_batches: 8,
            out_dir: None,
        }
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| ModelConfig::named(self.arch, self.base))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model_config();
        m.validate()?;
        self.corpus.validate()?;
        self.schedule.validate()?;
        if m.vocab != self.corpus.vocab {
            return Err(Error::Config(format!(
                "model vocab {:?} differs from corpus vocab {:?}",
                m.vocab, self.corpus.vocab
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if m.seq_len < self.corpus.image_span_length {
            return Err(Error::Config("seq_len shorter than an image span".into()));
        }
        if let Some(p) = &self.balance {
            p.validate()?;
        }
        Ok(())
    }

    /// Dotted paths whose values differ, ignoring output and logging knobs.
    pub fn diff(&self, other: &RunConfig) -> Vec<String> {
        let ignore = ["out_dir", "log_every", "checkpoint_every", "eval_batches", "schedule.total_steps"];
        let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
        let norm = |c: &RunConfig| {
            let mut c = c.clone();
            c.model = Some(c.model_config());
            c.arch = Arch::Dense;
            c.base = BaseDims::default();
            serde_json::to_value(c).unwrap()
        };
        flatten("", &norm(self), &mut a);
        flatten("", &norm(other), &mut b);
        let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        keys.into_iter()
            .filter(|k| !ignore.iter().any(|i| k.starts_with(i)))
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| {
                format!(
                    "{k}: {} -> {}",
                    a.get(k).map(|v| v.to_string()).unwrap_or("-".into()),
                    b.get(k).map(|v| v.to_string()).unwrap_or("-".into())
                )
            })
            .collect()
    }

    /// Corpus index of training batch `cursor` for this run's seed.
    pub fn train_index(&self, cursor: u64) -> u64 {
        self.seed.wrapping_mul(1 << 40).wrapping_add(cursor)
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.model_config().seq_len
    }

    /// Estimated training FLOPs per optimizer step.
    pub fn flops_per_step(&self) -> f64 {
        let report = count_flops(&self.model_config());
        let tokens = self.tokens_per_step() as f64;
        TRAIN_FLOPS_MULTIPLIER * tokens * report.total(self.corpus.text_image_ratio)
    }
}

/// Routing summary for one router in one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStat {
    pub layer: usize,
    /// `text`, `image`, `mixed`, or `depth`.
    pub target: String,
    pub pool: usize,
    pub capacity: usize,
    pub selected: usize,
    pub mean_gate: f64,
    /// Pool fraction picked by no expert (groups) or skipped (depth).
    pub unprocessed_fraction: f64,
}

pub fn routing_stats<T>(trace: &RoutingTrace<T>) -> Vec<RoutingStat> {
    let mut out: Vec<RoutingStat> = trace
        .groups
        .iter()
        .map(|g| RoutingStat {
            layer: g.layer,
            target: g.tag.name().to_string(),
            pool: g.pool.len(),
            capacity: g.assignment.capacity,
            selected: g.assignment.selections.iter().map(|s| s.len()).sum(),
            mean_gate: g.mean_gate(),
            unprocessed_fraction: g.dropped_fraction(),
        })
        .collect();
    out.extend(trace.depth.iter().map(|d| RoutingStat {
        layer: d.layer,
        target: "depth".into(),
        pool: d.pool_size,
        capacity: d.capacity,
        selected: d.selected.len(),
        mean_gate: if d.gates.is_empty() {
            0.0
        } else {
            d.gates.iter().sum::<f64>() / d.gates.len() as f64
        },
        unprocessed_fraction: 1.0 - d.selected_fraction(),
    }));
    out.sort_by(|a, b| a.layer.cmp(&b.layer).then(a.target.cmp(&b.target)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStat {
    pub image_fraction: f64,
    pub deviation: f64,
    pub buffered_tokens: u64,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub text_loss: Option<f64>,
    pub image_loss: Option<f64>,
    pub grad_norm: f64,
    pub cumulative_flops: f64,
    pub routing: Vec<RoutingStat>,
    #[serde(default)]
    pub balance: Option<BalanceStat>,
}

impl MetricsRecord {
    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let r: MetricsRecord =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("bad metrics line: {e}")))?;
        if r.schema != METRICS_SCHEMA_VERSION {
            return Err(Error::Data(format!("metrics schema {} unsupported", r.schema)));
        }
        Ok(r)
    }
}

/// Read a metrics JSONL file.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRecord::from_line)
        .collect()
}

/// Append-only metrics sink.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter {
            file: std::io::BufWriter::new(file),
        })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", r.to_line()?)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

pub struct Trainer<T: Scalar> {
    pub run: RunConfig,
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub state: TrainState,
    corpus: Corpus,
    composer: Option<BatchComposer>,
    flops_per_step: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let mut rng = stream_rng(run.seed, 0x1417, 0);
        let model = Model::new(run.model_config(), &mut rng)?;
        let state = TrainState {
            step: 0,
            cursor: 0,
            opt_step: 0,
            cumulative_flops: 0.0,
            prior_flops: 0.0,
            composer: None,
        };
        Self::assemble(run, model, AdamW::new(AdamWConfig::default()), state)
    }

    fn assemble(run: RunConfig, model: Model<T>, mut opt: AdamW<T>, mut state: TrainState) -> Result<Self> {
        opt.config = run.optimizer;
        let corpus = Corpus::new(run.corpus.clone())?;
        let composer = match run.balance {
            Some(policy) => Some(match state.composer.take() {
                Some(s) => BatchComposer::from_state(policy, run.seed, s)?,
                None => BatchComposer::new(policy, run.seed, run.train_index(state.cursor))?,
            }),
            None => None,
        };
        let flops_per_step = run.flops_per_step();
        Ok(Trainer {
            run,
            model,
            opt,
            state,
            corpus,
            composer,
            flops_per_step,
        })
    }

    /// Resume from a checkpoint. With `run` given, the checkpoint's
    /// configuration must match it apart from output and logging settings.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, run: Option<&RunConfig>) -> Result<Self> {
        let mut cfg = ckpt.run.clone();
        if let Some(r) = run {
            let diff = ckpt.run.diff(r);
            if !diff.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "run config does not match checkpoint:\n  {}",
                    diff.join("\n  ")
                )));
            }
            cfg = r.clone();
        }
        cfg.validate()?;
        let model = Model::from_params(cfg.model_config(), ckpt.params)?;
        let mut opt = AdamW::new(cfg.optimizer);
        opt.step = ckpt.state.opt_step;
        opt.m = ckpt.opt_m;
        opt.v = ckpt.opt_v;
        Self::assemble(cfg, model, opt, ckpt.state)
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn flops_per_step(&self) -> f64 {
        self.flops_per_step
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut state = self.state.clone();
        state.opt_step = self.opt.step;
        state.composer = self.composer.as_ref().map(|c| c.state.clone());
        Checkpoint {
            run: self.run.clone(),
            state,
            params: self.model.params.clone(),
            opt_m: self.opt.m.clone(),
            opt_v: self.opt.v.clone(),
        }
    }

    /// The batch the next step will train on, without consuming it.
    pub fn peek_batch(&self) -> Result<TokenBatch> {
        match &self.composer {
            Some(c) => c.clone().compose_batch(&self.corpus, self.run.batch_size, self.model.config.seq_len),
            None => self.corpus.generate_batch(
                self.run.train_index(self.state.cursor),
                self.run.batch_size,
                self.model.config.seq_len,
            ),
        }
    }

    fn next_batch(&mut self) -> Result<TokenBatch> {
        let b = match &mut self.composer {
            Some(c) => c.compose_batch(&self.corpus, self.run.batch_size, self.model.config.seq_len)?,
            None => self.peek_batch()?,
        };
        self.state.cursor += 1;
        Ok(b)
    }

    pub fn train_options(&self, step: u64) -> ForwardOptions {
        ForwardOptions {
            gumbel_seed: self.run.gumbel_noise.then(|| mix(self.run.seed ^ 0x6B6B, step)),
            ..ForwardOptions::train()
        }
    }

    /// One optimizer step; returns its metrics record.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let batch = self.next_batch()?;
        let step = self.state.step + 1;
        let opts = self.train_options(step);
        let (loss, mut grads, trace) = self.model.gradients(&batch, &opts)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        grads.retain(|k, _| !names::is_aux(k));
        let lr = self.run.schedule.lr(step as usize);
        let grad_norm = self.opt.update(&mut self.model.params, &grads, lr)?;
        self.state.step = step;
        self.state.opt_step = self.opt.step;
        self.state.cumulative_flops += self.flops_per_step;
        let balance = self.composer.as_ref().map(|c| {
            let f = batch.image_fraction();
            BalanceStat {
                image_fraction: f,
                deviation: f - c.policy.target_image_fraction,
                buffered_tokens: c.state.buffered_tokens(),
            }
        });
        Ok(MetricsRecord {
            schema: METRICS_SCHEMA_VERSION,
            step,
            lr,
            loss: loss.total,
            text_loss: loss.text_loss,
            image_loss: loss.image_loss,
            grad_norm,
            cumulative_flops: self.state.cumulative_flops,
            routing: routing_stats(&trace),
            balance,
        })
    }

    /// Run `steps` steps, handing each record to `sink`; writes periodic
    /// checkpoints into the output directory when configured.
    pub fn train(
        &mut self,
        steps: usize,
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let rec = self.step()?;
            if rec.step % self.run.log_every.max(1) as u64 == 0 {
                sink(&rec)?;
            }
            if self.run.checkpoint_every > 0 && rec.step % self.run.checkpoint_every as u64 == 0 {
                if let Some(dir) = &self.run.out_dir {
                    self.checkpoint().save(dir.join(format!("ckpt_{:06}.bin", rec.step)))?;
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, mode: Mode) -> Result<LossBreakdown> {
        evaluate(&self.model, &self.corpus, mode, self.run.batch_size, self.run.eval_batches)
    }
}

/// Mean loss over the held-out slice in the given routing mode.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    mode: Mode,
    batch_size: usize,
    batches: usize,
) -> Result<LossBreakdown> {
    let opts = ForwardOptions {
        mode,
        trainable: Trainable::Nothing,
        ..ForwardOptions::default()
    };
    let mut parts = Vec::with_capacity(batches);
    for i in 0..batches {
        let batch = corpus.generate_batch(EVAL_INDEX_BASE + i as u64, batch_size, model.config.seq_len)?;
        parts.push(model.evaluate(&batch, &opts)?);
    }
    Ok(LossBreakdown::combine(&parts))
}
