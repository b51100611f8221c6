use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use moma_core::analysis::{
    count_flops, dense_ffn_flops, noise_sensitivity_sweep, simulate_step_latency, speedup_eta, LossCurve,
    MixSampler, TokenCosts,
};
use moma_core::aux_router::{train_aux_routers, AuxTrainConfig};
use moma_core::checkpoint::Checkpoint;
use moma_core::config::Arch;
use moma_core::data::{encode_corpus, stream_rng, Corpus, CorpusHeader};
use moma_core::model::{Mode, Model};
use moma_core::params::init_aux_params;
use moma_core::train::{evaluate, read_metrics, MetricsWriter, RunConfig, Trainer, EVAL_INDEX_BASE};
use moma_core::upcycle::{upcycle_checkpoint, UpcyclePlan};
use moma_core::{Error, Result};

#[derive(Parser)]
#[command(name = "moma", version, about = "Modality-aware sparse language models at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from or operate on.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Train)]
    mode: ModeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Train,
    Infer,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Train => Mode::Train,
            ModeArg::Infer => Mode::Infer,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing metrics and checkpoints under --out.
    Train(Common),
    /// Evaluate a checkpoint on the held-out slice.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Distil auxiliary routers into a trained checkpoint.
    TrainAux {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Grow a one-expert-per-modality checkpoint into more experts.
    Upcycle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        text_experts: usize,
        #[arg(long, default_value_t = 4)]
        image_experts: usize,
        #[arg(long)]
        gumbel: bool,
    },
    /// Analytic FLOPs per token for a configuration.
    Flops(Common),
    /// Speed-up factor of a sparse run over a dense run.
    Eta {
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long)]
        dense: PathBuf,
        /// EMA half-life in steps; 0 uses raw losses.
        #[arg(long, default_value_t = 100.0)]
        half_life: f64,
    },
    /// Depth-router noise sensitivity of a checkpoint.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.02,0.1,0.5")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        batches: usize,
    },
    /// Simulated step latency for balanced and skewed modality mixes.
    LatencySim {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
        devices: Vec<usize>,
        #[arg(long, default_value_t = 2048)]
        tokens: usize,
        #[arg(long, default_value_t = 0.25)]
        image_fraction: f64,
        #[arg(long, default_value_t = 0.2)]
        spread: f64,
        /// Sequences per device batch in the skewed mix.
        #[arg(long, default_value_t = 6)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        text_experts: usize,
        #[arg(long, default_value_t = 2)]
        image_experts: usize,
    },
    /// Write synthetic corpus batches to files.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        batches: u64,
    },
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut run = match (&c.config, &c.resume) {
        (Some(p), _) => RunConfig::from_file(p)?,
        (None, Some(p)) => Checkpoint::<f32>::load(p)?.run,
        (None, None) => RunConfig::default(),
    };
    if let Some(a) = c.arch {
        run.arch = a;
        run.model = None;
    }
    if let Some(s) = c.seed {
        run.seed = s;
    }
    if let Some(s) = c.steps {
        run.schedule.total_steps = s;
        if run.schedule.warmup_steps >= s {
            run.schedule.warmup_steps = s / 10;
        }
    }
    if let Some(o) = &c.out {
        run.out_dir = Some(o.clone());
    }
    run.validate()?;
    Ok(run)
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn need_checkpoint(c: &Common) -> Result<&Path> {
    c.resume
        .as_deref()
        .ok_or_else(|| Error::Config("--resume PATH to a checkpoint is required".into()))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    step: u64,
    cum_flops: f64,
    loss: f64,
    text_loss: Option<f64>,
    image_loss: Option<f64>,
}

fn cmd_train(c: &Common) -> Result<()> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
    let mut trainer = match &c.resume {
        Some(p) => {
            let ckpt = Checkpoint::<f32>::load(p)?;
            let run = if c.config.is_some() || c.arch.is_some() || c.seed.is_some() {
                Some(run_config(c)?)
            } else {
                None
            };
            let mut t = Trainer::from_checkpoint(ckpt, run.as_ref())?;
            if let Some(s) = c.steps {
                t.run.schedule.total_steps = s;
            }
            t.run.out_dir = Some(dir.clone());
            t
        }
        None => {
            let mut run = run_config(c)?;
            run.out_dir = Some(dir.clone());
            Trainer::<f32>::new(run)?
        }
    };
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&trainer.run)?)?;
    let remaining = trainer.run.schedule.total_steps.saturating_sub(trainer.state.step as usize);
    let mut metrics = MetricsWriter::append(dir.join("metrics.jsonl"))?;
    let mut rows = Vec::new();
    trainer.train(remaining, &mut |r| {
        metrics.write(r)?;
        rows.push(CurveRow {
            step: r.step,
            cum_flops: r.cumulative_flops,
            loss: r.loss,
            text_loss: r.text_loss,
            image_loss: r.image_loss,
        });
        Ok(())
    })?;
    metrics.flush()?;
    write_csv(&dir.join("loss_curve.csv"), rows)?;
    let final_path = dir.join("final.bin");
    trainer.checkpoint().save(&final_path)?;
    let eval = trainer.evaluate(Mode::Train)?;
    println!(
        "trained {} to step {}; held-out loss {:.4}; checkpoint {}",
        trainer.model.config.name(),
        trainer.state.step,
        eval.total,
        final_path.display()
    );
    Ok(())
}

fn cmd_eval(c: &Common, batches: Option<usize>) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(need_checkpoint(c)?)?;
    let run = ckpt.run.clone();
    let model = Model::from_params(run.model_config(), ckpt.params)?;
    let corpus = Corpus::new(run.corpus.clone())?;
    let mode: Mode = c.mode.into();
    let loss = evaluate(
        &model,
        &corpus,
        mode,
        run.batch_size,
        batches.unwrap_or(run.eval_batches),
    )
    .map_err(|e| match e {
        Error::Contract(m) if mode == Mode::Infer => Error::Checkpoint(m),
        other => other,
    })?;
    print_json(&loss)
}

fn cmd_train_aux(c: &Common, lr: Option<f64>) -> Result<()> {
    let path = need_checkpoint(c)?;
    let mut ckpt = Checkpoint::<f32>::load(path)?;
    let cfg = ckpt.run.model_config();
    if !ckpt.params.has_aux() {
        let mut rng = stream_rng(ckpt.run.seed, 0xA0A0, 0);
        init_aux_params(&cfg, &mut ckpt.params, &mut rng)?;
    }
    let mut aux = AuxTrainConfig {
        batch_size: ckpt.run.batch_size,
        seq_len: cfg.seq_len,
        ..AuxTrainConfig::default()
    };
    if let Some(s) = c.steps {
        aux.steps = s;
        aux.warmup_steps = aux.warmup_steps.min(s / 10);
    }
    if let Some(lr) = lr {
        aux.peak_lr = lr;
        aux.end_lr = lr / 100.0;
    }
    let corpus = Corpus::new(ckpt.run.corpus.clone())?;
    let mut model = Model::from_params(cfg, ckpt.params.clone())?;
    let report = train_aux_routers(&mut model, &corpus, &aux)?;
    ckpt.params = model.params;
    let dest = match &c.out {
        Some(o) if o.extension().is_some() => o.clone(),
        Some(o) => {
            std::fs::create_dir_all(o)?;
            o.join("with_aux.bin")
        }
        None => path.to_path_buf(),
    };
    ckpt.save(&dest)?;
    print_json(&report.agreement)?;
    println!("saved {}", dest.display());
    Ok(())
}

fn cmd_upcycle(c: &Common, text: usize, image: usize, gumbel: bool) -> Result<()> {
    let seed = Checkpoint::<f32>::load(need_checkpoint(c)?)?;
    let plan = UpcyclePlan {
        text_experts: text,
        image_experts: image,
        gumbel_noise: gumbel,
        router_seed: c.seed.unwrap_or(seed.run.seed),
        schedule: None,
    };
    let (out, report) = upcycle_checkpoint(&seed, &plan)?;
    let dest = c.out.clone().unwrap_or_else(|| PathBuf::from("upcycled.bin"));
    out.save(&dest)?;
    print!("{}", report.render());
    println!("seed steps {}; wrote {}", report.seed_steps, dest.display());
    Ok(())
}

#[derive(Serialize)]
struct FlopsOut {
    config: String,
    layers: usize,
    text: moma_core::analysis::FlopsBreakdown,
    image: moma_core::analysis::FlopsBreakdown,
    per_token_total: f64,
    dense_equivalent_ffn: f64,
}

fn cmd_flops(c: &Common) -> Result<()> {
    let run = run_config(c)?;
    let cfg = run.model_config();
    let r = count_flops(&cfg);
    print_json(&FlopsOut {
        config: cfg.name(),
        layers: cfg.layers,
        text: r.text,
        image: r.image,
        per_token_total: r.total(run.corpus.text_image_ratio),
        dense_equivalent_ffn: dense_ffn_flops(&cfg),
    })
}

fn curve_from_metrics(path: &Path, half_life: f64) -> Result<LossCurve> {
    let recs = read_metrics(path)?;
    if recs.is_empty() {
        return Err(Error::Data(format!("{} has no records", path.display())));
    }
    let pts: Vec<(f64, f64)> = recs.iter().map(|r| (r.cumulative_flops, r.loss)).collect();
    let smooth = if half_life > 0.0 {
        moma_core::analysis::ema(&pts.iter().map(|p| p.1).collect::<Vec<_>>(), half_life)
    } else {
        pts.iter().map(|p| p.1).collect()
    };
    LossCurve::new(pts.iter().zip(smooth).map(|(p, s)| (p.0, s)).collect())
}

fn cmd_eta(sparse: &Path, dense: &Path, half_life: f64) -> Result<()> {
    let s = curve_from_metrics(sparse, half_life)?;
    let d = curve_from_metrics(dense, half_life)?;
    print_json(&speedup_eta(&s, &d))
}

#[derive(Serialize)]
struct SweepRow {
    sigma: f64,
    loss: f64,
}

fn cmd_noise_sweep(c: &Common, sigmas: &[f64], batches: usize) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(need_checkpoint(c)?)?;
    let run = ckpt.run.clone();
    let model = Model::from_params(run.model_config(), ckpt.params)?;
    let corpus = Corpus::new(run.corpus.clone())?;
    let sweep = noise_sensitivity_sweep(
        &model,
        &corpus,
        sigmas,
        run.batch_size,
        EVAL_INDEX_BASE,
        batches,
        c.seed.unwrap_or(run.seed),
    )?;
    if let Some(o) = &c.out {
        std::fs::create_dir_all(o)?;
        write_csv(
            &o.join("noise_sweep.csv"),
            sweep.rows.iter().map(|&(sigma, loss)| SweepRow { sigma, loss }),
        )?;
    }
    print_json(&sweep)
}

#[derive(Serialize)]
struct LatencyRow {
    devices: usize,
    mix: &'static str,
    mean: f64,
    std: f64,
    p50: f64,
    p90: f64,
    p99: f64,
    max: f64,
}

fn cmd_latency(
    c: &Common,
    devices: &[usize],
    tokens: usize,
    (image_fraction, spread, rows): (f64, f64, usize),
    text_experts: usize,
    image_experts: usize,
) -> Result<()> {
    let steps = c.steps.unwrap_or(10_000);
    let costs = TokenCosts::from_allocation(text_experts, image_experts, 1.0);
    let mixes = [
        (
            "balanced",
            MixSampler::Balanced {
                tokens,
                span: 16,
                image_fraction,
            },
        ),
        (
            "skewed",
            MixSampler::Skewed {
                tokens,
                image_fraction,
                spread,
                rows,
            },
        ),
    ];
    let mut rows = Vec::new();
    for &n in devices {
        for (name, sampler) in &mixes {
            let mut rng = stream_rng(c.seed.unwrap_or(0), 0x1A7, n as u64);
            let s = simulate_step_latency(n, sampler, costs, steps, &mut rng)?;
            rows.push(LatencyRow {
                devices: n,
                mix: name,
                mean: s.mean,
                std: s.std,
                p50: s.p50,
                p90: s.p90,
                p99: s.p99,
                max: s.max,
            });
        }
    }
    for r in &rows {
        println!(
            "devices {:>3} {:<8} mean {:>10.2} p99 {:>10.2}",
            r.devices, r.mix, r.mean, r.p99
        );
    }
    if let Some(o) = &c.out {
        std::fs::create_dir_all(o)?;
        write_csv(&o.join("latency.csv"), rows)?;
    }
    Ok(())
}

fn cmd_gen_corpus(c: &Common, batches: u64) -> Result<()> {
    let run = run_config(c)?;
    let dir = out_dir(c)?;
    let corpus = Corpus::new(run.corpus.clone())?;
    let header = CorpusHeader {
        vocab: run.corpus.vocab,
        text_image_ratio: run.corpus.text_image_ratio,
        image_span_length: run.corpus.image_span_length,
    };
    let seq = run.model_config().seq_len;
    for i in 0..batches {
        let b = corpus
            .generate_batch(run.train_index(i), run.batch_size, seq)
            .map_err(|e| match e {
                Error::Config(m) => Error::Data(m),
                other => other,
            })?;
        let path = dir.join(format!("batch_{i:06}.corpus"));
        std::fs::write(&path, encode_corpus(&header, &b))?;
        println!("{} image fraction {:.4}", path.display(), b.image_fraction());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval { common, batches } => cmd_eval(&common, batches),
        Command::TrainAux { common, lr } => cmd_train_aux(&common, lr),
        Command::Upcycle {
            common,
            text_experts,
            image_experts,
            gumbel,
        } => cmd_upcycle(&common, text_experts, image_experts, gumbel),
        Command::Flops(c) => cmd_flops(&c),
        Command::Eta {
            sparse,
            dense,
            half_life,
        } => cmd_eta(&sparse, &dense, half_life),
        Command::NoiseSweep {
            common,
            sigmas,
            batches,
        } => cmd_noise_sweep(&common, &sigmas, batches),
        Command::LatencySim {
            common,
            devices,
            tokens,
            image_fraction,
            spread,
            rows,
            text_experts,
            image_experts,
        } => cmd_latency(
            &common,
            &devices,
            tokens,
            (image_fraction, spread, rows),
            text_experts,
            image_experts,
        ),
        Command::GenCorpus { common, batches } => cmd_gen_corpus(&common, batches),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
