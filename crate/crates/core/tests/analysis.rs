mod common;

use common::*;
use moma_core::analysis::*;
use moma_core::data::{Corpus, VocabSpec};
use moma_core::{Arch, BaseDims, Category, Error, ForwardOptions, ModelConfig};

fn large_dims(layers: usize) -> BaseDims {
    BaseDims {
        layers,
        hidden: 512,
        ffn: 2048,
        heads: 8,
        seq_len: 4096,
        vocab: VocabSpec::default(),
    }
}

#[test]
fn capacity_matched_moe_has_dense_ffn_cost() {
    for arch in [Arch::Moe1t1i, Arch::Moe4t4i, Arch::Moe8x, Arch::ModMoe4t4i] {
        let cfg = micro(arch);
        assert!(ffn_parity(&cfg), "{arch:?}");
        let report = count_flops(&cfg);
        assert_eq!(report.text.ffn, dense_ffn_flops(&cfg), "{arch:?}");
        assert_eq!(report.image.ffn, dense_ffn_flops(&cfg), "{arch:?}");
    }
    let dense = count_flops(&micro(Arch::Dense)).per_token(0.5);
    let moe = count_flops(&micro(Arch::Moe4t4i)).per_token(0.5);
    assert!((dense.ffn - moe.ffn).abs() < 1e-9 * dense.ffn);
    assert_eq!(dense.attention, moe.attention);
    let mut off = micro(Arch::Moe4t4i);
    off.text_capacity = Some(0.5);
    assert!(!ffn_parity(&off));
}

#[test]
fn breakdown_total_is_sum_of_parts() {
    let b = count_flops(&micro(Arch::ModMoe4t4i)).per_token(0.4);
    assert_eq!(b.total(), b.attention + b.ffn + b.router + b.head);
}

#[test]
fn depth_adjusted_row_near_dense_row() {
    let dense = ModelConfig::named(Arch::Dense, large_dims(8));
    let mut mod_cfg = ModelConfig::named(Arch::Dense, large_dims(8));
    mod_cfg.arch = None;
    mod_cfg.layers = 14;
    mod_cfg.mod_interval = Some(2);
    assert_eq!(mod_cfg.mod_interval, Some(2));
    assert_eq!(mod_cfg.mod_capacity, 0.25);
    let (a, b) = (count_flops(&dense).total(0.5), count_flops(&mod_cfg).total(0.5));
    assert!((b / a - 1.0).abs() <= 0.10, "ratio {}", b / a);
}

#[test]
fn depth_matched_layers_rounding() {
    assert_eq!(moma_core::config::depth_matched_layers(8, 2, 0.25), 13);
    assert_eq!(moma_core::config::depth_matched_layers(2, 2, 0.25), 3);
    assert_eq!(moma_core::config::depth_matched_layers(4, 1, 1.0), 4);
}

#[test]
fn instrumented_counter_matches_analytic() {
    let corpus = Corpus::new(micro_corpus(5)).unwrap();
    for arch in Arch::ALL {
        let m = model(micro(arch), 3);
        let batch = corpus.generate_batch(0, 32, 16).unwrap();
        let pass = m.forward(&batch, &ForwardOptions::train()).unwrap();
        let c = pass.tape.counter();
        let measured = (c.flops(Category::Attention)
            + c.flops(Category::Ffn)
            + c.flops(Category::Router)
            + c.flops(Category::Head)) as f64;
        let analytic = count_flops(&m.config).total(batch.image_fraction()) * batch.len() as f64;
        let rel = (measured / analytic - 1.0).abs();
        assert!(rel < 0.01, "{arch:?}: measured {measured} analytic {analytic}");
    }
}

#[test]
fn count_flops_grows_with_size() {
    let mut prev = 0.0;
    for layers in 1..6 {
        let mut b = BaseDims::micro();
        b.layers = layers;
        let t = count_flops(&ModelConfig::named(Arch::Dense, b)).total(0.5);
        assert!(t > prev);
        prev = t;
    }
    let mut wide = BaseDims::micro();
    wide.hidden = 32;
    wide.ffn = 64;
    assert!(count_flops(&ModelConfig::named(Arch::Dense, wide)).total(0.5) > prev / 5.0 * 2.0);
}

fn power_curve(a: f64, b: f64, lo: f64, hi: f64, n: usize) -> LossCurve {
    let pts = (0..n)
        .map(|i| {
            let x = lo * (hi / lo).powf(i as f64 / (n - 1) as f64);
            (x, a * x.powf(-b))
        })
        .collect();
    LossCurve::new(pts).unwrap()
}

#[test]
fn identical_curves_give_unit_eta() {
    let c = power_curve(10.0, 0.1, 1e6, 1e9, 200);
    assert_eq!(speedup_eta(&c, &c).eta(), Some(1.0));
}

#[test]
fn reaching_dense_loss_at_27_percent() {
    let dense = LossCurve::new(vec![(1e8, 4.0), (5e8, 3.0), (1e9, 2.5)]).unwrap();
    let sparse = LossCurve::new(vec![(1e8, 3.0), (2.7e8, 2.5), (1e9, 2.0)]).unwrap();
    let eta = speedup_eta(&sparse, &dense).eta().unwrap();
    assert!((eta - 1.0 / 0.27).abs() < 1e-9);
    assert!((eta - 3.7).abs() < 0.01);
}

#[test]
fn power_law_eta_matches_closed_form() {
    let (b, d_max) = (0.15, 1e10);
    let dense = power_curve(20.0, b, 1e6, d_max, 400);
    let sparse = power_curve(15.0, b, 1e6, d_max, 400);
    // 15 x^-b = 20 d_max^-b  =>  x = d_max (15/20)^(1/b)
    let want = d_max / (d_max * (15.0f64 / 20.0).powf(1.0 / b));
    let got = speedup_eta(&sparse, &dense).eta().unwrap();
    assert!((got / want - 1.0).abs() < 0.01, "{got} vs {want}");
}

#[test]
fn eta_invariant_under_common_scaling() {
    let dense = power_curve(20.0, 0.2, 1e6, 1e9, 100);
    let sparse = power_curve(16.0, 0.2, 1e6, 1e9, 100);
    let e1 = speedup_eta(&sparse, &dense).eta().unwrap();
    let e2 = speedup_eta(&sparse.scaled(7.0), &dense.scaled(7.0)).eta().unwrap();
    assert!((e1 - e2).abs() < 1e-9 * e1);
}

#[test]
fn never_reaching_is_not_a_number() {
    let dense = LossCurve::new(vec![(1.0, 3.0), (2.0, 2.0)]).unwrap();
    let sparse = LossCurve::new(vec![(1.0, 3.5), (2.0, 2.5)]).unwrap();
    assert_eq!(speedup_eta(&sparse, &dense), Speedup::NotReached);
    assert!(LossCurve::new(vec![]).is_err());
    assert!(LossCurve::new(vec![(2.0, 1.0), (1.0, 1.0)]).is_err());
}

#[test]
fn interpolation_between_samples() {
    let c = LossCurve::new(vec![(0.0, 4.0), (10.0, 2.0)]).unwrap();
    assert_eq!(c.flops_to_reach(3.0), Some(5.0));
    assert_eq!(c.flops_to_reach(5.0), Some(0.0));
    assert_eq!(c.flops_to_reach(1.0), None);
}

#[test]
fn smoothed_curve_uses_ema() {
    let steps: Vec<(u64, f64)> = (1..=50).map(|s| (s, if s % 2 == 0 { 3.0 } else { 2.0 })).collect();
    let c = LossCurve::from_steps(&steps, 10.0, 5.0).unwrap();
    let raw: Vec<f64> = steps.iter().map(|s| s.1).collect();
    let smooth = ema(&raw, 5.0);
    for (p, (s, want)) in c.points().iter().zip(steps.iter().map(|s| s.0).zip(smooth)) {
        assert_eq!(p.0, s as f64 * 10.0);
        assert_eq!(p.1, want);
    }
    assert!((c.final_loss() - 2.5).abs() < 0.1);
}

#[test]
fn zero_noise_sweep_equals_plain_eval() {
    let mut m = model(micro(Arch::ModMoe4t4i), 2);
    spread_routers(&mut m, 4);
    let corpus = Corpus::new(micro_corpus(1)).unwrap();
    let sweep = noise_sensitivity_sweep(&m, &corpus, &[0.0, 0.5, 1.0], 4, 100, 3, 9).unwrap();
    let parts: Vec<_> = (0..3)
        .map(|b| m.evaluate(&corpus.generate_batch(100 + b, 4, 16).unwrap(), &ForwardOptions::train()).unwrap())
        .collect();
    let plain = moma_core::LossBreakdown::combine(&parts).total;
    assert_eq!(sweep.rows[0], (0.0, plain));
    assert_ne!(sweep.rows[2].1, plain);
    assert!(matches!(
        noise_sensitivity_sweep(&m, &corpus, &[1.5], 4, 100, 1, 9),
        Err(Error::Config(_))
    ));
}

#[test]
fn single_device_latency_is_its_cost() {
    let costs = TokenCosts { text: 1.5, image: 2.0 };
    let s = MixSampler::Constant { text: 100, image: 28 };
    let stats = simulate_step_latency(1, &s, costs, 10, &mut rng(0)).unwrap();
    assert!(stats.samples.iter().all(|&x| x == 100.0 * 1.5 + 28.0 * 2.0));
    assert_eq!(stats.std, 0.0);
}

#[test]
fn constant_mix_has_zero_variance() {
    let costs = TokenCosts::from_allocation(4, 4, 1.0);
    let s = MixSampler::Constant { text: 64, image: 64 };
    let stats = simulate_step_latency(8, &s, costs, 100, &mut rng(1)).unwrap();
    assert_eq!(stats.std, 0.0);
    assert_eq!(stats.p50, stats.max);
}

fn latency_gap(devices: usize, rows: usize) -> f64 {
    let costs = TokenCosts::from_allocation(6, 2, 1.0);
    let balanced = MixSampler::Balanced {
        tokens: 6144,
        span: 16,
        image_fraction: 0.25,
    };
    let skewed = MixSampler::Skewed {
        tokens: 6144,
        image_fraction: 0.25,
        spread: 0.2,
        rows,
    };
    let a = simulate_step_latency(devices, &balanced, costs, 10_000, &mut rng(2)).unwrap();
    let b = simulate_step_latency(devices, &skewed, costs, 10_000, &mut rng(3)).unwrap();
    b.mean - a.mean
}

#[test]
fn balanced_mix_beats_skewed_mix() {
    assert!(latency_gap(8, 6) > 0.0);
    assert!(latency_gap(8, 1) > 0.0);
}

#[test]
fn equal_token_costs_make_mix_irrelevant() {
    let costs = TokenCosts::from_allocation(4, 4, 1.0);
    let skewed = MixSampler::Skewed {
        tokens: 1024,
        image_fraction: 0.5,
        spread: 0.3,
        rows: 4,
    };
    let stats = simulate_step_latency(8, &skewed, costs, 100, &mut rng(4)).unwrap();
    assert!(stats.samples.iter().all(|&x| (x - 1024.0).abs() < 1e-9));
}

#[test]
fn skewed_rows_keep_mean_fraction() {
    let s = MixSampler::Skewed {
        tokens: 1000,
        image_fraction: 0.3,
        spread: 0.2,
        rows: 3,
    };
    let mut r = rng(5);
    let mut image = 0;
    for _ in 0..20_000 {
        let (t, i) = s.sample(&mut r).unwrap();
        assert_eq!(t + i, 1000);
        image += i;
    }
    assert!((image as f64 / 2e7 - 0.3).abs() < 0.002);
    let bad = MixSampler::Skewed {
        tokens: 10,
        image_fraction: 0.3,
        spread: 0.2,
        rows: 0,
    };
    assert!(bad.sample(&mut r).is_err());
}

#[test]
fn skewed_allocation_penalises_scarce_modality() {
    let even = TokenCosts::from_allocation(4, 4, 1.0);
    assert_eq!(even.text, 1.0);
    let lopsided = TokenCosts::from_allocation(6, 2, 1.0);
    assert!(lopsided.image > lopsided.text);
    assert!(simulate_step_latency(0, &MixSampler::Constant { text: 1, image: 1 }, even, 1, &mut rng(0)).is_err());
}
