mod common;

use common::*;
use moma_core::analysis::{speedup_eta, LossCurve};
use moma_core::checkpoint::Checkpoint;
use moma_core::config::GroupTag;
use moma_core::params::{init_aux_params, names, EXPERT_MATRICES};
use moma_core::train::Trainer;
use moma_core::upcycle::{added_parameters, flops_adjusted_curve, upcycle_checkpoint, CopyAction, UpcyclePlan};
use moma_core::{Arch, Error, ForwardOptions, Model, Tensor};

fn seed_checkpoint(steps: usize) -> Checkpoint<f64> {
    let mut t = Trainer::<f64>::new(micro_run(Arch::Moe1t1i, 4, 100)).unwrap();
    t.train(steps, &mut |_| Ok(())).unwrap();
    t.checkpoint()
}

fn plan(m: usize, n: usize) -> UpcyclePlan {
    UpcyclePlan {
        text_experts: m,
        image_experts: n,
        gumbel_noise: false,
        router_seed: 1,
        schedule: None,
    }
}

#[test]
fn identity_upcycle_copies_everything() {
    let seed = seed_checkpoint(5);
    let (out, report) = upcycle_checkpoint(&seed, &plan(1, 1)).unwrap();
    assert_eq!(out.params, seed.params);
    assert!(report.entries.iter().all(|e| e.action == CopyAction::Copied));
}

#[test]
fn four_by_four_experts_are_checksum_copies() {
    let seed = seed_checkpoint(5);
    let (out, report) = upcycle_checkpoint(&seed, &plan(4, 4)).unwrap();
    let cfg = out.run.model_config();
    assert_eq!(cfg.arch, Some(Arch::Moe4t4i));
    for j in 0..cfg.layers {
        for tag in [GroupTag::Text, GroupTag::Image] {
            for mat in EXPERT_MATRICES {
                let want = seed.params.get(&names::expert(j, tag, 0, mat)).unwrap().checksum();
                for e in 0..4 {
                    assert_eq!(out.params.get(&names::expert(j, tag, e, mat)).unwrap().checksum(), want);
                }
            }
            let router = out.params.get(&names::router(j, tag)).unwrap();
            assert_eq!(router.shape(), &[16, 4]);
        }
    }
    for (name, t) in seed.params.iter() {
        if !name.contains("moma") {
            assert_eq!(out.params.get(name).unwrap(), t, "{name}");
        }
    }
    let replicated = report.entries.iter().filter(|e| e.action == CopyAction::Replicated).count();
    assert_eq!(replicated, cfg.layers * 2 * 3 * 3);
    assert!(report.render().contains("replicate"));
}

#[test]
fn parameter_count_grows_by_experts_and_router_columns() {
    let seed = seed_checkpoint(1);
    for (m, n) in [(4, 4), (7, 1), (2, 3)] {
        let p = plan(m, n);
        let (out, _) = upcycle_checkpoint(&seed, &p).unwrap();
        let seed_cfg = seed.run.model_config();
        assert_eq!(out.params.count(|_| true), seed.params.count(|_| true) + added_parameters(&seed_cfg, &p));
    }
}

#[test]
fn schedule_resets_and_cursor_continues() {
    let seed = seed_checkpoint(8);
    assert_eq!(seed.state.cursor, 8);
    let (out, report) = upcycle_checkpoint(&seed, &plan(4, 4)).unwrap();
    assert_eq!(out.state.step, 0);
    assert_eq!(out.state.cursor, 8);
    assert!(out.opt_m.is_empty() && out.opt_v.is_empty());
    assert_eq!(report.seed_steps, 8);
    assert_eq!(out.state.prior_flops, seed.state.cumulative_flops);
    let mut resumed = Trainer::<f64>::from_checkpoint(out, None).unwrap();
    let first_seed_batch = Trainer::<f64>::new(micro_run(Arch::Moe1t1i, 4, 100)).unwrap().peek_batch().unwrap();
    assert_ne!(resumed.peek_batch().unwrap(), first_seed_batch);
    let rec = resumed.step().unwrap();
    assert_eq!(rec.step, 1);
    assert_eq!(rec.lr, resumed.run.schedule.lr(1));
    assert!(rec.lr < resumed.run.schedule.peak_lr);
}

#[test]
fn aux_routers_are_dropped() {
    let mut seed = seed_checkpoint(1);
    let cfg = seed.run.model_config();
    init_aux_params(&cfg, &mut seed.params, &mut rng(3)).unwrap();
    let (out, report) = upcycle_checkpoint(&seed, &plan(2, 2)).unwrap();
    assert!(!out.params.has_aux());
    assert!(report.entries.iter().any(|e| e.action == CopyAction::Dropped));
}

#[test]
fn mismatched_seed_shapes_listed() {
    let mut seed = seed_checkpoint(1);
    let bad = names::expert(1, GroupTag::Image, 0, "w_out");
    seed.params.insert(bad.clone(), Tensor::zeros(&[7, 16]));
    let err = upcycle_checkpoint(&seed, &plan(4, 4)).unwrap_err();
    match err {
        Error::Checkpoint(msg) => assert!(msg.contains("layer.1.moma.image.expert_1.w_out"), "{msg}"),
        other => panic!("{other}"),
    }
}

#[test]
fn seed_must_have_one_expert_per_modality() {
    let mut t = Trainer::<f64>::new(micro_run(Arch::Moe4t4i, 1, 10)).unwrap();
    t.step().unwrap();
    assert!(matches!(upcycle_checkpoint(&t.checkpoint(), &plan(4, 4)), Err(Error::Config(_))));
}

#[test]
fn identical_router_columns_keep_experts_symmetric_until_noise() {
    let seed = seed_checkpoint(5);
    let (mut out, _) = upcycle_checkpoint(&seed, &plan(2, 2)).unwrap();
    let cfg = out.run.model_config();
    for j in 0..cfg.layers {
        for tag in [GroupTag::Text, GroupTag::Image] {
            let col = Tensor::<f64>::randn(&[16, 1], 1.0, &mut rng(j as u64 * 2 + tag as u64));
            let both: Vec<f64> = col.data().iter().flat_map(|&v| [v, v]).collect();
            out.params.insert(names::router(j, tag), Tensor::new(vec![16, 2], both).unwrap());
        }
    }
    let probe = moma_core::data::Corpus::new(micro_corpus(0)).unwrap().generate_batch(77, 4, 16).unwrap();
    let selections_match = |m: &Model<f64>| {
        let pass = m.forward(&probe, &ForwardOptions::train()).unwrap();
        pass.trace
            .groups
            .iter()
            .all(|g| g.assignment.selections[0] == g.assignment.selections[1])
    };
    let columns_match = |m: &Model<f64>| {
        (0..cfg.layers).all(|j| {
            [GroupTag::Text, GroupTag::Image].iter().all(|&tag| {
                let r = m.params.get(&names::router(j, tag)).unwrap();
                r.data().chunks(2).all(|c| c[0] == c[1])
            })
        })
    };
    let model = Model::from_params(cfg.clone(), out.params.clone()).unwrap();
    assert!(selections_match(&model));
    let h = Tensor::<f64>::randn(&[10, 16], 1.0, &mut rng(9));
    let w = |e: usize, mat| model.params.get(&names::expert(0, GroupTag::Text, e, mat)).unwrap();
    assert_eq!(
        moma_core::moma::swiglu_ffn(&h, w(0, "w_in"), w(0, "w_gate"), w(0, "w_out")).unwrap(),
        moma_core::moma::swiglu_ffn(&h, w(1, "w_in"), w(1, "w_gate"), w(1, "w_out")).unwrap()
    );

    let mut quiet = Trainer::<f64>::from_checkpoint(out.clone(), None).unwrap();
    quiet.train(10, &mut |_| Ok(())).unwrap();
    assert!(selections_match(&quiet.model));
    assert!(columns_match(&quiet.model));

    out.run.gumbel_noise = true;
    let mut noisy = Trainer::<f64>::from_checkpoint(out, None).unwrap();
    noisy.train(10, &mut |_| Ok(())).unwrap();
    assert!(!columns_match(&noisy.model));
}

#[test]
fn zero_stage_one_leaves_curve_unchanged() {
    let c = LossCurve::new(vec![(1.0, 3.0), (2.0, 2.5), (3.0, 2.2)]).unwrap();
    assert_eq!(flops_adjusted_curve(None, &c, 0.0).unwrap(), c);
}

#[test]
fn stage_two_shifted_by_stage_one_cost() {
    let per_step = 1.5e6;
    let stage1 = LossCurve::from_steps(&(1..=20).map(|s| (s, 4.0 - 0.05 * s as f64)).collect::<Vec<_>>(), per_step, 0.0).unwrap();
    let stage2 = LossCurve::from_steps(&(1..=30).map(|s| (s, 3.0 - 0.02 * s as f64)).collect::<Vec<_>>(), per_step, 0.0).unwrap();
    let cost = 10.0 * per_step;
    let merged = flops_adjusted_curve(Some(&stage1), &stage2, cost).unwrap();
    let tail = &merged.points()[merged.points().len() - 30..];
    for (p, q) in tail.iter().zip(stage2.points()) {
        assert_eq!(p.0, q.0 + cost);
        assert_eq!(p.1, q.1);
    }
    assert_eq!(merged.points().len(), 10 + 30);
    assert!(merged.points().windows(2).all(|w| w[1].0 > w[0].0));
    // crossing found on the merged curve
    let scratch = LossCurve::new(vec![(per_step, 3.5), (60.0 * per_step, 2.6)]).unwrap();
    assert!(speedup_eta(&merged, &scratch).eta().unwrap() > 1.0);
}
