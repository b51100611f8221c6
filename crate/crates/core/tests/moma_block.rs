mod common;

use common::*;
use moma_core::config::{FfnLayout, GroupTag};
use moma_core::data::Modality;
use moma_core::moma::swiglu_ffn;
use moma_core::params::names;
use moma_core::{Arch, Category, Error, ForwardOptions, Mode, Tape, Tensor};
use proptest::prelude::*;

fn hidden(n: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[n, 16], 1.0, &mut rng(seed))
}

#[test]
fn matches_from_scratch_oracle_on_random_batches() {
    let layouts = [
        FfnLayout::ModalityAware { text: 4, image: 4 },
        FfnLayout::ModalityAware { text: 3, image: 1 },
        FfnLayout::Mixed { experts: 4 },
        FfnLayout::Dense,
    ];
    let mut r = rng(100);
    for (li, layout) in layouts.into_iter().enumerate() {
        let mut m = model(micro_layout(layout, None), li as u64);
        spread_routers(&mut m, 50 + li as u64);
        for trial in 0..25 {
            let n = 8 + trial % 17;
            let h = hidden(n, 1000 * li as u64 + trial as u64);
            let mask = random_mask(n, &mut r);
            let got = m.moma_forward(1, &h, &mask, &ForwardOptions::train()).unwrap();
            let (out, y) = moma_oracle(&m, 1, &h, &mask);
            assert!(max_abs(got.out.data(), &out) < 1e-6, "{layout:?} trial {trial}");
            assert!(max_abs(got.mixture.data(), &y) < 1e-6);
        }
    }
}

#[test]
fn gathered_execution_equals_masked_reference_exactly() {
    let mut m = model(micro(Arch::Moe4t4i), 3);
    spread_routers(&mut m, 4);
    let mut r = rng(5);
    for trial in 0..20 {
        let h = hidden(24, trial);
        let mask = random_mask(24, &mut r);
        let opts = ForwardOptions::train();
        let got = m.moma_forward(0, &h, &mask, &opts).unwrap();
        let (out, y) = m.moma_reference(0, &h, &mask, &got.traces, &opts).unwrap();
        assert_eq!(got.mixture, y);
        assert_eq!(got.out, out);
    }
}

#[test]
fn experts_take_exactly_k_tokens_of_their_own_modality() {
    for arch in [Arch::Moe4t4i, Arch::Moe7t1i, Arch::Moe6t2i, Arch::Moe1t1i, Arch::Moe8x] {
        let mut m = model(micro(arch), 7);
        spread_routers(&mut m, 8);
        let mut r = rng(9);
        for trial in 0..10 {
            let n = 10 + trial * 3;
            let h = hidden(n, trial as u64);
            let mask = random_mask(n, &mut r);
            let got = m.moma_forward(0, &h, &mask, &ForwardOptions::train()).unwrap();
            for t in &got.traces {
                let pool = t.pool.len();
                let k = (pool / t.assignment.targets()).max(1);
                assert_eq!(t.assignment.capacity, k);
                t.assignment.validate(pool).unwrap();
                for sel in &t.assignment.selections {
                    for &i in sel {
                        assert!(t.tag.accepts(mask[t.pool[i]]), "{arch:?} isolation");
                    }
                }
            }
        }
    }
}

#[test]
fn one_expert_per_modality_processes_every_token() {
    let mut m = model(micro(Arch::Moe1t1i), 1);
    spread_routers(&mut m, 2);
    let h = hidden(12, 3);
    let mask = random_mask(12, &mut rng(4));
    let got = m.moma_forward(0, &h, &mask, &ForwardOptions::train()).unwrap();
    for t in &got.traces {
        assert_eq!(t.assignment.selections[0], (0..t.pool.len()).collect::<Vec<_>>());
    }
    for i in 0..12 {
        let tag = if mask[i] == Modality::Text { GroupTag::Text } else { GroupTag::Image };
        let e = |mat| m.params.get(&names::expert(0, tag, 0, mat)).unwrap();
        let w = m.params.get(&names::router(0, tag)).unwrap();
        let logit: f64 = h.row(i).iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let want: Vec<f64> = swiglu_row(h.row(i), e("w_in"), e("w_gate"), e("w_out"))
            .iter()
            .map(|v| sigmoid(logit) * v)
            .collect();
        assert!(max_abs(got.mixture.row(i), &want) < 1e-12);
    }
}

#[test]
fn unselected_tokens_get_zero_and_pass_through() {
    let mut cfg = micro_layout(FfnLayout::ModalityAware { text: 2, image: 2 }, None);
    cfg.text_capacity = Some(0.1);
    cfg.image_capacity = Some(0.1);
    let mut m = model(cfg, 2);
    spread_routers(&mut m, 3);
    let h = hidden(30, 4);
    let mask = random_mask(30, &mut rng(5));
    let got = m.moma_forward(0, &h, &mask, &ForwardOptions::train()).unwrap();
    let mut hit = [false; 30];
    for t in &got.traces {
        for sel in &t.assignment.selections {
            for &i in sel {
                hit[t.pool[i]] = true;
            }
        }
    }
    let misses: Vec<usize> = (0..30).filter(|&i| !hit[i]).collect();
    assert!(!misses.is_empty());
    for i in misses {
        assert!(got.mixture.row(i).iter().all(|&v| v == 0.0));
        assert_eq!(got.out.row(i), h.row(i));
    }
}

#[test]
fn duplicated_expert_doubles_single_expert_output() {
    let mut two = model(micro_layout(FfnLayout::ModalityAware { text: 2, image: 2 }, None), 1);
    let mut one_cfg = micro_layout(FfnLayout::ModalityAware { text: 1, image: 1 }, None);
    one_cfg.text_capacity = Some(0.5);
    one_cfg.image_capacity = Some(0.5);
    let mut one = model(one_cfg, 1);
    let mut r = rng(6);
    for tag in [GroupTag::Text, GroupTag::Image] {
        let col = Tensor::<f64>::randn(&[16, 1], 1.0, &mut r);
        one.params.insert(names::router(0, tag), col.clone());
        let both: Vec<f64> = col.data().iter().flat_map(|&v| [v, v]).collect();
        two.params.insert(names::router(0, tag), Tensor::new(vec![16, 2], both).unwrap());
        for mat in ["w_in", "w_gate", "w_out"] {
            let w = one.params.get(&names::expert(0, tag, 0, mat)).unwrap().clone();
            two.params.insert(names::expert(0, tag, 0, mat), w.clone());
            two.params.insert(names::expert(0, tag, 1, mat), w);
        }
    }
    let h = hidden(20, 7);
    let mask = random_mask(20, &mut r);
    let opts = ForwardOptions::train();
    let a = two.moma_forward(0, &h, &mask, &opts).unwrap();
    let b = one.moma_forward(0, &h, &mask, &opts).unwrap();
    for t in &a.traces {
        assert_eq!(t.assignment.selections[0], t.assignment.selections[1]);
    }
    let doubled: Vec<f64> = b.mixture.data().iter().map(|v| 2.0 * v).collect();
    assert!(max_abs(a.mixture.data(), &doubled) < 1e-12);
}

#[test]
fn all_text_batch_runs_no_image_expert() {
    let m = model(micro(Arch::Moe4t4i), 1);
    let h = hidden(16, 2);
    let mask = vec![Modality::Text; 16];
    let got = m.moma_forward(0, &h, &mask, &ForwardOptions::train()).unwrap();
    assert_eq!(got.counter.expert_rows.get("image").copied().unwrap_or(0), 0);
    assert_eq!(got.counter.expert_rows["text"], 16);
    assert!(got.traces.iter().all(|t| t.tag == GroupTag::Text));
}

#[test]
fn ffn_multiplies_match_counting_oracle() {
    for arch in [Arch::Moe4t4i, Arch::Moe7t1i, Arch::Moe8x, Arch::Dense] {
        let m = model(micro(arch), 1);
        let mask = random_mask(37, &mut rng(3));
        let got = m.moma_forward(0, &hidden(37, 4), &mask, &ForwardOptions::train()).unwrap();
        let (d, f) = (16u64, 32u64);
        let mut want = 0;
        for g in m.config.groups() {
            let pool = mask.iter().filter(|&&x| g.tag.accepts(x)).count();
            let k = if g.tag == GroupTag::Dense {
                pool
            } else {
                ((g.capacity * pool as f64 + 1e-9).floor() as usize).max(1)
            };
            want += g.experts as u64 * k as u64 * 3 * d * f;
        }
        assert_eq!(got.counter.macs(Category::Ffn), want, "{arch:?}");
    }
}

#[test]
fn inference_without_aux_routers_is_contract_error() {
    let m = model(micro(Arch::Moe4t4i), 1);
    let opts = ForwardOptions {
        mode: Mode::Infer,
        ..Default::default()
    };
    let err = m.moma_forward(0, &hidden(4, 1), &[Modality::Text; 4], &opts);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn mask_length_mismatch_is_rejected() {
    let m = model(micro(Arch::Moe4t4i), 1);
    assert!(m.moma_forward(0, &hidden(4, 1), &[Modality::Text; 3], &ForwardOptions::train()).is_err());
}

#[test]
fn swiglu_zero_input_gives_zero() {
    let mut r = rng(1);
    let [wi, wg] = [0, 1].map(|_| Tensor::<f64>::randn(&[4, 6], 1.0, &mut r));
    let wo = Tensor::randn(&[6, 4], 1.0, &mut r);
    let y = swiglu_ffn(&Tensor::zeros(&[3, 4]), &wi, &wg, &wo).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn swiglu_with_unit_gate_reduces_to_linear_path() {
    // z with silu(z) = 1, by Newton iteration
    let mut z = 1.0f64;
    for _ in 0..50 {
        let s = sigmoid(z);
        z -= (z * s - 1.0) / (s + z * s * (1.0 - s));
    }
    let mut r = rng(2);
    let mut x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    for row in 0..3 {
        x.data_mut()[row * 4] = 1.0;
    }
    let mut wg = Tensor::<f64>::zeros(&[4, 6]);
    for c in 0..6 {
        wg.data_mut()[c] = z;
    }
    let wi = Tensor::randn(&[4, 6], 1.0, &mut r);
    let wo = Tensor::randn(&[6, 4], 1.0, &mut r);
    let y = swiglu_ffn(&x, &wi, &wg, &wo).unwrap();
    let up = matmul(x.data(), 3, 4, wi.data(), 6);
    let want = matmul(&up, 3, 6, wo.data(), 4);
    assert!(max_abs(y.data(), &want) < 1e-3);
}

#[test]
fn swiglu_gradients_match_finite_differences() {
    let mut r = rng(3);
    let inputs = [
        Tensor::<f64>::randn(&[3, 4], 1.0, &mut r),
        Tensor::randn(&[4, 5], 1.0, &mut r),
        Tensor::randn(&[4, 5], 1.0, &mut r),
        Tensor::randn(&[5, 4], 1.0, &mut r),
    ];
    let weights = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let run = |ins: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let v: Vec<_> = ins.iter().map(|x| t.leaf(x.clone(), true).unwrap()).collect();
        let y = moma_core::moma::swiglu(&mut t, v[0], v[1], v[2], v[3]).unwrap();
        let w = t.constant(weights.clone()).unwrap();
        let p = t.mul(y, w).unwrap();
        let l = t.sum(p).unwrap();
        (t, v, l)
    };
    let (t, v, l) = run(&inputs);
    let grads = t.backward(l).unwrap();
    let h = 1e-6;
    for which in 1..4 {
        let g = grads.wrt(v[which]).unwrap();
        for e in 0..inputs[which].numel() {
            let eval = |delta: f64| {
                let mut ins = inputs.clone();
                ins[which].data_mut()[e] += delta;
                let (t, _, l) = run(&ins);
                t.value(l).item()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.data()[e];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
            assert!(rel < 1e-4, "matrix {which} entry {e}: {a} vs {num}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn permuting_tokens_permutes_outputs(seed in 0u64..1000, n in 4usize..24) {
        let mut m = model(micro(Arch::Moe4t4i), 11);
        spread_routers(&mut m, 12);
        let mut r = rng(seed);
        let h = hidden(n, seed);
        let mask = random_mask(n, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let mut ph = Vec::new();
        for &p in &perm {
            ph.extend_from_slice(h.row(p));
        }
        let ph = Tensor::new(vec![n, 16], ph).unwrap();
        let pmask: Vec<Modality> = perm.iter().map(|&p| mask[p]).collect();
        let opts = ForwardOptions::train();
        let a = m.moma_forward(0, &h, &mask, &opts).unwrap();
        let b = m.moma_forward(0, &ph, &pmask, &opts).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!(max_abs(b.out.row(i), a.out.row(p)) < 1e-12);
        }
    }
}
