use moma_core::balance::{BatchComposer, MixAudit, MixPolicy};
use moma_core::data::{Corpus, CorpusConfig, VocabSpec};
use moma_core::Error;

fn policy(target: f64) -> MixPolicy {
    MixPolicy {
        target_image_fraction: target,
        tolerance: 0.05,
        window: 100,
    }
}

fn corpus(ratio: f64, span: usize) -> Corpus {
    Corpus::new(CorpusConfig {
        seed: 11,
        text_image_ratio: ratio,
        image_span_length: span,
        vocab: VocabSpec::default(),
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn composed_batches_stay_in_band() {
    let c = corpus(0.3, 16);
    let mut comp = BatchComposer::new(policy(0.5), 1, 0).unwrap();
    for _ in 0..50 {
        let b = comp.compose_batch(&c, 4, 256).unwrap();
        let f = b.image_fraction();
        assert!((0.45..=0.55).contains(&f), "{f}");
        assert_eq!(b.batch, 4);
        assert_eq!(b.seq_len, 256);
    }
    assert_eq!(comp.state.composed, 50);
}

#[test]
fn whole_spans_survive_composition() {
    let c = corpus(0.6, 16);
    let mut comp = BatchComposer::new(policy(0.5), 2, 0).unwrap();
    let base = c.vocab().image_base() as u32;
    for _ in 0..20 {
        let b = comp.compose_batch(&c, 2, 256).unwrap();
        for r in 0..2 {
            let row = &b.tokens[r * 256..(r + 1) * 256];
            let mut i = 0;
            while i < row.len() {
                if row[i] >= base {
                    let run = row[i..].iter().take_while(|&&t| t >= base).count();
                    assert_eq!(run % 16, 0, "partial span in row");
                    i += run;
                } else {
                    i += 1;
                }
            }
        }
    }
}

#[test]
fn natural_ratio_passes_through() {
    let c = corpus(0.5, 16);
    let mut hits = 0;
    for first in 0..40u64 {
        let natural = c.generate_batch(first, 4, 256).unwrap();
        let mut comp = BatchComposer::new(policy(0.5), 3, first).unwrap();
        let n_star = comp.policy.span_target(4, 256, 16);
        let b = comp.compose_batch(&c, 4, 256).unwrap();
        if natural.image_count() == n_star * 16 {
            assert_eq!(b, natural);
            hits += 1;
        }
    }
    assert!(hits > 0);
}

#[test]
fn thousand_batch_audit() {
    let c = corpus(0.35, 16);
    let mut comp = BatchComposer::new(policy(0.5), 4, 0).unwrap();
    for _ in 0..1000 {
        comp.compose_batch(&c, 2, 256).unwrap();
    }
    let report = comp.audit().report(100).unwrap();
    assert!(report.overall_mean < 0.025, "{}", report.overall_mean);
    assert_eq!(report.flagged, 0);
    assert_eq!(report.windows.len(), 10);
}

#[test]
fn tokens_are_never_dropped() {
    let c = corpus(0.2, 4);
    let mut comp = BatchComposer::new(policy(0.5), 5, 0).unwrap();
    for _ in 0..200 {
        comp.compose_batch(&c, 3, 32).unwrap();
        let s = &comp.state;
        assert_eq!(s.generated_tokens, s.emitted_tokens + s.buffered_tokens());
    }
}

#[test]
fn exhausted_modality_is_a_data_error() {
    let c = corpus(0.0, 16);
    let mut comp = BatchComposer::new(policy(0.5), 6, 0).unwrap();
    match comp.compose_batch(&c, 2, 64) {
        Err(Error::Data(msg)) => assert!(msg.contains("image"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn policy_bounds_checked() {
    for t in [0.0, 1.0, -0.2] {
        assert!(matches!(BatchComposer::new(policy(t), 0, 0), Err(Error::Config(_))));
    }
    let mut p = policy(0.5);
    p.window = 0;
    assert!(p.validate().is_err());
}

#[test]
fn empty_audit_is_an_error() {
    let a = MixAudit {
        target: 0.5,
        tolerance: 0.05,
        fractions: vec![],
    };
    assert!(a.report(10).is_err());
}

#[test]
fn constant_stream_has_zero_deviation() {
    let mut a = MixAudit {
        target: 0.25,
        tolerance: 0.05,
        fractions: vec![],
    };
    for _ in 0..30 {
        a.observe(0.25);
    }
    let r = a.report(7).unwrap();
    assert_eq!(r.overall_max, 0.0);
    assert!(r.windows.iter().all(|w| w.max == 0.0 && !w.exceeded));
    assert_eq!(r.windows.last().unwrap().batches, 2);
}

#[test]
fn alternating_stream_reports_analytic_max() {
    let mut a = MixAudit {
        target: 0.5,
        tolerance: 0.05,
        fractions: vec![],
    };
    for i in 0..100 {
        a.observe(if i % 2 == 0 { 0.3 } else { 0.8 });
    }
    let r = a.report(10).unwrap();
    assert!((r.overall_max - 0.3).abs() < 1e-12);
    assert!((r.overall_mean - 0.25).abs() < 1e-12);
    assert_eq!(r.flagged, 10);
    for w in &r.windows {
        assert!((w.min - 0.2).abs() < 1e-12);
        assert!((w.max - 0.3).abs() < 1e-12);
    }
}

#[test]
fn composer_resumes_from_state() {
    let c = corpus(0.4, 4);
    let mut a = BatchComposer::new(policy(0.5), 7, 0).unwrap();
    for _ in 0..5 {
        a.compose_batch(&c, 2, 32).unwrap();
    }
    let mut b = BatchComposer::from_state(a.policy, 7, a.state.clone()).unwrap();
    for _ in 0..5 {
        assert_eq!(a.compose_batch(&c, 2, 32).unwrap(), b.compose_batch(&c, 2, 32).unwrap());
    }
}
