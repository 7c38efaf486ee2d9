use std::sync::OnceLock;

use lorafuse_core::bench::{
    evaluate, Bench, BenchConfig, PolicySpec, ReportHeader, DEFAULT_BASE_STEPS,
};
use lorafuse_core::diffusion::{sample, SamplerConfig};
use lorafuse_core::fusion::{Criterion, FusedDenoiser, FusionPolicy};
use lorafuse_core::guidance::{generate_references, GuidanceContext};

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| Bench::train(&BenchConfig::default()).unwrap())
}

fn header() -> ReportHeader {
    ReportHeader {
        config_hash: "test".into(),
        criterion: Criterion::Kl,
    }
}

#[test]
fn seeded_training_reduces_loss() {
    let b = bench();
    assert_eq!(b.base_losses.len(), DEFAULT_BASE_STEPS);
    let head: f64 = b.base_losses[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = b.base_losses[b.base_losses.len() - 50..]
        .iter()
        .sum::<f64>()
        / 50.0;
    assert!(b.base_losses.last().unwrap() < &b.base_losses[0]);
    assert!(tail < head, "{tail} vs {head}");
}

#[test]
fn content_adapter_beats_base_on_content_similarity() {
    let b = bench();
    let specs = vec![
        PolicySpec::new(FusionPolicy::BaseOnly, None),
        PolicySpec::new(FusionPolicy::ContentOnly, None),
    ];
    let seeds: Vec<u64> = (100..110).collect();
    let report = evaluate(
        &b.model,
        &b.content,
        &b.style,
        &b.schedule,
        &specs,
        &seeds,
        50,
    )
    .unwrap();
    let base = report.summary("base").unwrap();
    let content = report.summary("content").unwrap();
    assert_eq!(content.runs, 10);
    assert!(
        content.content_sim_c.mean >= base.content_sim_c.mean,
        "{} vs {}",
        content.content_sim_c.mean,
        base.content_sim_c.mean
    );
}

#[test]
fn single_seed_report_is_reproducible() {
    let b = bench();
    let specs = PolicySpec::comparison(Criterion::Kl, 10.0);
    let run = || {
        evaluate(
            &b.model,
            &b.content,
            &b.style,
            &b.schedule,
            &specs,
            &[3],
            50,
        )
        .unwrap()
        .to_csv(&header())
    };
    let first = run();
    assert_eq!(first, run());
    assert_eq!(first.lines().count(), 2 + specs.len());
}

#[test]
fn combined_score_is_one_minus_residual() {
    let b = bench();
    let specs = vec![
        PolicySpec::new(
            FusionPolicy::DirectMerge {
                content: 1.0,
                style: 1.0,
            },
            None,
        ),
        PolicySpec::new(FusionPolicy::FeatureSelect(Criterion::Kl), Some(10.0)),
    ];
    let seed = 8;
    let report = evaluate(
        &b.model,
        &b.content,
        &b.style,
        &b.schedule,
        &specs,
        &[seed],
        50,
    )
    .unwrap();

    let cfg = SamplerConfig::new(50, seed);
    let refs = generate_references(&b.model, &b.content, &b.style, &b.schedule, &cfg).unwrap();
    for (spec, run) in specs.iter().zip(&report.runs) {
        for s in [run.scores.s1, run.scores.s2, run.scores.s3] {
            assert!((-1.0..=1.0).contains(&s));
        }
        let ctx = GuidanceContext::new(
            refs.content.clone(),
            refs.style.clone(),
            spec.guidance.unwrap_or(0.0),
        )
        .unwrap();
        let fused =
            FusedDenoiser::new(&b.model, Some(&b.content), Some(&b.style), spec.policy).unwrap();
        let image = sample(&fused, &b.schedule, spec.guidance.map(|_| &ctx), &cfg)
            .unwrap()
            .image;
        let r = ctx.residual(&image).unwrap();
        assert!(
            (run.scores.combined() - (1.0 - r)).abs() <= 1e-12,
            "{}",
            spec.label
        );
    }
}

#[test]
fn selection_trace_covers_every_step_and_layer() {
    let b = bench();
    let fused = FusedDenoiser::new(
        &b.model,
        Some(&b.content),
        Some(&b.style),
        FusionPolicy::FeatureSelect(Criterion::Js),
    )
    .unwrap();
    let out = sample(&fused, &b.schedule, None, &SamplerConfig::new(50, 1)).unwrap();
    assert_eq!(out.trace.num_steps(), 50);
    let layers = b.model.adapted_layer_indices();
    for row in &out.trace.rows {
        assert_eq!(row.iter().map(|s| s.layer).collect::<Vec<_>>(), layers);
    }
    for f in out.trace.frequencies() {
        assert!((f.content + f.style - 1.0).abs() <= 1e-12);
        assert_eq!(f.count, 50);
    }
}

#[test]
fn content_reference_resembles_content_class() {
    use lorafuse_core::bench::{render, ContentClass, StyleClass, SyntheticSpec};
    use lorafuse_core::numerics::cosine_similarity;

    let b = bench();
    let held_out = SyntheticSpec {
        seed: 999,
        ..SyntheticSpec::default()
    };
    let mut wins = 0;
    for seed in 0..10 {
        let refs = generate_references(
            &b.model,
            &b.content,
            &b.style,
            &b.schedule,
            &SamplerConfig::new(50, seed),
        )
        .unwrap();
        let own = render(
            &held_out,
            ContentClass::Cross,
            StyleClass::Plain,
            seed as usize,
        )
        .unwrap();
        let other = render(
            &held_out,
            ContentClass::Disk,
            StyleClass::Plain,
            seed as usize,
        )
        .unwrap();
        let a = cosine_similarity(&refs.content, &own).unwrap();
        let o = cosine_similarity(&refs.content, &other).unwrap();
        wins += usize::from(a > o);
    }
    assert!(wins >= 8, "{wins} of 10");
}
