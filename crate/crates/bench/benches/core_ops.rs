//! Benchmarks for the hot paths of a training step: advantage construction,
//! loss and gradient evaluation, and response sampling.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use permrl_bench::{fixture_groups, fixture_policies, fixture_vocab};
use permrl_core::grpo::{build_advantages, evaluate_batch, evaluate_batch_with_grad, LossConfig};
use permrl_core::policy::{grad_logprob, sample};
use permrl_core::rng::derive_rng;
use permrl_core::types::LossMode;

fn advantage_benches(c: &mut Criterion) {
    let vocab = fixture_vocab();
    let (_, old, reference) = fixture_policies(&vocab, 1);
    let groups = fixture_groups(&vocab, &old, &reference, 4, 8, 11);
    let mut g = c.benchmark_group("advantages");
    for mode in [LossMode::Merged, LossMode::PerGroup] {
        g.bench_function(format!("{mode:?}/4x8"), |b| {
            b.iter_batched(
                || groups.clone(),
                |groups| build_advantages(black_box(groups), mode, 1e-8).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn loss_benches(c: &mut Criterion) {
    let vocab = fixture_vocab();
    let (current, old, reference) = fixture_policies(&vocab, 2);
    let groups = fixture_groups(&vocab, &old, &reference, 2, 6, 13);
    let batch = build_advantages(groups, LossMode::Merged, 1e-8).unwrap();
    let cfg = LossConfig {
        clip_eps: 0.2,
        beta: 0.01,
        epsilon_std: 1e-8,
    };
    let mut g = c.benchmark_group("loss");
    g.bench_function("objective/2x6", |b| {
        b.iter(|| evaluate_batch(black_box(&current), black_box(&batch), &cfg).unwrap())
    });
    g.bench_function("objective_and_grad/2x6", |b| {
        b.iter(|| evaluate_batch_with_grad(black_box(&current), black_box(&batch), &cfg).unwrap())
    });
    let input = &batch.groups[0].input_tokens;
    let response = &batch.groups[0].responses[0].tokens;
    g.bench_function("grad_logprob/single", |b| {
        b.iter(|| grad_logprob(black_box(&current), black_box(input), black_box(response)).unwrap())
    });
    g.finish();
}

fn sampling_benches(c: &mut Criterion) {
    let vocab = fixture_vocab();
    let (_, old, reference) = fixture_policies(&vocab, 3);
    let groups = fixture_groups(&vocab, &old, &reference, 1, 1, 17);
    let input = groups[0].input_tokens.clone();
    let mut rng = derive_rng(99, &[0xBE, 0xEF]);
    c.bench_function("sample/response", |b| {
        b.iter(|| sample(black_box(&old), black_box(&reference), &input, &mut rng, &vocab).unwrap())
    });
}

criterion_group!(benches, advantage_benches, loss_benches, sampling_benches);
criterion_main!(benches);
