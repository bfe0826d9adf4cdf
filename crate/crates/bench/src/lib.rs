//! Fixture builders shared by the benchmark targets: a small vocabulary,
//! matching policy snapshots, and rollout groups with honestly computed
//! behavior and reference log-probabilities, so every benchmarked operation
//! runs on the same shapes the trainer produces.

use permrl_core::env::{encode_instance, generate_dataset, GeneratorConfig, Vocab, VocabConfig};
use permrl_core::policy::{init_params, sample, ArchConfig, PolicyParams};
use permrl_core::rng::derive_rng;
use permrl_core::types::{Permutation, Response, RolloutGroup, TaskInstance};
use rand::Rng;

pub fn fixture_vocab() -> Vocab {
    Vocab::new(VocabConfig::default()).expect("default vocabulary is valid")
}

pub fn fixture_dataset(size: usize) -> Vec<TaskInstance> {
    generate_dataset(&GeneratorConfig {
        seed: 17,
        dataset_size: size,
        ..GeneratorConfig::default()
    })
    .expect("default generator settings produce a dataset")
}

fn arch(vocab: &Vocab) -> ArchConfig {
    ArchConfig {
        vocab_size: vocab.size(),
        embed_dim: 16,
        hidden_dim: 32,
        max_response_len: 6,
        position_decay: 0.9,
        init_scale: 0.05,
        eos_token: vocab.eos_id(),
    }
}

/// (current, old, reference) snapshots with independent initializations.
pub fn fixture_policies(vocab: &Vocab, seed: u64) -> (PolicyParams, PolicyParams, PolicyParams) {
    let arch = arch(vocab);
    let current = init_params(arch, seed ^ 0xA1).expect("valid architecture");
    let old = init_params(arch, seed ^ 0xB2).expect("valid architecture");
    let reference = init_params(arch, seed ^ 0xC3).expect("valid architecture");
    (current, old, reference)
}

/// Rollout groups whose responses were sampled from `old` and scored under
/// `reference`, with uniform random rewards.
pub fn fixture_groups(
    vocab: &Vocab,
    old: &PolicyParams,
    reference: &PolicyParams,
    n_groups: usize,
    rollouts: usize,
    seed: u64,
) -> Vec<RolloutGroup> {
    let data = fixture_dataset(4);
    (0..n_groups)
        .map(|g| {
            let x = data[g % data.len()].clone();
            let input = encode_instance(&x, vocab).expect("generated instances encode");
            let mut responses = Vec::with_capacity(rollouts);
            let mut rewards = Vec::with_capacity(rollouts);
            for k in 0..rollouts {
                let mut rng = derive_rng(seed, &[0xBE, g as u64, k as u64]);
                let s = sample(old, reference, &input, &mut rng, vocab)
                    .expect("sampling from a valid policy");
                responses.push(
                    Response::new(s.tokens, s.text, s.logprob_behavior, s.logprob_reference)
                        .expect("sampled responses are well-formed"),
                );
                rewards.push(rng.random_range(0.0..2.0));
            }
            let n_images = x.images.len();
            RolloutGroup::new(x, input, Permutation::identity(n_images), responses, rewards)
                .expect("fixture groups are well-formed")
        })
        .collect()
}
