//! Fixtures shared by the benchmarks.

use pram_core::eval::{Entry, Protocol};
use pram_core::{GenConfig, Perturbation, Tensor};

/// Deterministic pseudo-random values in `[-1, 1)` without an rng dependency.
pub fn filled(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    })
}

/// A protocol with `ids` gallery entries and `probes_per_id` probes each.
pub fn protocol(ids: usize, probes_per_id: usize, dim: usize) -> Protocol {
    let entry = |id: usize, k: usize| Entry {
        sample_id: format!("{id}_{k}"),
        identity: id,
        embedding: filled(&[dim], (id * 1000 + k) as u64).data().to_vec(),
    };
    let gallery = (0..ids).map(|id| entry(id, 0)).collect();
    let probes = (0..ids)
        .flat_map(|id| (1..=probes_per_id).map(move |k| entry(id, k)))
        .collect();
    Protocol::new(gallery, probes).expect("valid protocol")
}

/// A small mild-level dataset for training-step benchmarks.
pub fn gen_config() -> GenConfig {
    GenConfig {
        num_ids: 8,
        test_ids: 0,
        per_id: 2,
        seed: 3,
        level: Perturbation::Mild,
    }
}
