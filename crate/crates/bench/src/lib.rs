//! Shared fixtures for the criterion benchmarks.

use defkv::attention::ModelConfig;
use defkv::math::Matrix;
use defkv::rng::SplitMix64;
use defkv::scoring::ImportanceMatrix;
use defkv::synth::{gen_synthetic, SyntheticRegime};
use defkv::Trace;

/// Seeded m x n importance matrix with uniform entries.
pub fn random_importance(m: usize, n: usize, seed: u64) -> ImportanceMatrix {
    let mut rng = SplitMix64::new(seed);
    ImportanceMatrix {
        layer: 0,
        head: 0,
        values: Matrix::from_vec(m, n, (0..m * n).map(|_| rng.uniform()).collect()),
    }
}

/// Mid-sized regime-shift trace for plan-construction benchmarks.
pub fn sample_trace(prompt: usize, steps: usize, seed: u64) -> Trace {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_q_heads: 4,
        n_kv_heads: 2,
        d_h: 16,
        seed,
    };
    gen_synthetic(&cfg, prompt, steps, &SyntheticRegime { seed, ..Default::default() }).unwrap()
}
