//! Shared fixtures for the scaling benchmarks.

pub use foss_core::bench::Component;
use foss_core::bench::{BenchConfig, Workload};
use foss_core::rng::SplitMix64;

/// Lengths swept by the criterion benches.
pub const LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];

/// Desk-size workloads for `component` at every length it supports, built
/// from a fixed seed.
pub fn workloads(component: Component, lengths: &[usize]) -> Vec<Workload> {
    let cfg = BenchConfig::default();
    let mut rng = SplitMix64::new(cfg.seed);
    lengths
        .iter()
        .filter_map(|&t| Workload::new(&cfg, component, t, &mut rng).expect("valid bench config"))
        .collect()
}
