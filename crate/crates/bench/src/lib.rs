//! Inputs shared by the benchmarks.

use aneuseg_core::synth::{generate_case, SynthCase, SynthConfig};

/// One synthetic sphere case of edge `n` voxels.
pub fn sphere_case(n: usize, seed: u64) -> SynthCase {
    let cfg = SynthConfig {
        cases: 1,
        dims: [n; 3],
        radius: [n as f64 / 8.0, n as f64 / 5.0],
        ..Default::default()
    };
    generate_case(&cfg, seed, 0).expect("valid synthetic config")
}
