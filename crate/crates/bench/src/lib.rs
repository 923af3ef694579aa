//! Shared fixtures for the criterion benches in `benches/`.

use atw_core::{Architecture, DenoiserNet, GaussianMixture, NoiseSchedule, SeedTree};

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::ve_identity(3.0, 0.5).expect("valid schedule")
}

/// Default-width network on `dim` inputs.
pub fn net(dim: usize) -> DenoiserNet {
    let arch = Architecture::new(dim, vec![64, 64], 16, atw_core::Activation::Silu).expect("valid architecture");
    DenoiserNet::init(arch, 2)
}

pub fn batch(mixture: &GaussianMixture, n: usize, seed: u64) -> Vec<Vec<f64>> {
    mixture.sample(n, &mut SeedTree::new(seed).stream(&[0]))
}
