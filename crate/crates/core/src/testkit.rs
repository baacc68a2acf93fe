//! Shared fixtures for unit tests.

use crate::model::{DataDistribution, InitLaw, ParticleEnsemble, RunConfig};
use crate::rng::{stream, Purpose};

pub fn config(n: usize, alpha: f64, t: f64) -> RunConfig {
    RunConfig {
        n,
        t_horizon: t,
        alpha,
        seed: 17,
        d: 1,
        activation: Default::default(),
        dataset: String::new(),
        replicas: 1,
        init: InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) },
    }
}

pub fn three_point() -> DataDistribution<f64> {
    DataDistribution::new(
        1,
        vec![(vec![-1.0], 0.6), (vec![0.3], -0.4), (vec![1.2], 0.8)],
        vec![0.3, 0.3, 0.4],
        None,
    )
    .unwrap()
}

pub fn ensemble(m: usize, seed: u64) -> ParticleEnsemble<f64> {
    let mut rng = stream(seed, Purpose::Reference, m as u64, 0);
    let law = InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) };
    ParticleEnsemble::sample(&law, m, 1, &mut rng).unwrap()
}
