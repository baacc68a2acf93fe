use std::sync::Arc;

use mfclt::fluctuation::{reference_pairings, sample_replica};
use mfclt::io::{load_dataset, save_dataset};
use mfclt::model::{network_eval, pair_measure, FnTest, ParticleEnsemble};
use mfclt::rng::{stream, Purpose};
use mfclt::{
    integrate_coupled, integrate_meanfield, integrate_meanfield_with, run_sgd, ActivationKind, Dataset, Dataset32,
    FluctuationSamples, InitLaw, MeanFieldOptions, RunConfig, SobolevDomain, TestFunction,
};

fn dataset() -> Dataset {
    Dataset::new(
        1,
        vec![(vec![-1.0], 0.6), (vec![0.3], -0.4), (vec![1.2], 0.8)],
        vec![0.3, 0.3, 0.4],
        None,
    )
    .unwrap()
}

fn config(n: usize, seed: u64) -> RunConfig {
    RunConfig {
        n,
        t_horizon: 1.0,
        alpha: 1.0,
        seed,
        d: 1,
        activation: ActivationKind::default(),
        dataset: String::new(),
        replicas: 1,
        init: InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) },
    }
}

fn loss<T: mfclt::Scalar>(ens: &ParticleEnsemble<T>, dist: &mfclt::model::DataDistribution<T>) -> f64 {
    let act = ActivationKind::default().build::<T>();
    (0..dist.len())
        .map(|m| {
            let r = dist.y(m).to_f64().unwrap() - network_eval(ens, dist.x(m), &act).unwrap().to_f64().unwrap();
            0.5 * dist.weight(m).to_f64().unwrap() * r * r
        })
        .sum()
}

#[test]
fn meanfield_flow_dissipates_the_loss() {
    let dist = dataset();
    let act = ActivationKind::default().build::<f64>();
    let mut rng = stream(3, Purpose::Reference, 5000, 0);
    let init = ParticleEnsemble::sample(&InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) }, 5000, 1, &mut rng).unwrap();
    let times: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let traj = integrate_meanfield(&init, &dist, 1.0, &act, 1.0, 0.01, &times).unwrap();
    let losses: Vec<f64> = traj.snapshots.iter().map(|(_, e)| loss(e, &dist)).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{losses:?}");
    }
    assert!(losses[10] < losses[0], "{losses:?}");
}

#[test]
fn sgd_tracks_the_meanfield_limit() {
    let dist = dataset();
    let act = ActivationKind::default().build::<f64>();
    let coef = FnTest::<f64>::coefficient();
    let mut rng = stream(9, Purpose::Reference, 40_000, 0);
    let init = ParticleEnsemble::sample(&InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) }, 40_000, 1, &mut rng).unwrap();
    let limit = integrate_meanfield(&init, &dist, 1.0, &act, 1.0, 0.01, &[1.0]).unwrap();
    let target = loss(limit.snapshot_at(1.0).unwrap(), &dist);

    let mut err_small = 0.0;
    let mut err_large = 0.0;
    for r in 0..8 {
        let small = run_sgd(&config(200, 100 + r), &dist, &act, &[1.0]).unwrap();
        let large = run_sgd(&config(5000, 100 + r), &dist, &act, &[1.0]).unwrap();
        err_small += (loss(small.snapshot_at(1.0).unwrap(), &dist) - target).abs();
        err_large += (loss(large.snapshot_at(1.0).unwrap(), &dist) - target).abs();
        assert!(pair_measure(large.snapshot_at(1.0).unwrap(), &coef).abs() < 1.0);
    }
    assert!(err_large < err_small, "N = 5000 error {err_large} vs N = 200 error {err_small}");
    assert!(err_large / 8.0 < 0.02, "mean loss gap {}", err_large / 8.0);
}

#[test]
fn single_precision_follows_double_precision() {
    let dist = dataset();
    let dist32: Dataset32 = dist.cast();
    let cfg = config(300, 17);
    let a = run_sgd(&cfg, &dist, &ActivationKind::default().build::<f64>(), &[0.5, 1.0]).unwrap();
    let b = run_sgd(&cfg, &dist32, &ActivationKind::default().build::<f32>(), &[0.5, 1.0]).unwrap();
    assert_eq!(a.steps, b.steps);
    for ((_, ea), (_, eb)) in a.snapshots.iter().zip(&b.snapshots) {
        let gap = (loss(ea, &dist) - loss(eb, &dist32)).abs();
        assert!(gap < 1e-4, "loss gap {gap}");
    }
}

#[test]
fn replica_samples_split_exactly_and_support_is_contained() {
    let dist = dataset();
    let act = ActivationKind::default().build::<f64>();
    let law = InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) };
    let dom = SobolevDomain::from_bounds(2, &[law.support_bound(1), 3.0], SobolevDomain::diagnostic_j(2)).unwrap();
    let basis = dom.leading_basis::<f64>(3);
    let times = vec![0.0, 0.5, 1.0];

    let mut rng = stream(4, Purpose::Reference, 4000, 0);
    let init = ParticleEnsemble::sample(&law, 4000, 1, &mut rng).unwrap();
    let mut opts = MeanFieldOptions::new(0.005, times.clone());
    opts.record = Some(basis.iter().map(|b| Arc::new(b.clone()) as Arc<dyn TestFunction<f64>>).collect());
    let reference = integrate_meanfield_with(&init, &dist, 1.0, &act, 1.0, &opts).unwrap();
    let fs: Vec<&dyn TestFunction<f64>> = basis.iter().map(|b| b as &dyn TestFunction<f64>).collect();
    let values = reference_pairings(&reference, &fs, &times).unwrap();

    let mut samples = Vec::new();
    for r in 0..6u64 {
        let sgd = mfclt::run_sgd_with(&config(150, 8), &dist, &act, &times, &mfclt::SgdOptions { replica: r, diagnostics: None })
            .unwrap();
        let coupled = integrate_coupled(&sgd.initial, &dist, 1.0, &act, &reference, 0.01, &times).unwrap();
        assert!(dom.check_support(&sgd.final_state).clean());
        samples.push(sample_replica(&sgd, Some(&coupled), &values, &fs, &times).unwrap());
    }
    let labels = basis.iter().map(|b| b.label()).collect();
    let set = FluctuationSamples::assemble(labels, times, 150, samples).unwrap();
    assert!(set.decomposition_residual().unwrap() < 1e-10);
}

#[test]
fn dataset_file_round_trip_drives_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.toml");
    let dist = dataset();
    save_dataset(&path, &dist).unwrap();
    let back = load_dataset(&path).unwrap();
    let act = ActivationKind::default().build::<f64>();
    let a = run_sgd(&config(80, 2), &dist, &act, &[1.0]).unwrap();
    let b = run_sgd(&config(80, 2), &back, &act, &[1.0]).unwrap();
    assert!(a.final_state.same_particles(&b.final_state));
}
