//! Shared state of a campaign: dataset, Sobolev box, basis, reference flow,
//! and a cache of per-replica summaries so experiments that need the same
//! `(N, replica)` cell reuse it.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use mfclt::fluctuation::{gamma_terms, reference_pairings, sample_replica, xi_dual_norm};
use mfclt::meanfield::{integrate_coupled, integrate_meanfield_with, MeanFieldOptions};
use mfclt::model::ParticleEnsemble;
use mfclt::rng::{stream, Purpose};
use mfclt::sgd::{run_sgd_with, DiagnosticsSpec, SgdOptions};
use mfclt::sobolev::DualNormReport;
use mfclt::{Activation, Basis, Dataset, GammaTerms, MeanField, ReplicaSample, RunConfig, SobolevDomain, TestFunction};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::spec::ExperimentSpec;

/// Replica index reserved for the pilot run that sizes the box.
pub const PILOT_REPLICA: u64 = u32::MAX as u64;

/// What a replica run must produce beyond the `η` pairings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Need {
    /// Coupled tilde system: `Ξ`, `Z` and `‖Ξ‖_{−J}`.
    pub coupled: bool,
    /// Step diagnostics: quadratic variation, `V` and `Γ`.
    pub diagnostics: bool,
}

impl Need {
    pub const PLAIN: Need = Need { coupled: false, diagnostics: false };
    pub const COUPLED: Need = Need { coupled: true, diagnostics: false };
    pub const DIAGNOSTICS: Need = Need { coupled: false, diagnostics: true };

    fn covered_by(self, other: Need) -> bool {
        (!self.coupled || other.coupled) && (!self.diagnostics || other.diagnostics)
    }

    fn union(self, other: Need) -> Need {
        Need { coupled: self.coupled || other.coupled, diagnostics: self.diagnostics || other.diagnostics }
    }
}

/// Per-function diagnostics at the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagSummary {
    /// `N Σ_k (X^N_k)²` up to `⌊NT⌋`.
    pub qv: Vec<f64>,
    /// `sup_t |V^N_t|`.
    pub v_sup: Vec<f64>,
    pub gamma: Vec<GammaTerms>,
}

/// Everything the experiments read from one `(N, replica)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRun {
    pub n: usize,
    pub replica: u64,
    pub sample: ReplicaSample,
    /// `‖Ξ^N_t‖_{−J}` reports per sample time.
    pub xi_norm: Option<Vec<DualNormReport>>,
    pub diagnostics: Option<DiagSummary>,
    /// Largest count of particles outside `K` over the sample times.
    pub outside_k: usize,
}

impl ReplicaRun {
    fn has(&self) -> Need {
        Need { coupled: self.xi_norm.is_some(), diagnostics: self.diagnostics.is_some() }
    }
}

/// A replica that could not be completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub n: usize,
    pub replica: u64,
    pub error: String,
}

/// Shared campaign state built from the model, reference and Sobolev
/// sections of a spec.
pub struct Context {
    key: String,
    pub dist: Dataset,
    pub activation: mfclt::ActivationKind,
    pub act: Activation<f64>,
    pub alpha: f64,
    pub horizon: f64,
    pub seed: u64,
    pub init: mfclt::InitLaw,
    pub domain: SobolevDomain,
    pub pilot_bound: f64,
    /// Leading basis elements, all tracked by the reference record.
    pub basis: Vec<Basis>,
    pub reference: MeanField,
    pub times: Vec<f64>,
    pub record_times: Vec<f64>,
    pub coupled_h: f64,
    pub a_max: usize,
    /// Sampled functions are `basis[..tracked]`.
    pub tracked: usize,
    reference_values: Vec<f64>,
    cache: Mutex<HashMap<(usize, u64), Arc<ReplicaRun>>>,
}

/// Sections of a spec that determine a context.
fn context_key(spec: &ExperimentSpec) -> String {
    let parts = (
        &spec.model,
        &spec.reference,
        &spec.sobolev,
        &spec.fluct,
        spec.seed,
    );
    format!("{parts:?}")
}

impl Context {
    /// Runs the pilot, sizes the box and integrates the reference flow.
    pub fn prepare(spec: &ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let dist = spec.model.dataset.load()?;
        let d = dist.dim();
        let act = spec.model.activation.build::<f64>();
        let alpha = spec.model.alpha;
        let horizon = spec.model.t_horizon;
        let config = run_config(spec, d, spec.sobolev.pilot_n);

        let pilot = run_sgd_with(
            &config,
            &dist,
            &act,
            &[horizon],
            &SgdOptions { replica: PILOT_REPLICA, diagnostics: None },
        )?;
        let pilot_bound = pilot.final_state.observed_bound();
        let dim = d + 1;
        let j = spec.sobolev.j.unwrap_or_else(|| SobolevDomain::diagnostic_j(dim));
        let domain = SobolevDomain::from_bounds(dim, &[spec.model.init.support_bound(d), pilot_bound], j)?;
        let basis = domain.leading_basis::<f64>(spec.sobolev.modes);
        let functions: Vec<Arc<dyn TestFunction<f64>>> =
            basis.iter().map(|b| Arc::new(b.clone()) as Arc<dyn TestFunction<f64>>).collect();

        let mut rng = stream(spec.seed, Purpose::Reference, spec.reference.m as u64, 0);
        let init = ParticleEnsemble::sample(&spec.model.init, spec.reference.m, d, &mut rng)?;
        let mut opts = MeanFieldOptions::new(spec.reference.h, spec.fluct.times.clone());
        opts.record = Some(functions);
        let reference = integrate_meanfield_with(&init, &dist, alpha, &act, horizon, &opts)?;

        let tracked = spec.fluct.functions;
        let refs: Vec<&dyn TestFunction<f64>> = basis[..tracked].iter().map(|b| b as &dyn TestFunction<f64>).collect();
        let reference_values = reference_pairings(&reference, &refs, &spec.fluct.times)?;
        Ok(Self {
            key: context_key(spec),
            dist,
            activation: spec.model.activation,
            act,
            alpha,
            horizon,
            seed: spec.seed,
            init: spec.model.init.clone(),
            domain,
            pilot_bound,
            basis,
            reference,
            times: spec.fluct.times.clone(),
            record_times: spec.record_times(),
            coupled_h: spec.fluct.coupled_h,
            a_max: spec.sobolev.a_max,
            tracked,
            reference_values,
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Whether `spec` can run on this context.
    pub fn serves(&self, spec: &ExperimentSpec) -> bool {
        self.key == context_key(spec)
    }

    pub fn labels(&self) -> Vec<String> {
        self.basis[..self.tracked].iter().map(|b| b.label()).collect()
    }

    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12)
            .ok_or_else(|| validation(format!("time {t} is not on the sample grid")))
    }

    /// `⟨f_i, μ̄_t⟩` for tracked function `f` at sample time index `ti`.
    pub fn reference_value(&self, ti: usize, f: usize) -> f64 {
        self.reference_values[ti * self.tracked + f]
    }

    fn config(&self, n: usize) -> RunConfig {
        RunConfig {
            n,
            t_horizon: self.horizon,
            alpha: self.alpha,
            seed: self.seed,
            d: self.dist.dim(),
            activation: self.activation,
            dataset: String::new(),
            replicas: 1,
            init: self.init.clone(),
        }
    }

    fn run_one(&self, n: usize, replica: u64, need: Need) -> mfclt::Result<ReplicaRun> {
        let config = self.config(n);
        let functions: Vec<Arc<dyn TestFunction<f64>>> = self.basis[..self.tracked]
            .iter()
            .map(|b| Arc::new(b.clone()) as Arc<dyn TestFunction<f64>>)
            .collect();
        let diagnostics = need
            .diagnostics
            .then(|| DiagnosticsSpec { functions, record_times: self.record_times.clone() });
        let sgd = run_sgd_with(&config, &self.dist, &self.act, &self.times, &SgdOptions { replica, diagnostics })?;
        let coupled = if need.coupled {
            Some(integrate_coupled(
                &sgd.initial,
                &self.dist,
                self.alpha,
                &self.act,
                &self.reference,
                self.coupled_h,
                &self.times,
            )?)
        } else {
            None
        };
        let fs: Vec<&dyn TestFunction<f64>> =
            self.basis[..self.tracked].iter().map(|b| b as &dyn TestFunction<f64>).collect();
        let sample = sample_replica(&sgd, coupled.as_ref(), &self.reference_values, &fs, &self.times)?;
        let xi_norm = match &coupled {
            Some(c) => Some(
                self.times
                    .iter()
                    .map(|&t| xi_dual_norm(&sgd, c, t, &self.domain, self.a_max))
                    .collect::<mfclt::Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let diagnostics = match &sgd.diagnostics {
            Some(diag) => {
                let rec = self.reference.record()?;
                let mut s = DiagSummary { qv: Vec::new(), v_sup: Vec::new(), gamma: Vec::new() };
                for f in 0..self.tracked {
                    s.qv.push(diag.quadratic_variation(self.horizon, f)?);
                    s.v_sup.push(diag.remainder_traces(f)?.v_sup);
                    s.gamma.push(gamma_terms(diag, rec, &self.dist, self.alpha, f, self.horizon)?);
                }
                Some(s)
            }
            None => None,
        };
        let outside_k = sgd
            .snapshots
            .iter()
            .map(|(_, e)| self.domain.check_support(e).outside_k)
            .max()
            .unwrap_or(0);
        Ok(ReplicaRun { n, replica, sample, xi_norm, diagnostics, outside_k })
    }

    pub fn cached(&self, n: usize, replica: u64) -> Option<Arc<ReplicaRun>> {
        self.cache.lock().expect("replica cache poisoned").get(&(n, replica)).cloned()
    }

    /// Replicas `0..count` at width `n`, reusing cached cells that already
    /// carry what `need` asks for. Results come back in replica order;
    /// failed cells are reported separately.
    pub fn replicas(&self, n: usize, count: usize, need: Need) -> (Vec<Arc<ReplicaRun>>, Vec<FailedCell>) {
        let todo: Vec<(u64, Need)> = {
            let cache = self.cache.lock().expect("replica cache poisoned");
            (0..count as u64)
                .filter_map(|r| match cache.get(&(n, r)) {
                    Some(run) if need.covered_by(run.has()) => None,
                    Some(run) => Some((r, need.union(run.has()))),
                    None => Some((r, need)),
                })
                .collect()
        };
        let fresh: Vec<(u64, mfclt::Result<ReplicaRun>)> =
            todo.into_par_iter().map(|(r, nd)| (r, self.run_one(n, r, nd))).collect();
        let mut failed = Vec::new();
        let mut cache = self.cache.lock().expect("replica cache poisoned");
        for (r, res) in fresh {
            match res {
                Ok(run) => {
                    cache.insert((n, r), Arc::new(run));
                }
                Err(e) => failed.push(FailedCell { n, replica: r, error: e.to_string() }),
            }
        }
        let runs = (0..count as u64).filter_map(|r| cache.get(&(n, r)).cloned()).collect();
        (runs, failed)
    }
}

fn run_config(spec: &ExperimentSpec, d: usize, n: usize) -> RunConfig {
    RunConfig {
        n,
        t_horizon: spec.model.t_horizon,
        alpha: spec.model.alpha,
        seed: spec.seed,
        d,
        activation: spec.model.activation,
        dataset: String::new(),
        replicas: 1,
        init: spec.model.init.clone(),
    }
}
