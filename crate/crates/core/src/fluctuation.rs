//! The fluctuation process `η^N_t = √N(μ^N_t − μ̄_t)`, its split into the
//! coupling part `Ξ^N` and the propagation part `Z^N`, cross-replica sample
//! matrices and the quadratic remainder terms.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::meanfield::{DriveKind, GridRecord, MeanFieldTrajectory};
use crate::model::{pair_measure, DataDistribution, ParticleEnsemble, TestFunction};
use crate::scalar::{to_f64, CompensatedSum, Scalar};
use crate::sgd::{MartingaleDiagnostics, SgdTrajectory};
use crate::sobolev::{dual_norm_truncated, DualNormReport, SignedMeasure, SobolevDomain};
use crate::stats::{covariance_with_jackknife, CovarianceEstimate};

fn pair<T: Scalar, F: TestFunction<T> + ?Sized>(ens: &ParticleEnsemble<T>, f: &F) -> f64 {
    to_f64(pair_measure(ens, f))
}

/// `⟨f, η^N_t⟩` against the reference flow.
pub fn eta_pairing<T: Scalar, F: TestFunction<T> + ?Sized>(
    sgd: &SgdTrajectory<T>,
    reference: &MeanFieldTrajectory<T>,
    f: &F,
    t: f64,
) -> Result<f64> {
    let scale = (sgd.config.n as f64).sqrt();
    Ok(scale * (pair(sgd.snapshot_at(t)?, f) - pair(reference.snapshot_at(t)?, f)))
}

/// Checks that `coupled` is the tilde system of `sgd`.
fn check_coupling<T: Scalar>(sgd: &SgdTrajectory<T>, coupled: &MeanFieldTrajectory<T>) -> Result<()> {
    if coupled.m != sgd.config.n {
        return Err(invalid(format!("coupled system has {} particles, SGD run has {}", coupled.m, sgd.config.n)));
    }
    if coupled.drive != DriveKind::Reference {
        return Err(invalid("coupled system must be driven by the reference flow"));
    }
    let start = coupled
        .snapshot_at(0.0)
        .map_err(|_| invalid("coupled system must keep its t = 0 snapshot"))?;
    if !start.same_particles(&sgd.initial) {
        return Err(invalid("coupled system does not share the SGD initial particles"));
    }
    Ok(())
}

/// `(⟨f, Ξ^N_t⟩, ⟨f, Z^N_t⟩)` with `Ξ^N = √N(μ^N − μ̃^N)` and
/// `Z^N = √N(μ̃^N − μ̄)`.
pub fn xi_z_split<T: Scalar, F: TestFunction<T> + ?Sized>(
    sgd: &SgdTrajectory<T>,
    coupled: &MeanFieldTrajectory<T>,
    reference: &MeanFieldTrajectory<T>,
    f: &F,
    t: f64,
) -> Result<(f64, f64)> {
    check_coupling(sgd, coupled)?;
    let scale = (sgd.config.n as f64).sqrt();
    let a = pair(sgd.snapshot_at(t)?, f);
    let b = pair(coupled.snapshot_at(t)?, f);
    let c = pair(reference.snapshot_at(t)?, f);
    Ok((scale * (a - b), scale * (b - c)))
}

/// Truncated `‖Ξ^N_t‖_{−J}` on `dom`.
pub fn xi_dual_norm<T: Scalar>(
    sgd: &SgdTrajectory<T>,
    coupled: &MeanFieldTrajectory<T>,
    t: f64,
    dom: &SobolevDomain,
    a_max: usize,
) -> Result<DualNormReport> {
    check_coupling(sgd, coupled)?;
    let scale = (sgd.config.n as f64).sqrt();
    let xi = SignedMeasure::difference(sgd.snapshot_at(t)?, coupled.snapshot_at(t)?, scale)?;
    dual_norm_truncated(&xi, dom, a_max)
}

/// `⟨f², μ_t⟩ − ⟨f, μ_t⟩²` on a snapshot.
pub fn pointwise_variance<T: Scalar, F: TestFunction<T> + ?Sized>(ens: &ParticleEnsemble<T>, f: &F) -> f64 {
    let n = ens.len() as f64;
    let mut s1 = CompensatedSum::new();
    let mut s2 = CompensatedSum::new();
    for i in 0..ens.len() {
        let v = to_f64(f.value(ens.c()[i], ens.w(i)));
        s1.add(v);
        s2.add(v * v);
    }
    let m = s1.value() / n;
    s2.value() / n - m * m
}

/// `⟨f_i, μ̄_t⟩` at `[t * n_f + i]`, computed once and shared by replicas.
pub fn reference_pairings<T: Scalar>(
    reference: &MeanFieldTrajectory<T>,
    functions: &[&dyn TestFunction<T>],
    times: &[f64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(times.len() * functions.len());
    for &t in times {
        let ens = reference.snapshot_at(t)?;
        out.extend(functions.iter().map(|f| pair(ens, *f)));
    }
    Ok(out)
}

/// Sample components of one replica, each indexed `[t * n_f + f]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSample {
    pub eta: Vec<f64>,
    pub xi: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    /// `√N ⟨f, M^N_t⟩`, present when the run carried diagnostics for the
    /// same functions.
    pub mart: Option<Vec<f64>>,
}

/// Pairings of one replica at every `(t, f)` cell. `reference_values` comes
/// from [`reference_pairings`] with the same functions and times.
pub fn sample_replica<T: Scalar>(
    sgd: &SgdTrajectory<T>,
    coupled: Option<&MeanFieldTrajectory<T>>,
    reference_values: &[f64],
    functions: &[&dyn TestFunction<T>],
    times: &[f64],
) -> Result<ReplicaSample> {
    let nf = functions.len();
    if reference_values.len() != times.len() * nf {
        return Err(Error::DimensionMismatch { expected: times.len() * nf, got: reference_values.len() });
    }
    if let Some(c) = coupled {
        check_coupling(sgd, c)?;
    }
    let scale = (sgd.config.n as f64).sqrt();
    let mut out = ReplicaSample {
        eta: Vec::with_capacity(times.len() * nf),
        xi: coupled.map(|_| Vec::with_capacity(times.len() * nf)),
        z: coupled.map(|_| Vec::with_capacity(times.len() * nf)),
        mart: None,
    };
    for (ti, &t) in times.iter().enumerate() {
        let ens = sgd.snapshot_at(t)?;
        let tilde = coupled.map(|c| c.snapshot_at(t)).transpose()?;
        for (fi, f) in functions.iter().enumerate() {
            let a = pair(ens, *f);
            let c = reference_values[ti * nf + fi];
            out.eta.push(scale * (a - c));
            if let Some(tilde) = tilde {
                let b = pair(tilde, *f);
                out.xi.as_mut().unwrap().push(scale * (a - b));
                out.z.as_mut().unwrap().push(scale * (b - c));
            }
        }
    }
    if let Some(diag) = &sgd.diagnostics {
        let labels: Vec<String> = functions.iter().map(|f| f.label()).collect();
        if diag.labels == labels {
            let mut m = Vec::with_capacity(times.len() * nf);
            for &t in times {
                for fi in 0..nf {
                    m.push(scale * diag.martingale(t, fi)?);
                }
            }
            out.mart = Some(m);
        }
    }
    Ok(out)
}

/// Component of the decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Eta,
    Xi,
    Z,
    Mart,
}

/// Cross-replica sample matrices `s[replica, time, f]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationSamples {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    pub n: usize,
    pub replicas: usize,
    pub eta: Vec<f64>,
    pub xi: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    pub mart: Option<Vec<f64>>,
}

impl FluctuationSamples {
    /// Stacks replica samples in order. Optional components are kept only if
    /// every replica has them.
    pub fn assemble(labels: Vec<String>, times: Vec<f64>, n: usize, samples: Vec<ReplicaSample>) -> Result<Self> {
        let cell = labels.len() * times.len();
        if cell == 0 {
            return Err(invalid("sample matrix needs at least one time and one function"));
        }
        if let Some(bad) = samples.iter().find(|s| s.eta.len() != cell) {
            return Err(Error::DimensionMismatch { expected: cell, got: bad.eta.len() });
        }
        let stack = |get: &dyn Fn(&ReplicaSample) -> Option<&Vec<f64>>| -> Option<Vec<f64>> {
            let parts: Option<Vec<&Vec<f64>>> = samples.iter().map(get).collect();
            parts.filter(|p| !p.is_empty()).map(|p| p.into_iter().flatten().copied().collect())
        };
        Ok(Self {
            replicas: samples.len(),
            xi: stack(&|s| s.xi.as_ref()),
            z: stack(&|s| s.z.as_ref()),
            mart: stack(&|s| s.mart.as_ref()),
            eta: samples.iter().flat_map(|s| s.eta.iter().copied()).collect(),
            labels,
            times,
            n,
        })
    }

    pub fn n_functions(&self) -> usize {
        self.labels.len()
    }

    fn data(&self, comp: Component) -> Result<&[f64]> {
        match comp {
            Component::Eta => Some(&self.eta),
            Component::Xi => self.xi.as_ref(),
            Component::Z => self.z.as_ref(),
            Component::Mart => self.mart.as_ref(),
        }
        .map(Vec::as_slice)
        .ok_or_else(|| invalid(format!("{comp:?} component was not collected")))
    }

    /// Index of grid time `t`.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-9).ok_or_else(|| Error::Range {
            t,
            detail: "not a sample time".into(),
        })
    }

    pub fn get(&self, comp: Component, r: usize, ti: usize, f: usize) -> Result<f64> {
        let nf = self.n_functions();
        Ok(self.data(comp)?[(r * self.times.len() + ti) * nf + f])
    }

    /// All replicas of one `(t, f)` cell.
    pub fn column(&self, comp: Component, t: f64, f: usize) -> Result<Vec<f64>> {
        let ti = self.time_index(t)?;
        if f >= self.n_functions() {
            return Err(invalid(format!("function index {f} out of range")));
        }
        (0..self.replicas).map(|r| self.get(comp, r, ti, f)).collect()
    }

    /// `max |η − Ξ − Z|` over all cells.
    pub fn decomposition_residual(&self) -> Result<f64> {
        let (xi, z) = (self.data(Component::Xi)?, self.data(Component::Z)?);
        Ok(self
            .eta
            .iter()
            .zip(xi)
            .zip(z)
            .map(|((e, x), z)| (e - x - z).abs())
            .fold(0.0, f64::max))
    }
}

/// Minimum replica count for covariance estimates.
pub const MIN_REPLICAS: usize = 30;

/// Sample covariance of `⟨f_i, η^N_t⟩` for `i ∈ f_list` across replicas.
pub fn covariance_estimate(samples: &FluctuationSamples, t: f64, f_list: &[usize]) -> Result<CovarianceEstimate> {
    component_covariance(samples, Component::Eta, t, f_list)
}

/// Same for any collected component.
pub fn component_covariance(
    samples: &FluctuationSamples,
    comp: Component,
    t: f64,
    f_list: &[usize],
) -> Result<CovarianceEstimate> {
    if samples.replicas < MIN_REPLICAS {
        return Err(invalid(format!(
            "covariance needs at least {MIN_REPLICAS} replicas, got {}",
            samples.replicas
        )));
    }
    let ti = samples.time_index(t)?;
    if let Some(&bad) = f_list.iter().find(|&&f| f >= samples.n_functions()) {
        return Err(invalid(format!("function index {bad} out of range")));
    }
    let rows = (0..samples.replicas)
        .map(|r| f_list.iter().map(|&f| samples.get(comp, r, ti, f)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    covariance_with_jackknife(&rows)
}

/// Quadratic remainder terms at the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaTerms {
    pub gamma1: f64,
    pub gamma2: f64,
}

/// `Γ^{1,N}_t = −α N^{-1/2} ∫₀ᵗ Σ_m p_m ⟨cσ(w·x_m), η_s⟩⟨σ(w·x_m)∂_c f, η_s⟩ ds`
/// and `Γ^{2,N}` with the `w`-gradient pairing, from the SGD pairing records
/// and the reference record, by the trapezoid rule over the record times.
pub fn gamma_terms<T: Scalar>(
    diag: &MartingaleDiagnostics,
    reference: &GridRecord,
    dist: &DataDistribution<T>,
    alpha: f64,
    f: usize,
    t: f64,
) -> Result<GammaTerms> {
    let nf = diag.labels.len();
    if f >= nf {
        return Err(invalid(format!("test function index {f} out of range")));
    }
    let rf = reference
        .labels
        .iter()
        .position(|l| *l == diag.labels[f])
        .ok_or_else(|| invalid(format!("reference record does not track {}", diag.labels[f])))?;
    let recs: Vec<_> = diag.records.iter().filter(|r| r.t <= t + 1e-9).collect();
    if recs.len() < 2 || recs[0].t.abs() > 1e-12 || (recs.last().unwrap().t - t).abs() > 1e-9 {
        return Err(Error::Range { t, detail: "records must cover [0, t] including both ends".into() });
    }
    let nd = dist.len();
    let root_n = (diag.n as f64).sqrt();
    let integrand = |rec: &crate::sgd::PairingRecord| -> Result<(f64, f64)> {
        let j = reference.index_of(rec.t)?;
        let (mut a, mut b) = (0.0, 0.0);
        for m in 0..nd {
            let p = to_f64(dist.weight(m));
            let dg = rec.g[m] - reference.g(j, m);
            a += p * dg * (rec.k1[m * nf + f] - reference.k1(j, m, rf));
            b += p * dg * (rec.k2[m * nf + f] - reference.k2(j, m, rf));
        }
        Ok((a, b))
    };
    let vals = recs.iter().map(|r| integrand(r)).collect::<Result<Vec<_>>>()?;
    let (mut g1, mut g2) = (0.0, 0.0);
    for k in 1..recs.len() {
        let dt = recs[k].t - recs[k - 1].t;
        g1 += 0.5 * dt * (vals[k].0 + vals[k - 1].0);
        g2 += 0.5 * dt * (vals[k].1 + vals[k - 1].1);
    }
    // η-pairings carry √N each, the prefactor N^{-1/2}: net factor √N.
    Ok(GammaTerms { gamma1: -alpha * root_n * g1, gamma2: -alpha * root_n * g2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::{integrate_coupled, integrate_meanfield_with, MeanFieldOptions};
    use crate::model::{Activation, ConstantFn, InitLaw, ParticleEnsemble};
    use crate::rng::{stream, Purpose};
    use crate::sgd::{run_sgd, run_sgd_with, DiagnosticsSpec, SgdOptions};
    use crate::testkit::{config, three_point};
    use std::sync::Arc;

    fn domain() -> SobolevDomain {
        SobolevDomain::new(2, 1.25, 6).unwrap()
    }

    fn reference(m: usize, alpha: f64, fs: Vec<Arc<dyn TestFunction<f64>>>) -> MeanFieldTrajectory<f64> {
        let mut rng = stream(99, Purpose::Reference, m as u64, 0);
        let law = InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) };
        let init = ParticleEnsemble::sample(&law, m, 1, &mut rng).unwrap();
        let mut opts = MeanFieldOptions::new(1e-3, vec![0.0, 0.5, 1.0]);
        opts.record = Some(fs);
        integrate_meanfield_with(&init, &three_point(), alpha, &Activation::Tanh, 1.0, &opts).unwrap()
    }

    fn basis(k: usize) -> Vec<Arc<dyn TestFunction<f64>>> {
        domain()
            .leading_basis::<f64>(k)
            .into_iter()
            .map(|b| Arc::new(b) as Arc<dyn TestFunction<f64>>)
            .collect()
    }

    #[test]
    fn identical_measures_and_constant_function_give_zero() {
        let fs = basis(2);
        let cfg = config(200, 1.0, 1.0);
        let sgd = run_sgd(&cfg, &three_point(), &Activation::Tanh, &[0.0, 0.5, 1.0]).unwrap();
        // Reference built from the same initial particles, frozen: equal at t = 0.
        let mut opts = MeanFieldOptions::new(1e-3, vec![0.0, 0.5, 1.0]);
        opts.record = Some(fs.clone());
        let frozen = integrate_meanfield_with(&sgd.initial, &three_point(), 1.0, &Activation::Tanh, 1.0, &opts).unwrap();
        assert_eq!(eta_pairing(&sgd, &frozen, fs[0].as_ref(), 0.0).unwrap(), 0.0);
        let one = ConstantFn(1.0);
        for t in [0.0, 0.5, 1.0] {
            assert!(eta_pairing(&sgd, &frozen, &one, t).unwrap().abs() < 1e-12);
        }
        assert!(matches!(eta_pairing(&sgd, &frozen, &one, 0.3), Err(Error::Range { .. })));
    }

    #[test]
    fn split_identity_and_coupling_checks() {
        let fs = basis(3);
        let refr = reference(4000, 1.0, fs.clone());
        let cfg = config(300, 1.0, 1.0);
        let dist = three_point();
        let times = [0.0, 0.5, 1.0];
        let sgd = run_sgd(&cfg, &dist, &Activation::Tanh, &times).unwrap();
        let coupled = integrate_coupled(&sgd.initial, &dist, 1.0, &Activation::Tanh, &refr, 1e-2, &times).unwrap();
        for f in &fs {
            let (xi0, _) = xi_z_split(&sgd, &coupled, &refr, f.as_ref(), 0.0).unwrap();
            assert_eq!(xi0, 0.0);
            for &t in &times {
                let (xi, z) = xi_z_split(&sgd, &coupled, &refr, f.as_ref(), t).unwrap();
                let eta = eta_pairing(&sgd, &refr, f.as_ref(), t).unwrap();
                assert!((xi + z - eta).abs() < 1e-10);
            }
        }
        let other = run_sgd_with(&cfg, &dist, &Activation::Tanh, &times, &SgdOptions { replica: 1, diagnostics: None })
            .unwrap();
        assert!(xi_z_split(&other, &coupled, &refr, fs[0].as_ref(), 0.5).is_err());
        let self_driven = integrate_meanfield_with(
            &sgd.initial,
            &dist,
            1.0,
            &Activation::Tanh,
            1.0,
            &MeanFieldOptions::new(1e-2, times.to_vec()),
        )
        .unwrap();
        assert!(xi_z_split(&sgd, &self_driven, &refr, fs[0].as_ref(), 0.5).is_err());
    }

    #[test]
    fn frozen_dynamics_have_no_coupling_part() {
        let fs = basis(2);
        let refr = reference(2000, 0.0, fs.clone());
        let cfg = config(150, 0.0, 1.0);
        let dist = three_point();
        let times = [0.0, 0.5, 1.0];
        let sgd = run_sgd(&cfg, &dist, &Activation::Tanh, &times).unwrap();
        let coupled = integrate_coupled(&sgd.initial, &dist, 0.0, &Activation::Tanh, &refr, 1e-2, &times).unwrap();
        for &t in &times {
            assert_eq!(xi_z_split(&sgd, &coupled, &refr, fs[1].as_ref(), t).unwrap().0, 0.0);
            assert_eq!(xi_dual_norm(&sgd, &coupled, t, &domain(), 8).unwrap().value, 0.0);
        }
    }

    #[test]
    fn initial_variance_matches_reference_formula() {
        let fs = basis(1);
        let refr = reference(20000, 1.0, fs.clone());
        let f = fs[0].as_ref();
        let target = pointwise_variance(refr.snapshot_at(0.0).unwrap(), f);
        let dist = three_point();
        let cfg = config(400, 1.0, 0.01);
        let samples: Vec<f64> = (0..400)
            .map(|r| {
                let opts = SgdOptions { replica: r, diagnostics: None };
                let sgd = run_sgd_with(&cfg, &dist, &Activation::Tanh, &[0.0], &opts).unwrap();
                eta_pairing(&sgd, &refr, f, 0.0).unwrap()
            })
            .collect();
        let (_, sd) = crate::stats::mean_sd(&samples);
        // Relative standard error of a variance from 400 draws is about 7%.
        assert!((sd * sd / target - 1.0).abs() < 0.25, "{} vs {target}", sd * sd);
    }

    #[test]
    fn sample_matrices_and_covariance() {
        let fs = basis(3);
        let refs: Vec<&dyn TestFunction<f64>> = fs.iter().map(|f| f.as_ref()).collect();
        let refr = reference(4000, 1.0, fs.clone());
        let times = vec![0.0, 0.5, 1.0];
        let rv = reference_pairings(&refr, &refs, &times).unwrap();
        let dist = three_point();
        let cfg = config(100, 1.0, 1.0);
        let spec = DiagnosticsSpec { functions: fs.clone(), record_times: times.clone() };
        let samples: Vec<ReplicaSample> = (0..32)
            .map(|r| {
                let opts = SgdOptions { replica: r, diagnostics: Some(spec.clone()) };
                let sgd = run_sgd_with(&cfg, &dist, &Activation::Tanh, &times, &opts).unwrap();
                let coupled = integrate_coupled(&sgd.initial, &dist, 1.0, &Activation::Tanh, &refr, 1e-2, &times).unwrap();
                sample_replica(&sgd, Some(&coupled), &rv, &refs, &times).unwrap()
            })
            .collect();
        let labels = fs.iter().map(|f| f.label()).collect();
        let s = FluctuationSamples::assemble(labels, times, 100, samples).unwrap();
        assert_eq!(s.replicas, 32);
        assert!(s.decomposition_residual().unwrap() < 1e-10);
        assert!(s.mart.is_some());
        let col = s.column(Component::Xi, 0.0, 1).unwrap();
        assert!(col.iter().all(|&v| v == 0.0));
        let cov = covariance_estimate(&s, 1.0, &[0, 1, 2]).unwrap();
        assert_eq!(cov.k, 3);
        for a in 0..3 {
            assert!(cov.get(a, a) > 0.0);
            for b in 0..3 {
                assert_eq!(cov.get(a, b), cov.get(b, a));
            }
        }
        let mut small = s.clone();
        small.replicas = 10;
        assert!(covariance_estimate(&small, 1.0, &[0]).is_err());
    }

    #[test]
    fn zero_samples_give_zero_covariance() {
        let s = FluctuationSamples::assemble(
            vec!["a".into(), "b".into()],
            vec![0.0],
            10,
            vec![ReplicaSample { eta: vec![0.0, 0.0], ..Default::default() }; 40],
        )
        .unwrap();
        let c = covariance_estimate(&s, 0.0, &[0, 1]).unwrap();
        assert!(c.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_terms_match_direct_quadrature() {
        let fs = basis(2);
        let refr = reference(4000, 1.0, fs.clone());
        let rec = refr.record().unwrap();
        let dist = three_point();
        let cfg = config(500, 1.0, 1.0);
        let times: Vec<f64> = (0..=1000).map(|j| j as f64 * 1e-3).collect();
        let spec = DiagnosticsSpec { functions: fs.clone(), record_times: times.clone() };
        let opts = SgdOptions { replica: 3, diagnostics: Some(spec) };
        let sgd = run_sgd_with(&cfg, &dist, &Activation::Tanh, &[0.0, 1.0], &opts).unwrap();
        let diag = sgd.diagnostics.as_ref().unwrap();
        let g = gamma_terms(diag, rec, &dist, 1.0, 1, 1.0).unwrap();
        // Direct: rebuild the η pairings from snapshots of the records.
        let mut direct = 0.0;
        for (k, r) in diag.records.iter().enumerate() {
            let j = rec.index_of(r.t).unwrap();
            let mut v = 0.0;
            for m in 0..3 {
                let eg = 500f64.sqrt() * (r.g[m] - rec.g(j, m));
                let ek = 500f64.sqrt() * (r.k1[m * 2 + 1] - rec.k1(j, m, 1));
                v += dist.weight(m) * eg * ek;
            }
            let w = if k == 0 || k + 1 == diag.records.len() { 0.5e-3 } else { 1e-3 };
            direct += w * v;
        }
        assert!((g.gamma1 - (-1.0 / 500f64.sqrt()) * direct).abs() < 1e-12 * direct.abs().max(1.0));
        assert!(g.gamma2.is_finite());
        let g0 = gamma_terms(diag, rec, &dist, 0.0, 0, 1.0).unwrap();
        assert_eq!((g0.gamma1, g0.gamma2), (0.0, 0.0));
        assert!(gamma_terms(diag, rec, &dist, 1.0, 5, 1.0).is_err());

        // A diagnostic subset is matched to the reference record by label.
        let sub = DiagnosticsSpec { functions: vec![fs[1].clone()], record_times: times };
        let opts = SgdOptions { replica: 3, diagnostics: Some(sub) };
        let sgd = run_sgd_with(&cfg, &dist, &Activation::Tanh, &[0.0, 1.0], &opts).unwrap();
        let g_sub = gamma_terms(sgd.diagnostics.as_ref().unwrap(), rec, &dist, 1.0, 0, 1.0).unwrap();
        assert!((g_sub.gamma1 - g.gamma1).abs() < 1e-12 * g.gamma1.abs().max(1.0));
        let other = DiagnosticsSpec { functions: basis(3)[2..].to_vec(), record_times: vec![0.0, 1.0] };
        let opts = SgdOptions { replica: 3, diagnostics: Some(other) };
        let sgd = run_sgd_with(&cfg, &dist, &Activation::Tanh, &[1.0], &opts).unwrap();
        assert!(gamma_terms(sgd.diagnostics.as_ref().unwrap(), rec, &dist, 1.0, 0, 1.0).is_err());
    }
}
