//! Limit objects: the residual-weighted gradient operator `ℛ`, the Gaussian
//! martingale covariance along the reference flow, and a Galerkin closure of
//! the limit SPDE simulated by Euler–Maruyama.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::meanfield::{GridRecord, MeanFieldTrajectory};
use crate::model::{network_eval, Activation, DataDistribution, ParticleEnsemble, TestFunction};
use crate::quadrature::GaussLegendre;
use crate::rng::{stream, Purpose};
use crate::scalar::{to_f64, Scalar};
use crate::sgd::gradient_pairing;
use crate::sobolev::{BasisFunction, SobolevDomain};
use crate::stats::{covariance_with_jackknife, CovarianceEstimate};

/// Eigenvalues in `[−PSD_TOL, 0)` are treated as zero.
pub const PSD_TOL: f64 = 1e-10;

/// `ℛ_{x,y,μ}[f] = (y − ⟨cσ(w·x), μ⟩)⟨σ(w·x)∂_c f + cσ'(w·x) x·∇_w f, μ⟩`
/// on the reference snapshot at `t`.
pub fn r_eval<T: Scalar, F: TestFunction<T> + ?Sized>(
    reference: &MeanFieldTrajectory<T>,
    act: &Activation<T>,
    t: f64,
    f: &F,
    x: &[T],
    y: T,
) -> Result<f64> {
    r_on(reference.snapshot_at(t)?, act, f, x, y)
}

/// `ℛ` against an arbitrary ensemble.
pub fn r_on<T: Scalar, F: TestFunction<T> + ?Sized>(
    ens: &ParticleEnsemble<T>,
    act: &Activation<T>,
    f: &F,
    x: &[T],
    y: T,
) -> Result<f64> {
    let g = network_eval(ens, x, act)?;
    let (k1, k2) = gradient_pairing(ens, x, f, act);
    Ok(to_f64(y - g) * (to_f64(k1) + to_f64(k2)))
}

/// `ℛ` evaluated from a pairing record: `ℛ_m[f](t_j) = r_m(t_j) K_{m,f}(t_j)`.
#[derive(Clone, Debug)]
pub struct RKernel<'a> {
    record: &'a GridRecord,
    weights: Vec<f64>,
    alpha: f64,
}

impl<'a> RKernel<'a> {
    pub fn new<T: Scalar>(record: &'a GridRecord, dist: &DataDistribution<T>, alpha: f64) -> Result<Self> {
        if record.n_data != dist.len() {
            return Err(invalid("record and dataset sizes differ"));
        }
        Ok(Self { record, weights: dist.weights().iter().map(|&p| to_f64(p)).collect(), alpha })
    }

    pub fn record(&self) -> &GridRecord {
        self.record
    }

    pub fn n_functions(&self) -> usize {
        self.record.n_functions()
    }

    /// `ℛ_m[f]` at grid index `j`.
    pub fn value(&self, j: usize, m: usize, f: usize) -> f64 {
        self.record.r(j, m) * self.record.k(j, m, f)
    }

    /// `ℛ_m[f]` at grid time `t`.
    pub fn eval(&self, t: f64, f: usize, m: usize) -> Result<f64> {
        Ok(self.value(self.record.index_of(t)?, m, f))
    }

    /// Covariance rate `Q_ab = α² Σ_m p_m (ℛ_m[f_a] − ℛ̄[f_a])(ℛ_m[f_b] − ℛ̄[f_b])`.
    pub fn rate(&self, j: usize, fs: &[usize]) -> Vec<f64> {
        let k = fs.len();
        let nd = self.weights.len();
        let centered: Vec<Vec<f64>> = fs
            .iter()
            .map(|&f| {
                let vals: Vec<f64> = (0..nd).map(|m| self.value(j, m, f)).collect();
                let mean: f64 = vals.iter().zip(&self.weights).map(|(v, p)| v * p).sum();
                vals.iter().map(|v| v - mean).collect()
            })
            .collect();
        let a2 = self.alpha * self.alpha;
        let mut q = vec![0.0; k * k];
        for a in 0..k {
            for b in a..k {
                let v: f64 = (0..nd).map(|m| self.weights[m] * centered[a][m] * centered[b][m]).sum();
                q[a * k + b] = a2 * v;
                q[b * k + a] = a2 * v;
            }
        }
        q
    }

    /// `α² ∫₀ᵗ Σ_m p_m (ℛ[f] − ℛ̄[f])(ℛ[g] − ℛ̄[g]) ds`, trapezoid rule on the
    /// record grid.
    pub fn martingale_covariance(&self, t: f64, f: usize, g: usize) -> Result<f64> {
        if f >= self.n_functions() || g >= self.n_functions() {
            return Err(invalid("function index out of range"));
        }
        let end = self.record.index_of(t)?;
        let mut acc = 0.0;
        let mut prev = self.rate(0, &[f, g])[1];
        for j in 1..=end {
            let cur = self.rate(j, &[f, g])[1];
            acc += 0.5 * (self.record.times[j] - self.record.times[j - 1]) * (prev + cur);
            prev = cur;
        }
        Ok(acc)
    }
}

/// Row-major square matrix helpers.
fn to_dmatrix(k: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(k, k, v)
}

/// Symmetric square root of a PSD matrix. Eigenvalues in `[−1e-10, 0)` are
/// clamped to zero; anything lower is a model error.
pub fn psd_sqrt(k: usize, m: &[f64]) -> Result<Vec<f64>> {
    if m.len() != k * k {
        return Err(Error::DimensionMismatch { expected: k * k, got: m.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut sym = to_dmatrix(k, m);
    sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut diag = Vec::with_capacity(k);
    for &l in eig.eigenvalues.iter() {
        if l < -PSD_TOL {
            return Err(Error::Model(format!("matrix is not positive semi-definite (eigenvalue {l:.3e})")));
        }
        diag.push(l.max(0.0).sqrt());
    }
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)) * v.transpose();
    Ok((0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| root[(i, j)]).collect())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(k: usize, m: &[f64]) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let sym = to_dmatrix(k, m);
    SymmetricEigen::new((&sym + sym.transpose()) * 0.5).eigenvalues.min()
}

/// Covariance rates along the grid and their running integral.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMartingaleModel {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    pub k: usize,
    /// `Q(t_j)`, row-major.
    pub rates: Vec<Vec<f64>>,
    /// `∫₀^{t_j} Q(s) ds` by the trapezoid rule.
    pub accumulated: Vec<Vec<f64>>,
}

impl GaussianMartingaleModel {
    /// Model for record functions `fs`, checking PSD-ness of every rate.
    pub fn build(kernel: &RKernel<'_>, fs: &[usize]) -> Result<Self> {
        if let Some(&bad) = fs.iter().find(|&&f| f >= kernel.n_functions()) {
            return Err(invalid(format!("function index {bad} out of range")));
        }
        let rec = kernel.record();
        let k = fs.len();
        let rates: Vec<Vec<f64>> = (0..rec.len()).map(|j| kernel.rate(j, fs)).collect();
        for (j, q) in rates.iter().enumerate() {
            let l = min_eigenvalue(k, q);
            if l < -PSD_TOL {
                return Err(Error::Model(format!("covariance rate at t = {} has eigenvalue {l:.3e}", rec.times[j])));
            }
        }
        let mut accumulated = vec![vec![0.0; k * k]];
        for j in 1..rec.len() {
            let dt = rec.times[j] - rec.times[j - 1];
            let next: Vec<f64> = accumulated[j - 1]
                .iter()
                .zip(rates[j - 1].iter().zip(&rates[j]))
                .map(|(c, (a, b))| c + 0.5 * dt * (a + b))
                .collect();
            accumulated.push(next);
        }
        Ok(Self {
            labels: fs.iter().map(|&f| rec.labels[f].clone()).collect(),
            times: rec.times.clone(),
            k,
            rates,
            accumulated,
        })
    }

    pub fn covariance_at(&self, t: f64) -> Result<&[f64]> {
        let j = grid_index(&self.times, t)?;
        Ok(&self.accumulated[j])
    }
}

fn grid_index(times: &[f64], t: f64) -> Result<usize> {
    times.iter().position(|s| (s - t).abs() <= 1e-9).ok_or_else(|| Error::Range {
        t,
        detail: "not a model grid time".into(),
    })
}

/// `(Σ₀)_ab = ⟨f_a f_b, μ⟩ − ⟨f_a, μ⟩⟨f_b, μ⟩` on an ensemble.
pub fn initial_covariance<T: Scalar>(ens: &ParticleEnsemble<T>, fs: &[&dyn TestFunction<T>]) -> Vec<f64> {
    let k = fs.len();
    let n = ens.len() as f64;
    let mut mean = vec![0.0; k];
    let mut second = vec![0.0; k * k];
    let mut v = vec![0.0; k];
    for i in 0..ens.len() {
        for (a, f) in fs.iter().enumerate() {
            v[a] = to_f64(f.value(ens.c()[i], ens.w(i)));
            mean[a] += v[a];
        }
        for a in 0..k {
            for b in a..k {
                second[a * k + b] += v[a] * v[b];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut out = vec![0.0; k * k];
    for a in 0..k {
        for b in a..k {
            let c = second[a * k + b] / n - mean[a] * mean[b];
            out[a * k + b] = c;
            out[b * k + a] = c;
        }
    }
    out
}

/// Tensor Gauss-Legendre grid on `Θ` with the first `m` basis functions
/// tabulated at every node.
#[derive(Clone, Debug)]
pub struct Projector {
    dim: usize,
    m: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `f_b(node)` at `[node * m + b]`.
    values: Vec<f64>,
    /// `∇f_b(node)` at `[(node * m + b) * dim + j]`.
    grads: Vec<f64>,
    /// `‖f_b‖²_{L²(Θ)}` (closed form `B^D / ‖e_b‖²_J`).
    l2: Vec<f64>,
}

impl Projector {
    /// `panels` panels of `per_panel` Gauss nodes per axis.
    pub fn new(dom: &SobolevDomain, basis: &[BasisFunction<f64>], per_panel: usize, panels: usize) -> Result<Self> {
        let dim = dom.dim();
        let b = dom.half_width();
        let rule = GaussLegendre::composite(per_panel, panels, -b, b)?;
        let q = rule.len();
        let total = q.checked_pow(dim as u32).ok_or_else(|| invalid("projection grid too large"))?;
        let m = basis.len();
        let mut nodes = Vec::with_capacity(total * dim);
        let mut weights = Vec::with_capacity(total);
        let mut values = Vec::with_capacity(total * m);
        let mut grads = Vec::with_capacity(total * m * dim);
        let mut idx = vec![0usize; dim];
        let mut z = vec![0.0; dim];
        let mut g = vec![0.0; dim];
        for _ in 0..total {
            let mut wt = 1.0;
            for j in 0..dim {
                z[j] = rule.nodes[idx[j]];
                wt *= rule.weights[idx[j]];
            }
            nodes.extend_from_slice(&z);
            weights.push(wt);
            for f in basis {
                values.push(f.value(z[0], &z[1..]));
                f.gradient(z[0], &z[1..], &mut g);
                grads.extend_from_slice(&g);
            }
            for j in (0..dim).rev() {
                idx[j] += 1;
                if idx[j] < q {
                    break;
                }
                idx[j] = 0;
            }
        }
        let l2 = basis.iter().map(|f| b.powi(dim as i32) * f.scale() * f.scale()).collect();
        Ok(Self { dim, m, nodes, weights, values, grads, l2 })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn modes(&self) -> usize {
        self.m
    }

    /// Coefficients of `g` on `span{f_b}` and the relative L² residual.
    pub fn project(&self, g: impl Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
        let mut coeff = vec![0.0; self.m];
        let mut norm2 = 0.0;
        for (node, &wt) in self.weights.iter().enumerate() {
            let v = g(&self.nodes[node * self.dim..(node + 1) * self.dim]);
            if v == 0.0 {
                continue;
            }
            norm2 += wt * v * v;
            for (c, &fb) in coeff.iter_mut().zip(&self.values[node * self.m..(node + 1) * self.m]) {
                *c += wt * v * fb;
            }
        }
        let mut captured = 0.0;
        for (c, l2) in coeff.iter_mut().zip(&self.l2) {
            *c /= l2;
            captured += *c * *c * l2;
        }
        let resid = if norm2 > 0.0 { ((norm2 - captured).max(0.0) / norm2).sqrt() } else { 0.0 };
        (coeff, resid)
    }
}

/// Time-independent projections entering `G(s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftProjections {
    pub m: usize,
    pub n_data: usize,
    /// `P_{m,a,b}`: coefficient on `f_b` of `b·(σ(w·x_m)∂_c f_a + cσ'(w·x_m)x_m·∇_w f_a)`.
    pub p: Vec<f64>,
    /// `S_{m,b}`: coefficient on `f_b` of `b·cσ(w·x_m)`.
    pub s: Vec<f64>,
    /// Relative L² residual of the projected pieces, per mode `a` (max over
    /// data points and over the `S` pieces).
    pub residual: Vec<f64>,
}

/// Computes the projections with the bump of `dom` applied.
pub fn drift_projections(
    proj: &Projector,
    dom: &SobolevDomain,
    dist: &DataDistribution<f64>,
    act: &Activation<f64>,
) -> Result<DriftProjections> {
    let (m, dim, nd) = (proj.m, proj.dim, dist.len());
    if dim != dist.dim() + 1 {
        return Err(Error::DimensionMismatch { expected: dim, got: dist.dim() + 1 });
    }
    let bump = dom.bump();
    let per_node = |node: usize| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; nd * m * m];
        let mut s = vec![0.0; nd * m];
        let mut gn = vec![0.0; nd * m];
        let mut sn = vec![0.0; nd];
        let z = &proj.nodes[node * dim..(node + 1) * dim];
        let bz = bump.eval(z);
        if bz == 0.0 {
            return (p, s, gn, sn);
        }
        let wt = proj.weights[node] * bz;
        let fv = &proj.values[node * m..(node + 1) * m];
        let fg = &proj.grads[node * m * dim..(node + 1) * m * dim];
        let (c, w) = (z[0], &z[1..]);
        for d in 0..nd {
            let x = dist.x(d);
            let u: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let (sig, dsig) = act.value_and_derivative(u);
            let cs = bz * c * sig;
            sn[d] += proj.weights[node] * cs * cs;
            for (b, &fb) in fv.iter().enumerate() {
                s[d * m + b] += proj.weights[node] * cs * fb;
            }
            for a in 0..m {
                let ga = &fg[a * dim..(a + 1) * dim];
                let xw: f64 = ga[1..].iter().zip(x).map(|(g, xv)| g * xv).sum();
                let v = sig * ga[0] + c * dsig * xw;
                gn[d * m + a] += wt * bz * v * v;
                let row = &mut p[(d * m + a) * m..(d * m + a + 1) * m];
                for (slot, &fb) in row.iter_mut().zip(fv) {
                    *slot += wt * v * fb;
                }
            }
        }
        (p, s, gn, sn)
    };
    // Fixed chunking keeps the reduction order independent of thread count.
    let chunk = 4096;
    let partials: Vec<_> = (0..proj.len().div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let mut acc = per_node(ci * chunk);
            for node in ci * chunk + 1..((ci + 1) * chunk).min(proj.len()) {
                let part = per_node(node);
                add_into(&mut acc.0, &part.0);
                add_into(&mut acc.1, &part.1);
                add_into(&mut acc.2, &part.2);
                add_into(&mut acc.3, &part.3);
            }
            acc
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut p, mut s, mut gn, mut sn) = iter.next().ok_or_else(|| invalid("empty projection grid"))?;
    for part in iter {
        add_into(&mut p, &part.0);
        add_into(&mut s, &part.1);
        add_into(&mut gn, &part.2);
        add_into(&mut sn, &part.3);
    }
    let mut residual = vec![0.0f64; m];
    let rel = |norm2: f64, coeffs: &[f64]| -> f64 {
        let captured: f64 = coeffs.iter().zip(&proj.l2).map(|(c, l)| c * c / l).sum();
        if norm2 > 0.0 {
            ((norm2 - captured).max(0.0) / norm2).sqrt()
        } else {
            0.0
        }
    };
    let s_resid: f64 = (0..nd).map(|d| rel(sn[d], &s[d * m..(d + 1) * m])).fold(0.0, f64::max);
    for d in 0..nd {
        for (a, slot) in residual.iter_mut().enumerate() {
            let r = rel(gn[d * m + a], &p[(d * m + a) * m..(d * m + a + 1) * m]);
            *slot = slot.max(r).max(s_resid);
        }
    }
    // Turn inner products into coefficients.
    for d in 0..nd {
        for a in 0..m {
            for b in 0..m {
                p[(d * m + a) * m + b] /= proj.l2[b];
            }
        }
        for b in 0..m {
            s[d * m + b] /= proj.l2[b];
        }
    }
    Ok(DriftProjections { m, n_data: nd, p, s, residual })
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

impl DriftProjections {
    /// `G(s)` at record index `j`:
    /// `G_ab = α Σ_m p_m [r_m P_{m,a,b} − K_{m,a} S_{m,b}]`.
    pub fn drift(&self, record: &GridRecord, j: usize, weights: &[f64], alpha: f64) -> Vec<f64> {
        let m = self.m;
        let mut g = vec![0.0; m * m];
        for (d, &p) in weights.iter().enumerate() {
            let r = record.r(j, d);
            for a in 0..m {
                let k = record.k(j, d, a);
                for b in 0..m {
                    g[a * m + b] += alpha * p * (r * self.p[(d * m + a) * m + b] - k * self.s[d * m + b]);
                }
            }
        }
        g
    }
}

/// Largest relative difference between two projection sets.
fn projection_gap(fine: &DriftProjections, coarse: &DriftProjections) -> f64 {
    let scale = fine.p.iter().chain(&fine.s).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    fine.p
        .iter()
        .zip(&coarse.p)
        .chain(fine.s.iter().zip(&coarse.s))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Quadrature controls for the drift projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGrid {
    pub per_panel: usize,
    pub panels: usize,
    /// Relative tolerance between this grid and one with half the panels.
    pub tolerance: f64,
    /// Mode residual above which a closure warning is attached.
    pub residual_warning: f64,
}

impl Default for ProjectionGrid {
    fn default() -> Self {
        Self { per_panel: 8, panels: 48, tolerance: 1e-6, residual_warning: 0.5 }
    }
}

/// Linear SDE `dh = G(s) h ds + dξ`, `Cov(dξ) = Q(s) ds`, `h(0) ~ N(0, Σ₀)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalerkinSystem {
    pub m: usize,
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    /// `G(t_j)` row-major, applied as `(G h)_a = Σ_b G_ab h_b`.
    pub drift: Vec<Vec<f64>>,
    pub sigma0: Vec<f64>,
    pub martingale: GaussianMartingaleModel,
    /// Per-mode projection residual (empty when assembled from parts).
    pub residual: Vec<f64>,
    pub warnings: Vec<String>,
}

impl GalerkinSystem {
    /// Assembles the system for the first `m` basis functions. `reference`
    /// must carry a record whose first `m` functions are `basis[..m]`.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        dom: &SobolevDomain,
        basis: &[BasisFunction<f64>],
        m: usize,
        reference: &MeanFieldTrajectory<f64>,
        dist: &DataDistribution<f64>,
        act: &Activation<f64>,
        alpha: f64,
        grid: ProjectionGrid,
    ) -> Result<Self> {
        if m == 0 || m > basis.len() {
            return Err(invalid(format!("need 1..={} Galerkin modes, got {m}", basis.len())));
        }
        let rec = reference.record()?;
        if rec.n_functions() < m || (0..m).any(|a| rec.labels[a] != basis[a].label()) {
            return Err(invalid("reference record does not track the Galerkin basis in order"));
        }
        let basis = &basis[..m];
        let proj = Projector::new(dom, basis, grid.per_panel, grid.panels)?;
        let fine = drift_projections(&proj, dom, dist, act)?;
        let coarse_proj = Projector::new(dom, basis, grid.per_panel, (grid.panels / 2).max(1))?;
        let coarse = drift_projections(&coarse_proj, dom, dist, act)?;
        let mut warnings = Vec::new();
        let gap = projection_gap(&fine, &coarse);
        if gap > grid.tolerance {
            warnings.push(format!(
                "projection quadrature unresolved: halving the panels changes coefficients by {gap:.2e} (tolerance {:.0e})",
                grid.tolerance
            ));
        }
        for (a, &r) in fine.residual.iter().enumerate() {
            if r > grid.residual_warning {
                warnings.push(format!("mode {} closure residual {r:.3}", basis[a].label()));
            }
        }
        let weights: Vec<f64> = dist.weights().to_vec();
        let drift = (0..rec.len()).map(|j| fine.drift(rec, j, &weights, alpha)).collect();
        let kernel = RKernel::new(rec, dist, alpha)?;
        let fs: Vec<usize> = (0..m).collect();
        let martingale = GaussianMartingaleModel::build(&kernel, &fs)?;
        let refs: Vec<&dyn TestFunction<f64>> = basis.iter().map(|f| f as &dyn TestFunction<f64>).collect();
        let sigma0 = initial_covariance(reference.snapshot_at(0.0)?, &refs);
        Ok(Self {
            m,
            labels: basis.iter().map(|f| f.label()).collect(),
            times: rec.times.clone(),
            drift,
            sigma0,
            martingale,
            residual: fine.residual,
            warnings,
        })
    }

    /// System from explicit matrices on a uniform grid.
    pub fn from_parts(
        times: Vec<f64>,
        drift: Vec<Vec<f64>>,
        sigma0: Vec<f64>,
        rates: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = (sigma0.len() as f64).sqrt().round() as usize;
        if m * m != sigma0.len() || times.len() < 2 || drift.len() != times.len() || rates.len() != times.len() {
            return Err(invalid("inconsistent Galerkin system parts"));
        }
        if drift.iter().chain(&rates).any(|v| v.len() != m * m) {
            return Err(Error::DimensionMismatch { expected: m * m, got: 0 });
        }
        let mut accumulated = vec![vec![0.0; m * m]];
        for j in 1..times.len() {
            let dt = times[j] - times[j - 1];
            let next = accumulated[j - 1]
                .iter()
                .zip(rates[j - 1].iter().zip(&rates[j]))
                .map(|(c, (a, b))| c + 0.5 * dt * (a + b))
                .collect();
            accumulated.push(next);
        }
        let labels: Vec<String> = (0..m).map(|a| format!("h{a}")).collect();
        Ok(Self {
            m,
            labels: labels.clone(),
            times: times.clone(),
            drift,
            sigma0,
            martingale: GaussianMartingaleModel { labels, times, k: m, rates, accumulated },
            residual: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Leading `k` modes of the system (the drift restricted to them).
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.m {
            return Err(invalid("truncation must keep between 1 and m modes"));
        }
        let sub = |v: &[f64]| -> Vec<f64> { (0..k).flat_map(|a| (0..k).map(move |b| v[a * self.m + b])).collect() };
        let mut out = Self::from_parts(
            self.times.clone(),
            self.drift.iter().map(|g| sub(g)).collect(),
            sub(&self.sigma0),
            self.martingale.rates.iter().map(|q| sub(q)).collect(),
        )?;
        out.labels = self.labels[..k].to_vec();
        out.martingale.labels = out.labels.clone();
        out.residual = self.residual.iter().take(k).copied().collect();
        out.warnings = self.warnings.clone();
        Ok(out)
    }
}

/// Simulated coefficient paths at the requested output times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdePaths {
    pub m: usize,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// `h_a(t)` at `[(path * times.len() + ti) * m + a]`.
    pub values: Vec<f64>,
}

impl SpdePaths {
    pub fn get(&self, path: usize, ti: usize, a: usize) -> f64 {
        self.values[(path * self.times.len() + ti) * self.m + a]
    }

    /// Covariance of the leading `k` coefficients across paths at `t`.
    pub fn covariance(&self, t: f64, k: usize) -> Result<CovarianceEstimate> {
        let ti = grid_index(&self.times, t)?;
        if k > self.m {
            return Err(invalid("more coefficients requested than simulated"));
        }
        let rows: Vec<Vec<f64>> = (0..self.n_paths).map(|p| (0..k).map(|a| self.get(p, ti, a)).collect()).collect();
        covariance_with_jackknife(&rows)
    }
}

/// Euler–Maruyama paths of `system`. `dt` must divide the grid spacing;
/// `G` and `Q` are held at their left grid values within each interval.
pub fn simulate_spde(
    system: &GalerkinSystem,
    n_paths: usize,
    dt: f64,
    seed: u64,
    output_times: &[f64],
) -> Result<SpdePaths> {
    let times = &system.times;
    let m = system.m;
    if n_paths == 0 {
        return Err(invalid("need at least one path"));
    }
    let h = times[1] - times[0];
    let sub = (h / dt).round();
    if !(dt > 0.0) || sub < 1.0 || (sub * dt - h).abs() > 1e-9 * h {
        return Err(invalid(format!("dt = {dt} must divide the grid spacing {h}")));
    }
    let sub = sub as usize;
    let out_idx = output_times.iter().map(|&t| grid_index(times, t)).collect::<Result<Vec<_>>>()?;
    let root0 = psd_sqrt(m, &system.sigma0)?;
    let noise_roots = system
        .martingale
        .rates
        .iter()
        .map(|q| psd_sqrt(m, &q.iter().map(|v| v * dt).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let last = out_idx.iter().copied().max().unwrap_or(0);
    let nt = output_times.len();
    let path = |p: usize| -> Vec<f64> {
        let mut rng = stream(seed, Purpose::SpdePaths, m as u64, p as u64);
        let mut xi = vec![0.0; m];
        let mut hcur = vec![0.0; m];
        let mut next = vec![0.0; m];
        let mut out = vec![0.0; nt * m];
        xi.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        mat_vec(&root0, &xi, &mut hcur);
        let record = |j: usize, hcur: &[f64], out: &mut [f64]| {
            for (ti, &oj) in out_idx.iter().enumerate() {
                if oj == j {
                    out[ti * m..(ti + 1) * m].copy_from_slice(hcur);
                }
            }
        };
        record(0, &hcur, &mut out);
        for j in 0..last {
            let (g, root) = (&system.drift[j], &noise_roots[j]);
            for _ in 0..sub {
                xi.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
                mat_vec(root, &xi, &mut next);
                for a in 0..m {
                    let gh: f64 = (0..m).map(|b| g[a * m + b] * hcur[b]).sum();
                    next[a] += hcur[a] + dt * gh;
                }
                std::mem::swap(&mut hcur, &mut next);
            }
            record(j + 1, &hcur, &mut out);
        }
        out
    };
    let values: Vec<f64> = (0..n_paths).into_par_iter().map(path).collect::<Vec<_>>().concat();
    Ok(SpdePaths { m, times: output_times.to_vec(), n_paths, dt, seed, values })
}

fn mat_vec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let m = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..m).map(|j| a[i * m + j] * x[j]).sum();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::{integrate_meanfield_with, MeanFieldOptions};
    use crate::model::{ConstantFn, FnTest, InitLaw};
    use crate::testkit::three_point;
    use std::sync::Arc;

    fn domain() -> SobolevDomain {
        SobolevDomain::new(2, 1.25, 6).unwrap()
    }

    fn reference(
        m: usize,
        alpha: f64,
        dist: &DataDistribution<f64>,
        fs: Vec<Arc<dyn TestFunction<f64>>>,
        horizon: f64,
    ) -> MeanFieldTrajectory<f64> {
        let mut rng = stream(5, Purpose::Reference, m as u64, 0);
        let law = InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) };
        let init = ParticleEnsemble::sample(&law, m, 1, &mut rng).unwrap();
        let mut opts = MeanFieldOptions::new(1e-2, vec![0.0, horizon]);
        opts.record = Some(fs);
        integrate_meanfield_with(&init, dist, alpha, &Activation::Tanh, horizon, &opts).unwrap()
    }

    fn arcs(basis: &[BasisFunction<f64>]) -> Vec<Arc<dyn TestFunction<f64>>> {
        basis.iter().map(|b| Arc::new(b.clone()) as Arc<dyn TestFunction<f64>>).collect()
    }

    #[test]
    fn r_eval_trivial_and_hand_cases() {
        let dist = three_point();
        let refr = reference(500, 1.0, &dist, vec![Arc::new(ConstantFn(1.0))], 0.5);
        let act = Activation::Tanh;
        assert_eq!(r_eval(&refr, &act, 0.0, &ConstantFn(2.0), &[0.3], 0.1).unwrap(), 0.0);
        let ens = refr.snapshot_at(0.0).unwrap();
        let g = to_f64(network_eval(ens, &[0.3], &act).unwrap());
        let f = FnTest::coefficient();
        assert!(r_eval(&refr, &act, 0.0, &f, &[0.3], g).unwrap().abs() < 1e-15);
        assert!(r_eval(&refr, &act, 0.2, &f, &[0.3], g).is_err());
        let single = ParticleEnsemble::new(vec![0.7], vec![-0.4], 1).unwrap();
        let s = (-0.4f64 * 1.3).tanh();
        let hand = (0.9 - 0.7 * s) * s;
        assert!((r_on(&single, &act, &f, &[1.3], 0.9).unwrap() - hand).abs() < 1e-15);
    }

    #[test]
    fn r_is_linear_in_the_test_function() {
        let dist = three_point();
        let refr = reference(800, 1.0, &dist, vec![Arc::new(ConstantFn(1.0))], 0.5);
        let b = domain().leading_basis::<f64>(2);
        let (f1, f2) = (b[0].clone(), b[1].clone());
        let (g1, g2) = (f1.clone(), f2.clone());
        let comb = FnTest::new(
            "comb",
            move |c, w| 2.5 * f1.value(c, w) + f2.value(c, w),
            move |c, w, g| {
                let mut a = [0.0; 2];
                let mut bb = [0.0; 2];
                g1.gradient(c, w, &mut a);
                g2.gradient(c, w, &mut bb);
                g[0] = 2.5 * a[0] + bb[0];
                g[1] = 2.5 * a[1] + bb[1];
            },
        );
        let act = Activation::Tanh;
        let lhs = r_eval(&refr, &act, 0.5, &comb, &[0.3], -0.4).unwrap();
        let rhs = 2.5 * r_eval(&refr, &act, 0.5, &b[0], &[0.3], -0.4).unwrap()
            + r_eval(&refr, &act, 0.5, &b[1], &[0.3], -0.4).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn martingale_covariance_properties() {
        let dist = three_point();
        let basis = domain().leading_basis::<f64>(3);
        let refr = reference(1000, 1.0, &dist, arcs(&basis), 1.0);
        let k = RKernel::new(refr.record().unwrap(), &dist, 1.0).unwrap();
        assert_eq!(k.martingale_covariance(0.0, 0, 1).unwrap(), 0.0);
        for f in 0..3 {
            assert!(k.martingale_covariance(1.0, f, f).unwrap() >= 0.0);
            for g in 0..3 {
                let a = k.martingale_covariance(1.0, f, g).unwrap();
                let b = k.martingale_covariance(1.0, g, f).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
        let model = GaussianMartingaleModel::build(&k, &[0, 1, 2]).unwrap();
        assert!((model.covariance_at(1.0).unwrap()[1] - k.martingale_covariance(1.0, 0, 1).unwrap()).abs() < 1e-15);
        for j in 1..model.times.len() {
            let diff: Vec<f64> =
                model.accumulated[j].iter().zip(&model.accumulated[j - 1]).map(|(a, b)| a - b).collect();
            assert!(min_eigenvalue(3, &diff) >= -PSD_TOL);
        }
        let single = DataDistribution::new(1, vec![(vec![0.4], 0.2)], vec![1.0], None).unwrap();
        let refr1 = reference(300, 1.0, &single, arcs(&basis), 1.0);
        let k1 = RKernel::new(refr1.record().unwrap(), &single, 1.0).unwrap();
        assert_eq!(k1.martingale_covariance(1.0, 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn psd_square_root_and_clamping() {
        let m = [4.0, 2.0, 2.0, 3.0];
        let r = psd_sqrt(2, &m).unwrap();
        let back = [
            r[0] * r[0] + r[1] * r[2],
            r[0] * r[1] + r[1] * r[3],
            r[2] * r[0] + r[3] * r[2],
            r[2] * r[1] + r[3] * r[3],
        ];
        for (a, b) in back.iter().zip(&m) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(psd_sqrt(2, &[1.0, 0.0, 0.0, -5e-11]).is_ok());
        assert!(matches!(psd_sqrt(2, &[1.0, 0.0, 0.0, -1e-6]), Err(Error::Model(_))));
    }

    #[test]
    fn projection_recovers_functions_in_the_span() {
        let dom = domain();
        let basis = dom.leading_basis::<f64>(6);
        let proj = Projector::new(&dom, &basis, 8, 16).unwrap();
        let (b1, b3) = (basis[1].clone(), basis[3].clone());
        let (coeff, resid) = proj.project(|z| 2.0 * b1.value(z[0], &z[1..]) - 0.5 * b3.value(z[0], &z[1..]));
        let want = [0.0, 2.0, 0.0, -0.5, 0.0, 0.0];
        for (c, w) in coeff.iter().zip(&want) {
            assert!((c - w).abs() < 1e-6, "{coeff:?}");
        }
        assert!(resid < 1e-6);
    }

    #[test]
    fn frozen_dynamics_give_zero_drift_and_noise() {
        let dist = three_point();
        let dom = domain();
        let basis = dom.leading_basis::<f64>(4);
        let refr = reference(500, 0.0, &dist, arcs(&basis), 1.0);
        let grid = ProjectionGrid { panels: 16, ..Default::default() };
        let sys = GalerkinSystem::assemble(&dom, &basis, 4, &refr, &dist, &Activation::Tanh, 0.0, grid).unwrap();
        assert!(sys.drift.iter().flatten().all(|&v| v == 0.0));
        assert!(sys.martingale.rates.iter().flatten().all(|&v| v == 0.0));
        assert!(min_eigenvalue(4, &sys.sigma0) >= -PSD_TOL);
        let paths = simulate_spde(&sys, 50, 1e-2, 3, &[0.0, 0.5, 1.0]).unwrap();
        for p in 0..50 {
            for a in 0..4 {
                assert_eq!(paths.get(p, 0, a), paths.get(p, 2, a));
            }
        }
    }

    #[test]
    fn degenerate_state_gives_zero_lowest_row() {
        let dist = DataDistribution::new(
            1,
            vec![(vec![-1.0], 0.0), (vec![0.3], 0.0), (vec![1.2], 0.0)],
            vec![0.3, 0.3, 0.4],
            None,
        )
        .unwrap();
        let dom = domain();
        let basis = dom.leading_basis::<f64>(4);
        let w = crate::testkit::ensemble(300, 8).w_flat().to_vec();
        let init = ParticleEnsemble::new(vec![0.0; 300], w, 1).unwrap();
        let mut opts = MeanFieldOptions::new(1e-2, vec![0.0]);
        opts.record = Some(arcs(&basis));
        let refr = integrate_meanfield_with(&init, &dist, 1.0, &Activation::Tanh, 0.1, &opts).unwrap();
        let grid = ProjectionGrid { panels: 16, ..Default::default() };
        let sys = GalerkinSystem::assemble(&dom, &basis, 4, &refr, &dist, &Activation::Tanh, 1.0, grid).unwrap();
        assert_eq!(basis[0].index(), &[1, 1]);
        for v in &sys.drift[0][..4] {
            assert!(v.abs() < 1e-14, "{:?}", &sys.drift[0][..4]);
        }
    }

    #[test]
    fn linear_ode_oracle_without_noise() {
        let times: Vec<f64> = (0..=100).map(|j| j as f64 * 1e-2).collect();
        let lam = [-0.8, 0.5];
        let g = vec![lam[0], 0.0, 0.0, lam[1]];
        let sys = GalerkinSystem::from_parts(
            times.clone(),
            vec![g; 101],
            vec![1.0, 0.3, 0.3, 0.5],
            vec![vec![0.0; 4]; 101],
        )
        .unwrap();
        let start = simulate_spde(&sys, 20, 1e-3, 4, &[0.0]).unwrap();
        let end = simulate_spde(&sys, 20, 1e-3, 4, &[1.0]).unwrap();
        for p in 0..20 {
            for a in 0..2 {
                let exact = start.get(p, 0, a) * lam[a].exp();
                assert!((end.get(p, 0, a) - exact).abs() < 2e-3 * start.get(p, 0, a).abs().max(1.0));
            }
        }
        assert!(simulate_spde(&sys, 20, 3e-3, 4, &[1.0]).is_err());
    }

    #[test]
    fn driftless_covariance_matches_analytic() {
        let times: Vec<f64> = (0..=50).map(|j| j as f64 * 2e-2).collect();
        let q: Vec<Vec<f64>> = times
            .iter()
            .map(|t| vec![1.0 + t, 0.4, 0.4, 0.5])
            .collect();
        let sys = GalerkinSystem::from_parts(times, vec![vec![0.0; 4]; 51], vec![0.6, -0.1, -0.1, 0.3], q).unwrap();
        let paths = simulate_spde(&sys, 10_000, 1e-2, 11, &[1.0]).unwrap();
        let cov = paths.covariance(1.0, 2).unwrap();
        // Piecewise-constant left values: ∫Q = [1 + Σ t_j Δt, 0.4, 0.4, 0.5].
        let left: f64 = (0..50).map(|j| j as f64 * 2e-2 * 2e-2).sum();
        let exact = [0.6 + 1.0 + left, 0.3, 0.3, 0.8];
        for i in 0..4 {
            assert!((cov.cov[i] - exact[i]).abs() < 3.0 * cov.se[i], "{i}: {} vs {}", cov.cov[i], exact[i]);
        }
    }

    #[test]
    fn simulation_is_deterministic_given_seed() {
        let times: Vec<f64> = (0..=10).map(|j| j as f64 * 0.1).collect();
        let sys = GalerkinSystem::from_parts(
            times,
            vec![vec![-0.1, 0.2, 0.0, -0.3]; 11],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![vec![0.2, 0.0, 0.0, 0.1]; 11],
        )
        .unwrap();
        let a = simulate_spde(&sys, 64, 0.05, 9, &[0.5, 1.0]).unwrap();
        let b = simulate_spde(&sys, 64, 0.05, 9, &[0.5, 1.0]).unwrap();
        assert_eq!(a, b);
        let c = simulate_spde(&sys, 64, 0.05, 10, &[0.5, 1.0]).unwrap();
        assert_ne!(a.values, c.values);
        let t = sys.truncate(1).unwrap();
        assert_eq!(t.m, 1);
        assert_eq!(t.drift[0], vec![-0.1]);
    }
}
