//! Sobolev machinery on the box `Θ = (−B, B)^D`: tensor sine basis of
//! `W₀^{J,2}(Θ)` with closed-form norms, the smooth cutoff, pairings against
//! signed particle measures and truncated dual norms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ParticleEnsemble, SineMode, TestFunction};
use crate::quadrature::GaussLegendre;
use crate::scalar::{lit, to_f64, CompensatedSum, Scalar};

/// Box half-width factor: `B = 3 √D C_o`.
const BOX_FACTOR: f64 = 3.0;

/// The box and smoothness order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevDomain {
    dim: usize,
    c_o: f64,
    half_width: f64,
    j: usize,
}

impl SobolevDomain {
    /// Safety factor applied to observed parameter bounds.
    pub const INFLATION: f64 = 1.25;

    /// Domain of dimension `dim = d + 1` with support radius `c_o`.
    pub fn new(dim: usize, c_o: f64, j: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("Sobolev domain needs dimension >= 1"));
        }
        if !(c_o.is_finite() && c_o > 0.0) {
            return Err(invalid(format!("support radius must be positive and finite, got {c_o}")));
        }
        Ok(Self {
            dim,
            c_o,
            half_width: BOX_FACTOR * (dim as f64).sqrt() * c_o,
            j,
        })
    }

    /// `C_o = 1.25 · max(bounds)`; `bounds` typically holds the initial-law
    /// support bound and the largest observed coordinate of pilot runs.
    pub fn from_bounds(dim: usize, bounds: &[f64], j: usize) -> Result<Self> {
        let m = bounds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if bounds.is_empty() || !m.is_finite() {
            return Err(invalid("no finite parameter bound supplied"));
        }
        Self::new(dim, Self::INFLATION * m, j)
    }

    /// Reporting order `3⌈D/2⌉ + 7`.
    pub fn default_j(dim: usize) -> usize {
        3 * dim.div_ceil(2) + 7
    }

    /// Diagnostic order `J₁ = 2⌈D/2⌉ + 4`.
    pub fn diagnostic_j(dim: usize) -> usize {
        2 * dim.div_ceil(2) + 4
    }

    pub fn with_j(&self, j: usize) -> Self {
        Self { j, ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn c_o(&self) -> f64 {
        self.c_o
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn j(&self) -> usize {
        self.j
    }

    /// Bump equal to one on `K = [−C_o, C_o]^D` (radius `√D C_o`).
    pub fn bump(&self) -> BumpFunction {
        BumpFunction::new((self.dim as f64).sqrt() * self.c_o)
    }

    fn check_index(&self, a: &[u32]) -> Result<()> {
        if a.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: a.len() });
        }
        if a.contains(&0) {
            return Err(invalid("multi-index entries must be positive"));
        }
        Ok(())
    }

    fn omegas(&self, a: &[u32]) -> Vec<f64> {
        a.iter().map(|&aj| aj as f64 * PI / (2.0 * self.half_width)).collect()
    }

    /// `‖e_a‖_L` for smoothness order `l` (closed form).
    pub fn norm_of_order(&self, a: &[u32], l: usize) -> f64 {
        let factors: Vec<Vec<f64>> = self
            .omegas(a)
            .iter()
            .map(|&om| (0..=l).map(|k| self.half_width * om.powi(2 * k as i32)).collect())
            .collect();
        simplex_sum(&factors, l).sqrt()
    }

    /// Support check of an ensemble against `K` and `Θ`.
    pub fn check_support<T: Scalar>(&self, ens: &ParticleEnsemble<T>) -> SupportReport {
        let mut rep = SupportReport::default();
        for i in 0..ens.len() {
            let m = std::iter::once(ens.c()[i])
                .chain(ens.w(i).iter().copied())
                .map(|z| to_f64(z).abs())
                .fold(0.0, f64::max);
            rep.max_coordinate = rep.max_coordinate.max(m);
            if m > self.c_o {
                rep.outside_k += 1;
            }
            if m >= self.half_width {
                rep.outside_box += 1;
            }
        }
        rep
    }

    /// Normalized basis element `e_a / ‖e_a‖_J`.
    pub fn basis<T: Scalar>(&self, a: Vec<u32>) -> Result<BasisFunction<T>> {
        self.check_index(&a)?;
        let norm = self.norm_of_order(&a, self.j);
        Ok(BasisFunction::build(a, self.half_width, norm, true))
    }

    /// Unnormalized `e_a`.
    pub fn raw_basis<T: Scalar>(&self, a: Vec<u32>) -> Result<BasisFunction<T>> {
        self.check_index(&a)?;
        let norm = self.norm_of_order(&a, self.j);
        Ok(BasisFunction::build(a, self.half_width, norm, false))
    }

    /// First `m` normalized elements in the canonical order.
    pub fn leading_basis<T: Scalar>(&self, m: usize) -> Vec<BasisFunction<T>> {
        multi_indices(self.dim, m)
            .into_iter()
            .map(|a| {
                let norm = self.norm_of_order(&a, self.j);
                BasisFunction::build(a, self.half_width, norm, true)
            })
            .collect()
    }
}

/// Outcome of a support check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    /// Particles with some coordinate beyond `C_o`.
    pub outside_k: usize,
    /// Particles on or beyond `∂Θ`.
    pub outside_box: usize,
    pub max_coordinate: f64,
}

impl SupportReport {
    pub fn clean(&self) -> bool {
        self.outside_k == 0 && self.outside_box == 0
    }
}

/// `Σ_{|k| ≤ order} Π_j factors[j][k_j]` by truncated polynomial products.
fn simplex_sum(factors: &[Vec<f64>], order: usize) -> f64 {
    let mut poly = vec![0.0; order + 1];
    poly[0] = 1.0;
    for f in factors {
        let mut next = vec![0.0; order + 1];
        for (deg, &p) in poly.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (k, &fk) in f.iter().enumerate().take(order + 1 - deg) {
                next[deg + k] += p * fk;
            }
        }
        poly = next;
    }
    poly.iter().sum()
}

/// Closed-form `‖e_a‖_J` on `dom`.
pub fn basis_norm(a: &[u32], dom: &SobolevDomain) -> Result<f64> {
    dom.check_index(a)?;
    Ok(dom.norm_of_order(a, dom.j))
}

/// All positive multi-indices ordered by `Σ a_j²`, then lexicographically;
/// returns the first `count`.
pub fn multi_indices(dim: usize, count: usize) -> Vec<Vec<u32>> {
    if count == 0 || dim == 0 {
        return Vec::new();
    }
    let mut side = (count as f64).powf(1.0 / dim as f64).ceil().max(1.0) as u32;
    loop {
        let mut all = box_indices(dim, side);
        all.sort_by(|x, y| sq(x).cmp(&sq(y)).then_with(|| x.cmp(y)));
        all.truncate(count);
        // Any index leaving the box has Σa² ≥ (side+1)² + dim − 1.
        let outside = (side as u64 + 1).pow(2) + dim as u64 - 1;
        if all.len() == count && sq(all.last().unwrap()) < outside {
            return all;
        }
        side += 1;
    }
}

fn sq(a: &[u32]) -> u64 {
    a.iter().map(|&x| (x as u64).pow(2)).sum()
}

/// `{1..=side}^dim` in lexicographic order.
fn box_indices(dim: usize, side: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![1u32; dim];
    loop {
        out.push(cur.clone());
        let mut j = dim;
        loop {
            if j == 0 {
                return out;
            }
            j -= 1;
            if cur[j] < side {
                cur[j] += 1;
                cur[j + 1..].iter_mut().for_each(|x| *x = 1);
                break;
            }
        }
    }
}

/// Tensor sine element `e_a(z) = Π_j sin(a_j π (z_j + B)/(2B))`, optionally
/// divided by `‖e_a‖_J`.
#[derive(Clone, Debug)]
pub struct BasisFunction<T: Scalar> {
    a: Vec<u32>,
    norm: f64,
    normalized: bool,
    mode: SineMode<T>,
}

impl<T: Scalar> BasisFunction<T> {
    fn build(a: Vec<u32>, half_width: f64, norm: f64, normalized: bool) -> Self {
        let scale = if normalized { 1.0 / norm } else { 1.0 };
        let mode = SineMode { half_width: lit(half_width), a: a.clone(), scale: lit(scale) };
        Self { a, norm, normalized, mode }
    }

    pub fn index(&self) -> &[u32] {
        &self.a
    }

    /// `‖e_a‖_J` of the underlying unnormalized element.
    pub fn sobolev_norm(&self) -> f64 {
        self.norm
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn scale(&self) -> f64 {
        to_f64(self.mode.scale)
    }

    /// Evaluation at a point `z = (c, w)` given as one slice.
    pub fn eval_point(&self, z: &[T]) -> T {
        self.mode.eval(z[0], &z[1..])
    }

    /// Same basis element in another scalar type.
    pub fn cast<U: Scalar>(&self) -> BasisFunction<U> {
        BasisFunction::build(self.a.clone(), to_f64(self.mode.half_width), self.norm, self.normalized)
    }
}

impl<T: Scalar> TestFunction<T> for BasisFunction<T> {
    fn value(&self, c: T, w: &[T]) -> T {
        self.mode.eval(c, w)
    }

    fn gradient(&self, c: T, w: &[T], grad: &mut [T]) {
        self.mode.eval_gradient(c, w, grad)
    }

    fn hessian(&self, c: T, w: &[T], hess: &mut [T]) {
        self.mode.eval_hessian(c, w, hess)
    }

    fn label(&self) -> String {
        let idx: Vec<String> = self.a.iter().map(u32::to_string).collect();
        format!("{}[{}]", if self.normalized { "f" } else { "e" }, idx.join(","))
    }

    fn sine_mode(&self) -> Option<&SineMode<T>> {
        Some(&self.mode)
    }
}

fn bump_h(v: f64) -> f64 {
    if v > 0.0 {
        (-1.0 / (v * v)).exp()
    } else {
        0.0
    }
}

fn bump_dh(v: f64) -> f64 {
    if v > 0.0 {
        2.0 / (v * v * v) * bump_h(v)
    } else {
        0.0
    }
}

/// Smooth cutoff: one on `‖z‖ ≤ r`, zero on `‖z‖ ≥ 2r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpFunction {
    pub r: f64,
}

impl BumpFunction {
    pub fn new(r: f64) -> Self {
        Self { r }
    }

    /// Profile as a function of `ρ = ‖z‖ / r`.
    pub fn radial(&self, rho: f64) -> f64 {
        if rho <= 1.0 {
            1.0
        } else if rho >= 2.0 {
            0.0
        } else {
            let (lo, hi) = (bump_h(rho - 1.0), bump_h(2.0 - rho));
            hi / (lo + hi)
        }
    }

    /// `d/dρ` of the profile.
    pub fn radial_derivative(&self, rho: f64) -> f64 {
        if rho <= 1.0 || rho >= 2.0 {
            return 0.0;
        }
        let (lo, hi) = (bump_h(rho - 1.0), bump_h(2.0 - rho));
        let (dlo, dhi) = (bump_dh(rho - 1.0), bump_dh(2.0 - rho));
        -(dhi * lo + hi * dlo) / ((lo + hi) * (lo + hi))
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.radial(z.iter().map(|x| x * x).sum::<f64>().sqrt() / self.r)
    }

    /// Writes `∇b(z)`.
    pub fn gradient(&self, z: &[f64], grad: &mut [f64]) {
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d = if norm > 0.0 { self.radial_derivative(norm / self.r) } else { 0.0 };
        for (g, &x) in grad.iter_mut().zip(z) {
            *g = if d == 0.0 { 0.0 } else { d * x / (self.r * norm) };
        }
    }
}

/// `b(z)` for bump `b`.
pub fn bump_eval(b: &BumpFunction, z: &[f64]) -> f64 {
    b.eval(z)
}

/// `b · f` as a test function.
#[derive(Clone, Debug)]
pub struct Bumped<F> {
    pub bump: BumpFunction,
    pub inner: F,
}

impl<F: TestFunction<f64>> TestFunction<f64> for Bumped<F> {
    fn value(&self, c: f64, w: &[f64]) -> f64 {
        let z: Vec<f64> = std::iter::once(c).chain(w.iter().copied()).collect();
        self.bump.eval(&z) * self.inner.value(c, w)
    }

    fn gradient(&self, c: f64, w: &[f64], grad: &mut [f64]) {
        let z: Vec<f64> = std::iter::once(c).chain(w.iter().copied()).collect();
        let mut gb = vec![0.0; z.len()];
        self.bump.gradient(&z, &mut gb);
        self.inner.gradient(c, w, grad);
        let (b, f) = (self.bump.eval(&z), self.inner.value(c, w));
        for (g, gbj) in grad.iter_mut().zip(&gb) {
            *g = b * *g + f * gbj;
        }
    }

    fn label(&self) -> String {
        format!("bump*{}", self.inner.label())
    }
}

/// Finite signed combination of point masses on `ℝ^D`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SignedMeasure {
    dim: usize,
    weights: Vec<f64>,
    coords: Vec<f64>,
}

impl SignedMeasure {
    pub fn zero(dim: usize) -> Self {
        Self { dim, weights: Vec::new(), coords: Vec::new() }
    }

    /// `weight · δ_z`.
    pub fn point(z: &[f64], weight: f64) -> Self {
        let mut m = Self::zero(z.len());
        m.add_point(z, weight);
        m
    }

    pub fn add_point(&mut self, z: &[f64], weight: f64) {
        assert_eq!(z.len(), self.dim, "point dimension");
        self.weights.push(weight);
        self.coords.extend_from_slice(z);
    }

    /// Adds `scale · ν` where `ν` is the empirical measure of `ens`.
    pub fn add_ensemble<T: Scalar>(&mut self, ens: &ParticleEnsemble<T>, scale: f64) -> Result<()> {
        if ens.dim() + 1 != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: ens.dim() + 1 });
        }
        let wgt = scale / ens.len() as f64;
        for i in 0..ens.len() {
            self.weights.push(wgt);
            self.coords.push(to_f64(ens.c()[i]));
            self.coords.extend(ens.w(i).iter().map(|&x| to_f64(x)));
        }
        Ok(())
    }

    /// `scale · (ν_a − ν_b)`. For ensembles of equal size, particle pairs
    /// with the same index and identical coordinates cancel exactly.
    pub fn difference<T: Scalar>(a: &ParticleEnsemble<T>, b: &ParticleEnsemble<T>, scale: f64) -> Result<Self> {
        if a.len() != b.len() || a.dim() != b.dim() {
            let mut m = Self::zero(a.dim() + 1);
            m.add_ensemble(a, scale)?;
            m.add_ensemble(b, -scale)?;
            return Ok(m);
        }
        let mut m = Self::zero(a.dim() + 1);
        let wgt = scale / a.len() as f64;
        let mut z = vec![0.0; a.dim() + 1];
        for i in 0..a.len() {
            if a.c()[i] == b.c()[i] && a.w(i) == b.w(i) {
                continue;
            }
            for (src, sign) in [(a, 1.0), (b, -1.0)] {
                z[0] = to_f64(src.c()[i]);
                for (zj, &x) in z[1..].iter_mut().zip(src.w(i)) {
                    *zj = to_f64(x);
                }
                m.add_point(&z, sign * wgt);
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> usize {
        self.weights.len()
    }

    pub fn total_variation(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    fn atom(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// `⟨f, η⟩` for a general test function.
    pub fn pair<F: TestFunction<f64> + ?Sized>(&self, f: &F) -> f64 {
        let mut acc = CompensatedSum::new();
        for (i, &wt) in self.weights.iter().enumerate() {
            let z = self.atom(i);
            acc.add(wt * f.value(z[0], &z[1..]));
        }
        acc.value()
    }
}

/// Pairing value and the number of atoms found outside `Θ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub value: f64,
    pub outside_box: usize,
}

/// `⟨f_a, η⟩` by an exact atom sum. Atoms outside `Θ` are counted; the
/// pairing still uses the global sine formula.
pub fn measure_pairing(eta: &SignedMeasure, f: &BasisFunction<f64>, dom: &SobolevDomain) -> Result<PairingReport> {
    if eta.dim() != dom.dim() || f.index().len() != dom.dim() {
        return Err(Error::DimensionMismatch { expected: dom.dim(), got: eta.dim() });
    }
    let outside_box = (0..eta.atoms())
        .filter(|&i| eta.atom(i).iter().any(|z| z.abs() >= dom.half_width()))
        .count();
    Ok(PairingReport { value: eta.pair(f), outside_box })
}

/// Truncated dual norm with its tail bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualNormReport {
    /// `(Σ_{a ≤ A_max} ⟨e_a/‖e_a‖_J, η⟩²)^{1/2}`, a lower bound of `‖η‖_{−J}`.
    pub value: f64,
    pub j: usize,
    pub a_max: usize,
    /// Upper bound on the omitted squared terms (infinite when `2J ≤ D`).
    pub tail_sq_bound: f64,
}

impl DualNormReport {
    /// `(value² + tail)^{1/2}`, an upper bound of `‖η‖_{−J}`.
    pub fn upper(&self) -> f64 {
        (self.value * self.value + self.tail_sq_bound).sqrt()
    }
}

/// Per-axis sine values `sin(a θ)` for `a = 1..=a_max`.
fn sine_table(theta: f64, a_max: usize, out: &mut [f64]) {
    let (s1, c1) = theta.sin_cos();
    let (mut s0, mut s) = (0.0, s1);
    for slot in out.iter_mut().take(a_max) {
        *slot = s;
        let next = 2.0 * c1 * s - s0;
        s0 = s;
        s = next;
    }
}

/// Squared `‖e_a‖_J` for every `a ∈ {1..=a_max}^D`, row-major with the last
/// axis fastest.
fn norm_table(dom: &SobolevDomain, a_max: usize) -> Vec<f64> {
    box_indices(dom.dim(), a_max as u32)
        .iter()
        .map(|a| dom.norm_of_order(a, dom.j()).powi(2))
        .collect()
}

/// Parseval estimate of `‖η‖_{−J}` over `a ∈ {1..=A_max}^D`.
pub fn dual_norm_truncated(eta: &SignedMeasure, dom: &SobolevDomain, a_max: usize) -> Result<DualNormReport> {
    if a_max == 0 {
        return Err(invalid("A_max must be at least 1"));
    }
    if eta.dim() != dom.dim() {
        return Err(Error::DimensionMismatch { expected: dom.dim(), got: eta.dim() });
    }
    let dim = dom.dim();
    let size = a_max.checked_pow(dim as u32).ok_or_else(|| invalid("truncation grid too large"))?;
    let b = dom.half_width();
    let mut coeff = vec![0.0; size];
    let mut tables = vec![0.0; dim * a_max];
    let mut tensor = vec![0.0; size];
    for (i, &wt) in eta.weights.iter().enumerate() {
        let z = eta.atom(i);
        for j in 0..dim {
            sine_table(PI * (z[j] + b) / (2.0 * b), a_max, &mut tables[j * a_max..(j + 1) * a_max]);
        }
        // Outer product of the per-axis tables, last axis fastest.
        let mut len = a_max;
        tensor[..a_max].copy_from_slice(&tables[..a_max]);
        for j in 1..dim {
            let axis = &tables[j * a_max..(j + 1) * a_max];
            for p in (0..len).rev() {
                let v = tensor[p];
                for (q, &s) in axis.iter().enumerate() {
                    tensor[p * a_max + q] = v * s;
                }
            }
            len *= a_max;
        }
        for (c, &t) in coeff.iter_mut().zip(&tensor) {
            *c += wt * t;
        }
    }
    let norms = norm_table(dom, a_max);
    let mut acc = CompensatedSum::new();
    for (c, n2) in coeff.iter().zip(&norms) {
        acc.add(c * c / n2);
    }
    Ok(DualNormReport {
        value: acc.value().sqrt(),
        j: dom.j(),
        a_max,
        tail_sq_bound: tail_bound(eta.total_variation(), dom, a_max),
    })
}

/// Bound on `Σ_{a ∉ box} ⟨e_a, η⟩² / ‖e_a‖²_J` using `|e_a| ≤ 1`,
/// `‖e_a‖²_J ≥ B^D (π/2B)^{2J} |a|^{2J} / D^J` and an integral comparison.
fn tail_bound(tv: f64, dom: &SobolevDomain, a_max: usize) -> f64 {
    let (dim, j) = (dom.dim() as f64, dom.j() as f64);
    if 2.0 * j <= dim {
        return f64::INFINITY;
    }
    let b = dom.half_width();
    let lattice = dim * (a_max as f64).powf(dim - 2.0 * j) / (2.0 * j - dim);
    tv * tv * dim.powf(j) * lattice / (b.powf(dim) * (PI / (2.0 * b)).powf(2.0 * j))
}

/// Partial sum `Σ_{a ≤ A_max} ‖e_a‖²_L / ‖e_a‖²_J` of the embedding's
/// Hilbert–Schmidt norm.
pub fn hilbert_schmidt_partial(dom: &SobolevDomain, l: usize, a_max: usize) -> f64 {
    box_indices(dom.dim(), a_max as u32)
        .iter()
        .map(|a| (dom.norm_of_order(a, l) / dom.norm_of_order(a, dom.j())).powi(2))
        .sum()
}

/// `⟨f_a, f_b⟩_J` for all pairs of `basis`, by tensor Gauss-Legendre
/// quadrature (`panels` panels of `nodes` points per axis).
pub fn gram_by_quadrature(
    dom: &SobolevDomain,
    basis: &[BasisFunction<f64>],
    nodes: usize,
    panels: usize,
) -> Result<Vec<f64>> {
    let b = dom.half_width();
    let rule = GaussLegendre::composite(nodes, panels, -b, b)?;
    let j = dom.j();
    // I(a, a', k) = ∫ ∂^k sin(ω_a (z+B)) ∂^k sin(ω_a' (z+B)) dz on one axis.
    let axis_integral = |a: u32, a2: u32, k: usize| -> f64 {
        let (om, om2) = (a as f64 * PI / (2.0 * b), a2 as f64 * PI / (2.0 * b));
        let shift = k as f64 * PI / 2.0;
        let amp = om.powi(k as i32) * om2.powi(k as i32);
        amp * rule.integrate(|z| (om * (z + b) + shift).sin() * (om2 * (z + b) + shift).sin())
    };
    let n = basis.len();
    let mut gram = vec![0.0; n * n];
    for p in 0..n {
        for q in p..n {
            let (a, a2) = (basis[p].index(), basis[q].index());
            let factors: Vec<Vec<f64>> =
                (0..dom.dim()).map(|ax| (0..=j).map(|k| axis_integral(a[ax], a2[ax], k)).collect()).collect();
            let v = simplex_sum(&factors, j) * basis[p].scale() * basis[q].scale();
            gram[p * n + q] = v;
            gram[q * n + p] = v;
        }
    }
    Ok(gram)
}
