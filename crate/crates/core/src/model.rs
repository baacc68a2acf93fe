//! Network, activation, data distribution and parameter ensemble types.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::{from_usize, lit, to_f64, CompensatedSum, Scalar};

/// Declared suprema of `|σ|`, `|σ'|` and `|σ''|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationBounds {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

/// A user supplied bounded smooth activation.
pub trait SmoothActivation<T: Scalar>: Send + Sync {
    fn value(&self, u: T) -> T;
    fn derivative(&self, u: T) -> T;
    fn second_derivative(&self, u: T) -> T;
    fn bounds(&self) -> ActivationBounds;
    fn name(&self) -> &str;
}

/// Activation function σ ∈ C_b^∞.
#[derive(Clone)]
pub enum Activation<T: Scalar> {
    Tanh,
    Sigmoid,
    Custom(Arc<dyn SmoothActivation<T>>),
}

impl<T: Scalar> fmt::Debug for Activation<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Activation({})", self.name())
    }
}

#[inline(always)]
fn tanh_fast<T: Scalar>(u: T) -> T {
    // exp-based form is ~2x faster than libm tanh and agrees to one ulp
    let e = (lit::<T>(-2.0) * u.abs()).exp();
    let v = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -v
    } else {
        v
    }
}

#[inline(always)]
fn sigmoid<T: Scalar>(u: T) -> T {
    T::one() / (T::one() + (-u).exp())
}

impl<T: Scalar> Activation<T> {
    pub fn name(&self) -> &str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Custom(a) => a.name(),
        }
    }

    #[inline(always)]
    pub fn value(&self, u: T) -> T {
        match self {
            Activation::Tanh => tanh_fast(u),
            Activation::Sigmoid => sigmoid(u),
            Activation::Custom(a) => a.value(u),
        }
    }

    #[inline(always)]
    pub fn derivative(&self, u: T) -> T {
        self.value_and_derivative(u).1
    }

    /// `(σ(u), σ'(u))` sharing the transcendental evaluation.
    #[inline(always)]
    pub fn value_and_derivative(&self, u: T) -> (T, T) {
        match self {
            Activation::Tanh => {
                let s = tanh_fast(u);
                (s, T::one() - s * s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(u);
                (s, s * (T::one() - s))
            }
            Activation::Custom(a) => (a.value(u), a.derivative(u)),
        }
    }

    pub fn second_derivative(&self, u: T) -> T {
        match self {
            Activation::Tanh => {
                let s = tanh_fast(u);
                lit::<T>(-2.0) * s * (T::one() - s * s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(u);
                s * (T::one() - s) * (T::one() - lit::<T>(2.0) * s)
            }
            Activation::Custom(a) => a.second_derivative(u),
        }
    }

    pub fn bounds(&self) -> ActivationBounds {
        match self {
            Activation::Tanh => ActivationBounds {
                value: 1.0,
                first: 1.0,
                second: 4.0 / (3.0 * 3f64.sqrt()),
            },
            Activation::Sigmoid => ActivationBounds {
                value: 1.0,
                first: 0.25,
                second: 3f64.sqrt() / 18.0,
            },
            Activation::Custom(a) => a.bounds(),
        }
    }

    /// Spot-checks the declared bounds on the given inputs.
    pub fn check_bounds(&self, inputs: &[T]) -> Result<()> {
        let b = self.bounds();
        let slack = 1.0 + 1e-12;
        for &u in inputs {
            let (v, d1, d2) = (
                to_f64(self.value(u)),
                to_f64(self.derivative(u)),
                to_f64(self.second_derivative(u)),
            );
            if !(v.abs() <= b.value * slack && d1.abs() <= b.first * slack && d2.abs() <= b.second * slack) {
                return Err(invalid(format!(
                    "activation {} violates declared bounds at u = {}",
                    self.name(),
                    u
                )));
            }
        }
        Ok(())
    }
}

/// Serializable activation selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Tanh,
    Sigmoid,
}

impl ActivationKind {
    pub fn build<T: Scalar>(self) -> Activation<T> {
        match self {
            ActivationKind::Tanh => Activation::Tanh,
            ActivationKind::Sigmoid => Activation::Sigmoid,
        }
    }
}

/// Finite weighted dataset playing the role of the data law.
#[derive(Clone, Debug)]
pub struct DataDistribution<T: Scalar> {
    d: usize,
    xs: Vec<T>,
    ys: Vec<T>,
    weights: Vec<T>,
    cumulative: Vec<f64>,
    support_bound: T,
}

impl<T: Scalar> DataDistribution<T> {
    /// Builds a dataset from `(x, y)` pairs.
    ///
    /// When `support_bound` is `None` the tightest bound
    /// `max(‖x‖∞, |y|)` is used.
    pub fn new(d: usize, points: Vec<(Vec<T>, T)>, weights: Vec<T>, support_bound: Option<T>) -> Result<Self> {
        if d == 0 {
            return Err(invalid("input dimension must be at least 1"));
        }
        if points.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        if points.len() != weights.len() {
            return Err(invalid(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let mut xs = Vec::with_capacity(points.len() * d);
        let mut ys = Vec::with_capacity(points.len());
        let mut radius = T::zero();
        for (x, y) in points {
            if x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: x.len() });
            }
            for &v in &x {
                if !v.is_finite() {
                    return Err(invalid("non-finite data point"));
                }
                radius = radius.max(v.abs());
            }
            if !y.is_finite() {
                return Err(invalid("non-finite label"));
            }
            radius = radius.max(y.abs());
            xs.extend_from_slice(&x);
            ys.push(y);
        }
        let mut total = CompensatedSum::new();
        for &p in &weights {
            if !(p >= T::zero()) || !p.is_finite() {
                return Err(invalid("weights must be finite and non-negative"));
            }
            total.add(p);
        }
        let tol = 1e-12f64.max(16.0 * to_f64(T::epsilon()));
        if (to_f64(total.value()) - 1.0).abs() > tol {
            return Err(invalid(format!(
                "weights sum to {} (must be 1 within {tol:e})",
                total.value()
            )));
        }
        let support_bound = match support_bound {
            Some(b) if b >= radius => b,
            Some(b) => {
                return Err(invalid(format!(
                    "data reach {radius} beyond declared support bound {b}"
                )))
            }
            None => radius,
        };
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|&p| {
                acc += to_f64(p);
                acc
            })
            .collect();
        Ok(Self {
            d,
            xs,
            ys,
            weights,
            cumulative,
            support_bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    #[inline(always)]
    pub fn x(&self, m: usize) -> &[T] {
        &self.xs[m * self.d..(m + 1) * self.d]
    }

    #[inline(always)]
    pub fn y(&self, m: usize) -> T {
        self.ys[m]
    }

    #[inline(always)]
    pub fn weight(&self, m: usize) -> T {
        self.weights[m]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn support_bound(&self) -> T {
        self.support_bound
    }

    /// Draws a point index with probability `p_m`.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let idx = self.cumulative.partition_point(|&c| c <= u);
        if idx < self.len() {
            idx
        } else {
            // rounding left the last cumulative weight just below u
            self.weights
                .iter()
                .rposition(|&p| p > T::zero())
                .unwrap_or(self.len() - 1)
        }
    }

    /// Returns the sampled index together with `(x, y)`.
    pub fn sample_datum<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, &[T], T) {
        let m = self.sample_index(rng);
        (m, self.x(m), self.y(m))
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DataDistribution<U> {
        let points = (0..self.len())
            .map(|m| {
                (
                    self.x(m).iter().map(|&v| lit::<U>(to_f64(v))).collect(),
                    lit::<U>(to_f64(self.y(m))),
                )
            })
            .collect();
        let weights = self.weights.iter().map(|&p| lit::<U>(to_f64(p))).collect();
        DataDistribution::new(self.d, points, weights, Some(lit::<U>(to_f64(self.support_bound))))
            .expect("cast preserves validity")
    }
}

/// Clock attached to an ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeIndex {
    Step(usize),
    Time(f64),
}

/// N particles `(c_i, w_i) ∈ ℝ^{1+d}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble<T: Scalar> {
    d: usize,
    pub(crate) c: Vec<T>,
    pub(crate) w: Vec<T>,
    pub time: TimeIndex,
    observed_bound: T,
}

impl<T: Scalar> ParticleEnsemble<T> {
    /// `w` is row-major with `d` entries per particle.
    pub fn new(c: Vec<T>, w: Vec<T>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(invalid("parameter dimension d must be at least 1"));
        }
        if c.is_empty() {
            return Err(invalid("ensemble must hold at least one particle"));
        }
        if w.len() != c.len() * d {
            return Err(invalid(format!(
                "c has {} entries but w has {} (d = {d})",
                c.len(),
                w.len()
            )));
        }
        let mut ens = Self {
            d,
            c,
            w,
            time: TimeIndex::Step(0),
            observed_bound: T::zero(),
        };
        ens.observed_bound = ens.current_bound();
        if !ens.observed_bound.is_finite() || ens.c.iter().chain(&ens.w).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite particle parameters"));
        }
        Ok(ens)
    }

    /// Draws `n` i.i.d. particles from `law`.
    pub fn sample<R: Rng + ?Sized>(law: &InitLaw, n: usize, d: usize, rng: &mut R) -> Result<Self> {
        law.validate()?;
        if n == 0 {
            return Err(invalid("N must be at least 1"));
        }
        let mut c = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n * d);
        match law {
            InitLaw::UniformBox { c: (c0, c1), w: (w0, w1) } => {
                for _ in 0..n {
                    let u: f64 = rng.random();
                    c.push(lit(c0 + (c1 - c0) * u));
                    for _ in 0..d {
                        let u: f64 = rng.random();
                        w.push(lit(w0 + (w1 - w0) * u));
                    }
                }
            }
        }
        Self::new(c, w, d)
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn c(&self) -> &[T] {
        &self.c
    }

    pub fn w_flat(&self) -> &[T] {
        &self.w
    }

    #[inline(always)]
    pub fn w(&self, i: usize) -> &[T] {
        &self.w[i * self.d..(i + 1) * self.d]
    }

    /// Running maximum of `|c_i| + ‖w_i‖`.
    pub fn observed_bound(&self) -> T {
        self.observed_bound
    }

    /// Current maximum of `|c_i| + ‖w_i‖` (not the running max).
    pub fn current_bound(&self) -> T {
        (0..self.len())
            .map(|i| self.c[i].abs() + norm2(self.w(i)))
            .fold(T::zero(), |a, b| if b > a || b.is_nan() { b } else { a })
    }

    pub(crate) fn raise_bound(&mut self, b: T) {
        if b > self.observed_bound || b.is_nan() {
            self.observed_bound = b;
        }
    }

    pub(crate) fn refresh_bound(&mut self) {
        let b = self.current_bound();
        self.raise_bound(b);
    }

    /// Largest `‖z_i‖∞` over particles, with `z_i = (c_i, w_i)`.
    pub fn max_abs_coordinate(&self) -> T {
        self.c
            .iter()
            .chain(self.w.iter())
            .fold(T::zero(), |a, &b| a.max(b.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.c.iter().chain(&self.w).all(|v| v.is_finite())
    }

    /// Bitwise equality of the particle arrays.
    pub fn same_particles(&self, other: &Self) -> bool {
        self.d == other.d
            && self.c.len() == other.c.len()
            && self.c.iter().zip(&other.c).all(|(a, b)| to_f64(*a).to_bits() == to_f64(*b).to_bits())
            && self.w.iter().zip(&other.w).all(|(a, b)| to_f64(*a).to_bits() == to_f64(*b).to_bits())
    }

    pub fn cast<U: Scalar>(&self) -> ParticleEnsemble<U> {
        let mut e = ParticleEnsemble::new(
            self.c.iter().map(|&v| lit::<U>(to_f64(v))).collect(),
            self.w.iter().map(|&v| lit::<U>(to_f64(v))).collect(),
            self.d,
        )
        .expect("cast preserves validity");
        e.time = self.time;
        e
    }
}

#[inline(always)]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline(always)]
pub(crate) fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Compactly supported law of the initial particles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitLaw {
    /// `c ~ U(c.0, c.1)` and each coordinate of `w` i.i.d. `U(w.0, w.1)`.
    UniformBox { c: (f64, f64), w: (f64, f64) },
}

impl InitLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            InitLaw::UniformBox { c, w } => {
                if !(c.0 < c.1 && w.0 < w.1) || ![c.0, c.1, w.0, w.1].iter().all(|v| v.is_finite()) {
                    return Err(invalid("uniform box needs finite lo < hi on every axis"));
                }
                Ok(())
            }
        }
    }

    /// Upper bound of `|c| + ‖w‖` over the support.
    pub fn support_bound(&self, d: usize) -> f64 {
        match self {
            InitLaw::UniformBox { c, w } => {
                c.0.abs().max(c.1.abs()) + (d as f64).sqrt() * w.0.abs().max(w.1.abs())
            }
        }
    }
}

/// Scalar test function `f(c, w)` on `ℝ^{1+d}` with its derivatives.
///
/// Gradients and Hessians are laid out with the `c` coordinate first.
pub trait TestFunction<T: Scalar>: Send + Sync {
    fn value(&self, c: T, w: &[T]) -> T;

    /// Writes `(∂_c f, ∇_w f)` into `grad` (length `1 + d`).
    fn gradient(&self, c: T, w: &[T], grad: &mut [T]);

    /// Row-major `(1+d)×(1+d)` Hessian; defaults to central differences of
    /// the gradient.
    fn hessian(&self, c: T, w: &[T], hess: &mut [T]) {
        let dim = 1 + w.len();
        let h = lit::<T>(1e-5);
        let mut z: Vec<T> = std::iter::once(c).chain(w.iter().copied()).collect();
        let mut gp = vec![T::zero(); dim];
        let mut gm = vec![T::zero(); dim];
        for j in 0..dim {
            let orig = z[j];
            z[j] = orig + h;
            self.gradient(z[0], &z[1..], &mut gp);
            z[j] = orig - h;
            self.gradient(z[0], &z[1..], &mut gm);
            z[j] = orig;
            for k in 0..dim {
                hess[k * dim + j] = (gp[k] - gm[k]) / (h + h);
            }
        }
    }

    fn label(&self) -> String;

    /// Tensor-sine structure, if any; enables the incremental-phase fast path
    /// in SGD diagnostics.
    fn sine_mode(&self) -> Option<&SineMode<T>> {
        None
    }
}

/// `scale · Π_j sin(a_j θ_j)` with `θ_j = π (z_j + B) / (2B)` on `z = (c, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SineMode<T: Scalar> {
    pub half_width: T,
    pub a: Vec<u32>,
    pub scale: T,
}

/// `(sin nθ, cos nθ)` from `(sin θ, cos θ)` by the Chebyshev recurrence.
#[inline(always)]
pub fn harmonic<T: Scalar>(s1: T, c1: T, n: u32) -> (T, T) {
    match n {
        0 => (T::zero(), T::one()),
        1 => (s1, c1),
        _ => {
            let two_c = c1 + c1;
            let (mut s0, mut s) = (T::zero(), s1);
            let (mut k0, mut k) = (T::one(), c1);
            for _ in 1..n {
                let sn = two_c * s - s0;
                let kn = two_c * k - k0;
                s0 = s;
                s = sn;
                k0 = k;
                k = kn;
            }
            (s, k)
        }
    }
}

impl<T: Scalar> SineMode<T> {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Base angle `θ_j` of coordinate value `z_j`.
    #[inline(always)]
    pub fn base_angle(&self, z: T) -> T {
        T::PI() * (z + self.half_width) / (self.half_width + self.half_width)
    }

    /// Frequency `ω_j = a_j π / (2B)`.
    pub fn omega(&self, j: usize) -> T {
        lit::<T>(self.a[j] as f64) * T::PI() / (self.half_width + self.half_width)
    }

    /// Fills per-axis `(sin a_jθ_j, cos a_jθ_j)` from base `(sin θ_j, cos θ_j)`.
    #[inline(always)]
    pub fn axis_harmonics(&self, base: &[(T, T)], out: &mut [(T, T)]) {
        for j in 0..self.a.len() {
            out[j] = harmonic(base[j].0, base[j].1, self.a[j]);
        }
    }

    /// Value from per-axis harmonics.
    #[inline(always)]
    pub fn value_from(&self, h: &[(T, T)]) -> T {
        let mut v = self.scale;
        for &(s, _) in h.iter().take(self.a.len()) {
            v *= s;
        }
        v
    }

    /// Gradient from per-axis harmonics; `omega[j]` must hold `ω_j`.
    #[inline(always)]
    pub fn gradient_from(&self, h: &[(T, T)], omega: &[T], grad: &mut [T]) {
        let dim = self.a.len();
        for j in 0..dim {
            let mut v = self.scale * omega[j] * h[j].1;
            for (l, &(s, _)) in h.iter().enumerate().take(dim) {
                if l != j {
                    v *= s;
                }
            }
            grad[j] = v;
        }
    }

    /// Quadratic form `½ δᵀ H δ` of the Hessian at the harmonics' point.
    #[inline(always)]
    pub fn half_quadratic_from(&self, h: &[(T, T)], omega: &[T], delta: &[T]) -> T {
        let dim = self.a.len();
        let mut q = T::zero();
        for j in 0..dim {
            for l in 0..dim {
                let mut v = self.scale * delta[j] * delta[l];
                if j == l {
                    v = -v * omega[j] * omega[j];
                    for &(s, _) in h.iter().take(dim) {
                        v *= s;
                    }
                } else {
                    v *= omega[j] * omega[l];
                    for (m, &(s, c)) in h.iter().enumerate().take(dim) {
                        v *= if m == j || m == l { c } else { s };
                    }
                }
                q += v;
            }
        }
        q * lit::<T>(0.5)
    }

    fn base_of(&self, c: T, w: &[T]) -> Vec<(T, T)> {
        std::iter::once(c)
            .chain(w.iter().copied())
            .map(|z| self.base_angle(z).sin_cos())
            .collect()
    }

    fn omegas(&self) -> Vec<T> {
        (0..self.dim()).map(|j| self.omega(j)).collect()
    }

    pub fn eval(&self, c: T, w: &[T]) -> T {
        let mut v = self.scale;
        for (j, z) in std::iter::once(c).chain(w.iter().copied()).enumerate() {
            v *= (lit::<T>(self.a[j] as f64) * self.base_angle(z)).sin();
        }
        v
    }

    pub fn eval_gradient(&self, c: T, w: &[T], grad: &mut [T]) {
        let base = self.base_of(c, w);
        let mut h = vec![(T::zero(), T::zero()); self.dim()];
        self.axis_harmonics(&base, &mut h);
        self.gradient_from(&h, &self.omegas(), grad);
    }

    pub fn eval_hessian(&self, c: T, w: &[T], hess: &mut [T]) {
        let dim = self.dim();
        let base = self.base_of(c, w);
        let mut h = vec![(T::zero(), T::zero()); dim];
        self.axis_harmonics(&base, &mut h);
        let om = self.omegas();
        for j in 0..dim {
            for l in 0..dim {
                let mut v = self.scale;
                if j == l {
                    v = -v * om[j] * om[j];
                    for &(s, _) in &h {
                        v *= s;
                    }
                } else {
                    v *= om[j] * om[l];
                    for (m, &(s, c)) in h.iter().enumerate() {
                        v *= if m == j || m == l { c } else { s };
                    }
                }
                hess[j * dim + l] = v;
            }
        }
    }
}

/// `f ≡ value`.
#[derive(Clone, Copy, Debug)]
pub struct ConstantFn<T: Scalar>(pub T);

impl<T: Scalar> TestFunction<T> for ConstantFn<T> {
    fn value(&self, _c: T, _w: &[T]) -> T {
        self.0
    }
    fn gradient(&self, _c: T, _w: &[T], grad: &mut [T]) {
        grad.iter_mut().for_each(|g| *g = T::zero());
    }
    fn hessian(&self, _c: T, _w: &[T], hess: &mut [T]) {
        hess.iter_mut().for_each(|g| *g = T::zero());
    }
    fn label(&self) -> String {
        format!("const({})", self.0)
    }
}

/// Test function built from closures for value and gradient.
pub struct FnTest<T: Scalar> {
    label: String,
    value: Box<dyn Fn(T, &[T]) -> T + Send + Sync>,
    gradient: Box<dyn Fn(T, &[T], &mut [T]) + Send + Sync>,
}

impl<T: Scalar> FnTest<T> {
    pub fn new(
        label: impl Into<String>,
        value: impl Fn(T, &[T]) -> T + Send + Sync + 'static,
        gradient: impl Fn(T, &[T], &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            value: Box::new(value),
            gradient: Box::new(gradient),
        }
    }

    /// `f(c, w) = c`.
    pub fn coefficient() -> Self {
        Self::new(
            "c",
            |c, _| c,
            |_, _, g| {
                g.iter_mut().for_each(|v| *v = T::zero());
                g[0] = T::one();
            },
        )
    }
}

impl<T: Scalar> TestFunction<T> for FnTest<T> {
    fn value(&self, c: T, w: &[T]) -> T {
        (self.value)(c, w)
    }
    fn gradient(&self, c: T, w: &[T], grad: &mut [T]) {
        (self.gradient)(c, w, grad)
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

/// Evaluates values and gradients of a fixed list of test functions at one
/// point, sharing trigonometric work when every function is a tensor sine
/// on a common box.
pub struct FunctionBank<T: Scalar> {
    functions: Vec<Arc<dyn TestFunction<T>>>,
    sine: Option<SineTables<T>>,
    dim: usize,
}

struct SineTables<T: Scalar> {
    kappa: T,
    half_width: T,
    a_max: Vec<u32>,
    omegas: Vec<Vec<T>>,
    // flattened `a[f * dim + j]`, scales, and `scale * ω` per axis
    index: Vec<usize>,
    scale: Vec<T>,
    scaled_omega: Vec<T>,
}

/// Per-thread scratch for [`FunctionBank::eval`].
pub struct BankScratch<T: Scalar> {
    table: Vec<Vec<(T, T)>>,
    harm: Vec<(T, T)>,
}

impl<T: Scalar> FunctionBank<T> {
    /// `dim` is `1 + d`.
    pub fn new(functions: Vec<Arc<dyn TestFunction<T>>>, dim: usize) -> Self {
        let sine = (|| {
            let modes: Vec<&SineMode<T>> = functions.iter().map(|f| f.sine_mode()).collect::<Option<_>>()?;
            let b = modes.first()?.half_width;
            if modes.iter().any(|m| m.half_width != b || m.dim() != dim) {
                return None;
            }
            let a_max = (0..dim).map(|j| modes.iter().map(|m| m.a[j]).max().unwrap_or(1)).collect();
            Some(SineTables {
                kappa: T::PI() / (b + b),
                half_width: b,
                a_max,
                omegas: modes.iter().map(|m| (0..dim).map(|j| m.omega(j)).collect()).collect(),
                index: modes.iter().flat_map(|m| m.a.iter().map(|&a| a as usize)).collect(),
                scale: modes.iter().map(|m| m.scale).collect(),
                scaled_omega: modes.iter().flat_map(|m| (0..dim).map(|j| m.scale * m.omega(j))).collect(),
            })
        })();
        Self { functions, sine, dim }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn functions(&self) -> &[Arc<dyn TestFunction<T>>] {
        &self.functions
    }

    pub fn scratch(&self) -> BankScratch<T> {
        BankScratch {
            table: match &self.sine {
                Some(t) => t.a_max.iter().map(|&a| vec![(T::zero(), T::one()); a as usize + 1]).collect(),
                None => Vec::new(),
            },
            harm: vec![(T::zero(), T::zero()); self.dim],
        }
    }

    /// Writes `f_k(z)` into `values[k]` (if given) and `∇f_k(z)` into
    /// `grads[k * dim..(k + 1) * dim]`.
    pub fn eval(&self, c: T, w: &[T], sc: &mut BankScratch<T>, values: Option<&mut [T]>, grads: &mut [T]) {
        let dim = self.dim;
        match &self.sine {
            Some(tab) => {
                for j in 0..dim {
                    let z = if j == 0 { c } else { w[j - 1] };
                    let (s1, c1) = (tab.kappa * (z + tab.half_width)).sin_cos();
                    let row = &mut sc.table[j];
                    if row.len() > 1 {
                        row[1] = (s1, c1);
                        let two_c = c1 + c1;
                        for a in 2..row.len() {
                            let (sp, cp) = row[a - 1];
                            let (spp, cpp) = row[a - 2];
                            row[a] = (two_c * sp - spp, two_c * cp - cpp);
                        }
                    }
                }
                let mut values = values;
                if dim == 2 {
                    let (t0, t1) = (&sc.table[0], &sc.table[1]);
                    for k in 0..self.functions.len() {
                        let (s0, c0) = t0[tab.index[2 * k]];
                        let (s1, c1) = t1[tab.index[2 * k + 1]];
                        if let Some(v) = values.as_deref_mut() {
                            v[k] = tab.scale[k] * s0 * s1;
                        }
                        grads[2 * k] = tab.scaled_omega[2 * k] * c0 * s1;
                        grads[2 * k + 1] = tab.scaled_omega[2 * k + 1] * s0 * c1;
                    }
                    return;
                }
                for (k, f) in self.functions.iter().enumerate() {
                    let mode = f.sine_mode().expect("bank built from sine modes");
                    for j in 0..dim {
                        sc.harm[j] = sc.table[j][mode.a[j] as usize];
                    }
                    if let Some(v) = values.as_deref_mut() {
                        v[k] = mode.value_from(&sc.harm);
                    }
                    mode.gradient_from(&sc.harm, &tab.omegas[k], &mut grads[k * dim..(k + 1) * dim]);
                }
            }
            None => {
                let mut values = values;
                for (k, f) in self.functions.iter().enumerate() {
                    if let Some(v) = values.as_deref_mut() {
                        v[k] = f.value(c, w);
                    }
                    f.gradient(c, w, &mut grads[k * dim..(k + 1) * dim]);
                }
            }
        }
    }
}

/// Output of the network: `(1/N) Σ c_i σ(w_i·x)`.
pub fn network_eval<T: Scalar>(ens: &ParticleEnsemble<T>, x: &[T], act: &Activation<T>) -> Result<T> {
    if x.len() != ens.dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.dim(),
            got: x.len(),
        });
    }
    Ok(network_eval_unchecked(ens, x, act))
}

pub(crate) fn network_eval_unchecked<T: Scalar>(ens: &ParticleEnsemble<T>, x: &[T], act: &Activation<T>) -> T {
    let mut acc = CompensatedSum::new();
    for i in 0..ens.len() {
        acc.add(ens.c[i] * act.value(dot(ens.w(i), x)));
    }
    acc.value() / from_usize(ens.len())
}

/// `⟨f, ν⟩ = (1/N) Σ f(c_i, w_i)`.
pub fn pair_measure<T: Scalar, F: TestFunction<T> + ?Sized>(ens: &ParticleEnsemble<T>, f: &F) -> T {
    let mut acc = CompensatedSum::new();
    for i in 0..ens.len() {
        acc.add(f.value(ens.c[i], ens.w(i)));
    }
    acc.value() / from_usize(ens.len())
}

/// Run parameters (serialized alongside datasets as TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Width N.
    pub n: usize,
    /// Horizon T in scaled time.
    pub t_horizon: f64,
    /// Learning rate α.
    pub alpha: f64,
    pub seed: u64,
    /// Input dimension d.
    pub d: usize,
    #[serde(default)]
    pub activation: ActivationKind,
    /// Path of the dataset file.
    pub dataset: String,
    #[serde(default = "one")]
    pub replicas: usize,
    pub init: InitLaw,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(invalid("alpha must be positive"));
        }
        self.validate_dynamics()
    }

    /// Same checks but also accepts `α = 0`, the frozen-dynamics control case.
    pub fn validate_dynamics(&self) -> Result<()> {
        if self.n < 1 {
            return Err(invalid("N must be at least 1"));
        }
        if !(self.t_horizon > 0.0 && self.t_horizon.is_finite()) {
            return Err(invalid("T must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha must be finite and non-negative"));
        }
        if self.replicas < 1 {
            return Err(invalid("replica count must be at least 1"));
        }
        if self.d < 1 {
            return Err(invalid("d must be at least 1"));
        }
        self.init.validate()
    }

    /// Total SGD steps `⌊N T⌋`.
    pub fn total_steps(&self) -> usize {
        steps_at(self.n, self.t_horizon)
    }
}

/// `⌊N t⌋`, tolerant to representation error in `t` (e.g. `0.7 * 1000`).
pub fn steps_at(n: usize, t: f64) -> usize {
    let x = n as f64 * t;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}
