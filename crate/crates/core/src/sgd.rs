//! Single-sample SGD on the particle ensemble, with opt-in decomposition
//! diagnostics (martingale increments, drift, remainders).

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::model::{
    dot, harmonic, steps_at, Activation, DataDistribution, ParticleEnsemble, RunConfig, SineMode, TestFunction,
    TimeIndex,
};
use crate::rng::{stream, Purpose};
use crate::scalar::{cdot, from_usize, lit, to_f64, Scalar};

const TIME_SLACK: f64 = 1e-12;

/// Fills `s = σ(u)` and `ds = σ'(u)`, dispatching on the activation once.
fn fill_activation<T: Scalar>(act: &Activation<T>, u: &[T], s: &mut [T], ds: &mut [T]) {
    match act {
        Activation::Tanh => {
            for i in 0..u.len() {
                let (a, b) = Activation::<T>::Tanh.value_and_derivative(u[i]);
                s[i] = a;
                ds[i] = b;
            }
        }
        other => {
            for i in 0..u.len() {
                let (a, b) = other.value_and_derivative(u[i]);
                s[i] = a;
                ds[i] = b;
            }
        }
    }
}

fn project<T: Scalar>(ens: &ParticleEnsemble<T>, x: &[T], u: &mut [T]) {
    let d = ens.dim();
    if d == 1 {
        let x0 = x[0];
        for (ui, &wi) in u.iter_mut().zip(ens.w.iter()) {
            *ui = wi * x0;
        }
    } else {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = dot(ens.w(i), x);
        }
    }
}

/// Applies the update with step coefficient `coef = α (y − g) / N` and
/// returns the new maximum of `|c| + ‖w‖`. Writes the displacements when
/// `delta` is given.
fn apply_update<T: Scalar>(
    ens: &mut ParticleEnsemble<T>,
    s: &[T],
    ds: &[T],
    x: &[T],
    coef: T,
    mut delta: Option<(&mut [T], &mut [T])>,
) -> T {
    let d = ens.dim();
    let mut bound = T::zero();
    if d == 1 {
        let x0 = x[0];
        for i in 0..ens.c.len() {
            let ci = ens.c[i];
            let dc = coef * s[i];
            let dw = coef * ci * ds[i] * x0;
            ens.c[i] = ci + dc;
            ens.w[i] += dw;
            if let Some((dcs, dws)) = delta.as_mut() {
                dcs[i] = dc;
                dws[i] = dw;
            }
            let b = ens.c[i].abs() + ens.w[i].abs();
            if b > bound || b.is_nan() {
                bound = b;
            }
        }
    } else {
        for i in 0..ens.c.len() {
            let ci = ens.c[i];
            let dc = coef * s[i];
            let k = coef * ci * ds[i];
            ens.c[i] = ci + dc;
            let mut norm = T::zero();
            for j in 0..d {
                let dw = k * x[j];
                ens.w[i * d + j] += dw;
                norm += ens.w[i * d + j] * ens.w[i * d + j];
                if let Some((_, dws)) = delta.as_mut() {
                    dws[i * d + j] = dw;
                }
            }
            if let Some((dcs, _)) = delta.as_mut() {
                dcs[i] = dc;
            }
            let b = ens.c[i].abs() + norm.sqrt();
            if b > bound || b.is_nan() {
                bound = b;
            }
        }
    }
    bound
}

/// Scratch buffers for a plain step.
struct StepScratch<T> {
    u: Vec<T>,
    s: Vec<T>,
    ds: Vec<T>,
}

impl<T: Scalar> StepScratch<T> {
    fn new(n: usize) -> Self {
        Self {
            u: vec![T::zero(); n],
            s: vec![T::zero(); n],
            ds: vec![T::zero(); n],
        }
    }
}

fn step_with_scratch<T: Scalar>(
    ens: &mut ParticleEnsemble<T>,
    x: &[T],
    y: T,
    alpha: T,
    act: &Activation<T>,
    sc: &mut StepScratch<T>,
    step: usize,
) -> Result<()> {
    project(ens, x, &mut sc.u);
    fill_activation(act, &sc.u, &mut sc.s, &mut sc.ds);
    let n = from_usize::<T>(ens.len());
    let g = cdot(&ens.c, &sc.s) / n;
    let r = y - g;
    if !r.is_finite() {
        return Err(Error::NumericOverflow {
            step,
            what: format!("network output {g} is not finite"),
        });
    }
    let coef = alpha * r / n;
    let bound = apply_update(ens, &sc.s, &sc.ds, x, coef, None);
    finish_step(ens, bound, step)
}

fn finish_step<T: Scalar>(ens: &mut ParticleEnsemble<T>, bound: T, step: usize) -> Result<()> {
    if !bound.is_finite() {
        return Err(Error::NumericOverflow {
            step,
            what: "particle parameters left the finite range".into(),
        });
    }
    ens.raise_bound(bound);
    ens.time = TimeIndex::Step(step + 1);
    Ok(())
}

/// One SGD step in place; every particle is updated from the pre-step state.
pub fn sgd_step_mut<T: Scalar>(
    ens: &mut ParticleEnsemble<T>,
    x: &[T],
    y: T,
    alpha: T,
    act: &Activation<T>,
) -> Result<()> {
    if x.len() != ens.dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.dim(),
            got: x.len(),
        });
    }
    let step = match ens.time {
        TimeIndex::Step(k) => k,
        TimeIndex::Time(_) => 0,
    };
    let mut sc = StepScratch::new(ens.len());
    step_with_scratch(ens, x, y, alpha, act, &mut sc, step)
}

/// One SGD step returning the updated ensemble.
pub fn sgd_step<T: Scalar>(
    ens: &ParticleEnsemble<T>,
    datum: (&[T], T),
    alpha: T,
    act: &Activation<T>,
) -> Result<ParticleEnsemble<T>> {
    let mut out = ens.clone();
    sgd_step_mut(&mut out, datum.0, datum.1, alpha, act)?;
    Ok(out)
}

/// `⟨∇(cσ(w·x))·∇f, ν⟩` split as `(⟨σ(w·x)∂_c f, ν⟩, ⟨cσ'(w·x) x·∇_w f, ν⟩)`.
pub fn gradient_pairing<T: Scalar, F: TestFunction<T> + ?Sized>(
    ens: &ParticleEnsemble<T>,
    x: &[T],
    f: &F,
    act: &Activation<T>,
) -> (T, T) {
    let mut grad = vec![T::zero(); 1 + ens.dim()];
    let (mut k1, mut k2) = (Vec::with_capacity(ens.len()), Vec::with_capacity(ens.len()));
    for i in 0..ens.len() {
        let (c, w) = (ens.c[i], ens.w(i));
        f.gradient(c, w, &mut grad);
        let (s, ds) = act.value_and_derivative(dot(w, x));
        k1.push(s * grad[0]);
        k2.push(c * ds * dot(x, &grad[1..]));
    }
    let n = from_usize::<T>(ens.len());
    (crate::scalar::csum(k1) / n, crate::scalar::csum(k2) / n)
}

/// Centered martingale increment `⟨f, M^{1,N}_k⟩ + ⟨f, M^{2,N}_k⟩` for the
/// realized datum `(x, y)` at state `ens`.
pub fn martingale_increment<T: Scalar, F: TestFunction<T> + ?Sized>(
    ens: &ParticleEnsemble<T>,
    datum: (&[T], T),
    f: &F,
    alpha: T,
    dist: &DataDistribution<T>,
    act: &Activation<T>,
) -> Result<T> {
    let (x, y) = datum;
    let g = crate::model::network_eval(ens, x, act)?;
    let (a, b) = gradient_pairing(ens, x, f, act);
    let realized = (y - g) * (a + b);
    let mut mean = T::zero();
    for m in 0..dist.len() {
        let xm = dist.x(m);
        let gm = crate::model::network_eval_unchecked(ens, xm, act);
        let (a, b) = gradient_pairing(ens, xm, f, act);
        mean += dist.weight(m) * (dist.y(m) - gm) * (a + b);
    }
    Ok(alpha / from_usize::<T>(ens.len()) * (realized - mean))
}

/// Test functions and recording times for the decomposition diagnostics.
#[derive(Clone)]
pub struct DiagnosticsSpec<T: Scalar> {
    pub functions: Vec<Arc<dyn TestFunction<T>>>,
    /// Scaled times at which the data pairings of `ν_{⌊Nt⌋}` are recorded.
    pub record_times: Vec<f64>,
}

/// Data pairings of the SGD measure at one recorded time.
#[derive(Clone, Debug, PartialEq)]
pub struct PairingRecord {
    pub t: f64,
    /// `⟨cσ(w·x_m), ν⟩` per data point.
    pub g: Vec<f64>,
    /// `⟨σ(w·x_m)∂_c f, ν⟩`, indexed `[m * n_f + f]`.
    pub k1: Vec<f64>,
    /// `⟨cσ'(w·x_m) x_m·∇_w f, ν⟩`, indexed `[m * n_f + f]`.
    pub k2: Vec<f64>,
}

/// Per-step decomposition traces for each tracked test function.
#[derive(Clone, Debug)]
pub struct MartingaleDiagnostics {
    pub n: usize,
    pub horizon: f64,
    pub steps: usize,
    pub labels: Vec<String>,
    /// `increments[f][k]`: centered increment at step `k`.
    pub increments: Vec<Vec<f64>>,
    /// `drift[f][k]` = `α Σ_m p_m r_m K_m(ν_k)` for `k = 0..=steps`, so the
    /// step drift is `drift / N`.
    pub drift: Vec<Vec<f64>>,
    /// `taylor[f][k]` = second-order surrogate `G_k` for `k < steps`.
    pub taylor: Vec<Vec<f64>>,
    pub records: Vec<PairingRecord>,
}

/// Suprema of the two remainder traces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RemainderTraces {
    pub v_sup: f64,
    pub r1_sup: f64,
}

impl MartingaleDiagnostics {
    fn check_t(&self, t: f64) -> Result<usize> {
        let k = if t >= 0.0 { steps_at(self.n, t) } else { usize::MAX };
        if k > self.steps {
            return Err(Error::Range {
                t,
                detail: format!("diagnostics cover {} steps", self.steps),
            });
        }
        Ok(k)
    }

    fn check_f(&self, f: usize) -> Result<()> {
        if f >= self.labels.len() {
            return Err(invalid(format!("test function index {f} out of range")));
        }
        Ok(())
    }

    /// `⟨f, M^N_t⟩`.
    pub fn martingale(&self, t: f64, f: usize) -> Result<f64> {
        let k = self.check_t(t)?;
        self.check_f(f)?;
        Ok(crate::scalar::csum(self.increments[f][..k].iter().copied()))
    }

    /// `N Σ_{k<⌊Nt⌋} (increment_k)²`.
    pub fn quadratic_variation(&self, t: f64, f: usize) -> Result<f64> {
        let k = self.check_t(t)?;
        self.check_f(f)?;
        let s = crate::scalar::csum(self.increments[f][..k].iter().map(|v| v * v));
        Ok(self.n as f64 * s)
    }

    /// `D^{1,N}(t) + D^{2,N}(t)`.
    pub fn drift_sum(&self, t: f64, f: usize) -> Result<f64> {
        let k = self.check_t(t)?;
        self.check_f(f)?;
        Ok(crate::scalar::csum(self.drift[f][..k].iter().copied()) / self.n as f64)
    }

    /// `V^N_t = −(t − ⌊Nt⌋/N) A(ν_{⌊Nt⌋})`.
    pub fn v_at(&self, t: f64, f: usize) -> Result<f64> {
        let k = self.check_t(t)?;
        self.check_f(f)?;
        let gap = (t - k as f64 / self.n as f64).max(0.0);
        if gap <= TIME_SLACK {
            return Ok(0.0);
        }
        Ok(-gap * self.drift[f][k])
    }

    /// `N^{-3/2} Σ_{k<⌊Nt⌋} G_k`.
    pub fn r1_at(&self, t: f64, f: usize) -> Result<f64> {
        let k = self.check_t(t)?;
        self.check_f(f)?;
        Ok(crate::scalar::csum(self.taylor[f][..k].iter().copied()) / (self.n as f64).powf(1.5))
    }

    /// `sup_t |V_t|` over the whole interval and `N^{-3/2} Σ_k |G_k|`.
    ///
    /// `|V_t|` rises linearly inside each step interval, so its supremum is the
    /// left limit at the next jump: `max_k |A_k| / N`.
    pub fn remainder_traces(&self, f: usize) -> Result<RemainderTraces> {
        self.check_f(f)?;
        let n = self.n as f64;
        let drift = &self.drift[f];
        let inner = drift[..self.steps].iter().fold(0.0f64, |a, &b| a.max(b.abs())) / n;
        let tail = (self.horizon - self.steps as f64 / n).max(0.0) * drift[self.steps].abs();
        let v_sup = inner.max(tail);
        let r1_sup = crate::scalar::csum(self.taylor[f].iter().map(|g| g.abs())) / n.powf(1.5);
        Ok(RemainderTraces { v_sup, r1_sup })
    }

    pub fn record_at(&self, t: f64) -> Result<&PairingRecord> {
        self.records
            .iter()
            .find(|r| (r.t - t).abs() <= TIME_SLACK)
            .ok_or_else(|| Error::Range {
                t,
                detail: "no pairing record at this time".into(),
            })
    }
}

/// Result of a full SGD run.
#[derive(Clone, Debug)]
pub struct SgdTrajectory<T: Scalar> {
    pub config: RunConfig,
    pub replica: u64,
    pub steps: usize,
    pub initial: ParticleEnsemble<T>,
    /// `(t, ν_{⌊Nt⌋})` in grid order.
    pub snapshots: Vec<(f64, ParticleEnsemble<T>)>,
    pub final_state: ParticleEnsemble<T>,
    pub diagnostics: Option<MartingaleDiagnostics>,
}

impl<T: Scalar> SgdTrajectory<T> {
    /// Scaled measure `μ^N_t` at a grid time.
    pub fn snapshot_at(&self, t: f64) -> Result<&ParticleEnsemble<T>> {
        self.snapshots
            .iter()
            .find(|(s, _)| (s - t).abs() <= TIME_SLACK)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Range {
                t,
                detail: "not a snapshot time of this trajectory".into(),
            })
    }

    pub fn grid(&self) -> Vec<f64> {
        self.snapshots.iter().map(|(t, _)| *t).collect()
    }
}

/// Options beyond the run config.
#[derive(Clone, Default)]
pub struct SgdOptions<T: Scalar> {
    pub replica: u64,
    pub diagnostics: Option<DiagnosticsSpec<T>>,
}

/// Checks a time list against `[0, T]` and returns `(step, original index)`
/// pairs sorted by step.
fn schedule(times: &[f64], n: usize, horizon: f64) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(times.len());
    for (idx, &t) in times.iter().enumerate() {
        if !(t >= 0.0 && t <= horizon + TIME_SLACK) {
            return Err(Error::Range {
                t,
                detail: format!("requested time outside [0, {horizon}]"),
            });
        }
        out.push((steps_at(n, t), idx));
    }
    out.sort();
    Ok(out)
}

/// Runs `⌊NT⌋` steps of SGD for replica 0 without diagnostics.
pub fn run_sgd<T: Scalar>(
    config: &RunConfig,
    dist: &DataDistribution<T>,
    act: &Activation<T>,
    time_grid: &[f64],
) -> Result<SgdTrajectory<T>> {
    run_sgd_with(config, dist, act, time_grid, &SgdOptions::default())
}

/// Initial ensemble of a replica, drawn from the head of its stream.
pub fn replica_initial<T: Scalar>(config: &RunConfig, replica: u64) -> Result<(ParticleEnsemble<T>, crate::rng::Rng)> {
    let mut rng = stream(config.seed, Purpose::Replica, config.n as u64, replica);
    let ens = ParticleEnsemble::sample(&config.init, config.n, config.d, &mut rng)?;
    Ok((ens, rng))
}

/// Runs one SGD replica. The replica's stream draws the initial particles
/// first and then one data index per step, so diagnostics never change the
/// trajectory.
pub fn run_sgd_with<T: Scalar>(
    config: &RunConfig,
    dist: &DataDistribution<T>,
    act: &Activation<T>,
    time_grid: &[f64],
    opts: &SgdOptions<T>,
) -> Result<SgdTrajectory<T>> {
    config.validate_dynamics()?;
    if dist.dim() != config.d {
        return Err(Error::DimensionMismatch {
            expected: config.d,
            got: dist.dim(),
        });
    }
    let n = config.n;
    let total = config.total_steps();
    let snaps = schedule(time_grid, n, config.t_horizon)?;
    let (mut ens, mut rng) = replica_initial::<T>(config, opts.replica)?;
    let initial = ens.clone();
    let alpha = lit::<T>(config.alpha);

    let mut diag = match &opts.diagnostics {
        Some(spec) => Some(DiagEngine::new(spec, &ens, dist, config, total)?),
        None => None,
    };
    let mut snapshots: Vec<Option<(f64, ParticleEnsemble<T>)>> = vec![None; time_grid.len()];
    let mut next_snap = 0;
    let mut sc = StepScratch::new(n);

    for k in 0..=total {
        while next_snap < snaps.len() && snaps[next_snap].0 == k {
            let idx = snaps[next_snap].1;
            let mut e = ens.clone();
            e.time = TimeIndex::Step(k);
            snapshots[idx] = Some((time_grid[idx], e));
            next_snap += 1;
        }
        let datum = if k < total { Some(dist.sample_index(&mut rng)) } else { None };
        match diag.as_mut() {
            Some(engine) => {
                engine.observe(&ens, k, datum, dist, act, alpha);
                if let Some(m) = datum {
                    engine.step(&mut ens, m, dist, alpha, k)?;
                }
            }
            None => {
                if let Some(m) = datum {
                    step_with_scratch(&mut ens, dist.x(m), dist.y(m), alpha, act, &mut sc, k)?;
                }
            }
        }
    }
    if !ens.all_finite() {
        return Err(Error::NumericOverflow {
            step: total,
            what: "non-finite particle after final step".into(),
        });
    }
    Ok(SgdTrajectory {
        config: config.clone(),
        replica: opts.replica,
        steps: total,
        initial,
        snapshots: snapshots.into_iter().map(|s| s.expect("every grid time is visited")).collect(),
        final_state: ens,
        diagnostics: diag.map(|d| d.finish()),
    })
}

/// Fast path for tensor-sine test functions: the base phases
/// `(sin θ_j, cos θ_j)` of each particle are rotated by the step
/// displacement instead of being recomputed.
struct SinePhases<T: Scalar> {
    modes: Vec<SineMode<T>>,
    omegas: Vec<Vec<T>>,
    kappa: T,
    half_width: T,
    base: Vec<(T, T)>,
    since_sync: usize,
}

const RESYNC_EVERY: usize = 256;

impl<T: Scalar> SinePhases<T> {
    fn try_new(functions: &[Arc<dyn TestFunction<T>>], dim: usize) -> Option<Self> {
        let modes: Vec<SineMode<T>> = functions.iter().map(|f| f.sine_mode().cloned()).collect::<Option<_>>()?;
        let b = modes.first()?.half_width;
        if modes.iter().any(|m| m.half_width != b || m.dim() != dim) {
            return None;
        }
        let omegas = modes.iter().map(|m| (0..dim).map(|j| m.omega(j)).collect()).collect();
        Some(Self {
            modes,
            omegas,
            kappa: T::PI() / (b + b),
            half_width: b,
            base: Vec::new(),
            since_sync: 0,
        })
    }

    fn sync(&mut self, ens: &ParticleEnsemble<T>) {
        let dim = 1 + ens.dim();
        self.base.clear();
        self.base.reserve(ens.len() * dim);
        for i in 0..ens.len() {
            self.base.push((self.kappa * (ens.c[i] + self.half_width)).sin_cos());
            for &w in ens.w(i) {
                self.base.push((self.kappa * (w + self.half_width)).sin_cos());
            }
        }
        self.since_sync = 0;
    }

    #[inline(always)]
    fn rotate(&mut self, idx: usize, dz: T) {
        let th = self.kappa * dz;
        let (sd, cd) = if th.abs() < lit(1e-3) {
            let t2 = th * th;
            (
                th * (T::one() - t2 / lit(6.0) * (T::one() - t2 / lit(20.0))),
                T::one() - t2 / lit(2.0) * (T::one() - t2 / lit(12.0)),
            )
        } else {
            th.sin_cos()
        };
        let (s, c) = self.base[idx];
        self.base[idx] = (s * cd + c * sd, c * cd - s * sd);
    }
}

struct DiagEngine<T: Scalar> {
    functions: Vec<Arc<dyn TestFunction<T>>>,
    phases: Option<SinePhases<T>>,
    n: usize,
    d: usize,
    n_data: usize,
    record_plan: Vec<(usize, f64)>,
    next_record: usize,
    // σ(w·x_m), σ'(w·x_m) indexed [m * N + i]
    s_all: Vec<T>,
    ds_all: Vec<T>,
    u: Vec<T>,
    delta_c: Vec<T>,
    delta_w: Vec<T>,
    has_delta: bool,
    k1: Vec<T>,
    k2: Vec<T>,
    out: MartingaleDiagnostics,
}

impl<T: Scalar> DiagEngine<T> {
    fn new(
        spec: &DiagnosticsSpec<T>,
        ens: &ParticleEnsemble<T>,
        dist: &DataDistribution<T>,
        config: &RunConfig,
        total: usize,
    ) -> Result<Self> {
        if spec.functions.is_empty() {
            return Err(invalid("diagnostics need at least one test function"));
        }
        let plan = schedule(&spec.record_times, config.n, config.t_horizon)?;
        let record_plan = plan.iter().map(|&(k, idx)| (k, spec.record_times[idx])).collect();
        let (n, d, nd, nf) = (ens.len(), ens.dim(), dist.len(), spec.functions.len());
        let mut phases = SinePhases::try_new(&spec.functions, 1 + d);
        if let Some(p) = phases.as_mut() {
            p.sync(ens);
        }
        Ok(Self {
            functions: spec.functions.clone(),
            phases,
            n,
            d,
            n_data: nd,
            record_plan,
            next_record: 0,
            s_all: vec![T::zero(); n * nd],
            ds_all: vec![T::zero(); n * nd],
            u: vec![T::zero(); n],
            delta_c: vec![T::zero(); n],
            delta_w: vec![T::zero(); n * d],
            has_delta: false,
            k1: vec![T::zero(); nd * nf],
            k2: vec![T::zero(); nd * nf],
            out: MartingaleDiagnostics {
                n,
                horizon: config.t_horizon,
                steps: total,
                labels: spec.functions.iter().map(|f| f.label()).collect(),
                increments: vec![Vec::with_capacity(total); nf],
                drift: vec![Vec::with_capacity(total + 1); nf],
                taylor: vec![Vec::with_capacity(total); nf],
                records: Vec::new(),
            },
        })
    }

    /// Computes every pairing of state `ν_k` and the traces that depend on it.
    fn observe(
        &mut self,
        ens: &ParticleEnsemble<T>,
        k: usize,
        datum: Option<usize>,
        dist: &DataDistribution<T>,
        act: &Activation<T>,
        alpha: T,
    ) {
        let (n, d, nd) = (self.n, self.d, self.n_data);
        let nf = self.functions.len();
        let dim = 1 + d;
        for m in 0..nd {
            project(ens, dist.x(m), &mut self.u);
            let (s, ds) = (&mut self.s_all[m * n..(m + 1) * n], &mut self.ds_all[m * n..(m + 1) * n]);
            fill_activation(act, &self.u, s, ds);
        }
        self.k1.iter_mut().for_each(|v| *v = T::zero());
        self.k2.iter_mut().for_each(|v| *v = T::zero());
        let mut taylor = vec![T::zero(); nf];
        let mut grad = vec![T::zero(); dim];
        let mut hess = vec![T::zero(); dim * dim];
        let mut harm = vec![(T::zero(), T::zero()); dim];
        let mut delta = vec![T::zero(); dim];
        let mut xg = vec![T::zero(); nd];
        let fast_d1 = d == 1 && self.phases.is_some();
        if fast_d1 {
            self.accumulate_sine_d1(ens, dist, &mut taylor);
        }
        for i in (0..n).filter(|_| !fast_d1) {
            let ci = ens.c[i];
            if self.has_delta {
                delta[0] = self.delta_c[i];
                delta[1..].copy_from_slice(&self.delta_w[i * d..(i + 1) * d]);
            }
            for f in 0..nf {
                match self.phases.as_ref() {
                    Some(p) => {
                        let mode = &p.modes[f];
                        mode.axis_harmonics(&p.base[i * dim..(i + 1) * dim], &mut harm);
                        mode.gradient_from(&harm, &p.omegas[f], &mut grad);
                        if self.has_delta {
                            taylor[f] += mode.half_quadratic_from(&harm, &p.omegas[f], &delta);
                        }
                    }
                    None => {
                        let func = &self.functions[f];
                        let w = ens.w(i);
                        func.gradient(ci, w, &mut grad);
                        if self.has_delta {
                            func.hessian(ci, w, &mut hess);
                            let mut q = T::zero();
                            for a in 0..dim {
                                for b in 0..dim {
                                    q += delta[a] * hess[a * dim + b] * delta[b];
                                }
                            }
                            taylor[f] += lit::<T>(0.5) * q;
                        }
                    }
                }
                for (m, v) in xg.iter_mut().enumerate() {
                    *v = dot(dist.x(m), &grad[1..]);
                }
                for m in 0..nd {
                    let idx = m * n + i;
                    self.k1[m * nf + f] += self.s_all[idx] * grad[0];
                    self.k2[m * nf + f] += ci * self.ds_all[idx] * xg[m];
                }
            }
        }
        let nn = from_usize::<T>(n);
        let g: Vec<T> = (0..nd).map(|m| cdot(&ens.c, &self.s_all[m * n..(m + 1) * n]) / nn).collect();
        for v in self.k1.iter_mut().chain(self.k2.iter_mut()) {
            *v /= nn;
        }
        let resid: Vec<T> = (0..nd).map(|m| dist.y(m) - g[m]).collect();
        for f in 0..nf {
            let kf = |m: usize| self.k1[m * nf + f] + self.k2[m * nf + f];
            let mut mean = T::zero();
            for m in 0..nd {
                mean += dist.weight(m) * resid[m] * kf(m);
            }
            self.out.drift[f].push(to_f64(alpha * mean));
            if let Some(mk) = datum {
                let incr = alpha / nn * (resid[mk] * kf(mk) - mean);
                self.out.increments[f].push(to_f64(incr));
            }
            if self.has_delta {
                self.out.taylor[f].push(to_f64(taylor[f] * nn));
            }
        }
        while self.next_record < self.record_plan.len() && self.record_plan[self.next_record].0 == k {
            let t = self.record_plan[self.next_record].1;
            self.out.records.push(PairingRecord {
                t,
                g: g.iter().map(|&v| to_f64(v)).collect(),
                k1: self.k1.iter().map(|&v| to_f64(v)).collect(),
                k2: self.k2.iter().map(|&v| to_f64(v)).collect(),
            });
            self.next_record += 1;
        }
    }

    /// Specialised accumulation for `d = 1` with sine test functions.
    fn accumulate_sine_d1(&mut self, ens: &ParticleEnsemble<T>, dist: &DataDistribution<T>, taylor: &mut [T]) {
        let p = self.phases.as_ref().expect("sine phases present");
        let (n, nd, nf) = (self.n, self.n_data, self.functions.len());
        let xs: Vec<T> = (0..nd).map(|m| dist.x(m)[0]).collect();
        let half = lit::<T>(0.5);
        for f in 0..nf {
            let mode = &p.modes[f];
            let (a0, a1) = (mode.a[0], mode.a[1]);
            let (o0, o1) = (p.omegas[f][0], p.omegas[f][1]);
            let (sc0, sc1) = (mode.scale * o0, mode.scale * o1);
            let (mut k1, mut k2) = ([T::zero(); 8], [T::zero(); 8]);
            let mut tay = T::zero();
            let small = nd <= 8;
            for i in 0..n {
                let (s0, c0) = harmonic(p.base[2 * i].0, p.base[2 * i].1, a0);
                let (s1, c1) = harmonic(p.base[2 * i + 1].0, p.base[2 * i + 1].1, a1);
                let gc = sc0 * c0 * s1;
                let gw = sc1 * s0 * c1;
                if self.has_delta {
                    let (dc, dw) = (self.delta_c[i], self.delta_w[i]);
                    let val = mode.scale * s0 * s1;
                    let hcw = mode.scale * o0 * o1 * c0 * c1;
                    tay += half * (-(o0 * o0 * dc * dc + o1 * o1 * dw * dw) * val + (hcw + hcw) * dc * dw);
                }
                let ci = ens.c[i];
                if small {
                    for m in 0..nd {
                        let idx = m * n + i;
                        k1[m] += self.s_all[idx] * gc;
                        k2[m] += ci * self.ds_all[idx] * xs[m] * gw;
                    }
                } else {
                    for m in 0..nd {
                        let idx = m * n + i;
                        self.k1[m * nf + f] += self.s_all[idx] * gc;
                        self.k2[m * nf + f] += ci * self.ds_all[idx] * xs[m] * gw;
                    }
                }
            }
            if small {
                for m in 0..nd {
                    self.k1[m * nf + f] = k1[m];
                    self.k2[m * nf + f] = k2[m];
                }
            }
            taylor[f] = tay;
        }
    }

    /// Applies the step for datum `m` reusing the activations of `observe`.
    fn step(
        &mut self,
        ens: &mut ParticleEnsemble<T>,
        m: usize,
        dist: &DataDistribution<T>,
        alpha: T,
        k: usize,
    ) -> Result<()> {
        let n = self.n;
        let s = &self.s_all[m * n..(m + 1) * n];
        let ds = &self.ds_all[m * n..(m + 1) * n];
        let nn = from_usize::<T>(n);
        let g = cdot(&ens.c, s) / nn;
        let r = dist.y(m) - g;
        if !r.is_finite() {
            return Err(Error::NumericOverflow {
                step: k,
                what: format!("network output {g} is not finite"),
            });
        }
        let coef = alpha * r / nn;
        let bound = apply_update(
            ens,
            s,
            ds,
            dist.x(m),
            coef,
            Some((&mut self.delta_c, &mut self.delta_w)),
        );
        finish_step(ens, bound, k)?;
        self.has_delta = true;
        if let Some(p) = self.phases.as_mut() {
            p.since_sync += 1;
            if p.since_sync >= RESYNC_EVERY {
                p.sync(ens);
            } else {
                let dim = 1 + self.d;
                for i in 0..n {
                    p.rotate(i * dim, self.delta_c[i]);
                    for j in 0..self.d {
                        p.rotate(i * dim + 1 + j, self.delta_w[i * self.d + j]);
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> MartingaleDiagnostics {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pair_measure, ConstantFn, FnTest, InitLaw};

    fn config(n: usize, alpha: f64, t: f64) -> RunConfig {
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

    fn three_point() -> DataDistribution<f64> {
        DataDistribution::new(
            1,
            vec![(vec![-1.0], 0.6), (vec![0.3], -0.4), (vec![1.2], 0.8)],
            vec![0.3, 0.3, 0.4],
            None,
        )
        .unwrap()
    }

    fn sine(a: Vec<u32>) -> SineMode<f64> {
        SineMode { half_width: 4.0, a, scale: 1.3 }
    }

    struct Sine(SineMode<f64>);
    impl TestFunction<f64> for Sine {
        fn value(&self, c: f64, w: &[f64]) -> f64 {
            self.0.eval(c, w)
        }
        fn gradient(&self, c: f64, w: &[f64], g: &mut [f64]) {
            self.0.eval_gradient(c, w, g)
        }
        fn hessian(&self, c: f64, w: &[f64], h: &mut [f64]) {
            self.0.eval_hessian(c, w, h)
        }
        fn label(&self) -> String {
            "sine".into()
        }
        fn sine_mode(&self) -> Option<&SineMode<f64>> {
            Some(&self.0)
        }
    }

    /// Same function without the fast-path hint.
    struct SlowSine(SineMode<f64>);
    impl TestFunction<f64> for SlowSine {
        fn value(&self, c: f64, w: &[f64]) -> f64 {
            self.0.eval(c, w)
        }
        fn gradient(&self, c: f64, w: &[f64], g: &mut [f64]) {
            self.0.eval_gradient(c, w, g)
        }
        fn hessian(&self, c: f64, w: &[f64], h: &mut [f64]) {
            self.0.eval_hessian(c, w, h)
        }
        fn label(&self) -> String {
            "slow sine".into()
        }
    }

    #[test]
    fn hand_step() {
        let e = ParticleEnsemble::<f64>::new(vec![1.0], vec![0.0], 1).unwrap();
        let out = sgd_step(&e, (&[1.0], 1.0), 0.1, &Activation::Tanh).unwrap();
        assert_eq!(out.c()[0], 1.0);
        assert!((out.w_flat()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_alpha_and_zero_residual_leave_state_unchanged() {
        let mut rng = stream(1, Purpose::Synthetic, 0, 0);
        let law = InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) };
        let e = ParticleEnsemble::<f64>::sample(&law, 20, 2, &mut rng).unwrap();
        let x = [0.3, -0.7];
        let out = sgd_step(&e, (&x, 0.9), 0.0, &Activation::Tanh).unwrap();
        assert!(out.same_particles(&e));
        let g = crate::model::network_eval(&e, &x, &Activation::Tanh).unwrap();
        let out = sgd_step(&e, (&x, g), 0.7, &Activation::Tanh).unwrap();
        // residual is at most one rounding of g
        for (a, b) in out.c().iter().zip(e.c()) {
            assert!((a - b).abs() < 1e-16);
        }
    }

    #[test]
    fn simultaneous_update_is_repeatable() {
        let e = ParticleEnsemble::<f64>::new(vec![0.5, -0.2, 0.9], vec![0.1, 0.4, -0.3], 1).unwrap();
        let a = sgd_step(&e, (&[0.8], 0.2), 0.5, &Activation::Tanh).unwrap();
        let b = sgd_step(&e, (&[0.8], 0.2), 0.5, &Activation::Tanh).unwrap();
        assert!(a.same_particles(&b));
        // every particle sees the pre-step output
        let g = crate::model::network_eval(&e, &[0.8], &Activation::Tanh).unwrap();
        for i in 0..3 {
            let expect = e.c()[i] + 0.5 / 3.0 * (0.2 - g) * (e.w(i)[0] * 0.8).tanh();
            assert!((a.c()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_update_aborts() {
        let e = ParticleEnsemble::new(vec![1e308], vec![1.0], 1).unwrap();
        let err = sgd_step(&e, (&[1.0], -1e308), 1e10, &Activation::Tanh).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { .. }));
    }

    #[test]
    fn run_counts_and_snapshots() {
        let dist = three_point();
        let cfg = config(100, 1.0, 1.0);
        let traj = run_sgd(&cfg, &dist, &Activation::Tanh, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(traj.steps, 100);
        assert!(traj.snapshot_at(0.0).unwrap().same_particles(&traj.initial));
        assert_eq!(traj.snapshot_at(0.5).unwrap().time, TimeIndex::Step(50));
        assert!(traj.snapshot_at(1.0).unwrap().same_particles(&traj.final_state));
        assert!(traj.snapshot_at(0.25).is_err());

        let short = config(3, 1.0, 0.2);
        let traj = run_sgd(&short, &dist, &Activation::Tanh, &[0.2]).unwrap();
        assert_eq!(traj.steps, 0);
        assert!(traj.snapshot_at(0.2).unwrap().same_particles(&traj.initial));
        assert!(run_sgd(&short, &dist, &Activation::Tanh, &[0.3]).is_err());
    }

    #[test]
    fn run_is_deterministic() {
        let dist = three_point();
        let cfg = config(64, 1.0, 1.0);
        let a = run_sgd(&cfg, &dist, &Activation::Tanh, &[1.0]).unwrap();
        let b = run_sgd(&cfg, &dist, &Activation::Tanh, &[1.0]).unwrap();
        assert!(a.final_state.same_particles(&b.final_state));
    }

    #[test]
    fn observed_bound_is_monotone_and_finite() {
        let dist = three_point();
        let cfg = config(50, 1.0, 1.0);
        let traj = run_sgd(&cfg, &dist, &Activation::Tanh, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        let bounds: Vec<f64> = traj.snapshots.iter().map(|(_, e)| e.observed_bound()).collect();
        assert!(bounds.windows(2).all(|w| w[0] <= w[1]));
        assert!(bounds.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn increment_vanishes_for_degenerate_data_and_constants() {
        let e = ParticleEnsemble::new(vec![0.5, -0.2], vec![0.1, 0.4], 1).unwrap();
        let single = DataDistribution::new(1, vec![(vec![0.7], 0.3)], vec![1.0], None).unwrap();
        let f = Sine(sine(vec![1, 1]));
        let v = martingale_increment(&e, (&[0.7], 0.3), &f, 1.0, &single, &Activation::Tanh).unwrap();
        assert!(v.abs() < 1e-17);
        let dist = three_point();
        let v = martingale_increment(&e, (&[0.3], -0.4), &ConstantFn(2.0), 1.0, &dist, &Activation::Tanh).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn increment_matches_brute_force_and_has_zero_mean() {
        let dist =
            DataDistribution::new(1, vec![(vec![-0.8], 0.5), (vec![1.1], -0.3)], vec![0.35, 0.65], None).unwrap();
        let (c, w) = (0.7, -0.4);
        let e = ParticleEnsemble::new(vec![c], vec![w], 1).unwrap();
        let f = FnTest::new("c^2 w", |c: f64, w: &[f64]| c * c * w[0], |c, w, g| {
            g[0] = 2.0 * c * w[0];
            g[1] = c * c;
        });
        let alpha = 0.9;
        let term = |x: f64, y: f64| {
            let g = c * (w * x).tanh();
            let s = (w * x).tanh();
            let ds = 1.0 - s * s;
            (y - g) * (s * 2.0 * c * w + c * ds * x * c * c)
        };
        let mean = 0.35 * term(-0.8, 0.5) + 0.65 * term(1.1, -0.3);
        let mut avg = 0.0;
        for m in 0..2 {
            let (x, y) = (dist.x(m)[0], dist.y(m));
            let v = martingale_increment(&e, (&[x], y), &f, alpha, &dist, &Activation::Tanh).unwrap();
            assert!((v - alpha * (term(x, y) - mean)).abs() < 1e-14);
            avg += dist.weight(m) * v;
        }
        assert!(avg.abs() <= 1e-12);
    }

    fn diag_run(cfg: &RunConfig, f: Arc<dyn TestFunction<f64>>, times: Vec<f64>) -> SgdTrajectory<f64> {
        let opts = SgdOptions {
            replica: 0,
            diagnostics: Some(DiagnosticsSpec { functions: vec![f], record_times: times }),
        };
        run_sgd_with(cfg, &three_point(), &Activation::Tanh, &[0.0, cfg.t_horizon], &opts).unwrap()
    }

    #[test]
    fn diagnostics_do_not_change_the_trajectory() {
        let cfg = config(80, 1.0, 1.0);
        let plain = run_sgd(&cfg, &three_point(), &Activation::Tanh, &[0.0, 1.0]).unwrap();
        let diag = diag_run(&cfg, Arc::new(Sine(sine(vec![1, 2]))), vec![0.5]);
        assert!(plain.final_state.same_particles(&diag.final_state));
    }

    #[test]
    fn diagnostics_match_direct_increments() {
        let cfg = config(40, 1.0, 1.0);
        let f = Arc::new(Sine(sine(vec![2, 1])));
        let traj = diag_run(&cfg, f.clone(), vec![]);
        let diag = traj.diagnostics.as_ref().unwrap();
        // replay the same stream and compare with the standalone increment
        let dist = three_point();
        let (mut ens, mut rng) = replica_initial::<f64>(&cfg, 0).unwrap();
        let mut sq = 0.0;
        for k in 0..traj.steps {
            let m = dist.sample_index(&mut rng);
            let v = martingale_increment(&ens, (dist.x(m), dist.y(m)), f.as_ref(), 1.0, &dist, &Activation::Tanh)
                .unwrap();
            assert!((v - diag.increments[0][k]).abs() < 1e-13, "step {k}");
            sq += v * v;
            sgd_step_mut(&mut ens, dist.x(m), dist.y(m), 1.0, &Activation::Tanh).unwrap();
        }
        let qv = diag.quadratic_variation(1.0, 0).unwrap();
        assert!((qv - 40.0 * sq).abs() <= 1e-12 * qv.max(1.0));
        assert!(diag.quadratic_variation(1.5, 0).is_err());
    }

    #[test]
    fn fast_and_general_paths_agree() {
        let cfg = config(60, 1.0, 1.0);
        let mode = sine(vec![1, 3]);
        let fast = diag_run(&cfg, Arc::new(Sine(mode.clone())), vec![0.5, 1.0]);
        let slow = diag_run(&cfg, Arc::new(SlowSine(mode)), vec![0.5, 1.0]);
        let (a, b) = (fast.diagnostics.unwrap(), slow.diagnostics.unwrap());
        for k in 0..a.steps {
            assert!((a.increments[0][k] - b.increments[0][k]).abs() < 1e-12);
            assert!((a.drift[0][k] - b.drift[0][k]).abs() < 1e-12);
            // general path uses a finite-difference Hessian
            assert!((a.taylor[0][k] - b.taylor[0][k]).abs() < 1e-6 * (1.0 + a.taylor[0][k].abs()));
        }
        assert_eq!(a.records.len(), 2);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            for (x, y) in ra.k1.iter().zip(&rb.k1) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn telescoping_identity_holds_to_third_order() {
        let cfg = config(200, 1.0, 1.0);
        let mode = sine(vec![1, 1]);
        let f = Sine(mode.clone());
        let traj = diag_run(&cfg, Arc::new(Sine(mode)), vec![]);
        let d = traj.diagnostics.as_ref().unwrap();
        let change = pair_measure(&traj.final_state, &f) - pair_measure(&traj.initial, &f);
        let first = d.drift_sum(1.0, 0).unwrap() + d.martingale(1.0, 0).unwrap();
        let second = d.r1_at(1.0, 0).unwrap() / (200f64).sqrt();
        let residual = change - first - second;
        assert!(second.abs() > 0.0);
        assert!(residual.abs() < 0.05 * second.abs() + 1e-12, "residual {residual} second {second}");
    }

    #[test]
    fn remainders_vanish_without_motion() {
        let cfg = config(50, 0.0, 1.0);
        let traj = diag_run(&cfg, Arc::new(Sine(sine(vec![1, 1]))), vec![]);
        let d = traj.diagnostics.unwrap();
        let r = d.remainder_traces(0).unwrap();
        assert_eq!(r.v_sup, 0.0);
        assert_eq!(r.r1_sup, 0.0);
        assert_eq!(d.quadratic_variation(1.0, 0).unwrap(), 0.0);
    }

    #[test]
    fn v_is_zero_on_step_boundaries() {
        let cfg = config(50, 1.0, 1.0);
        let traj = diag_run(&cfg, Arc::new(Sine(sine(vec![1, 1]))), vec![]);
        let d = traj.diagnostics.unwrap();
        assert_eq!(d.v_at(0.2, 0).unwrap(), 0.0);
        let inside = d.v_at(0.21, 0).unwrap();
        assert!((inside + 0.01 * d.drift[0][10]).abs() < 1e-15);
        let r = d.remainder_traces(0).unwrap();
        assert!(inside.abs() <= r.v_sup);
    }

    #[test]
    fn single_point_data_gives_zero_quadratic_variation() {
        let dist = DataDistribution::new(1, vec![(vec![0.9], 0.5)], vec![1.0], None).unwrap();
        let cfg = config(30, 1.0, 1.0);
        let opts = SgdOptions {
            replica: 0,
            diagnostics: Some(DiagnosticsSpec {
                functions: vec![Arc::new(Sine(sine(vec![1, 1]))) as Arc<dyn TestFunction<f64>>],
                record_times: vec![],
            }),
        };
        let traj = run_sgd_with(&cfg, &dist, &Activation::Tanh, &[1.0], &opts).unwrap();
        let qv = traj.diagnostics.unwrap().quadratic_variation(1.0, 0).unwrap();
        assert!(qv < 1e-28);
    }

    #[test]
    fn runs_in_f32() {
        let dist = three_point().cast::<f32>();
        let cfg = config(32, 1.0, 1.0);
        let a = run_sgd::<f32>(&cfg, &dist, &Activation::Tanh, &[1.0]).unwrap();
        let b = run_sgd::<f64>(&cfg, &three_point(), &Activation::Tanh, &[1.0]).unwrap();
        for (x, y) in a.final_state.c().iter().zip(b.final_state.c()) {
            assert!((*x as f64 - y).abs() < 1e-4);
        }
    }
}
