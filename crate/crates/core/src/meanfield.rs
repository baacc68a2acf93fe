//! Deterministic particle ODEs standing in for the mean-field limit.
//!
//! Two drives are supported: the self-consistent system, where the network
//! output in the residual is the ensemble's own, and the driven system, where
//! residuals are read from a recorded reference run. Reductions are done in
//! fixed-size chunks with compensated sums merged in chunk order, so results
//! do not depend on the thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::model::{
    Activation, DataDistribution, FunctionBank, ParticleEnsemble, TestFunction, TimeIndex,
};
use crate::scalar::{from_usize, lit, to_f64, CompensatedSum, Scalar};

const CHUNK: usize = 4096;
const GRID_SLACK: f64 = 1e-9;

/// How the residual `y_m − ⟨cσ(w·x_m), ·⟩` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriveKind {
    SelfConsistent,
    Reference,
}

/// Data pairings of the integrated measure at every grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRecord {
    pub times: Vec<f64>,
    pub n_data: usize,
    pub labels: Vec<String>,
    /// `⟨cσ(w·x_m), μ_t⟩` at `[j * n_data + m]`.
    pub g: Vec<f64>,
    /// `⟨σ(w·x_m)∂_c f, μ_t⟩` at `[(j * n_data + m) * n_f + f]`.
    pub k1: Vec<f64>,
    /// `⟨cσ'(w·x_m) x_m·∇_w f, μ_t⟩`, same layout as `k1`.
    pub k2: Vec<f64>,
    /// Residuals `y_m − g` at `[j * n_data + m]`.
    pub residual: Vec<f64>,
}

impl GridRecord {
    pub fn n_functions(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of grid time `t`, refusing off-grid requests.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let n = self.times.len();
        if n == 0 {
            return Err(Error::Range { t, detail: "empty record".into() });
        }
        let h = if n > 1 { self.times[1] - self.times[0] } else { 1.0 };
        let j = ((t - self.times[0]) / h).round();
        if j >= 0.0 && (j as usize) < n && (self.times[j as usize] - t).abs() <= GRID_SLACK * h.max(1.0) {
            Ok(j as usize)
        } else {
            Err(Error::Range {
                t,
                detail: "not a recorded grid time".into(),
            })
        }
    }

    pub fn g(&self, j: usize, m: usize) -> f64 {
        self.g[j * self.n_data + m]
    }

    pub fn r(&self, j: usize, m: usize) -> f64 {
        self.residual[j * self.n_data + m]
    }

    pub fn k1(&self, j: usize, m: usize, f: usize) -> f64 {
        self.k1[(j * self.n_data + m) * self.n_functions() + f]
    }

    pub fn k2(&self, j: usize, m: usize, f: usize) -> f64 {
        self.k2[(j * self.n_data + m) * self.n_functions() + f]
    }

    /// Full gradient pairing `⟨∇(cσ(w·x_m))·∇f, μ_t⟩`.
    pub fn k(&self, j: usize, m: usize, f: usize) -> f64 {
        self.k1(j, m, f) + self.k2(j, m, f)
    }

    /// `Σ_m p_m r_m²` at grid index `j`.
    pub fn loss<T: Scalar>(&self, j: usize, dist: &DataDistribution<T>) -> f64 {
        (0..self.n_data).map(|m| to_f64(dist.weight(m)) * self.r(j, m).powi(2)).sum()
    }
}

/// Gridded solution of the particle ODEs.
#[derive(Clone, Debug)]
pub struct MeanFieldTrajectory<T: Scalar> {
    pub m: usize,
    pub h: f64,
    pub horizon: f64,
    pub steps: usize,
    pub scheme: &'static str,
    pub drive: DriveKind,
    pub snapshots: Vec<(f64, ParticleEnsemble<T>)>,
    pub final_state: ParticleEnsemble<T>,
    pub record: Option<GridRecord>,
}

impl<T: Scalar> MeanFieldTrajectory<T> {
    pub fn snapshot_at(&self, t: f64) -> Result<&ParticleEnsemble<T>> {
        self.snapshots
            .iter()
            .find(|(s, _)| (s - t).abs() <= GRID_SLACK * self.h.max(1.0))
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Range {
                t,
                detail: "no snapshot at this time; request it on the integration grid".into(),
            })
    }

    pub fn record(&self) -> Result<&GridRecord> {
        self.record
            .as_ref()
            .ok_or_else(|| invalid("trajectory was integrated without a pairing record"))
    }
}

/// `⟨f, μ̃_t⟩` from the snapshot at grid time `t`.
pub fn meanfield_pairing<T: Scalar, F: TestFunction<T> + ?Sized>(
    traj: &MeanFieldTrajectory<T>,
    f: &F,
    t: f64,
) -> Result<T> {
    Ok(crate::model::pair_measure(traj.snapshot_at(t)?, f))
}

/// Integration controls.
#[derive(Clone)]
pub struct MeanFieldOptions<T: Scalar> {
    pub h: f64,
    pub snapshot_times: Vec<f64>,
    /// Functions whose gradient pairings are recorded at every grid time;
    /// `None` disables recording.
    pub record: Option<Vec<Arc<dyn TestFunction<T>>>>,
}

impl<T: Scalar> MeanFieldOptions<T> {
    pub fn new(h: f64, snapshot_times: Vec<f64>) -> Self {
        Self {
            h,
            snapshot_times,
            record: None,
        }
    }
}

/// Particle state in structure-of-arrays form.
#[derive(Clone)]
struct State<T> {
    c: Vec<T>,
    w: Vec<T>,
}

struct Workspace<T> {
    // σ and σ' at [m * M + i]
    s: Vec<T>,
    ds: Vec<T>,
}

/// Evaluates activations for all particles and data points and returns the
/// network outputs `⟨cσ(w·x_m), ·⟩` (deterministic chunked reduction).
fn activations<T: Scalar>(
    st: &State<T>,
    d: usize,
    dist: &DataDistribution<T>,
    act: &Activation<T>,
    ws: &mut Workspace<T>,
    need_sums: bool,
) -> Vec<T> {
    let n = st.c.len();
    let nd = dist.len();
    let mut g = Vec::with_capacity(nd);
    for m in 0..nd {
        let x = dist.x(m);
        let s = &mut ws.s[m * n..(m + 1) * n];
        let ds = &mut ws.ds[m * n..(m + 1) * n];
        let partials: Vec<CompensatedSum<T>> = s
            .par_chunks_mut(CHUNK)
            .zip(ds.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(ci, (sc, dsc))| {
                let base = ci * CHUNK;
                let len = sc.len();
                if d == 1 {
                    let x0 = x[0];
                    for k in 0..len {
                        let (a, b) = act.value_and_derivative(st.w[base + k] * x0);
                        sc[k] = a;
                        dsc[k] = b;
                    }
                } else {
                    for k in 0..len {
                        let i = base + k;
                        let (a, b) = act.value_and_derivative(crate::model::dot(&st.w[i * d..(i + 1) * d], x));
                        sc[k] = a;
                        dsc[k] = b;
                    }
                }
                let mut acc = CompensatedSum::new();
                if need_sums {
                    acc.add_products(&st.c[base..base + len], sc);
                }
                acc
            })
            .collect();
        let mut total = CompensatedSum::new();
        for p in &partials {
            total.merge(p);
        }
        g.push(total.value() / from_usize(n));
    }
    g
}

/// Writes the vector field given per-data coefficients `β_m = α p_m r_m`.
fn field_from_activations<T: Scalar>(
    st: &State<T>,
    d: usize,
    dist: &DataDistribution<T>,
    beta: &[T],
    ws: &Workspace<T>,
    out: &mut State<T>,
) {
    let n = st.c.len();
    let nd = dist.len();
    out.c
        .par_chunks_mut(CHUNK)
        .zip(out.w.par_chunks_mut(CHUNK * d))
        .enumerate()
        .for_each(|(ci, (oc, ow))| {
            let base = ci * CHUNK;
            let len = oc.len();
            oc.iter_mut().for_each(|v| *v = T::zero());
            ow.iter_mut().for_each(|v| *v = T::zero());
            for m in 0..nd {
                let s = &ws.s[m * n + base..m * n + base + len];
                let ds = &ws.ds[m * n + base..m * n + base + len];
                let b = beta[m];
                let x = dist.x(m);
                for k in 0..len {
                    oc[k] += b * s[k];
                }
                if d == 1 {
                    let bx = b * x[0];
                    for k in 0..len {
                        ow[k] += bx * ds[k];
                    }
                } else {
                    for k in 0..len {
                        let kw = b * ds[k];
                        for j in 0..d {
                            ow[k * d + j] += kw * x[j];
                        }
                    }
                }
            }
            // multiply the w-field by c_i once
            for k in 0..len {
                let c = st.c[base + k];
                for j in 0..d {
                    ow[k * d + j] *= c;
                }
            }
        });
}

/// Vector field of the self-consistent system at `ens`.
pub fn meanfield_rhs<T: Scalar>(
    ens: &ParticleEnsemble<T>,
    dist: &DataDistribution<T>,
    alpha: T,
    act: &Activation<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if dist.dim() != ens.dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.dim(),
            got: dist.dim(),
        });
    }
    let st = State {
        c: ens.c().to_vec(),
        w: ens.w_flat().to_vec(),
    };
    let (n, d, nd) = (ens.len(), ens.dim(), dist.len());
    let mut ws = Workspace {
        s: vec![T::zero(); n * nd],
        ds: vec![T::zero(); n * nd],
    };
    let g = activations(&st, d, dist, act, &mut ws, true);
    let beta: Vec<T> = (0..nd).map(|m| alpha * dist.weight(m) * (dist.y(m) - g[m])).collect();
    let mut out = State {
        c: vec![T::zero(); n],
        w: vec![T::zero(); n * d],
    };
    field_from_activations(&st, d, dist, &beta, &ws, &mut out);
    Ok((out.c, out.w))
}

fn axpy_into<T: Scalar>(out: &mut State<T>, y: &State<T>, a: T, k: &State<T>) {
    out.c.par_iter_mut().zip(&y.c).zip(&k.c).for_each(|((o, &yv), &kv)| *o = yv + a * kv);
    out.w.par_iter_mut().zip(&y.w).zip(&k.w).for_each(|((o, &yv), &kv)| *o = yv + a * kv);
}

fn accumulate<T: Scalar>(acc: &mut State<T>, a: T, k: &State<T>, first: bool) {
    if first {
        acc.c.par_iter_mut().zip(&k.c).for_each(|(o, &kv)| *o = a * kv);
        acc.w.par_iter_mut().zip(&k.w).for_each(|(o, &kv)| *o = a * kv);
    } else {
        acc.c.par_iter_mut().zip(&k.c).for_each(|(o, &kv)| *o += a * kv);
        acc.w.par_iter_mut().zip(&k.w).for_each(|(o, &kv)| *o += a * kv);
    }
}

/// Gradient pairings of `bank` for every data point from cached activations.
fn record_pairings<T: Scalar>(
    st: &State<T>,
    d: usize,
    dist: &DataDistribution<T>,
    ws: &Workspace<T>,
    bank: &FunctionBank<T>,
) -> (Vec<T>, Vec<T>) {
    let n = st.c.len();
    let (nd, nf, dim) = (dist.len(), bank.len(), 1 + d);
    let idx: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    // plain sums inside a chunk, compensated merge across chunks
    let partials: Vec<Vec<T>> = idx
        .par_iter()
        .map(|&ci| {
            let mut acc = vec![T::zero(); 2 * nd * nf];
            let mut sc = bank.scratch();
            let mut grads = vec![T::zero(); nf * dim];
            let mut xg = vec![T::zero(); nd * nf];
            for i in ci * CHUNK..((ci + 1) * CHUNK).min(n) {
                let w = &st.w[i * d..(i + 1) * d];
                bank.eval(st.c[i], w, &mut sc, None, &mut grads);
                let (a1, a2) = acc.split_at_mut(nd * nf);
                if d == 1 {
                    for m in 0..nd {
                        let s = ws.s[m * n + i];
                        let cdsx = st.c[i] * ws.ds[m * n + i] * dist.x(m)[0];
                        let (r1, r2) = (&mut a1[m * nf..(m + 1) * nf], &mut a2[m * nf..(m + 1) * nf]);
                        for f in 0..nf {
                            r1[f] += s * grads[2 * f];
                            r2[f] += cdsx * grads[2 * f + 1];
                        }
                    }
                    continue;
                }
                for m in 0..nd {
                    let x = dist.x(m);
                    for f in 0..nf {
                        xg[m * nf + f] = crate::model::dot(x, &grads[f * dim + 1..(f + 1) * dim]);
                    }
                }
                for m in 0..nd {
                    let s = ws.s[m * n + i];
                    let cds = st.c[i] * ws.ds[m * n + i];
                    for f in 0..nf {
                        a1[m * nf + f] += s * grads[f * dim];
                        a2[m * nf + f] += cds * xg[m * nf + f];
                    }
                }
            }
            acc
        })
        .collect();
    let nn = from_usize::<T>(n);
    let mut k1 = vec![T::zero(); nd * nf];
    let mut k2 = vec![T::zero(); nd * nf];
    for slot in 0..nd * nf {
        let (mut a, mut b) = (CompensatedSum::new(), CompensatedSum::new());
        for p in &partials {
            a.add(p[slot]);
            b.add(p[nd * nf + slot]);
        }
        k1[slot] = a.value() / nn;
        k2[slot] = b.value() / nn;
    }
    (k1, k2)
}

fn grid_steps(horizon: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("step size h must be positive"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon T must be positive"));
    }
    let k = (horizon / h).round();
    if k < 1.0 || (k * h - horizon).abs() > GRID_SLACK * horizon {
        return Err(invalid(format!("h = {h} does not divide T = {horizon}")));
    }
    Ok(k as usize)
}

fn grid_time(j: usize, steps: usize, horizon: f64) -> f64 {
    if j == steps {
        horizon
    } else {
        horizon * j as f64 / steps as f64
    }
}

fn snapshot_plan(times: &[f64], h: f64, steps: usize) -> Result<Vec<(usize, usize)>> {
    let mut plan = Vec::with_capacity(times.len());
    for (idx, &t) in times.iter().enumerate() {
        let j = (t / h).round();
        if !(j >= 0.0 && (j as usize) <= steps && (j * h - t).abs() <= GRID_SLACK * h.max(1.0)) {
            return Err(Error::Range {
                t,
                detail: format!("not on the integration grid (h = {h})"),
            });
        }
        plan.push((j as usize, idx));
    }
    plan.sort();
    Ok(plan)
}

/// Classical RK4 integration of the self-consistent system.
pub fn integrate_meanfield<T: Scalar>(
    init: &ParticleEnsemble<T>,
    dist: &DataDistribution<T>,
    alpha: f64,
    act: &Activation<T>,
    horizon: f64,
    h: f64,
    snapshot_times: &[f64],
) -> Result<MeanFieldTrajectory<T>> {
    integrate_with(
        init,
        dist,
        alpha,
        act,
        horizon,
        &MeanFieldOptions::new(h, snapshot_times.to_vec()),
        None,
    )
}

/// RK4 integration with recording of data pairings at every grid time.
pub fn integrate_meanfield_with<T: Scalar>(
    init: &ParticleEnsemble<T>,
    dist: &DataDistribution<T>,
    alpha: f64,
    act: &Activation<T>,
    horizon: f64,
    opts: &MeanFieldOptions<T>,
) -> Result<MeanFieldTrajectory<T>> {
    integrate_with(init, dist, alpha, act, horizon, opts, None)
}

/// Integrates the particles of `init` (typically an SGD replica's initial
/// ensemble) along the flow driven by the reference residuals.
///
/// `h` must be an even multiple of the reference grid spacing so that every
/// RK4 stage time is a recorded time.
pub fn integrate_coupled<T: Scalar>(
    init: &ParticleEnsemble<T>,
    dist: &DataDistribution<T>,
    alpha: f64,
    act: &Activation<T>,
    reference: &MeanFieldTrajectory<T>,
    h: f64,
    snapshot_times: &[f64],
) -> Result<MeanFieldTrajectory<T>> {
    let rec = reference.record()?;
    let ratio = (h / reference.h).round();
    if ratio < 2.0 || (ratio as usize) % 2 != 0 || (ratio * reference.h - h).abs() > GRID_SLACK * h {
        return Err(invalid(format!(
            "coupled step {h} must be an even multiple of the reference step {}",
            reference.h
        )));
    }
    if rec.n_data != dist.len() {
        return Err(invalid("reference record was made with a different dataset"));
    }
    integrate_with(
        init,
        dist,
        alpha,
        act,
        reference.horizon,
        &MeanFieldOptions::new(h, snapshot_times.to_vec()),
        Some((rec, ratio as usize)),
    )
}

fn integrate_with<T: Scalar>(
    init: &ParticleEnsemble<T>,
    dist: &DataDistribution<T>,
    alpha: f64,
    act: &Activation<T>,
    horizon: f64,
    opts: &MeanFieldOptions<T>,
    driven: Option<(&GridRecord, usize)>,
) -> Result<MeanFieldTrajectory<T>> {
    if dist.dim() != init.dim() {
        return Err(Error::DimensionMismatch {
            expected: init.dim(),
            got: dist.dim(),
        });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha must be finite and non-negative"));
    }
    let h = opts.h;
    let steps = grid_steps(horizon, h)?;
    let plan = snapshot_plan(&opts.snapshot_times, h, steps)?;
    if let Some((rec, ratio)) = driven {
        if rec.len() < steps * ratio + 1 {
            return Err(invalid("reference record is shorter than the horizon"));
        }
    }
    let (n, d, nd) = (init.len(), init.dim(), dist.len());
    let alpha_t = lit::<T>(alpha);
    let ht = lit::<T>(h);
    let half = lit::<T>(0.5);
    let two = lit::<T>(2.0);
    let sixth = lit::<T>(1.0 / 6.0);

    let mut y = State {
        c: init.c().to_vec(),
        w: init.w_flat().to_vec(),
    };
    let zero = State {
        c: vec![T::zero(); n],
        w: vec![T::zero(); n * d],
    };
    let (mut k, mut acc, mut tmp) = (zero.clone(), zero.clone(), zero);
    let mut ws = Workspace {
        s: vec![T::zero(); n * nd],
        ds: vec![T::zero(); n * nd],
    };
    let bank = opts
        .record
        .as_ref()
        .filter(|_| driven.is_none())
        .map(|fs| FunctionBank::new(fs.clone(), 1 + d));
    let mut record = opts.record.as_ref().filter(|_| driven.is_none()).map(|fs| GridRecord {
        times: Vec::with_capacity(steps + 1),
        n_data: nd,
        labels: fs.iter().map(|f| f.label()).collect(),
        g: Vec::with_capacity((steps + 1) * nd),
        k1: Vec::with_capacity((steps + 1) * nd * fs.len()),
        k2: Vec::with_capacity((steps + 1) * nd * fs.len()),
        residual: Vec::with_capacity((steps + 1) * nd),
    });

    let mut ens = init.clone();
    let mut snapshots: Vec<Option<(f64, ParticleEnsemble<T>)>> = vec![None; plan.len()];
    let mut next = 0;

    // Evaluates the field at `st`, time index `sub` in half-steps from the
    // step start; returns the network outputs when self-consistent.
    let eval = |st: &State<T>, j: usize, sub: usize, ws: &mut Workspace<T>, out: &mut State<T>| -> Vec<T> {
        match driven {
            None => {
                let g = activations(st, d, dist, act, ws, true);
                let beta: Vec<T> = (0..nd).map(|m| alpha_t * dist.weight(m) * (dist.y(m) - g[m])).collect();
                field_from_activations(st, d, dist, &beta, ws, out);
                g
            }
            Some((rec, ratio)) => {
                activations(st, d, dist, act, ws, false);
                let jr = j * ratio + sub * ratio / 2;
                let beta: Vec<T> = (0..nd)
                    .map(|m| alpha_t * dist.weight(m) * lit::<T>(rec.r(jr, m)))
                    .collect();
                field_from_activations(st, d, dist, &beta, ws, out);
                Vec::new()
            }
        }
    };

    for j in 0..=steps {
        let t = grid_time(j, steps, horizon);
        if next < plan.len() && plan[next].0 == j {
            let mut snap = ens.clone();
            snap.c.copy_from_slice(&y.c);
            snap.w.copy_from_slice(&y.w);
            snap.refresh_bound();
            snap.time = TimeIndex::Time(t);
            while next < plan.len() && plan[next].0 == j {
                snapshots[plan[next].1] = Some((opts.snapshot_times[plan[next].1], snap.clone()));
                next += 1;
            }
        }
        if j == steps && record.is_none() {
            break;
        }
        let g = eval(&y, j, 0, &mut ws, &mut k);
        if let (Some(rec), Some(bank)) = (record.as_mut(), bank.as_ref()) {
            let (k1, k2) = record_pairings(&y, d, dist, &ws, bank);
            rec.times.push(t);
            for m in 0..nd {
                rec.g.push(to_f64(g[m]));
                rec.residual.push(to_f64(dist.y(m) - g[m]));
            }
            rec.k1.extend(k1.iter().map(|&v| to_f64(v)));
            rec.k2.extend(k2.iter().map(|&v| to_f64(v)));
        }
        if j == steps {
            break;
        }
        accumulate(&mut acc, T::one(), &k, true);
        axpy_into(&mut tmp, &y, half * ht, &k);
        eval(&tmp, j, 1, &mut ws, &mut k);
        accumulate(&mut acc, two, &k, false);
        axpy_into(&mut tmp, &y, half * ht, &k);
        eval(&tmp, j, 1, &mut ws, &mut k);
        accumulate(&mut acc, two, &k, false);
        axpy_into(&mut tmp, &y, ht, &k);
        eval(&tmp, j, 2, &mut ws, &mut k);
        accumulate(&mut acc, T::one(), &k, false);
        let scale = ht * sixth;
        y.c.par_iter_mut().zip(&acc.c).for_each(|(v, &a)| *v += scale * a);
        y.w.par_iter_mut().zip(&acc.w).for_each(|(v, &a)| *v += scale * a);

        ens.c.copy_from_slice(&y.c);
        ens.w.copy_from_slice(&y.w);
        let b = ens.current_bound();
        if !b.is_finite() {
            return Err(Error::NumericOverflow {
                step: j + 1,
                what: "mean-field state left the finite range".into(),
            });
        }
        ens.raise_bound(b);
    }
    ens.c.copy_from_slice(&y.c);
    ens.w.copy_from_slice(&y.w);
    ens.time = TimeIndex::Time(horizon);
    let snaps = snapshots.into_iter().map(|s| s.expect("every snapshot index is visited")).collect();
    Ok(MeanFieldTrajectory {
        m: n,
        h,
        horizon,
        steps,
        scheme: "rk4",
        drive: if driven.is_some() {
            DriveKind::Reference
        } else {
            DriveKind::SelfConsistent
        },
        snapshots: snaps,
        final_state: ens,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pair_measure, ConstantFn, FnTest, InitLaw, SineMode};
    use crate::rng::{stream, Purpose};

    fn three_point() -> DataDistribution<f64> {
        DataDistribution::new(
            1,
            vec![(vec![-1.0], 0.6), (vec![0.3], -0.4), (vec![1.2], 0.8)],
            vec![0.3, 0.3, 0.4],
            None,
        )
        .unwrap()
    }

    fn ensemble(m: usize, seed: u64) -> ParticleEnsemble<f64> {
        let mut rng = stream(seed, Purpose::Reference, m as u64, 0);
        let law = InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) };
        ParticleEnsemble::sample(&law, m, 1, &mut rng).unwrap()
    }

    struct Sine(SineMode<f64>);
    impl TestFunction<f64> for Sine {
        fn value(&self, c: f64, w: &[f64]) -> f64 {
            self.0.eval(c, w)
        }
        fn gradient(&self, c: f64, w: &[f64], g: &mut [f64]) {
            self.0.eval_gradient(c, w, g)
        }
        fn label(&self) -> String {
            "sine".into()
        }
        fn sine_mode(&self) -> Option<&SineMode<f64>> {
            Some(&self.0)
        }
    }

    #[test]
    fn rhs_zero_for_zero_alpha_and_interpolating_state() {
        let e = ensemble(10, 1);
        let dist = three_point();
        let (dc, dw) = meanfield_rhs(&e, &dist, 0.0, &Activation::Tanh).unwrap();
        assert!(dc.iter().chain(&dw).all(|&v| v == 0.0));
        // labels set to the ensemble's own outputs
        let g: Vec<f64> = (0..3)
            .map(|m| crate::model::network_eval(&e, dist.x(m), &Activation::Tanh).unwrap())
            .collect();
        let fit = DataDistribution::new(
            1,
            (0..3).map(|m| (dist.x(m).to_vec(), g[m])).collect(),
            dist.weights().to_vec(),
            Some(2.0),
        )
        .unwrap();
        let (dc, dw) = meanfield_rhs(&e, &fit, 1.0, &Activation::Tanh).unwrap();
        assert!(dc.iter().chain(&dw).all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn rhs_hand_formula_two_particles() {
        let e = ParticleEnsemble::new(vec![0.4, -0.9], vec![0.7, 0.2], 1).unwrap();
        let (x, y) = (1.3f64, 0.25);
        let dist = DataDistribution::new(1, vec![(vec![x], y)], vec![1.0], None).unwrap();
        let alpha = 0.8;
        let (dc, dw) = meanfield_rhs(&e, &dist, alpha, &Activation::Tanh).unwrap();
        let g = 0.5 * (0.4 * (0.7 * x).tanh() - 0.9 * (0.2 * x).tanh());
        for (i, (c, w)) in [(0.4f64, 0.7f64), (-0.9, 0.2)].into_iter().enumerate() {
            let s = (w * x).tanh();
            assert!((dc[i] - alpha * (y - g) * s).abs() < 1e-12);
            assert!((dw[i] - alpha * (y - g) * c * (1.0 - s * s) * x).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_alpha_trajectory_is_constant() {
        let e = ensemble(50, 2);
        let traj = integrate_meanfield(&e, &three_point(), 0.0, &Activation::Tanh, 1.0, 0.1, &[0.0, 0.5, 1.0]).unwrap();
        for (_, s) in &traj.snapshots {
            assert_eq!(s.c(), e.c());
            assert_eq!(s.w_flat(), e.w_flat());
        }
    }

    #[test]
    fn rk4_order_by_step_halving() {
        let e = ensemble(200, 3);
        let dist = three_point();
        let f = Sine(SineMode { half_width: 4.0, a: vec![1, 2], scale: 1.0 });
        let at = |h: f64| {
            let traj = integrate_meanfield(&e, &dist, 2.0, &Activation::Tanh, 1.0, h, &[1.0]).unwrap();
            pair_measure(traj.snapshot_at(1.0).unwrap(), &f)
        };
        let (a, b, c) = (at(0.2), at(0.1), at(0.05));
        let ratio = (a - b) / (b - c);
        assert!((ratio - 16.0).abs() < 2.0, "Richardson ratio {ratio}");
    }

    #[test]
    fn off_grid_requests_are_refused() {
        let e = ensemble(20, 4);
        let dist = three_point();
        assert!(integrate_meanfield(&e, &dist, 1.0, &Activation::Tanh, 1.0, 0.1, &[0.05]).is_err());
        assert!(integrate_meanfield(&e, &dist, 1.0, &Activation::Tanh, 1.0, 0.3, &[]).is_err());
        let traj = integrate_meanfield(&e, &dist, 1.0, &Activation::Tanh, 1.0, 0.1, &[0.5]).unwrap();
        assert!(meanfield_pairing(&traj, &ConstantFn(1.0), 0.3).is_err());
        assert_eq!(meanfield_pairing(&traj, &ConstantFn(1.0), 0.5).unwrap(), 1.0);
    }

    #[test]
    fn initial_moment_matches_uniform_law() {
        // E[c²] = 1/3 for c ~ U(-1, 1)
        let m = 100_000;
        let e = ensemble(m, 5);
        let traj = integrate_meanfield(&e, &three_point(), 1.0, &Activation::Tanh, 0.01, 0.01, &[0.0]).unwrap();
        let f = FnTest::new("c^2", |c: f64, _: &[f64]| c * c, |c, _, g| {
            g[0] = 2.0 * c;
            g[1] = 0.0;
        });
        let v = meanfield_pairing(&traj, &f, 0.0).unwrap();
        let sd = (1.0f64 / 5.0 - 1.0 / 9.0).sqrt();
        assert!((v - 1.0 / 3.0).abs() < 3.0 * sd / (m as f64).sqrt());
    }

    #[test]
    fn independent_references_agree() {
        let m = 100_000;
        let dist = three_point();
        let f = Sine(SineMode { half_width: 4.0, a: vec![1, 1], scale: 1.0 });
        let run = |seed| {
            let traj =
                integrate_meanfield(&ensemble(m, seed), &dist, 1.0, &Activation::Tanh, 1.0, 0.05, &[1.0]).unwrap();
            let s = traj.snapshot_at(1.0).unwrap();
            let vals: Vec<f64> = (0..m).map(|i| f.value(s.c()[i], s.w(i))).collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            (mean, var)
        };
        let ((a, va), (b, vb)) = (run(10), run(11));
        let se = ((va + vb) / m as f64).sqrt();
        assert!((a - b).abs() < 4.0 * se, "{a} vs {b}, se {se}");
    }

    #[test]
    fn loss_is_non_increasing() {
        let e = ensemble(2000, 6);
        let dist = three_point();
        let f: Arc<dyn TestFunction<f64>> = Arc::new(ConstantFn(1.0));
        let h = 0.01;
        let opts = MeanFieldOptions {
            h,
            snapshot_times: vec![],
            record: Some(vec![f]),
        };
        let traj = integrate_meanfield_with(&e, &dist, 1.0, &Activation::Tanh, 1.0, &opts).unwrap();
        let rec = traj.record().unwrap();
        assert_eq!(rec.len(), 101);
        for j in 1..rec.len() {
            assert!(rec.loss(j, &dist) <= rec.loss(j - 1, &dist) + h.powi(3) * h);
        }
        assert!(rec.loss(100, &dist) < rec.loss(0, &dist));
    }

    #[test]
    fn record_matches_direct_pairings() {
        let e = ensemble(500, 7);
        let dist = three_point();
        let mode = SineMode { half_width: 3.0, a: vec![2, 1], scale: 0.5 };
        let fs: Vec<Arc<dyn TestFunction<f64>>> = vec![Arc::new(Sine(mode))];
        let opts = MeanFieldOptions {
            h: 0.1,
            snapshot_times: vec![0.5],
            record: Some(fs.clone()),
        };
        let traj = integrate_meanfield_with(&e, &dist, 1.0, &Activation::Tanh, 1.0, &opts).unwrap();
        let rec = traj.record().unwrap();
        let j = rec.index_of(0.5).unwrap();
        let snap = traj.snapshot_at(0.5).unwrap();
        for m in 0..3 {
            let (a, b) = crate::sgd::gradient_pairing(snap, dist.x(m), fs[0].as_ref(), &Activation::Tanh);
            assert!((rec.k1(j, m, 0) - a).abs() < 1e-14);
            assert!((rec.k2(j, m, 0) - b).abs() < 1e-14);
            let g = crate::model::network_eval(snap, dist.x(m), &Activation::Tanh).unwrap();
            assert!((rec.g(j, m) - g).abs() < 1e-14);
        }
        assert!(rec.index_of(0.55).is_err());
    }

    #[test]
    fn driven_by_own_record_reproduces_self_consistent_flow() {
        // a reference driven by its own residuals is the same ODE
        let e = ensemble(300, 8);
        let dist = three_point();
        let opts = MeanFieldOptions {
            h: 0.005,
            snapshot_times: vec![1.0],
            record: Some(vec![Arc::new(ConstantFn(1.0)) as Arc<dyn TestFunction<f64>>]),
        };
        let reference = integrate_meanfield_with(&e, &dist, 1.0, &Activation::Tanh, 1.0, &opts).unwrap();
        let coupled = integrate_coupled(&e, &dist, 1.0, &Activation::Tanh, &reference, 0.01, &[0.0, 1.0]).unwrap();
        assert!(coupled.snapshot_at(0.0).unwrap().same_particles(&e));
        let (a, b) = (coupled.snapshot_at(1.0).unwrap(), reference.snapshot_at(1.0).unwrap());
        for i in 0..300 {
            assert!((a.c()[i] - b.c()[i]).abs() < 1e-7);
        }
        assert!(integrate_coupled(&e, &dist, 1.0, &Activation::Tanh, &reference, 0.015, &[]).is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let e = ensemble(10_000, 9);
        let dist = three_point();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| integrate_meanfield(&e, &dist, 1.0, &Activation::Tanh, 0.2, 0.05, &[0.2]).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert!(a.final_state.same_particles(&b.final_state));
    }
}
