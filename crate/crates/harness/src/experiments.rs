//! The five experiment kinds. Each reads replica cells from a [`Context`],
//! writes tables and `(x, y, err)` plot series into the output directory,
//! and returns its pass/fail checks.

use std::path::PathBuf;
use std::sync::Arc;

use mfclt::fluctuation::{pointwise_variance, FluctuationSamples};
use mfclt::io::{write_matrix_archive, write_samples_csv, MatrixArchive};
use mfclt::rng::{stream_id, Purpose};
use mfclt::spde::{simulate_spde, RKernel};
use mfclt::stats::{covariance_with_jackknife, gaussianity_test, mean_sd, rate_fit, CovarianceEstimate};
use mfclt::{GalerkinSystem, TestFunction};

use crate::context::{Context, FailedCell, Need, ReplicaRun};
use crate::error::{validation, IoContext, Result};
use crate::manifest::{code_version, inventory, unix_now, write_manifest, Check, RunManifest, RunSeed};
use crate::spec::{ExperimentKind, ExperimentSpec};

/// Tolerances of the pass/fail checks.
pub mod tolerance {
    pub const LLN_SLOPE: (f64, f64) = (-0.65, -0.35);
    pub const INITIAL_VARIANCE_REL: f64 = 0.15;
    pub const GAUSSIAN_PASS_FRACTION: f64 = 0.8;
    pub const QV_REL: f64 = 0.10;
    pub const SPDE_REL: f64 = 0.25;
    pub const SPDE_SE: f64 = 3.0;
    pub const V_SLOPE: (f64, f64) = (-1.3, -0.7);
    pub const GAMMA_SLOPE: (f64, f64) = (-0.7, -0.3);
    pub const XI_RATIO: f64 = 3.0;
    pub const DECOMPOSITION: f64 = 1e-10;
}

/// Collects emitted files relative to the output directory.
struct Emitter {
    dir: PathBuf,
    files: Vec<String>,
}

impl Emitter {
    fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush().at(&path)?;
        Ok(())
    }

    /// Plot-ready `(x, y, err)` series.
    fn series(&mut self, name: &str, points: &[(f64, f64, f64)]) -> Result<()> {
        let rows: Vec<Vec<String>> = points.iter().map(|(x, y, e)| vec![fmt(*x), fmt(*y), fmt(*e)]).collect();
        self.table(name, &["x", "y", "err"], &rows)
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Result of one experiment before it is written into a manifest.
#[derive(Default)]
struct Outcome {
    checks: Vec<Check>,
    cells: Vec<(usize, u64)>,
    failed: Vec<FailedCell>,
    notes: Vec<(String, String)>,
}

impl Outcome {
    fn absorb(&mut self, runs: &[Arc<ReplicaRun>], failed: Vec<FailedCell>) {
        self.cells.extend(runs.iter().map(|r| (r.n, r.replica)));
        self.failed.extend(failed);
    }
}

fn eta(run: &ReplicaRun, nf: usize, ti: usize, f: usize) -> f64 {
    run.sample.eta[ti * nf + f]
}

fn mean_se(x: &[f64]) -> (f64, f64) {
    let (m, sd) = mean_sd(x);
    (m, sd / (x.len() as f64).sqrt())
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

fn need_runs(runs: &[Arc<ReplicaRun>], n: usize) -> Result<()> {
    if runs.len() < 3 {
        return Err(validation(format!("only {} replicas completed at N = {n}", runs.len())));
    }
    Ok(())
}

fn lln_rate(ctx: &Context, spec: &ExperimentSpec, out: &mut Emitter) -> Result<Outcome> {
    let mut o = Outcome::default();
    let ti = ctx.time_index(ctx.horizon)?;
    let nf = ctx.tracked;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for &n in &spec.n_values {
        let (runs, failed) = ctx.replicas(n, spec.replicas, Need::PLAIN);
        o.absorb(&runs, failed);
        need_runs(&runs, n)?;
        let errs: Vec<f64> = runs.iter().map(|r| eta(r, nf, ti, 0).abs() / (n as f64).sqrt()).collect();
        let (m, se) = mean_se(&errs);
        rows.push(vec![n.to_string(), runs.len().to_string(), fmt(m), fmt(se)]);
        series.push((n as f64, m, se));
    }
    out.table("lln_rate.csv", &["n", "replicas", "mean_abs_error", "se"], &rows)?;
    out.series("series_lln.csv", &series)?;
    let xs: Vec<f64> = series.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = series.iter().map(|p| p.1).collect();
    let fit = rate_fit(&xs, &ys)?;
    out.table(
        "lln_rate_fit.csv",
        &["slope", "intercept", "r2"],
        &[vec![fmt(fit.slope), fmt(fit.intercept), fmt(fit.r2)]],
    )?;
    let (lo, hi) = tolerance::LLN_SLOPE;
    o.checks.push(
        Check::new(
            format!("LLN rate of |<{}, mu^N_T - mu_T>|", ctx.basis[0].label()),
            format!("slope {:.3} (r2 {:.3})", fit.slope, fit.r2),
            format!("slope in [{lo}, {hi}]"),
            in_range(fit.slope, tolerance::LLN_SLOPE),
        )
        .with_files(&["lln_rate.csv", "lln_rate_fit.csv"]),
    );
    Ok(o)
}

fn assemble_samples(ctx: &Context, n: usize, runs: &[Arc<ReplicaRun>]) -> Result<FluctuationSamples> {
    Ok(FluctuationSamples::assemble(
        ctx.labels(),
        ctx.times.clone(),
        n,
        runs.iter().map(|r| r.sample.clone()).collect(),
    )?)
}

fn clt_gauss(ctx: &Context, spec: &ExperimentSpec, out: &mut Emitter) -> Result<Outcome> {
    let mut o = Outcome::default();
    let n = spec.n_values[0];
    let t_end = ctx.horizon;
    let t0 = ctx.time_index(0.0).map_err(|_| validation("clt-gauss needs t = 0 on the time grid"))?;
    let (runs, failed) = ctx.replicas(n, spec.replicas, Need::COUPLED);
    o.absorb(&runs, failed);
    need_runs(&runs, n)?;
    let samples = assemble_samples(ctx, n, &runs)?;
    write_samples_csv(&out.path("samples.csv"), &samples)?;
    let nf = ctx.tracked;
    let labels = ctx.labels();

    // Initial variance against the reference's pointwise variance.
    let ref0 = ctx.reference.snapshot_at(ctx.times[t0])?;
    let mut rows = Vec::new();
    let mut lowest = None;
    for f in 0..nf {
        let col: Vec<f64> = runs.iter().map(|r| eta(r, nf, t0, f)).collect();
        let (_, sd) = mean_sd(&col);
        let target = pointwise_variance(ref0, &ctx.basis[f]);
        let rel = (sd * sd - target).abs() / target;
        rows.push(vec![labels[f].clone(), fmt(sd * sd), fmt(target), fmt(rel)]);
        if f == 0 {
            lowest = Some((sd * sd, target, rel));
        }
    }
    out.table("initial_variance.csv", &["function", "sample_variance", "reference_variance", "rel_error"], &rows)?;
    let (v, target, rel) = lowest.expect("at least one tracked function");
    o.checks.push(
        Check::new(
            format!("initial variance of <{}, eta_0>", labels[0]),
            format!("{v:.4e} vs {target:.4e} (rel {rel:.3})"),
            format!("rel <= {}", tolerance::INITIAL_VARIANCE_REL),
            rel <= tolerance::INITIAL_VARIANCE_REL,
        )
        .with_files(&["initial_variance.csv", "samples.csv"]),
    );

    // Kolmogorov-Smirnov per (t, f).
    let mut rows = Vec::new();
    let mut accepted_at = Vec::new();
    for (ti, &t) in ctx.times.iter().enumerate() {
        let mut accepted = 0;
        for f in 0..nf {
            let col = samples.column(mfclt::fluctuation::Component::Eta, t, f)?;
            let g = gaussianity_test(&col, spec.fluct.significance)?;
            accepted += usize::from(!g.reject);
            rows.push(vec![fmt(t), labels[f].clone(), g.n.to_string(), fmt(g.statistic), fmt(g.p_value), g.reject.to_string()]);
        }
        accepted_at.push((ti, accepted));
    }
    out.table("gaussianity.csv", &["t", "function", "n", "statistic", "p_value", "reject"], &rows)?;
    let required = (tolerance::GAUSSIAN_PASS_FRACTION * nf as f64).ceil() as usize;
    for t in [0.5 * t_end, t_end] {
        let Ok(ti) = ctx.time_index(t) else { continue };
        let accepted = accepted_at[ti].1;
        o.checks.push(
            Check::new(
                format!("Gaussianity of eta at t = {t}"),
                format!("{accepted} of {nf} functions not rejected at {}", spec.fluct.significance),
                format!(">= {required} of {nf}"),
                accepted >= required,
            )
            .with_files(&["gaussianity.csv"]),
        );
    }

    let residual = samples.decomposition_residual()?;
    o.checks.push(
        Check::new(
            "decomposition eta = Xi + Z",
            format!("max residual {residual:.2e} over {} cells", samples.eta.len()),
            format!("<= {:.0e}", tolerance::DECOMPOSITION),
            residual <= tolerance::DECOMPOSITION,
        )
        .with_files(&["samples.csv"]),
    );
    Ok(o)
}

fn qv_match(ctx: &Context, spec: &ExperimentSpec, out: &mut Emitter) -> Result<Outcome> {
    let mut o = Outcome::default();
    let rec = ctx.reference.record()?;
    let kernel = RKernel::new(rec, &ctx.dist, ctx.alpha)?;
    let labels = ctx.labels();
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for &n in &spec.n_values {
        let (runs, failed) = ctx.replicas(n, spec.replicas, Need::DIAGNOSTICS);
        o.absorb(&runs, failed);
        need_runs(&runs, n)?;
        for f in 0..ctx.tracked {
            let qv: Vec<f64> = runs.iter().map(|r| r.diagnostics.as_ref().expect("diagnostics requested").qv[f]).collect();
            let (m, se) = mean_se(&qv);
            let limit = kernel.martingale_covariance(ctx.horizon, f, f)?;
            let rel = (m - limit).abs() / limit;
            rows.push(vec![n.to_string(), labels[f].clone(), fmt(m), fmt(se), fmt(limit), fmt(rel)]);
            if f == 0 {
                series.push((n as f64, rel, se / limit));
                o.checks.push(
                    Check::new(
                        format!("quadratic variation of <{}, M^N> at N = {n}", labels[f]),
                        format!("{m:.4e} vs limit {limit:.4e} (rel {rel:.3}, {} replicas)", runs.len()),
                        format!("rel <= {}", tolerance::QV_REL),
                        rel <= tolerance::QV_REL,
                    )
                    .with_files(&["qv_match.csv"]),
                );
            }
        }
    }
    out.table("qv_match.csv", &["n", "function", "qv_mean", "qv_se", "limit", "rel_error"], &rows)?;
    out.series("series_qv.csv", &series)?;
    Ok(o)
}

/// Entrywise comparison of two covariance estimates on the leading block.
fn compare_block(model: &CovarianceEstimate, emp: &CovarianceEstimate, k: usize) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    for a in 0..k {
        for b in 0..k {
            let (x, y) = (model.get(a, b), emp.get(a, b));
            let se = (model.se(a, b).powi(2) + emp.se(a, b).powi(2)).sqrt();
            let ok = (x - y).abs() <= (tolerance::SPDE_REL * y.abs()).max(tolerance::SPDE_SE * se);
            out.push((a, b, ok));
        }
    }
    out
}

fn spde_compare(ctx: &Context, spec: &ExperimentSpec, out: &mut Emitter) -> Result<Outcome> {
    let mut o = Outcome::default();
    let s = spec.spde.as_ref().ok_or_else(|| validation("spde-compare needs an [spde] table"))?;
    let n = spec.n_values[0];
    let t = ctx.horizon;
    let ti = ctx.time_index(t)?;
    let nf = ctx.tracked;
    let k = s.compare;
    let (runs, failed) = ctx.replicas(n, spec.replicas, Need::PLAIN);
    o.absorb(&runs, failed);
    need_runs(&runs, n)?;
    let rows: Vec<Vec<f64>> = runs.iter().map(|r| (0..k).map(|a| eta(r, nf, ti, a)).collect()).collect();
    let emp = covariance_with_jackknife(&rows)?;

    let labels = ctx.labels();
    let mut table = Vec::new();
    let mut leading: Option<CovarianceEstimate> = None;
    let mut modes = vec![s.modes];
    if s.sensitivity_modes != s.modes {
        modes.push(s.sensitivity_modes);
    }
    for &m in &modes {
        let sys = GalerkinSystem::assemble(&ctx.domain, &ctx.basis, m, &ctx.reference, &ctx.dist, &ctx.act, ctx.alpha, s.grid)?;
        let residual: Vec<String> = sys.residual.iter().map(|r| format!("{r:.3}")).collect();
        o.notes.push((format!("galerkin m={m} projection residual"), residual.join(" ")));
        for w in &sys.warnings {
            o.notes.push((format!("galerkin m={m} warning"), w.clone()));
        }
        let paths = simulate_spde(&sys, s.paths, s.dt, spec.seed, &[t])?;
        let model = paths.covariance(t, k)?;
        let verdicts = compare_block(&model, &emp, k);
        for &(a, b, ok) in &verdicts {
            table.push(vec![
                m.to_string(),
                labels[a].clone(),
                labels[b].clone(),
                fmt(model.get(a, b)),
                fmt(model.se(a, b)),
                fmt(emp.get(a, b)),
                fmt(emp.se(a, b)),
                ok.to_string(),
            ]);
        }
        let name = format!("galerkin_m{m}.json");
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("modes".to_string(), m.to_string());
        meta.insert("box_half_width".to_string(), fmt(ctx.domain.half_width()));
        meta.insert("j".to_string(), ctx.domain.j().to_string());
        meta.insert("per_panel".to_string(), s.grid.per_panel.to_string());
        meta.insert("panels".to_string(), s.grid.panels.to_string());
        meta.insert("reference_h".to_string(), fmt(ctx.reference.h));
        write_matrix_archive(&out.path(&name), &MatrixArchive { meta, system: sys })?;
        if m == s.modes {
            let bad: Vec<String> = verdicts
                .iter()
                .filter(|v| !v.2 && v.0 <= v.1)
                .map(|&(a, b, _)| format!("({a},{b})"))
                .collect();
            let value = if bad.is_empty() {
                format!("all {k}x{k} entries within tolerance")
            } else {
                format!("entries outside tolerance: {}", bad.join(" "))
            };
            o.checks.push(
                Check::new(
                    format!("Galerkin covariance (m = {m}, {} paths) vs replicas at N = {n}", s.paths),
                    value,
                    format!("max({}% rel, {} combined SE) entrywise", tolerance::SPDE_REL * 100.0, tolerance::SPDE_SE),
                    bad.is_empty(),
                )
                .with_files(&["spde_covariance.csv", &name]),
            );
            leading = Some(model);
        } else if let Some(base) = &leading {
            let mut worst: f64 = 0.0;
            for a in 0..k {
                for b in 0..k {
                    let scale = (base.get(a, a) * base.get(b, b)).abs().sqrt().max(f64::MIN_POSITIVE);
                    worst = worst.max((model.get(a, b) - base.get(a, b)).abs() / scale);
                }
            }
            o.notes.push((
                format!("truncation sensitivity m={} -> {m}", s.modes),
                format!("max |dC_ab| / sqrt(C_aa C_bb) = {worst:.3}"),
            ));
        }
    }
    out.table(
        "spde_covariance.csv",
        &["modes", "f_a", "f_b", "model", "model_se", "replicas", "replicas_se", "within_tolerance"],
        &table,
    )?;
    Ok(o)
}

fn remainder_scaling(ctx: &Context, spec: &ExperimentSpec, out: &mut Emitter) -> Result<Outcome> {
    let mut o = Outcome::default();
    let label = ctx.basis[0].label();
    let mut rows = Vec::new();
    let (mut v_series, mut g_series) = (Vec::new(), Vec::new());
    for &n in &spec.n_values {
        let (runs, failed) = ctx.replicas(n, spec.replicas, Need::DIAGNOSTICS);
        o.absorb(&runs, failed);
        need_runs(&runs, n)?;
        let diag = |r: &Arc<ReplicaRun>| r.diagnostics.clone().expect("diagnostics requested");
        let v: Vec<f64> = runs.iter().map(|r| diag(r).v_sup[0]).collect();
        let g: Vec<f64> = runs.iter().map(|r| {
            let d = diag(r);
            d.gamma[0].gamma1.abs() + d.gamma[0].gamma2.abs()
        }).collect();
        let (vm, vse) = mean_se(&v);
        let (gm, gse) = mean_se(&g);
        rows.push(vec![n.to_string(), runs.len().to_string(), fmt(vm), fmt(vse), fmt(gm), fmt(gse)]);
        v_series.push((n as f64, vm, vse));
        g_series.push((n as f64, gm, gse));
    }
    out.table("remainders.csv", &["n", "replicas", "v_sup_mean", "v_sup_se", "gamma_mean", "gamma_se"], &rows)?;
    out.series("series_v_sup.csv", &v_series)?;
    out.series("series_gamma.csv", &g_series)?;
    let fit = |s: &[(f64, f64, f64)]| {
        let xs: Vec<f64> = s.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = s.iter().map(|p| p.1).collect();
        rate_fit(&xs, &ys)
    };
    let vf = fit(&v_series)?;
    let gf = fit(&g_series)?;
    o.checks.push(
        Check::new(
            format!("sup_t |V^N_t| scaling for {label}"),
            format!("slope {:.3} (r2 {:.3})", vf.slope, vf.r2),
            format!("slope in [{}, {}]", tolerance::V_SLOPE.0, tolerance::V_SLOPE.1),
            in_range(vf.slope, tolerance::V_SLOPE),
        )
        .with_files(&["remainders.csv"]),
    );
    o.checks.push(
        Check::new(
            format!("|Gamma1_T| + |Gamma2_T| scaling for {label}"),
            format!("slope {:.3} (r2 {:.3})", gf.slope, gf.r2),
            format!("slope in [{}, {}]", tolerance::GAMMA_SLOPE.0, tolerance::GAMMA_SLOPE.1),
            in_range(gf.slope, tolerance::GAMMA_SLOPE),
        )
        .with_files(&["remainders.csv"]),
    );

    if let Some(xi) = &spec.xi {
        let mut rows = Vec::new();
        let mut per_time: Vec<(f64, Vec<f64>)> = Vec::new();
        for &n in &xi.n_values {
            let (runs, failed) = ctx.replicas(n, xi.replicas, Need::COUPLED);
            o.absorb(&runs, failed);
            need_runs(&runs, n)?;
            for (ti, &t) in ctx.times.iter().enumerate() {
                let norms: Vec<f64> = runs.iter().map(|r| r.xi_norm.as_ref().expect("coupled run")[ti].value).collect();
                let uppers: Vec<f64> = runs.iter().map(|r| r.xi_norm.as_ref().expect("coupled run")[ti].upper()).collect();
                let (m, se) = mean_se(&norms);
                let (um, _) = mean_se(&uppers);
                rows.push(vec![n.to_string(), fmt(t), fmt(m), fmt(se), fmt(um)]);
                match per_time.iter_mut().find(|p| p.0 == t) {
                    Some(p) => p.1.push(m),
                    None => per_time.push((t, vec![m])),
                }
            }
        }
        out.table("xi_norm.csv", &["n", "t", "mean_norm", "se", "mean_upper_bound"], &rows)?;
        o.notes.push((
            "xi dual norm".into(),
            format!("J = {}, A_max = {}", ctx.domain.j(), ctx.a_max),
        ));
        for t in [0.5 * ctx.horizon, ctx.horizon] {
            let Some((_, means)) = per_time.iter().find(|p| (p.0 - t).abs() <= 1e-12) else { continue };
            let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
            let ratio = hi / lo;
            o.checks.push(
                Check::new(
                    format!("Xi dual-norm spread across N at t = {t}"),
                    format!("max/min of replica means {ratio:.3}"),
                    format!("<= {}", tolerance::XI_RATIO),
                    ratio <= tolerance::XI_RATIO,
                )
                .with_files(&["xi_norm.csv"]),
            );
        }
    }
    Ok(o)
}

/// Builds a context and runs `spec`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunManifest> {
    spec.validate()?;
    let ctx = Context::prepare(spec)?;
    run_experiment_with(&ctx, spec)
}

/// Runs `spec` on a prepared context, writing every output and the manifest
/// into `spec.out`.
pub fn run_experiment_with(ctx: &Context, spec: &ExperimentSpec) -> Result<RunManifest> {
    spec.validate()?;
    if !ctx.serves(spec) {
        return Err(validation("context was prepared for a different model, reference or grid"));
    }
    let started = unix_now();
    std::fs::create_dir_all(&spec.out).at(&spec.out)?;
    let mut out = Emitter { dir: spec.out.clone(), files: Vec::new() };
    std::fs::write(out.path("spec.toml"), spec.to_toml()?).at(spec.out.join("spec.toml"))?;
    let mut outcome = match spec.kind {
        ExperimentKind::LlnRate => lln_rate(ctx, spec, &mut out)?,
        ExperimentKind::CltGauss => clt_gauss(ctx, spec, &mut out)?,
        ExperimentKind::QvMatch => qv_match(ctx, spec, &mut out)?,
        ExperimentKind::SpdeCompare => spde_compare(ctx, spec, &mut out)?,
        ExperimentKind::RemainderScaling => remainder_scaling(ctx, spec, &mut out)?,
    };
    outcome.cells.sort_unstable();
    outcome.cells.dedup();
    let outside_k = outcome_outside_k(ctx, &outcome);
    let mut notes = vec![
        ("pilot bound".to_string(), fmt(ctx.pilot_bound)),
        ("C_o".to_string(), fmt(ctx.domain.c_o())),
        ("box half-width B".to_string(), fmt(ctx.domain.half_width())),
        ("J".to_string(), ctx.domain.j().to_string()),
        ("reference".to_string(), format!("M = {}, h = {}", ctx.reference.m, ctx.reference.h)),
        ("particles outside K (max over cells)".to_string(), outside_k.to_string()),
    ];
    notes.append(&mut outcome.notes);
    let files = inventory(&spec.out, &out.files)?;
    let manifest = RunManifest {
        experiment: spec.kind.to_string(),
        spec_sha256: spec.digest()?,
        code_version: code_version(),
        master_seed: spec.seed,
        started_unix: started,
        finished_unix: unix_now(),
        runs: outcome
            .cells
            .iter()
            .map(|&(n, replica)| RunSeed { n, replica, stream_id: stream_id(Purpose::Replica, n as u64, replica) })
            .collect(),
        failed_cells: outcome.failed,
        checks: outcome.checks,
        files,
        notes,
    };
    write_manifest(&spec.out, &manifest)?;
    Ok(manifest)
}

fn outcome_outside_k(ctx: &Context, o: &Outcome) -> usize {
    o.cells
        .iter()
        .filter_map(|&(n, r)| ctx.cached(n, r))
        .map(|run| run.outside_k)
        .max()
        .unwrap_or(0)
}
