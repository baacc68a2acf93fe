//! Command-line front end. Every subcommand reads an [`ExperimentSpec`]
//! (or a sample table), applies flag overrides, validates before any
//! compute, and writes its outputs plus a manifest into the output directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mfclt::io::{read_samples_csv, write_ensemble_csv, write_matrix_archive, write_paths_csv, write_samples_csv, MatrixArchive};
use mfclt::meanfield::integrate_meanfield;
use mfclt::model::ParticleEnsemble;
use mfclt::rng::{stream, stream_id, Purpose};
use mfclt::sgd::run_sgd_with;
use mfclt::spde::simulate_spde;
use mfclt::stats::gaussianity_test;
use mfclt::{FluctuationSamples, GalerkinSystem, RunConfig, SgdOptions, TestFunction};

use crate::context::{Context, Need};
use crate::error::{validation, IoContext, Result};
use crate::experiments::run_experiment_with;
use crate::manifest::{code_version, inventory, unix_now, write_manifest, RunManifest, RunSeed};
use crate::report::report;
use crate::spec::{ExperimentKind, ExperimentSpec};

#[derive(Debug, Parser)]
#[command(name = "mfclt", version, about = "Mean-field SGD fluctuation experiments")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run SGD replicas and write particle snapshots.
    Simulate(Overrides),
    /// Integrate the reference mean-field ensemble and write snapshots.
    Meanfield(Overrides),
    /// Collect eta / Xi / Z samples across replicas.
    Fluct(Overrides),
    /// Kolmogorov-Smirnov tests on a sample table.
    CltTest(CltTestArgs),
    /// Assemble the Galerkin model and simulate coefficient paths.
    Spde(Overrides),
    /// Run a full experiment (lln-rate, clt-gauss, qv-match, spde-compare,
    /// remainder-scaling) and write its manifest.
    Run(Overrides),
    /// Verify a manifest and print its summary.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Overrides {
    /// Experiment spec (TOML). Without it the preset for --kind is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset used when no config is given.
    #[arg(long, default_value = "clt-gauss")]
    pub kind: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated widths (for `meanfield`: the reference size).
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated sample times.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub replicas: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CltTestArgs {
    /// Sample table written by `fluct` or `run`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Width the samples were drawn at (recorded in the output).
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.01)]
    pub significance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Manifest file or the directory holding it.
    #[arg(long)]
    pub manifest: PathBuf,
}

impl Overrides {
    /// Loads the spec and applies the flags. `reference_n` routes `--n` to
    /// the reference size instead of the sweep.
    pub fn spec(&self, reference_n: bool) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::preset(self.kind.parse::<ExperimentKind>()?),
        };
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(o) = &self.out {
            spec.out = o.clone();
        }
        if let Some(n) = &self.n {
            if reference_n {
                spec.reference.m = *n.first().ok_or_else(|| validation("--n needs a value"))?;
            } else {
                spec.n_values = n.clone();
            }
        }
        if let Some(a) = self.alpha {
            spec.model.alpha = a;
        }
        if let Some(g) = &self.grid {
            spec.fluct.times = g.clone();
        }
        if let Some(r) = self.replicas {
            spec.replicas = r;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn fmt_t(t: f64) -> String {
    format!("{t}").replace('.', "p")
}

fn base_manifest(name: &str, spec: Option<&ExperimentSpec>, seed: u64, started: u64) -> Result<RunManifest> {
    Ok(RunManifest {
        experiment: name.to_string(),
        spec_sha256: spec.map(|s| s.digest()).transpose()?.unwrap_or_default(),
        code_version: code_version(),
        master_seed: seed,
        started_unix: started,
        finished_unix: 0,
        runs: Vec::new(),
        failed_cells: Vec::new(),
        checks: Vec::new(),
        files: Vec::new(),
        notes: Vec::new(),
    })
}

fn finish(dir: &Path, mut m: RunManifest, files: &[String]) -> Result<RunManifest> {
    m.files = inventory(dir, files)?;
    m.finished_unix = unix_now();
    write_manifest(dir, &m)?;
    Ok(m)
}

fn prepare_out(spec: &ExperimentSpec) -> Result<Vec<String>> {
    std::fs::create_dir_all(&spec.out).at(&spec.out)?;
    let path = spec.out.join("spec.toml");
    std::fs::write(&path, spec.to_toml()?).at(&path)?;
    Ok(vec!["spec.toml".to_string()])
}

fn simulate(spec: &ExperimentSpec) -> Result<RunManifest> {
    let started = unix_now();
    let mut files = prepare_out(spec)?;
    let dist = spec.model.dataset.load()?;
    let act = spec.model.activation.build::<f64>();
    let mut m = base_manifest("simulate", Some(spec), spec.seed, started)?;
    for &n in &spec.n_values {
        let config = RunConfig {
            n,
            t_horizon: spec.model.t_horizon,
            alpha: spec.model.alpha,
            seed: spec.seed,
            d: dist.dim(),
            activation: spec.model.activation,
            dataset: String::new(),
            replicas: spec.replicas,
            init: spec.model.init.clone(),
        };
        for r in 0..spec.replicas as u64 {
            let run = run_sgd_with(&config, &dist, &act, &spec.fluct.times, &SgdOptions { replica: r, diagnostics: None });
            match run {
                Ok(run) => {
                    for (t, ens) in &run.snapshots {
                        let name = format!("sgd_n{n}_r{r}_t{}.csv", fmt_t(*t));
                        write_ensemble_csv(&spec.out.join(&name), ens)?;
                        files.push(name);
                    }
                    m.runs.push(RunSeed { n, replica: r, stream_id: stream_id(Purpose::Replica, n as u64, r) });
                }
                Err(e) => m.failed_cells.push(crate::context::FailedCell { n, replica: r, error: e.to_string() }),
            }
        }
    }
    finish(&spec.out, m, &files)
}

fn meanfield(spec: &ExperimentSpec) -> Result<RunManifest> {
    let started = unix_now();
    let mut files = prepare_out(spec)?;
    let dist = spec.model.dataset.load()?;
    let act = spec.model.activation.build::<f64>();
    let mut rng = stream(spec.seed, Purpose::Reference, spec.reference.m as u64, 0);
    let init = ParticleEnsemble::sample(&spec.model.init, spec.reference.m, dist.dim(), &mut rng)?;
    let traj = integrate_meanfield(
        &init,
        &dist,
        spec.model.alpha,
        &act,
        spec.model.t_horizon,
        spec.reference.h,
        &spec.fluct.times,
    )?;
    for (t, ens) in &traj.snapshots {
        let name = format!("meanfield_m{}_t{}.csv", traj.m, fmt_t(*t));
        write_ensemble_csv(&spec.out.join(&name), ens)?;
        files.push(name);
    }
    let mut m = base_manifest("meanfield", Some(spec), spec.seed, started)?;
    m.notes.push(("integrator".into(), format!("{} h = {}, M = {}", traj.scheme, traj.h, traj.m)));
    finish(&spec.out, m, &files)
}

fn fluct(spec: &ExperimentSpec) -> Result<RunManifest> {
    let started = unix_now();
    let ctx = Context::prepare(spec)?;
    let mut files = prepare_out(spec)?;
    let n = spec.n_values[0];
    let (runs, failed) = ctx.replicas(n, spec.replicas, Need::COUPLED);
    let samples = FluctuationSamples::assemble(ctx.labels(), ctx.times.clone(), n, runs.iter().map(|r| r.sample.clone()).collect())?;
    write_samples_csv(&spec.out.join("samples.csv"), &samples)?;
    files.push("samples.csv".into());
    let mut m = base_manifest("fluct", Some(spec), spec.seed, started)?;
    m.runs = runs.iter().map(|r| RunSeed { n, replica: r.replica, stream_id: stream_id(Purpose::Replica, n as u64, r.replica) }).collect();
    m.failed_cells = failed;
    m.notes.push(("reference".into(), format!("M = {}, h = {}", spec.reference.m, spec.reference.h)));
    m.notes.push(("box half-width B".into(), ctx.domain.half_width().to_string()));
    finish(&spec.out, m, &files)
}

fn clt_test(args: &CltTestArgs) -> Result<RunManifest> {
    let started = unix_now();
    let samples = read_samples_csv(&args.samples, args.n)?;
    std::fs::create_dir_all(&args.out).at(&args.out)?;
    let name = "gaussianity.csv";
    let path = args.out.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["t", "function", "n", "statistic", "p_value", "reject"])?;
    let mut m = base_manifest("clt-test", None, 0, started)?;
    for &t in &samples.times {
        for (f, label) in samples.labels.iter().enumerate() {
            let col = samples.column(mfclt::fluctuation::Component::Eta, t, f)?;
            let g = gaussianity_test(&col, args.significance)?;
            w.write_record([
                t.to_string(),
                label.clone(),
                g.n.to_string(),
                g.statistic.to_string(),
                g.p_value.to_string(),
                g.reject.to_string(),
            ])?;
        }
    }
    w.flush().at(&path)?;
    m.notes.push(("samples".into(), args.samples.display().to_string()));
    m.notes.push(("significance".into(), args.significance.to_string()));
    finish(&args.out, m, &[name.to_string()])
}

fn spde(spec: &ExperimentSpec) -> Result<RunManifest> {
    let started = unix_now();
    let s = spec
        .spde
        .clone()
        .or_else(|| ExperimentSpec::preset(ExperimentKind::SpdeCompare).spde)
        .expect("preset carries an spde table");
    if s.modes > spec.sobolev.modes {
        return Err(validation("Galerkin modes exceed the recorded basis"));
    }
    let ctx = Context::prepare(spec)?;
    let mut files = prepare_out(spec)?;
    let sys = GalerkinSystem::assemble(&ctx.domain, &ctx.basis, s.modes, &ctx.reference, &ctx.dist, &ctx.act, ctx.alpha, s.grid)?;
    let paths = simulate_spde(&sys, s.paths, s.dt, spec.seed, &ctx.times)?;
    let labels: Vec<String> = ctx.basis[..s.modes].iter().map(|b| b.label()).collect();
    write_paths_csv(&spec.out.join("paths.csv"), &paths, &labels)?;
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("modes".to_string(), s.modes.to_string());
    meta.insert("box_half_width".to_string(), ctx.domain.half_width().to_string());
    meta.insert("j".to_string(), ctx.domain.j().to_string());
    write_matrix_archive(&spec.out.join("galerkin.json"), &MatrixArchive { meta, system: sys.clone() })?;
    files.extend(["paths.csv".to_string(), "galerkin.json".to_string()]);
    let mut m = base_manifest("spde", Some(spec), spec.seed, started)?;
    for w in &sys.warnings {
        m.notes.push(("warning".into(), w.clone()));
    }
    finish(&spec.out, m, &files)
}

/// Runs the CLI; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    if let Some(k) = cli.threads {
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let manifest = match &cli.command {
        Command::Simulate(o) => simulate(&o.spec(false)?)?,
        Command::Meanfield(o) => meanfield(&o.spec(true)?)?,
        Command::Fluct(o) => fluct(&o.spec(false)?)?,
        Command::CltTest(a) => clt_test(a)?,
        Command::Spde(o) => spde(&o.spec(false)?)?,
        Command::Run(o) => {
            let spec = o.spec(false)?;
            let ctx = Context::prepare(&spec)?;
            run_experiment_with(&ctx, &spec)?
        }
        Command::Report(a) => {
            print!("{}", report(&a.manifest)?);
            return Ok(0);
        }
    };
    for c in &manifest.checks {
        println!("{} {}: {} [{}]", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    for cell in &manifest.failed_cells {
        eprintln!("failed cell N={} replica={}: {}", cell.n, cell.replica, cell.error);
    }
    println!("{} files written", manifest.files.len());
    Ok(if manifest.failed_cells.is_empty() { 0 } else { 2 })
}
