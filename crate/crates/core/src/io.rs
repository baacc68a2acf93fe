//! File formats: dataset TOML, ensemble snapshots, per-step diagnostics,
//! replica sample tables and the matrix archive of the Galerkin model.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fluctuation::FluctuationSamples;
use crate::model::{DataDistribution, ParticleEnsemble};
use crate::sgd::MartingaleDiagnostics;
use crate::spde::{GalerkinSystem, SpdePaths};

/// On-disk dataset: `points` rows are `[x_1, …, x_d, y]`, `weights` the
/// matching probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub d: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_bound: Option<f64>,
}

impl DatasetFile {
    pub fn build(&self) -> Result<DataDistribution<f64>> {
        let points = self
            .points
            .iter()
            .map(|row| match row.split_last() {
                Some((&y, x)) if x.len() == self.d => Ok((x.to_vec(), y)),
                _ => Err(Error::DimensionMismatch { expected: self.d + 1, got: row.len() }),
            })
            .collect::<Result<Vec<_>>>()?;
        DataDistribution::new(self.d, points, self.weights.clone(), self.support_bound)
    }

    pub fn from_distribution(dist: &DataDistribution<f64>) -> Self {
        Self {
            d: dist.dim(),
            points: (0..dist.len())
                .map(|m| dist.x(m).iter().copied().chain(std::iter::once(dist.y(m))).collect())
                .collect(),
            weights: dist.weights().to_vec(),
            support_bound: Some(dist.support_bound()),
        }
    }
}

pub fn parse_dataset(text: &str) -> Result<DataDistribution<f64>> {
    let file: DatasetFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    file.build()
}

pub fn load_dataset(path: &Path) -> Result<DataDistribution<f64>> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn save_dataset(path: &Path, dist: &DataDistribution<f64>) -> Result<()> {
    let text = toml::to_string(&DatasetFile::from_distribution(dist)).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// Writes particles as columns `c, w1, …, wd`.
pub fn write_ensemble_csv(path: &Path, ens: &ParticleEnsemble<f64>) -> Result<()> {
    let mut wtr = csv_writer(path)?;
    let mut header = vec!["c".to_string()];
    header.extend((1..=ens.dim()).map(|j| format!("w{j}")));
    wtr.write_record(&header)?;
    for i in 0..ens.len() {
        let mut row = vec![format!("{:e}", ens.c()[i])];
        row.extend(ens.w(i).iter().map(|v| format!("{v:e}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_ensemble_csv(path: &Path) -> Result<ParticleEnsemble<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let d = rdr.headers()?.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| invalid("snapshot needs c and w columns"))?;
    let (mut c, mut w) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}"))))
            .collect::<Result<_>>()?;
        c.push(vals[0]);
        w.extend_from_slice(&vals[1..]);
    }
    ParticleEnsemble::new(c, w, d)
}

/// Per-step traces: `step, function, increment, drift, taylor`.
pub fn write_diagnostics_csv(path: &Path, diag: &MartingaleDiagnostics) -> Result<()> {
    let mut wtr = csv_writer(path)?;
    wtr.write_record(["step", "function", "increment", "drift", "taylor"])?;
    for (f, label) in diag.labels.iter().enumerate() {
        for k in 0..=diag.steps {
            let inc = diag.increments[f].get(k).map(|v| format!("{v:e}")).unwrap_or_default();
            let tay = diag.taylor[f].get(k).map(|v| format!("{v:e}")).unwrap_or_default();
            wtr.write_record([k.to_string(), label.clone(), inc, format!("{:e}", diag.drift[f][k]), tay])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn opt(v: Option<&Vec<f64>>, i: usize) -> String {
    v.map(|x| format!("{:e}", x[i])).unwrap_or_default()
}

/// Sample table keyed by `(replica, t, function)` with one column per
/// decomposition component.
pub fn write_samples_csv(path: &Path, s: &FluctuationSamples) -> Result<()> {
    let mut wtr = csv_writer(path)?;
    wtr.write_record(["replica", "t", "function", "eta", "xi", "z", "mart"])?;
    let nf = s.n_functions();
    for r in 0..s.replicas {
        for (ti, t) in s.times.iter().enumerate() {
            for (f, label) in s.labels.iter().enumerate() {
                let i = (r * s.times.len() + ti) * nf + f;
                wtr.write_record([
                    r.to_string(),
                    t.to_string(),
                    label.clone(),
                    format!("{:e}", s.eta[i]),
                    opt(s.xi.as_ref(), i),
                    opt(s.z.as_ref(), i),
                    opt(s.mart.as_ref(), i),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a sample table written by [`write_samples_csv`].
pub fn read_samples_csv(path: &Path, n: usize) -> Result<FluctuationSamples> {
    #[derive(Deserialize)]
    struct Row {
        replica: usize,
        t: f64,
        function: String,
        eta: f64,
        xi: Option<f64>,
        z: Option<f64>,
        mart: Option<f64>,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let mut labels: Vec<String> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    let mut replicas = 0;
    for r in &rows {
        if !labels.contains(&r.function) {
            labels.push(r.function.clone());
        }
        if !times.contains(&r.t) {
            times.push(r.t);
        }
        replicas = replicas.max(r.replica + 1);
    }
    if rows.len() != replicas * times.len() * labels.len() {
        return Err(Error::Parse("sample table is not a full (replica, t, function) grid".into()));
    }
    let collect = |get: &dyn Fn(&Row) -> Option<f64>| -> Option<Vec<f64>> { rows.iter().map(get).collect() };
    Ok(FluctuationSamples {
        eta: rows.iter().map(|r| r.eta).collect(),
        xi: collect(&|r| r.xi),
        z: collect(&|r| r.z),
        mart: collect(&|r| r.mart),
        labels,
        times,
        n,
        replicas,
    })
}

/// Galerkin paths in the sample-table layout (`eta` column holds `h_a`).
pub fn write_paths_csv(path: &Path, paths: &SpdePaths, labels: &[String]) -> Result<()> {
    let mut wtr = csv_writer(path)?;
    wtr.write_record(["replica", "t", "function", "eta", "xi", "z", "mart"])?;
    for p in 0..paths.n_paths {
        for (ti, t) in paths.times.iter().enumerate() {
            for a in 0..paths.m {
                let label = labels.get(a).cloned().unwrap_or_else(|| format!("h{a}"));
                wtr.write_record([
                    p.to_string(),
                    t.to_string(),
                    label,
                    format!("{:e}", paths.get(p, ti, a)),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Assembled Galerkin matrices with grid metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixArchive {
    pub meta: BTreeMap<String, String>,
    pub system: GalerkinSystem,
}

pub fn write_matrix_archive(path: &Path, archive: &MatrixArchive) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, archive).map_err(|e| Error::Parse(e.to_string()))?;
    out.flush()?;
    Ok(())
}

pub fn read_matrix_archive(path: &Path) -> Result<MatrixArchive> {
    serde_json::from_reader(std::io::BufReader::new(File::open(path)?)).map_err(|e| Error::Parse(e.to_string()))
}
