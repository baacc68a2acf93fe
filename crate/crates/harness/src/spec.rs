//! Experiment specification, read from and written to TOML.

use std::path::{Path, PathBuf};

use mfclt::io::DatasetFile;
use mfclt::{ActivationKind, Dataset, InitLaw, ProjectionGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, HarnessError, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LlnRate,
    CltGauss,
    QvMatch,
    SpdeCompare,
    RemainderScaling,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::LlnRate,
        ExperimentKind::CltGauss,
        ExperimentKind::QvMatch,
        ExperimentKind::SpdeCompare,
        ExperimentKind::RemainderScaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::LlnRate => "lln-rate",
            ExperimentKind::CltGauss => "clt-gauss",
            ExperimentKind::QvMatch => "qv-match",
            ExperimentKind::SpdeCompare => "spde-compare",
            ExperimentKind::RemainderScaling => "remainder-scaling",
        }
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| validation(format!("unknown experiment kind {s:?}")))
    }
}

/// Dataset given inline or as a path to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Path(String),
    Inline(DatasetFile),
}

impl DatasetSource {
    /// The three-point, one-dimensional dataset used by the default specs.
    pub fn three_point() -> Self {
        DatasetSource::Inline(DatasetFile {
            d: 1,
            points: vec![vec![-1.0, 0.6], vec![0.3, -0.4], vec![1.2, 0.8]],
            weights: vec![0.3, 0.3, 0.4],
            support_bound: None,
        })
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Path(p) => Ok(mfclt::io::load_dataset(Path::new(p))?),
            DatasetSource::Inline(file) => Ok(file.build()?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub alpha: f64,
    pub t_horizon: f64,
    #[serde(default)]
    pub activation: ActivationKind,
    pub init: InitLaw,
    pub dataset: DatasetSource,
}

/// Independent large ensemble standing in for the limit flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub m: usize,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevSpec {
    /// Width of the pilot SGD run that sizes the box.
    pub pilot_n: usize,
    /// Basis elements tracked by the reference record (and available to
    /// the Galerkin model).
    pub modes: usize,
    /// Smoothness order; defaults to `J₁ = 2⌈D/2⌉ + 4`.
    #[serde(default)]
    pub j: Option<usize>,
    /// Per-axis truncation of dual-norm estimates.
    pub a_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctSpec {
    /// Sample times in scaled time.
    pub times: Vec<f64>,
    /// Number of leading basis functions sampled per replica.
    pub functions: usize,
    pub significance: f64,
    /// Step of the coupled tilde system (an even multiple of the reference step).
    pub coupled_h: f64,
    /// Intervals of the pairing record used for the quadratic remainders.
    pub record_intervals: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdeSpec {
    pub modes: usize,
    /// Second truncation reported for sensitivity.
    pub sensitivity_modes: usize,
    pub paths: usize,
    pub dt: f64,
    /// Leading block compared against the replicas.
    pub compare: usize,
    #[serde(default)]
    pub grid: ProjectionGrid,
}

/// Second sweep for the `Ξ` bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiSpec {
    pub n_values: Vec<usize>,
    pub replicas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub n_values: Vec<usize>,
    pub replicas: usize,
    pub out: PathBuf,
    pub model: ModelSpec,
    pub reference: ReferenceSpec,
    pub sobolev: SobolevSpec,
    pub fluct: FluctSpec,
    #[serde(default)]
    pub spde: Option<SpdeSpec>,
    #[serde(default)]
    pub xi: Option<XiSpec>,
}

impl ExperimentSpec {
    /// Desk-scale defaults for each kind on the three-point dataset.
    pub fn preset(kind: ExperimentKind) -> Self {
        let (n_values, replicas) = match kind {
            ExperimentKind::LlnRate => (vec![250, 1000, 4000, 16000], 64),
            ExperimentKind::CltGauss | ExperimentKind::SpdeCompare => (vec![4000], 500),
            ExperimentKind::QvMatch => (vec![16000], 16),
            ExperimentKind::RemainderScaling => (vec![250, 500, 1000, 2000, 4000, 8000, 16000], 16),
        };
        let spde = (kind == ExperimentKind::SpdeCompare).then(|| SpdeSpec {
            modes: 8,
            sensitivity_modes: 16,
            paths: 10_000,
            dt: 1e-3,
            compare: 4,
            grid: ProjectionGrid::default(),
        });
        let xi = (kind == ExperimentKind::RemainderScaling).then(|| XiSpec {
            n_values: vec![250, 1000, 4000],
            replicas: 32,
        });
        Self {
            kind,
            seed: 20_240_601,
            n_values,
            replicas,
            out: PathBuf::from(format!("out/{kind}")),
            model: ModelSpec {
                alpha: 1.0,
                t_horizon: 1.0,
                activation: ActivationKind::default(),
                init: InitLaw::UniformBox { c: (-1.0, 1.0), w: (-1.0, 1.0) },
                dataset: DatasetSource::three_point(),
            },
            reference: ReferenceSpec { m: 100_000, h: 1e-3 },
            sobolev: SobolevSpec { pilot_n: 4000, modes: 16, j: None, a_max: 24 },
            fluct: FluctSpec {
                times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                functions: 5,
                significance: 0.01,
                coupled_h: 1e-2,
                record_intervals: 100,
            },
            spde,
            xi,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Loads a spec; a relative dataset path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec = Self::from_toml(&std::fs::read_to_string(path).at(path)?)?;
        if let DatasetSource::Path(p) = &spec.model.dataset {
            if Path::new(p).is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                spec.model.dataset = DatasetSource::Path(base.join(p).to_string_lossy().into_owned());
            }
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn horizon(&self) -> f64 {
        self.model.t_horizon
    }

    /// Checks everything that can be checked without compute.
    pub fn validate(&self) -> Result<()> {
        let t = self.model.t_horizon;
        if !(t > 0.0 && t.is_finite()) {
            return Err(validation("t_horizon must be positive"));
        }
        if !(self.model.alpha >= 0.0 && self.model.alpha.is_finite()) {
            return Err(validation("alpha must be finite and non-negative"));
        }
        self.model.init.validate()?;
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(validation("n_values must be a non-empty list of positive widths"));
        }
        if self.replicas == 0 {
            return Err(validation("replicas must be positive"));
        }
        let times = &self.fluct.times;
        if times.is_empty() {
            return Err(validation("time grid is empty"));
        }
        if times.iter().any(|&s| !(0.0..=t).contains(&s)) || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(validation("time grid must be strictly increasing inside [0, T]"));
        }
        for &s in times {
            if ((s / self.reference.h).round() * self.reference.h - s).abs() > 1e-9 {
                return Err(validation(format!("time {s} is not on the reference grid")));
            }
            if ((s / self.fluct.coupled_h).round() * self.fluct.coupled_h - s).abs() > 1e-9 {
                return Err(validation(format!("time {s} is not on the coupled grid")));
            }
        }
        if !(self.reference.h > 0.0) || self.reference.m == 0 {
            return Err(validation("reference needs m > 0 and h > 0"));
        }
        if self.fluct.functions == 0 || self.fluct.functions > self.sobolev.modes {
            return Err(validation("fluct.functions must lie in 1..=sobolev.modes"));
        }
        if self.fluct.record_intervals == 0 {
            return Err(validation("record_intervals must be positive"));
        }
        if self.sobolev.a_max == 0 || self.sobolev.pilot_n == 0 {
            return Err(validation("sobolev.a_max and sobolev.pilot_n must be positive"));
        }
        if !(self.fluct.significance > 0.0 && self.fluct.significance < 1.0) {
            return Err(validation("significance must lie in (0, 1)"));
        }
        match self.kind {
            ExperimentKind::SpdeCompare => {
                let s = self.spde.as_ref().ok_or_else(|| validation("spde-compare needs an [spde] table"))?;
                if s.modes == 0 || s.compare == 0 || s.compare > s.modes.min(self.fluct.functions) {
                    return Err(validation("spde.compare must lie in 1..=min(spde.modes, fluct.functions)"));
                }
                if s.modes.max(s.sensitivity_modes) > self.sobolev.modes {
                    return Err(validation("Galerkin modes exceed the recorded basis"));
                }
                if s.paths == 0 || !(s.dt > 0.0) {
                    return Err(validation("spde needs paths > 0 and dt > 0"));
                }
            }
            ExperimentKind::RemainderScaling => {
                if let Some(xi) = &self.xi {
                    if xi.n_values.is_empty() || xi.replicas == 0 {
                        return Err(validation("xi sweep needs widths and replicas"));
                    }
                }
            }
            _ => {}
        }
        if self.kind == ExperimentKind::LlnRate || self.kind == ExperimentKind::RemainderScaling {
            let mut n = self.n_values.clone();
            n.sort_unstable();
            n.dedup();
            if n.len() < 3 {
                return Err(validation("rate fits need at least three distinct widths"));
            }
        }
        if !self.fluct.times.contains(&t) && self.kind != ExperimentKind::CltGauss {
            return Err(validation("time grid must contain the horizon"));
        }
        Ok(())
    }

    /// Times of the pairing record used by the remainder terms.
    pub fn record_times(&self) -> Vec<f64> {
        let k = self.fluct.record_intervals;
        (0..=k).map(|j| self.model.t_horizon * j as f64 / k as f64).collect()
    }
}
