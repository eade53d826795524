//! Run configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use basofr::archive::config_hash;
use basofr::decision::DecisionConfig;
use basofr::funcdata::ScalarDesignSpec;
use basofr::gibbs::{FitConfig, PriorKind};
use basofr::simulate::{SimulationDesign, StudyConfig};
use basofr::{Error, Result};
use serde::{Deserialize, Serialize};

/// Input files and bases of the functional regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Long-format curve file; defaults to `<out_dir>/curves.csv`.
    pub curves: Option<PathBuf>,
    /// Response and covariate file; defaults to `<out_dir>/scalars.csv`.
    pub scalars: Option<PathBuf>,
    pub domain: (f64, f64),
    pub kx: usize,
    pub kb: usize,
    pub covariates: ScalarDesignSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            curves: None,
            scalars: None,
            domain: (0.0, 1.0),
            kx: 53,
            kb: 53,
            covariates: ScalarDesignSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummaryConfig {
    /// Points of the equally spaced grid on which beta is summarized.
    pub grid_points: usize,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self { grid_points: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Worker threads; `0` uses all cores.
    pub threads: usize,
    pub simulate: SimulationDesign,
    pub data: DataConfig,
    pub fit: FitConfig,
    pub decision: DecisionConfig,
    pub summary: SummaryConfig,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            threads: 0,
            simulate: SimulationDesign::default(),
            data: DataConfig::default(),
            fit: FitConfig::default(),
            decision: DecisionConfig::default(),
            summary: SummaryConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub prior: Option<PriorKind>,
    pub kb: Option<usize>,
    pub burnin: Option<usize>,
    pub draws: Option<usize>,
    pub epsilon: Option<f64>,
    pub zero_tol: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Self::parse(&text, p)
            }
        }
    }

    /// A seed reaches every stage: simulation, fitting and the study.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.simulate.seed = s;
            self.fit.seed = s;
            self.study.design.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if let Some(p) = o.prior {
            self.fit.prior = p;
        }
        if let Some(k) = o.kb {
            self.data.kb = k;
            self.study.kb = k;
        }
        if let Some(b) = o.burnin {
            self.fit.burnin = b;
            self.study.fit.burnin = b;
        }
        if let Some(d) = o.draws {
            self.fit.draws = d;
            self.study.fit.draws = d;
        }
        if let Some(e) = o.epsilon {
            self.decision.epsilon = e;
            if let Some(d) = &mut self.study.decision {
                d.epsilon = e;
            }
        }
        if let Some(z) = o.zero_tol {
            self.decision.zero_tol = z;
            if let Some(d) = &mut self.study.decision {
                d.zero_tol = z;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.simulate.validate()?;
        self.fit.validate()?;
        self.decision.validate()?;
        self.study.design.validate()?;
        self.study.fit.validate()?;
        if let Some(d) = &self.study.decision {
            d.validate()?;
        }
        if self.study.methods.is_empty() {
            return Err(Error::Config("study.methods is empty".into()));
        }
        for (name, k) in [("data.kx", self.data.kx), ("data.kb", self.data.kb), ("study.kx", self.study.kx), ("study.kb", self.study.kb)] {
            if k < 4 {
                return Err(Error::Config(format!("{name} must be at least 4, got {k}")));
            }
        }
        if self.summary.grid_points < 2 {
            return Err(Error::Config("summary.grid_points must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    /// Hash of everything that affects results; output location and thread
    /// count are excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.threads = 0;
        Ok(config_hash(&c.to_toml()?))
    }

    pub fn curves_path(&self) -> PathBuf {
        self.data.curves.clone().unwrap_or_else(|| self.out_dir.join("curves.csv"))
    }

    pub fn scalars_path(&self) -> PathBuf {
        self.data.scalars.clone().unwrap_or_else(|| self.out_dir.join("scalars.csv"))
    }

    pub fn archive_path(&self) -> PathBuf {
        self.out_dir.join("draws")
    }
}
