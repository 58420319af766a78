//! Experiment configuration files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coupling::SamplingRule;
use crate::data::{MapConfig, MapSpec};
use crate::error::{config_err, Result};
use crate::grad::Scaling;
use crate::model::NetConfig;
use crate::trainer::{InitSpec, NormalLaw, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Optimality,
    WidthSweep,
    CouplingRate,
    Diagnose,
}

/// A variance given directly, or as `scale * n^width_power` for the width
/// `n` of the network being initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Variance {
    Fixed(f64),
    WidthScaled { scale: f64, width_power: i32 },
}

impl Variance {
    pub fn at_width(&self, n: usize) -> f64 {
        match *self {
            Variance::Fixed(v) => v,
            Variance::WidthScaled { scale, width_power } => scale * (n as f64).powi(width_power),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawConfig {
    pub mean: f64,
    pub variance: Variance,
}

impl LawConfig {
    const fn new(mean: f64, variance: Variance) -> Self {
        LawConfig { mean, variance }
    }

    fn at_width(&self, n: usize) -> NormalLaw {
        NormalLaw::new(self.mean, self.variance.at_width(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawsConfig {
    pub xh: LawConfig,
    pub hh: LawConfig,
    pub hy: LawConfig,
}

impl LawsConfig {
    pub fn teacher() -> Self {
        let inv_sq = Variance::WidthScaled {
            scale: 1.0,
            width_power: -2,
        };
        LawsConfig {
            xh: LawConfig::new(1.0, Variance::Fixed(1.0)),
            hh: LawConfig::new(0.0, inv_sq),
            hy: LawConfig::new(0.0, inv_sq),
        }
    }

    pub fn student() -> Self {
        let ten_inv_sq = Variance::WidthScaled {
            scale: 10.0,
            width_power: -2,
        };
        LawsConfig {
            xh: LawConfig::new(0.0, Variance::Fixed(5.0)),
            hh: LawConfig::new(0.0, ten_inv_sq),
            hy: LawConfig::new(0.0, ten_inv_sq),
        }
    }

    pub fn at_width(&self, n: usize) -> InitSpec {
        InitSpec {
            xh: self.xh.at_width(n),
            hh: self.hh.at_width(n),
            hy: self.hy.at_width(n),
        }
    }

    fn fixed_at(&self, n: usize) -> Self {
        let fix = |l: &LawConfig| LawConfig::new(l.mean, Variance::Fixed(l.variance.at_width(n)));
        LawsConfig {
            xh: fix(&self.xh),
            hh: fix(&self.hh),
            hy: fix(&self.hy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub n: usize,
    pub seed: u64,
    #[serde(default = "LawsConfig::teacher")]
    pub laws: LawsConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            n: 15,
            seed: 0,
            laws: LawsConfig::teacher(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default = "LawsConfig::student")]
    pub student: LawsConfig,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            teacher: TeacherConfig::default(),
            student: LawsConfig::student(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub map: MapConfig,
    pub m: usize,
    #[serde(rename = "L")]
    pub memory: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    /// Empty means the single width `net.n`.
    #[serde(default)]
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub widths: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub sampling: SamplingRule,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema: u32,
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub net: NetConfig,
    #[serde(default)]
    pub init: InitConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<CouplingConfig>,
    /// Directory of the config file; custom map paths resolve against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub width: Option<usize>,
}

fn ascending(widths: &[usize]) -> bool {
    widths.windows(2).all(|p| p[0] < p[1])
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(n) = o.width {
            self.net.n = n;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(config_err(format!(
                "unsupported config schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        self.net.validate()?;
        self.train.validate()?;
        if self.data.m == 0 {
            return Err(config_err("data.m must be >= 1"));
        }
        if self.data.memory != self.net.memory {
            return Err(config_err(format!(
                "data.L = {} differs from net.L = {}",
                self.data.memory, self.net.memory
            )));
        }
        if self.init.teacher.n == 0 {
            return Err(config_err("teacher width must be >= 1"));
        }
        if let Some(s) = &self.sweep {
            if s.seeds.is_empty() {
                return Err(config_err("sweep.seeds must not be empty"));
            }
            if s.widths.contains(&0) || !ascending(&s.widths) {
                return Err(config_err(
                    "sweep.widths must be positive and strictly ascending",
                ));
            }
        }
        if let Some(c) = &self.coupling {
            if c.widths.is_empty() || c.widths.contains(&0) || !ascending(&c.widths) {
                return Err(config_err(
                    "coupling.widths must be non-empty, positive and strictly ascending",
                ));
            }
            let last = *c.widths.last().unwrap_or(&0);
            if last > self.net.n && c.sampling != SamplingRule::WithReplacement {
                return Err(config_err(format!(
                    "coupling width {last} exceeds reference width net.n = {}",
                    self.net.n
                )));
            }
        }
        match self.kind {
            ExperimentKind::WidthSweep if self.sweep.is_none() => {
                Err(config_err("width_sweep experiments need a sweep block"))
            }
            ExperimentKind::CouplingRate if self.coupling.is_none() => Err(config_err(
                "coupling_rate experiments need a coupling block",
            )),
            ExperimentKind::CouplingRate if self.train.scaling != Scaling::Meanfield => Err(
                config_err("coupling_rate experiments need mean-field scaling"),
            ),
            _ => Ok(()),
        }
    }

    pub fn map_spec(&self) -> Result<MapSpec> {
        let spec = self.data.map.resolve(self.base_dir.as_deref())?;
        if spec.dim() != self.net.d {
            return Err(config_err(format!(
                "map dimension {} differs from net.d = {}",
                spec.dim(),
                self.net.d
            )));
        }
        Ok(spec)
    }

    pub fn teacher_net(&self) -> NetConfig {
        self.net.with_width(self.init.teacher.n)
    }

    pub fn teacher_init(&self) -> InitSpec {
        self.init.teacher.laws.at_width(self.init.teacher.n)
    }

    pub fn student_init(&self, n: usize) -> InitSpec {
        self.init.student.at_width(n)
    }

    /// Copy for a single run at width `n` and student seed `seed`, with
    /// every variance written out as a number.
    pub fn resolved(&self, n: usize, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.net.n = n;
        c.train.seed = seed;
        c.init.teacher.laws = c.init.teacher.laws.fixed_at(c.init.teacher.n);
        c.init.student = c.init.student.fixed_at(n);
        c
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(self.to_json()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}
