//! The run configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::PhantomConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::geometry::FanGeometry;
use crate::recon::ReconConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoseConfig {
    pub photon_count: f64,
    pub electronic_sigma: f64,
}

impl Default for DoseConfig {
    fn default() -> Self {
        DoseConfig {
            photon_count: 1e5,
            electronic_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 10,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub checkpoint: Option<PathBuf>,
}

/// 32x32 image, 32 views, 32 detectors.
pub fn default_geometry() -> FanGeometry {
    FanGeometry {
        image_size: 32,
        n_detectors: 32,
        n_views: 32,
        ..FanGeometry::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: FanGeometry,
    pub phantom: PhantomConfig,
    pub dose: DoseConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub training: TrainConfig,
    pub recon: ReconConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            geometry: default_geometry(),
            phantom: PhantomConfig::default(),
            dose: DoseConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            training: TrainConfig::default(),
            recon: ReconConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate. Unknown keys are rejected; errors carry the
    /// dotted path of the offending field.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::validation("<document>", e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<document>".to_string() } else { path };
            Error::validation(field, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    /// The resolved document, every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Writes `config.toml` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.phantom.validate()?;
        if !(self.dose.photon_count > 0.0) {
            return Err(Error::validation("dose.photon_count", "must be positive"));
        }
        if !(self.dose.electronic_sigma >= 0.0 && self.dose.electronic_sigma.is_finite()) {
            return Err(Error::validation("dose.electronic_sigma", "must be nonnegative"));
        }
        if self.schedule.steps < 1 {
            return Err(Error::validation("schedule.steps", "must be at least 1"));
        }
        self.denoiser.validate()?;
        let g = &self.geometry;
        self.denoiser
            .check_input(g.n_views, g.n_detectors)
            .map_err(|e| Error::validation("geometry.n_views", e.to_string()))?;
        self.training.validate()?;
        self.recon.validate()?;
        if let Some(s) = self.recon.steps {
            if s > self.schedule.steps {
                return Err(Error::validation(
                    "recon.steps",
                    format!("{s} exceeds schedule.steps = {}", self.schedule.steps),
                ));
            }
        }
        Ok(())
    }

    /// Everything that fixes the parameter layout or the meaning of `t`.
    fn architecture(&self) -> toml::Value {
        let mut d = toml::Value::try_from(&self.denoiser).expect("serialisable");
        if let Some(t) = d.as_table_mut() {
            t.remove("branches");
            t.remove("fusion");
        }
        let mut root = toml::Table::new();
        root.insert("denoiser".into(), d);
        root.insert(
            "schedule".into(),
            toml::Value::try_from(&self.schedule).expect("serialisable"),
        );
        toml::Value::Table(root)
    }
}

fn diff_values(path: &str, a: &toml::Value, b: &toml::Value, out: &mut Vec<String>) {
    match (a, b) {
        (toml::Value::Table(x), toml::Value::Table(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = format!("{path}.{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_values(&p, u, v, out),
                    (u, v) => out.push(format!("{}: {} vs {}", &p[1..], show(u), show(v))),
                }
            }
        }
        _ if a != b => out.push(format!("{}: {} vs {}", &path[1..], a, b)),
        _ => {}
    }
}

fn show(v: Option<&toml::Value>) -> String {
    v.map_or_else(|| "<absent>".into(), |v| v.to_string())
}

/// Fields that differ between two configs' architectures, as
/// `path: saved vs requested` lines.
pub fn architecture_diff(saved: &RunConfig, requested: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    diff_values("", &saved.architecture(), &requested.architecture(), &mut out);
    out
}
