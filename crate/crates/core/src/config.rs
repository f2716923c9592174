//! Run configuration: one TOML document with nested sections, plus
//! `key.path=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bayes_dsac::TrainingConfig;
use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::perception::DepthParams;
use crate::qp_controller::ControllerConfig;
use crate::sim::toy::ToyConfig;
use crate::sim::{RewardWeights, SimConfig};

/// Parses TOML, turning syntax and schema errors into a line-and-field
/// diagnostic.
pub fn parse_toml<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        let field = e
            .message()
            .split('`')
            .nth(1)
            .unwrap_or("")
            .to_owned();
        Error::Config {
            path: path.to_path_buf(),
            line,
            field,
            message: e.message().trim().to_owned(),
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory; runs are never seeded from the clock.
    pub seed: u64,
    /// Robot model file. Absent means the built-in model.
    #[serde(default)]
    pub robot: Option<PathBuf>,
    /// Scene files. Absent means the built-in procedural suite.
    #[serde(default)]
    pub scenes: Vec<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub mode: String,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub reward: RewardWeights,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub depth: DepthParams,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub toy: ToyConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(path, &text, overrides)
    }

    /// Builds a config from overrides alone; relative paths resolve against
    /// the working directory.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_text(Path::new("<command line>"), "", overrides)
    }

    fn from_text(path: &Path, text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = parse_toml(path, text)?;
        for ov in overrides {
            apply_override(&mut value, ov).map_err(|message| Error::Config {
                path: PathBuf::from("<command line>"),
                line: 0,
                field: ov.split('=').next().unwrap_or("").to_owned(),
                message,
            })?;
        }
        let merged = toml::to_string(&value).expect("toml value serializes");
        if value.get("seed").is_none() {
            return Err(Error::Config {
                path: path.to_path_buf(),
                line: 0,
                field: "seed".into(),
                message: "a seed is required (set `seed` or pass --seed)".into(),
            });
        }
        if value.get("seed").is_some_and(|s| !s.is_integer() || s.as_integer().is_some_and(|v| v < 0)) {
            return Err(Error::Config {
                path: path.to_path_buf(),
                line: 0,
                field: "seed".into(),
                message: format!("seed must be an integer in 0..={}", i64::MAX),
            });
        }
        let mut cfg: RunConfig = parse_toml(path, &merged)?;
        // Relative file references resolve against the config's directory.
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        if let Some(r) = &cfg.robot {
            cfg.robot = Some(resolve(base, r));
        }
        cfg.scenes = cfg.scenes.iter().map(|s| resolve(base, s)).collect();
        let ck = &mut cfg.bench.checkpoints;
        for p in [&mut ck.horf, &mut ck.rlmm, &mut ck.hfss].into_iter().flatten() {
            *p = resolve(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        self.training.validate()?;
        self.reward.validate()?;
        if let Some(r) = &self.robot {
            if !r.exists() {
                return Err(missing("robot", r));
            }
        }
        for s in &self.scenes {
            if !s.exists() {
                return Err(missing("scenes", s));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn missing(field: &str, path: &Path) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        line: 0,
        field: field.to_owned(),
        message: format!("file not found: {}", path.display()),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || p.exists() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> std::result::Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not key=value"))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let mut cur = root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| format!("`{key}`: `{part}` is not a section"))?;
        if i + 1 == parts.len() {
            table.insert((*part).to_owned(), parsed);
            return Ok(());
        }
        cur = table
            .entry((*part).to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(format!("empty key in `{spec}`"))
}
