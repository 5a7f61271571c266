use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gram::GramModel;
use crate::noise::{make_corruption, read_corruption_csv, CorruptionKind, CorruptionMatrix};
use crate::oracle::SolverConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ClosedForm,
    Oracle,
    Pll,
    Theory,
}

/// How a corruption matrix is turned into concrete labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Realization {
    /// `n·C` must be integral; anything else is an error.
    #[default]
    Exact,
    /// Nearest balanced integer counts; the empirical matrix is used
    /// downstream wherever exactness matters.
    Rounded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    #[serde(default)]
    pub eta: f64,
    /// CSV matrix for `kind = explicit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix_path: Option<PathBuf>,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self { kind: CorruptionKind::Symmetric, eta: 0.0, matrix_path: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Eta(Vec<f64>),
    N(Vec<usize>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSpec {
    pub features_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclass_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gram: GramModel,
    #[serde(default)]
    pub corruption: CorruptionSpec,
    pub lambda: f64,
    #[serde(default = "default_t_max")]
    pub t_max: u32,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub realization: Realization,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Rounds compared by `approx-error`.
    #[serde(default = "default_approx_rounds")]
    pub approx_rounds: u32,
    /// Per-round `(c, d)` for the feature-evolving condition in `theory`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestSpec>,
}

fn default_t_max() -> u32 {
    4
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::ClosedForm, Mode::Pll, Mode::Theory]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_approx_rounds() -> u32 {
    1
}

impl ExperimentConfig {
    /// K = 4, n = 100, c = 0.4, d = 0.1, λ = 3.125e−4, symmetric η = 0.5.
    pub fn setup_a() -> Self {
        Self {
            gram: GramModel::case_iii(4, 100, 0.4, 0.1),
            corruption: CorruptionSpec { kind: CorruptionKind::Symmetric, eta: 0.5, matrix_path: None },
            lambda: 3.125e-4,
            t_max: default_t_max(),
            modes: default_modes(),
            sweep: None,
            seed: 0,
            output_dir: default_output_dir(),
            realization: Realization::Rounded,
            solver: SolverConfig::default(),
            approx_rounds: default_approx_rounds(),
            schedule: None,
            ingest: None,
        }
    }

    /// Parses and validates without touching the filesystem.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads a config file (or starts from [`ExperimentConfig::setup_a`]),
    /// applies `key=value` overrides, resolves relative paths against the
    /// config's directory and checks that referenced files exist.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (mut value, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let v: Value = serde_json::from_str(&text)?;
                (v, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (serde_json::to_value(Self::setup_a())?, PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        cfg.resolve_paths(&base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.corruption.matrix_path.as_mut() {
            fix(p);
        }
        if let Some(ing) = self.ingest.as_mut() {
            ing.features_path.as_mut().map(fix);
            ing.superclass_path.as_mut().map(fix);
        }
    }

    fn check_paths(&self) -> Result<()> {
        let mut paths: Vec<&PathBuf> = self.corruption.matrix_path.iter().collect();
        if let Some(ing) = &self.ingest {
            paths.extend(ing.features_path.iter());
            paths.extend(ing.superclass_path.iter());
        }
        match paths.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(Error::invalid(format!("referenced file {} does not exist", p.display()))),
            None => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gram.validate()?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive and finite, got {}", self.lambda)));
        }
        if self.modes.is_empty() {
            return Err(Error::invalid("at least one mode is required"));
        }
        if self.approx_rounds == 0 {
            return Err(Error::invalid("approx_rounds must be at least 1"));
        }
        if self.corruption.kind == CorruptionKind::Explicit && self.corruption.matrix_path.is_none() {
            return Err(Error::invalid("explicit corruption needs corruption.matrix_path"));
        }
        if !(0.0..=1.0).contains(&self.corruption.eta) {
            return Err(Error::invalid(format!("corruption.eta = {} outside [0, 1]", self.corruption.eta)));
        }
        match &self.sweep {
            Some(Sweep::Eta(v)) => {
                check_sorted(v, "sweep.eta")?;
                if let Some(e) = v.iter().find(|e| !(0.0..=1.0).contains(*e)) {
                    return Err(Error::invalid(format!("sweep.eta value {e} outside [0, 1]")));
                }
            }
            Some(Sweep::N(v)) => {
                check_sorted(v, "sweep.n")?;
                if v.contains(&0) {
                    return Err(Error::invalid("sweep.n values must be positive"));
                }
            }
            None => {}
        }
        self.solver.validate()
    }

    pub fn has_mode(&self, m: Mode) -> bool {
        self.modes.contains(&m)
    }

    /// Corruption matrix at rate `eta` (the explicit matrix ignores `eta`).
    pub fn corruption_at(&self, eta: f64) -> Result<CorruptionMatrix> {
        let k = self.gram.k;
        if self.corruption.kind == CorruptionKind::Explicit {
            let path = self.corruption.matrix_path.as_ref().expect("validated");
            let c = read_corruption_csv(path)?;
            if c.k() != k {
                return Err(Error::invalid(format!("{} holds a {}x{} matrix but K = {k}", path.display(), c.k(), c.k())));
            }
            return Ok(c);
        }
        let map = self.gram.superclass_map();
        make_corruption(self.corruption.kind, eta, k, Some(&map), None)
    }

    pub fn corruption(&self) -> Result<CorruptionMatrix> {
        self.corruption_at(self.corruption.eta)
    }
}

fn check_sorted<T: PartialOrd + std::fmt::Debug>(v: &[T], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("{name} must not be empty")));
    }
    if let Some(w) = v.windows(2).find(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!("{name} must be sorted ascending ({:?} before {:?})", w[0], w[1])));
    }
    Ok(())
}

/// Sets a dotted-path leaf in a JSON document. The value is parsed as JSON
/// when possible, otherwise taken as a string; missing objects are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::invalid(format!("override key '{key}' is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::invalid(format!("override '{key}': '{}' is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}
