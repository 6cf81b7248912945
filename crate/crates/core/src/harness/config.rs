//! Layered run configuration: the checked-in reference tree, a user file, then `--set` overrides.
//!
//! The reference tree doubles as the schema. Overlays may only touch keys it contains, and values
//! must have the reference value's type (integers are accepted where floats are expected).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::geometry::{ChartMetric2D, GeometryError, WarpFamily, WarpedMetric};

pub const REFERENCE: &str = include_str!("../../configs/reference.toml");

/// Tables whose keys are free-form (dotted override paths).
const FREE_FORM: &[&str] = &["suite.fast"];

/// Where a value came from, for diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    pub source: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "{}:{l}:{c}", self.source),
            _ => f.write_str(&self.source),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{source_name}: {message}")]
    Syntax { source_name: String, message: String },
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { origin: Origin, key: String },
    #[error("{origin}: `{key}` expects {expected}, found {found}")]
    Type {
        origin: Origin,
        key: String,
        expected: String,
        found: String,
    },
    #[error("invalid override `{0}`: expected key=value")]
    Assignment(String),
    #[error("invalid configuration: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFamily {
    Flat,
    PowerPerturb,
    BumpPerturb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub family: MetricFamily,
    pub n: usize,
    pub nu: f64,
    pub amplitude: f64,
    pub r_flat: f64,
    pub modulation: f64,
}

impl MetricConfig {
    pub fn is_flat(&self) -> bool {
        self.family == MetricFamily::Flat
    }

    pub fn label(&self) -> String {
        match self.family {
            MetricFamily::Flat => "flat".into(),
            MetricFamily::PowerPerturb => format!("power(a={},nu={})", self.amplitude, self.nu),
            MetricFamily::BumpPerturb => format!("bump(a={})", self.amplitude),
        }
    }

    pub fn with_nu(&self, nu: f64) -> Self {
        Self { nu, ..self.clone() }
    }

    /// Warped product dr² + f(r)²g_S in dimension `n`.
    pub fn warped(&self) -> Result<WarpedMetric<f64>, GeometryError> {
        let family = match self.family {
            MetricFamily::Flat => return Ok(WarpedMetric::flat(self.n)),
            MetricFamily::PowerPerturb => WarpFamily::PowerPerturb {
                amplitude: self.amplitude,
            },
            MetricFamily::BumpPerturb => WarpFamily::BumpPerturb {
                amplitude: self.amplitude,
            },
        };
        WarpedMetric::new(self.n, self.nu, self.r_flat, family)
    }

    /// Two-dimensional chart model for the flow, phase and oscillatory experiments.
    pub fn chart(&self) -> Result<ChartMetric2D<f64>, GeometryError> {
        match self.family {
            MetricFamily::Flat => Ok(ChartMetric2D::flat()),
            MetricFamily::PowerPerturb => {
                ChartMetric2D::power_modulated(self.amplitude, self.nu, self.r_flat, self.modulation)
            }
            MetricFamily::BumpPerturb => ChartMetric2D::bump(self.amplitude, self.r_flat),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Fast,
    Full,
}

impl std::str::FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fast" => Ok(Self::Fast),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown level {other:?} (fast or full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub level: Level,
    pub fast: Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub samples: usize,
    pub r_min: f64,
    pub r_span: f64,
    pub angles: (f64, f64),
    pub energies: (f64, f64),
    pub strength: f64,
    pub horizon: f64,
    pub tol: f64,
    pub oracle_tol: f64,
    pub trajectory_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterMapConfig {
    pub samples: usize,
    pub r_min: f64,
    pub r_span: f64,
    pub angles: (f64, f64),
    pub energies: (f64, f64),
    pub strength: f64,
    pub tol: f64,
    pub oracle_tol: f64,
    pub symmetry_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EikonalConfig {
    pub r_min: f64,
    pub angles: (f64, f64),
    pub eps_sep: f64,
    pub energies: (f64, f64),
    pub direction: String,
    pub r_max: f64,
    pub n_r: usize,
    pub n_theta: usize,
    pub n_delta: usize,
    pub circulation_tol: f64,
    pub psi_tol: f64,
    pub hj_tol: f64,
    pub identity_tol: f64,
    pub r_factor: f64,
    pub n_sweep: usize,
    pub n_delta_sweep: usize,
    pub delta_fraction: f64,
    pub zero_floor: f64,
    pub order_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    pub r_min: f64,
    pub angles: (f64, f64),
    pub eps_sep: f64,
    pub energies: (f64, f64),
    pub r_max: f64,
    pub n_r: usize,
    pub n_theta: usize,
    pub n_delta: usize,
    pub dim: usize,
    pub fit_nu: f64,
    pub oracle_points: Vec<(f64, f64, f64)>,
    pub oracle_tol: f64,
    pub fit_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WkbConfig {
    pub radius: f64,
    pub theta: (f64, f64),
    pub n_r: usize,
    pub n_theta: usize,
    pub momenta: (f64, f64),
    pub times: Vec<f64>,
    pub tol: f64,
    pub order: f64,
    pub order_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub vartheta: (f64, f64),
    pub h_ladder: Vec<f64>,
    pub s: f64,
    pub r_prime: f64,
    pub h_spatial: f64,
    pub r_prime_ladder: Vec<f64>,
    pub angular_offset: f64,
    pub envelope: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscillatoryConfig {
    pub regime: String,
    pub r_min: f64,
    pub angles: (f64, f64),
    pub eps_sep: f64,
    pub energies: (f64, f64),
    pub r_max: f64,
    pub n_r: usize,
    pub n_theta: usize,
    pub n_delta: usize,
    pub rho: (f64, f64),
    pub vartheta: (f64, f64),
    pub h_ladder: Vec<f64>,
    pub s_over_h: Vec<f64>,
    pub r_prime: f64,
    pub jitter_points: usize,
    pub large_ratio: f64,
    pub exponent: f64,
    pub exponent_tol: f64,
    pub order_bound: f64,
    pub radial: RegimeConfig,
    pub angular: RegimeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpCheckConfig {
    pub oracle_r_max: f64,
    pub oracle_dr: f64,
    pub oracle_lambda_max: f64,
    pub oracle_modes: usize,
    pub s_wave_tol: f64,
    pub p_wave_tol: f64,
    pub halving_dr: f64,
    pub halving_order: f64,
    pub telescoping_terms: usize,
    pub ortho_r_max: f64,
    pub ortho_dr: f64,
    pub ortho_bands: i32,
    pub ortho_tol: f64,
    pub r_max: f64,
    pub dr: f64,
    pub lambda_max: f64,
    pub ell_max: usize,
    pub bands: i32,
    pub states: u64,
    pub q: f64,
    pub ratio_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventConfig {
    pub r_max: f64,
    pub dr: f64,
    pub lambdas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub weight: f64,
    pub plateau_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub r_max: f64,
    pub dr: f64,
    pub lambda_max: f64,
    pub centre: f64,
    pub width: f64,
    pub eps: Vec<f64>,
    pub fractions: Vec<f64>,
    pub stabilization_tol: f64,
    pub spread_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SobolevConfig {
    pub r_max: f64,
    pub dr: f64,
    pub widths: Vec<f64>,
    pub iterations: usize,
    pub sharp_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersiveConfig {
    pub gaussian_r_max: f64,
    pub gaussian_dr: f64,
    pub gaussian_lambda_max: f64,
    pub gaussian_times: Vec<f64>,
    pub gaussian_tol: f64,
    pub r_max: f64,
    pub dr: f64,
    pub lambda_max: f64,
    pub band: i32,
    pub width_factor: f64,
    pub cutoff: f64,
    pub ladder_points: usize,
    pub ladder_span: f64,
    pub exponent_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrichartzConfig {
    pub r_max: f64,
    pub dr: f64,
    pub lambda_max: f64,
    pub pair: (f64, f64),
    pub high_bands: Vec<i32>,
    pub low_bands: Vec<i32>,
    pub width_factor: f64,
    pub spread_bound: f64,
    pub increment_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlsExperimentConfig {
    pub r_max: f64,
    pub dr: f64,
    pub lambda_max: f64,
    pub lowpass: f64,
    pub mass: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub intervals: usize,
    pub stages: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub sweep_radii: Vec<f64>,
    pub exponent_tol: f64,
    pub levels: usize,
    pub ladder_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalFormConfig {
    pub amplitude: f64,
    pub nu: f64,
    pub r_inner: f64,
    pub fit_lo: f64,
    pub fit_hi: f64,
    pub fit_samples: usize,
    pub quad_points: usize,
    pub jacobian_floor: f64,
    pub input_order: f64,
    pub input_tol: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiments {
    pub flow: FlowConfig,
    pub scatter_map: ScatterMapConfig,
    pub eikonal: EikonalConfig,
    pub transport: TransportConfig,
    pub wkb: WkbConfig,
    pub oscillatory: OscillatoryConfig,
    pub lp_check: LpCheckConfig,
    pub resolvent: ResolventConfig,
    pub smoothing: SmoothingConfig,
    pub sobolev: SobolevConfig,
    pub dispersive: DispersiveConfig,
    pub strichartz: StrichartzConfig,
    pub nls: NlsExperimentConfig,
    pub normal_form: NormalFormConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub threads: usize,
    pub seed: u64,
    pub metric: MetricConfig,
    pub suite: SuiteConfig,
    pub experiment: Experiments,
}

impl Config {
    pub fn reference() -> Self {
        ConfigTree::reference().build().expect("reference config is valid")
    }

    pub fn from_tree(table: &Table) -> Result<Self, ConfigError> {
        Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Schema(e.message().to_string()))
    }
}

/// The merged key-value tree behind a `Config`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigTree {
    table: Table,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a float",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Brings `v` to the type of `like`, or reports the expected type.
fn coerce(like: &Value, v: Value) -> Result<Value, (&'static str, &'static str)> {
    match (like, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(base), Value::Array(items)) => match base.first() {
            None => Ok(Value::Array(items)),
            Some(elem) => items
                .into_iter()
                .map(|x| coerce(elem, x))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array),
        },
        (l, v) if std::mem::discriminant(l) == std::mem::discriminant(&v) => Ok(v),
        (l, v) => Err((type_name(l), type_name(&v))),
    }
}

fn split_key(s: &str) -> Vec<String> {
    s.split('.').map(|p| p.trim().trim_matches('"').to_string()).collect()
}

/// Line and column of the assignment or header that introduces `path` in TOML `text`.
pub fn locate(text: &str, path: &[String]) -> Option<(usize, usize)> {
    let mut section: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim_start();
        let col = line.len() - t.len() + 1;
        if t.starts_with('[') {
            let inner = t.trim_start_matches('[');
            let inner = &inner[..inner.find(']').unwrap_or(inner.len())];
            section = split_key(inner);
            if section == path {
                return Some((i + 1, col));
            }
            continue;
        }
        if t.starts_with('#') {
            continue;
        }
        if let Some(eq) = t.find('=') {
            let mut full = section.clone();
            full.extend(split_key(&t[..eq]));
            if full == path {
                return Some((i + 1, col));
            }
        }
    }
    None
}

impl ConfigTree {
    pub fn reference() -> Self {
        Self {
            table: REFERENCE.parse().expect("reference config parses"),
        }
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    pub fn build(&self) -> Result<Config, ConfigError> {
        Config::from_tree(&self.table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.table).expect("tables serialize")
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut t = Self::reference();
        t.overlay_file(path)?;
        Ok(t)
    }

    pub fn overlay_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.overlay_text(&text, &path.display().to_string())
    }

    /// Merges a TOML document over the tree.
    pub fn overlay_text(&mut self, text: &str, source_name: &str) -> Result<(), ConfigError> {
        let over: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
            source_name: source_name.to_string(),
            message: e.to_string().trim_end().to_string(),
        })?;
        let origin = |path: &[String]| {
            let loc = locate(text, path);
            Origin {
                source: source_name.to_string(),
                line: loc.map(|l| l.0),
                column: loc.map(|l| l.1),
            }
        };
        merge(&mut self.table, over, &mut Vec::new(), &origin)
    }

    /// Resolves a key: bare or partial keys are tried under `experiment.<scope>` first.
    pub fn resolve(&self, key: &str, scope: Option<&str>) -> Option<Vec<String>> {
        let path = split_key(key);
        let mut candidates = Vec::new();
        if let Some(s) = scope {
            let mut p = vec!["experiment".to_string(), s.replace('-', "_")];
            p.extend(path.iter().cloned());
            candidates.push(p);
        }
        candidates.push(path);
        candidates.into_iter().find(|p| self.get(p).is_some())
    }

    pub fn get(&self, path: &[String]) -> Option<&Value> {
        let (last, init) = path.split_last()?;
        let mut t = &self.table;
        for k in init {
            t = t.get(k)?.as_table()?;
        }
        t.get(last)
    }

    /// Applies `key=value`. Values are TOML literals; bare words are strings and `a,b,c` is an array.
    pub fn set(&mut self, assignment: &str, scope: Option<&str>) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Assignment(assignment.to_string()))?;
        let (key, raw) = (key.trim(), raw.trim());
        if key.is_empty() {
            return Err(ConfigError::Assignment(assignment.to_string()));
        }
        let origin = Origin {
            source: format!("--set {assignment}"),
            line: None,
            column: None,
        };
        let path = self.resolve(key, scope).ok_or_else(|| ConfigError::UnknownKey {
            origin: origin.clone(),
            key: key.to_string(),
        })?;
        let like = self.get(&path).expect("resolved").clone();
        let parsed = parse_literal(raw, &like);
        let value = coerce(&like, parsed).map_err(|(expected, found)| ConfigError::Type {
            origin,
            key: path.join("."),
            expected: expected.into(),
            found: found.into(),
        })?;
        self.insert(&path, value);
        Ok(())
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<(), ConfigError> {
        let path = split_key(key);
        let origin = Origin {
            source: format!("override {key}"),
            line: None,
            column: None,
        };
        let like = self.get(&path).cloned().ok_or_else(|| ConfigError::UnknownKey {
            origin: origin.clone(),
            key: key.to_string(),
        })?;
        let value = coerce(&like, value).map_err(|(expected, found)| ConfigError::Type {
            origin,
            key: key.to_string(),
            expected: expected.into(),
            found: found.into(),
        })?;
        self.insert(&path, value);
        Ok(())
    }

    fn insert(&mut self, path: &[String], value: Value) {
        let (last, init) = path.split_last().expect("non-empty path");
        let mut t = &mut self.table;
        for k in init {
            t = t.get_mut(k).and_then(Value::as_table_mut).expect("existing table");
        }
        t.insert(last.clone(), value);
    }

    /// Applies the `[suite.fast]` overrides.
    pub fn with_level(&self, level: Level) -> Result<Self, ConfigError> {
        let mut out = self.clone();
        out.set_value("suite.level", Value::String(if level == Level::Fast { "fast" } else { "full" }.into()))?;
        if level == Level::Fast {
            let fast = self
                .get(&["suite".into(), "fast".into()])
                .and_then(Value::as_table)
                .cloned()
                .unwrap_or_default();
            for (k, v) in fast {
                out.set_value(&k, v)?;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.table).expect("tables serialize")
    }

    /// Rebuilds a tree from the JSON snapshot stored in a manifest.
    pub fn from_json(v: &serde_json::Value) -> Result<Self, ConfigError> {
        let table = match Value::try_from(v.clone()) {
            Ok(Value::Table(t)) => t,
            Ok(other) => return Err(ConfigError::Schema(format!("config snapshot is {}", type_name(&other)))),
            Err(e) => return Err(ConfigError::Schema(e.to_string())),
        };
        let mut t = Self::reference();
        let text = toml::to_string(&table).map_err(|e| ConfigError::Schema(e.to_string()))?;
        t.overlay_text(&text, "manifest")?;
        Ok(t)
    }
}

fn parse_literal(raw: &str, like: &Value) -> Value {
    let literal = |s: &str| -> Option<Value> {
        let t: Table = format!("v = {s}").parse().ok()?;
        t.get("v").cloned()
    };
    if let Value::String(_) = like {
        return match literal(raw) {
            Some(v @ Value::String(_)) => v,
            _ => Value::String(raw.to_string()),
        };
    }
    if let Some(v) = literal(raw) {
        return v;
    }
    if matches!(like, Value::Array(_)) {
        if let Some(v) = literal(&format!("[{raw}]")) {
            return v;
        }
    }
    Value::String(raw.to_string())
}

fn merge(
    base: &mut Table,
    over: Table,
    path: &mut Vec<String>,
    origin: &dyn Fn(&[String]) -> Origin,
) -> Result<(), ConfigError> {
    let free = FREE_FORM.contains(&path.join(".").as_str());
    for (k, v) in over {
        path.push(k.clone());
        match base.get_mut(&k) {
            None if free => {
                base.insert(k, v);
            }
            None => {
                return Err(ConfigError::UnknownKey {
                    origin: origin(path),
                    key: path.join("."),
                })
            }
            Some(Value::Table(bt)) => match v {
                Value::Table(ot) => merge(bt, ot, path, origin)?,
                other => {
                    return Err(ConfigError::Type {
                        origin: origin(path),
                        key: path.join("."),
                        expected: "a table".into(),
                        found: type_name(&other).into(),
                    })
                }
            },
            Some(slot) => {
                let value = if free {
                    v
                } else {
                    coerce(slot, v).map_err(|(expected, found)| ConfigError::Type {
                        origin: origin(path),
                        key: path.join("."),
                        expected: expected.into(),
                        found: found.into(),
                    })?
                };
                *slot = value;
            }
        }
        path.pop();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_builds() {
        let c = Config::reference();
        assert_eq!(c.experiment.flow.samples, 1000);
        assert_eq!(c.metric.family, MetricFamily::PowerPerturb);
    }

    #[test]
    fn unknown_key_has_location() {
        let mut t = ConfigTree::reference();
        let e = t.overlay_text("[metric]\nnu = 0.5\n\n[experiment.flow]\nsampels = 3\n", "x.toml").unwrap_err();
        assert_eq!(e.to_string(), "x.toml:5:1: unknown key `experiment.flow.sampels`");
        let e = t.overlay_text("[metric]\nnu = \"fast\"\n", "y.toml").unwrap_err();
        assert!(e.to_string().starts_with("y.toml:2:1: `metric.nu` expects a float"), "{e}");
    }

    #[test]
    fn syntax_error_has_location() {
        let mut t = ConfigTree::reference();
        let e = t.overlay_text("[metric\nnu = 1\n", "bad.toml").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 1") && msg.contains("column"), "{msg}");
    }

    #[test]
    fn overrides() {
        let mut t = ConfigTree::reference();
        t.set("pair=2,6", Some("strichartz")).unwrap();
        t.set("metric.nu=2", None).unwrap();
        t.set("regime=angular_sep", Some("oscillatory")).unwrap();
        t.set("h_ladder=[0.5, 0.25]", Some("oscillatory")).unwrap();
        let c = t.build().unwrap();
        assert_eq!(c.experiment.strichartz.pair, (2.0, 6.0));
        assert_eq!(c.metric.nu, 2.0);
        assert_eq!(c.experiment.oscillatory.regime, "angular_sep");
        assert_eq!(c.experiment.oscillatory.h_ladder, vec![0.5, 0.25]);
        assert!(matches!(t.set("nope=1", Some("flow")), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(t.set("samples=many", Some("flow")), Err(ConfigError::Type { .. })));
        assert!(matches!(t.set("samples", Some("flow")), Err(ConfigError::Assignment(_))));
    }

    #[test]
    fn fast_level_applies_overrides() {
        let t = ConfigTree::reference().with_level(Level::Fast).unwrap();
        let c = t.build().unwrap();
        assert_eq!(c.suite.level, Level::Fast);
        assert_eq!(c.experiment.flow.samples, 200);
    }

    #[test]
    fn json_round_trip() {
        let mut t = ConfigTree::reference();
        t.set("metric.family=flat", None).unwrap();
        let back = ConfigTree::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.build().unwrap(), t.build().unwrap());
    }
}
