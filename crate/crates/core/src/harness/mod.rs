//! Experiment harness: layered configuration, per-experiment drivers, CSV outputs with a
//! manifest, and the acceptance suite.

pub mod config;
pub mod experiments;
pub mod persist;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

pub use config::{Config, ConfigError, ConfigTree, Level};
pub use persist::{Check, CsvTable, OutputEntry, RunManifest};

use crate::dynamics::DynamicsError;
use crate::flow::FlowError;
use crate::geometry::{chart_symbol_class, warped_symbol_class, GeometryError};
use crate::numerics::fit::FitError;
use crate::oscillatory::OscillatoryError;
use crate::phase::PhaseError;
use crate::spectral::SpectralError;

pub const THREADS_ENV: &str = "CONIC_DISPERSION_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Oscillatory(#[from] OscillatoryError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    Flow,
    ScatterMap,
    Eikonal,
    Transport,
    Wkb,
    Oscillatory,
    LpCheck,
    Resolvent,
    Smoothing,
    Sobolev,
    Dispersive,
    Strichartz,
    Nls,
    NormalForm,
}

impl Experiment {
    pub const ALL: [Experiment; 14] = [
        Self::Flow,
        Self::ScatterMap,
        Self::Eikonal,
        Self::Transport,
        Self::Wkb,
        Self::Oscillatory,
        Self::LpCheck,
        Self::Resolvent,
        Self::Smoothing,
        Self::Sobolev,
        Self::Dispersive,
        Self::Strichartz,
        Self::Nls,
        Self::NormalForm,
    ];

    /// Subcommand name.
    pub fn name(self) -> &'static str {
        match self {
            Self::Flow => "flow",
            Self::ScatterMap => "scatter-map",
            Self::Eikonal => "eikonal",
            Self::Transport => "transport",
            Self::Wkb => "wkb",
            Self::Oscillatory => "oscillatory",
            Self::LpCheck => "lp-check",
            Self::Resolvent => "resolvent",
            Self::Smoothing => "smoothing",
            Self::Sobolev => "sobolev",
            Self::Dispersive => "dispersive",
            Self::Strichartz => "strichartz",
            Self::Nls => "nls",
            Self::NormalForm => "normal-form",
        }
    }

    /// Config section under `experiment.`.
    pub fn section(self) -> String {
        self.name().replace('-', "_")
    }

    /// Acceptance criteria the experiment reports on.
    pub fn criteria(self) -> &'static [u8] {
        match self {
            Self::Flow => &[1],
            Self::ScatterMap => &[2],
            Self::Eikonal => &[3, 4],
            Self::Transport => &[5],
            Self::Oscillatory => &[6],
            Self::LpCheck => &[7, 8],
            Self::Resolvent | Self::Smoothing => &[9],
            Self::Dispersive => &[10],
            Self::Strichartz => &[11],
            Self::Nls => &[12],
            Self::NormalForm => &[13],
            Self::Wkb | Self::Sobolev => &[],
        }
    }

    /// Uses only the flat cone and fixed model coefficients, so the metric gate does not apply.
    fn metric_free(self) -> bool {
        self == Self::NormalForm
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let k = s.replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|e| e.name() == k)
            .ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

#[derive(Debug, Default)]
pub struct ExperimentOutput {
    pub tables: Vec<CsvTable>,
    pub checks: Vec<Check>,
    pub observed: serde_json::Value,
}

/// Symbol-class gate on the configured metric, in both model forms.
pub fn symbol_gate(cfg: &Config) -> Vec<Check> {
    let m = &cfg.metric;
    let mut out = Vec::new();
    let mut push = |id: &str, rep: Result<crate::geometry::SymbolClassReport, GeometryError>| {
        out.push(match rep {
            Ok(r) => Check::new(
                id,
                None,
                &m.label(),
                r.pass,
                format!("{:?}", r.exponents.map(|e| e.map(|x| (x * 1e3).round() / 1e3))),
                format!("derivative j decays like r^(−ν−j), ν = {}", r.nu),
            )
            .detail(r.reason),
            Err(e) => Check::error(id, None, &m.label(), &e),
        });
    };
    push("symbol_class_warped", m.warped().map(|w| warped_symbol_class(&w)));
    push("symbol_class_chart", m.chart().map(|c| chart_symbol_class(&c, 0.0, m.r_flat)));
    out
}

/// Runs one experiment in memory, without the gate or any file output.
pub fn execute(exp: Experiment, cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    use experiments as x;
    match exp {
        Experiment::Flow => x::flow(cfg),
        Experiment::ScatterMap => x::scatter_map(cfg),
        Experiment::Eikonal => x::eikonal(cfg),
        Experiment::Transport => x::transport(cfg),
        Experiment::Wkb => x::wkb(cfg),
        Experiment::Oscillatory => x::oscillatory(cfg),
        Experiment::LpCheck => x::lp_check(cfg),
        Experiment::Resolvent => x::resolvent(cfg),
        Experiment::Smoothing => x::smoothing(cfg),
        Experiment::Sobolev => x::sobolev(cfg),
        Experiment::Dispersive => x::dispersive(cfg),
        Experiment::Strichartz => x::strichartz(cfg),
        Experiment::Nls => x::nls(cfg),
        Experiment::NormalForm => x::normal_form(cfg),
    }
}

/// Worker count: the environment variable wins over the config, 0 means one per core.
pub fn thread_count(cfg: &Config) -> Result<usize, HarnessError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| HarnessError::Invalid(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(cfg.threads),
    }
}

fn pool(cfg: &Config) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(cfg)?)
        .build()
        .map_err(|e| HarnessError::Invalid(e.to_string()))
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn pass(&self) -> bool {
        self.manifest.pass
    }
}

fn parameters(exp: Experiment, tree: &ConfigTree) -> serde_json::Value {
    let get = |p: &[&str]| {
        let path: Vec<String> = p.iter().map(|s| s.to_string()).collect();
        tree.get(&path).map(|v| serde_json::to_value(v).expect("toml values serialize"))
    };
    serde_json::json!({
        "metric": get(&["metric"]),
        "experiment": get(&["experiment", &exp.section()]),
    })
}

/// Runs `exp` under `tree` and writes its CSVs and `manifest.json` into `dir`.
pub fn run_into(exp: Experiment, tree: &ConfigTree, dir: &Path) -> Result<RunManifest, HarnessError> {
    let cfg = tree.build()?;
    let pool = pool(&cfg)?;
    let started = chrono::Local::now();
    let clock = Instant::now();
    let mut checks = if exp.metric_free() { Vec::new() } else { symbol_gate(&cfg) };
    let mut observed = serde_json::Value::Null;
    let mut outputs = Vec::new();
    if checks.iter().all(|c| c.pass) {
        match pool.install(|| execute(exp, &cfg)) {
            Ok(out) => {
                for t in &out.tables {
                    outputs.push(persist::write_output(dir, &t.name, &t.to_bytes())?);
                }
                checks.extend(out.checks);
                observed = out.observed;
            }
            Err(e) => match exp.criteria() {
                [] => checks.push(Check::error(&exp.section(), None, &cfg.metric.label(), &e)),
                ids => checks.extend(ids.iter().map(|&k| Check::error(&exp.section(), Some(k), &cfg.metric.label(), &e))),
            },
        }
    }
    let manifest = RunManifest {
        experiment: exp.name().to_string(),
        code_version: persist::code_version(),
        started: started.to_rfc3339(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        threads: pool.current_num_threads(),
        config: tree.to_json(),
        parameters: parameters(exp, tree),
        outputs,
        pass: !checks.is_empty() && checks.iter().all(|c| c.pass),
        checks,
        observed,
    };
    persist::write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Runs `exp` into a fresh timestamped directory under `out_root`.
pub fn run(exp: Experiment, tree: &ConfigTree, out_root: &Path) -> Result<RunOutcome, HarnessError> {
    let dir = persist::output_dir(out_root, exp.name(), &chrono::Local::now())?;
    let manifest = run_into(exp, tree, &dir)?;
    Ok(RunOutcome { dir, manifest })
}

pub const CRITERIA: [(u8, &str); 13] = [
    (1, "flat flow follows straight lines"),
    (2, "flat scattering map"),
    (3, "eikonal table residuals"),
    (4, "eikonal expansion orders"),
    (5, "transport amplitude"),
    (6, "oscillatory kernel bounds"),
    (7, "flat radial eigenvalues"),
    (8, "Littlewood-Paley square function"),
    (9, "resolvent plateau and local smoothing"),
    (10, "dispersive decay"),
    (11, "Strichartz band ratios"),
    (12, "small-data cubic NLS"),
    (13, "normal-form decay gain"),
];

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u8,
    pub title: &'static str,
    pub pass: bool,
    pub observed: String,
    pub required: String,
    pub detail: String,
    pub checks: Vec<Check>,
}

impl CriterionResult {
    fn from_checks(id: u8, title: &'static str, checks: Vec<Check>) -> Self {
        let pass = !checks.is_empty() && checks.iter().all(|c| c.pass);
        let (observed, required, detail) = match checks.iter().find(|c| !c.pass).or(checks.first()) {
            Some(c) => (
                format!("{} [{}] {}", c.id, c.metric, c.observed),
                c.required.clone(),
                format!("{} of {} checks pass", checks.iter().filter(|c| c.pass).count(), checks.len()),
            ),
            None => ("no checks ran".into(), "at least one check".into(), String::new()),
        };
        Self {
            id,
            title,
            pass,
            observed,
            required,
            detail,
            checks,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:>2} {:<38} {} (required {}; {})",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.observed,
            self.required,
            self.detail
        )
    }
}

/// Groups checks by acceptance criterion; a criterion passes when all of its checks do.
pub fn criteria(checks: &[Check]) -> Vec<CriterionResult> {
    CRITERIA
        .iter()
        .map(|&(id, title)| {
            let mine = checks.iter().filter(|c| c.criterion == Some(id)).cloned().collect();
            CriterionResult::from_checks(id, title, mine)
        })
        .collect()
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub dir: PathBuf,
    pub runs: Vec<(Experiment, RunManifest)>,
    pub criteria: Vec<CriterionResult>,
}

impl SuiteOutcome {
    pub fn pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass) && self.runs.iter().all(|(_, m)| m.pass)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (e, m) in &self.runs {
            s.push_str(&format!(
                "{:<12} {:>8.1}s  {}\n",
                e.name(),
                m.wall_clock_seconds,
                if m.pass { "ok" } else { "FAILED" }
            ));
        }
        s.push('\n');
        for c in &self.criteria {
            s.push_str(&c.line());
            s.push('\n');
        }
        s
    }
}

/// Every experiment at `level`, each in its own subdirectory, plus `summary.csv`.
pub fn run_suite(tree: &ConfigTree, level: Level, out_root: &Path) -> Result<SuiteOutcome, HarnessError> {
    let tree = tree.with_level(level)?;
    let dir = persist::output_dir(out_root, "suite", &chrono::Local::now())?;
    let mut runs = Vec::new();
    for exp in Experiment::ALL {
        let sub = dir.join(exp.name());
        std::fs::create_dir_all(&sub).map_err(|e| HarnessError::io(&sub, e))?;
        runs.push((exp, run_into(exp, &tree, &sub)?));
    }
    let all: Vec<Check> = runs.iter().flat_map(|(_, m)| m.checks.iter().cloned()).collect();
    let criteria = criteria(&all);
    let mut t = CsvTable::new("summary.csv", &["criterion", "title", "pass", "observed", "required", "checks"]);
    for c in &criteria {
        t.push(vec![
            c.id.to_string(),
            c.title.to_string(),
            c.pass.to_string(),
            c.observed.clone(),
            c.required.clone(),
            c.checks.len().to_string(),
        ]);
    }
    persist::write_output(&dir, &t.name, &t.to_bytes())?;
    Ok(SuiteOutcome { dir, runs, criteria })
}
