//! Scenario files, ambient traces and fluctuation forecasts.
//!
//! Scenarios are TOML documents with a strict schema: unknown keys are
//! rejected and physics parameters have no defaults. See
//! `docs/scenario.md` for the full layout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{FluctuationEvent, FluctuationForecast};
use crate::ensemble::{ControlEvent, HeterogeneityCfg};
use crate::model::{NoiseSpec, TclParams};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: row {row}, column {column}: {message}")]
    Cell {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },
    #[error("{path}: time column not strictly increasing at row {row}")]
    NonMonotone { path: PathBuf, row: usize },
    #[error("{path}: {message}")]
    Trace { path: PathBuf, message: String },
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

/// Piecewise-linear ambient temperature, constant beyond the end knots.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientTrace {
    samples: Vec<(f64, f64)>,
}

impl AmbientTrace {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self, String> {
        if samples.len() < 2 {
            return Err("ambient trace needs at least two samples".into());
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(format!("time not strictly increasing at sample {}", i + 1));
        }
        if samples.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err("non-finite sample".into());
        }
        Ok(AmbientTrace { samples })
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn interpolate(&self, t_h: f64) -> f64 {
        let s = &self.samples;
        if t_h <= s[0].0 {
            return s[0].1;
        }
        if t_h >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        // First knot strictly after t.
        let j = s.partition_point(|&(t, _)| t <= t_h);
        let (t0, v0) = s[j - 1];
        let (t1, v1) = s[j];
        v0 + (v1 - v0) * (t_h - t0) / (t1 - t0)
    }

    /// Sinusoidal daily profile peaking at `peak_hour`.
    pub fn diurnal(mean: f64, amplitude: f64, peak_hour: f64, hours: f64, step_h: f64) -> Self {
        let n = (hours / step_h).round() as usize;
        let samples = (0..=n)
            .map(|i| {
                let t = i as f64 * step_h;
                let phase = 2.0 * std::f64::consts::PI * (t - peak_hour) / 24.0;
                (t, mean + amplitude * phase.cos())
            })
            .collect();
        AmbientTrace { samples }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ambient {
    Constant(f64),
    Trace(AmbientTrace),
}

impl Ambient {
    #[inline]
    pub fn at(&self, t_h: f64) -> f64 {
        match self {
            Ambient::Constant(v) => *v,
            Ambient::Trace(tr) => tr.interpolate(t_h),
        }
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, ScenarioError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ScenarioError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Read a numeric CSV with the exact `header`, returning rows of floats.
fn read_numeric_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>, ScenarioError> {
    let mut rdr = csv_reader(path)?;
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| ScenarioError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    if found != header {
        return Err(ScenarioError::Parse {
            path: path.to_path_buf(),
            message: format!("expected header `{}`, found `{}`", header.join(","), found.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // Header is row 1.
        let row = i + 2;
        let rec = rec.map_err(|e| ScenarioError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut out = Vec::with_capacity(header.len());
        for (j, col) in header.iter().enumerate() {
            let cell = rec.get(j).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| ScenarioError::Cell {
                path: path.to_path_buf(),
                row,
                column: (*col).to_owned(),
                message: format!("not a number: `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(ScenarioError::Cell {
                    path: path.to_path_buf(),
                    row,
                    column: (*col).to_owned(),
                    message: "not finite".into(),
                });
            }
            out.push(v);
        }
        rows.push(out);
    }
    Ok(rows)
}

/// Load a `t_hours,temp_c` CSV.
pub fn load_ambient_trace(path: &Path) -> Result<AmbientTrace, ScenarioError> {
    let rows = read_numeric_csv(path, &["t_hours", "temp_c"])?;
    for i in 1..rows.len() {
        if rows[i][0] <= rows[i - 1][0] {
            return Err(ScenarioError::NonMonotone {
                path: path.to_path_buf(),
                row: i + 2,
            });
        }
    }
    AmbientTrace::new(rows.into_iter().map(|r| (r[0], r[1])).collect()).map_err(|message| {
        ScenarioError::Trace {
            path: path.to_path_buf(),
            message,
        }
    })
}

/// Load a `t_start_hours,duration_min,magnitude_mw` CSV.
pub fn load_forecast(path: &Path) -> Result<FluctuationForecast, ScenarioError> {
    let rows = read_numeric_csv(path, &["t_start_hours", "duration_min", "magnitude_mw"])?;
    let events = rows
        .into_iter()
        .map(|r| FluctuationEvent {
            t_start_h: r[0],
            duration_min: r[1],
            magnitude_mw: r[2],
        })
        .collect();
    FluctuationForecast::new(events).map_err(|message| ScenarioError::Trace {
        path: path.to_path_buf(),
        message,
    })
}

pub fn write_ambient_trace(path: &Path, trace: &AmbientTrace) -> std::io::Result<()> {
    let mut out = String::from("t_hours,temp_c\n");
    for (t, v) in trace.samples() {
        let _ = writeln!(out, "{t},{v}");
    }
    std::fs::write(path, out)
}

// ---------------------------------------------------------------------------
// Scenario schema

/// Physics of the reference load. Every field is required except the
/// actuation delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseLoad {
    pub r: f64,
    pub c: f64,
    pub p: f64,
    pub setpoint: f64,
    pub deadband_halfwidth: f64,
    #[serde(default)]
    pub actuation_delay_s: f64,
}

impl From<BaseLoad> for TclParams {
    fn from(b: BaseLoad) -> Self {
        TclParams {
            r: b.r,
            c: b.c,
            p: b.p,
            setpoint: b.setpoint,
            deadband_halfwidth: b.deadband_halfwidth,
            actuation_delay_s: b.actuation_delay_s,
        }
    }
}

fn default_n() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    #[serde(default = "default_n")]
    pub n: usize,
    pub base: BaseLoad,
    #[serde(default)]
    pub heterogeneity: HeterogeneityCfg,
}

fn default_dt() -> f64 {
    10.0
}
fn default_horizon() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    #[serde(default = "default_horizon")]
    pub horizon_h: f64,
    /// Defaults to five mean natural cycles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_h: Option<f64>,
    /// Defaults to `dt_s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_interval_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Comfort bound for setpoint shifts, °C.
    #[serde(default = "default_max_shift")]
    pub max_shift_c: f64,
    /// Also simulate the same fleet without control for comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<bool>,
}

fn default_max_shift() -> f64 {
    crate::ensemble::DEFAULT_MAX_SHIFT_C
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            dt_s: default_dt(),
            horizon_h: default_horizon(),
            warmup_h: None,
            sample_interval_s: None,
            threads: None,
            max_shift_c: default_max_shift(),
            reference: None,
        }
    }
}

impl SimulationSpec {
    pub fn sample_interval(&self) -> f64 {
        self.sample_interval_s.unwrap_or(self.dt_s)
    }

    pub fn decimation(&self) -> usize {
        (self.sample_interval() / self.dt_s).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AmbientSpec {
    Constant(f64),
    /// CSV path, relative to the scenario file.
    Trace(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma: f64,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseSpec::default();
        NoiseSection {
            sigma: n.sigma,
            enabled: n.enabled,
        }
    }
}

impl From<NoiseSection> for NoiseSpec {
    fn from(n: NoiseSection) -> Self {
        NoiseSpec {
            sigma: n.sigma,
            enabled: n.enabled,
        }
    }
}

/// Offsetting of forecast fluctuations by rotating groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchSpec {
    /// CSV path, relative to the scenario file.
    pub forecast: PathBuf,
    /// Operator's estimate of the natural cycle, hours. Defaults to the
    /// fleet's mean analytic period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_estimate_h: Option<f64>,
    /// Seed for group sampling; defaults to the scenario seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Load ids recorded in `per_tcl_sample.csv`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_tcl_sample: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub population: PopulationSpec,
    #[serde(default)]
    pub simulation: SimulationSpec,
    pub ambient: AmbientSpec,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<ControlEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispatch: Option<DispatchSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

impl Scenario {
    /// Read, parse and validate a scenario. Relative file references are
    /// resolved against the scenario's directory.
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut scenario = Scenario::from_toml(&text).map_err(|message| ScenarioError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        scenario.resolve_paths(base);
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_toml(text: &str) -> Result<Scenario, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let AmbientSpec::Trace(p) = &mut self.ambient {
            fix(p);
        }
        if let Some(d) = &mut self.dispatch {
            fix(&mut d.forecast);
        }
    }

    pub fn base_params(&self) -> TclParams {
        self.population.base.into()
    }

    /// Collect every violation rather than stopping at the first.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        if self.population.n == 0 {
            errs.push("population.n must be >= 1".to_owned());
        }
        if let Err(e) = self.base_params().validate() {
            errs.push(format!("population.base: {e}"));
        }
        if let Err(e) = self.population.heterogeneity.validate() {
            errs.push(format!("population.heterogeneity: {e}"));
        }
        let sim = &self.simulation;
        if !(sim.dt_s.is_finite() && sim.dt_s > 0.0) {
            errs.push(format!("simulation.dt_s must be > 0, got {}", sim.dt_s));
        }
        if !(sim.horizon_h.is_finite() && sim.horizon_h > 0.0) {
            errs.push(format!("simulation.horizon_h must be > 0, got {}", sim.horizon_h));
        }
        if let Some(w) = sim.warmup_h {
            if !(w.is_finite() && w >= 0.0) {
                errs.push(format!("simulation.warmup_h must be >= 0, got {w}"));
            }
        }
        if sim.dt_s > 0.0 {
            let ratio = sim.sample_interval() / sim.dt_s;
            if !(ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
                errs.push(format!(
                    "simulation.sample_interval_s ({}) must be a positive multiple of dt_s ({})",
                    sim.sample_interval(),
                    sim.dt_s
                ));
            }
            let steps = sim.horizon_h * 3600.0 / sim.dt_s;
            if (steps - steps.round()).abs() > 1e-6 {
                errs.push("simulation.horizon_h must be a whole number of steps".to_owned());
            } else if sim.horizon_h > 0.0 && !(steps.round() as usize).is_multiple_of(sim.decimation()) {
                errs.push("simulation.horizon_h must be a whole number of sample intervals".to_owned());
            }
        }
        if sim.threads == Some(0) {
            errs.push("simulation.threads must be >= 1".to_owned());
        }
        if !(sim.max_shift_c.is_finite() && sim.max_shift_c >= 0.0) {
            errs.push("simulation.max_shift_c must be >= 0".to_owned());
        }
        if self.noise.sigma < 0.0 || !self.noise.sigma.is_finite() {
            errs.push(format!("noise.sigma must be >= 0, got {}", self.noise.sigma));
        }
        match &self.ambient {
            AmbientSpec::Constant(v) if !v.is_finite() => {
                errs.push("ambient.constant must be finite".to_owned())
            }
            AmbientSpec::Trace(p) if !p.is_file() => {
                errs.push(format!("ambient trace {} does not exist", p.display()))
            }
            _ => {}
        }
        if let Some(d) = &self.dispatch {
            if !d.forecast.is_file() {
                errs.push(format!("dispatch forecast {} does not exist", d.forecast.display()));
            }
            if let Some(c) = d.cycle_estimate_h {
                if !(c.is_finite() && c > 0.0) {
                    errs.push("dispatch.cycle_estimate_h must be > 0".to_owned());
                }
            }
        }
        for (i, ev) in self.events.iter().enumerate() {
            if i > 0 && ev.t_h < self.events[i - 1].t_h {
                errs.push(format!("events[{i}] is earlier than events[{}]", i - 1));
            }
            if !(ev.t_h >= 0.0 && ev.t_h <= sim.horizon_h) {
                errs.push(format!(
                    "events[{i}].t_h={} outside [0, {}]",
                    ev.t_h, sim.horizon_h
                ));
            }
            let hold = ev.action.commanded_duration_min();
            if !(hold.is_finite() && hold >= 0.0) {
                errs.push(format!("events[{i}] hold must be >= 0 minutes"));
            }
            if let crate::ensemble::Action::SetpointShift { delta_c } = ev.action {
                if delta_c.abs() > sim.max_shift_c {
                    errs.push(format!(
                        "events[{i}] shift {delta_c} °C exceeds ±{} °C",
                        sim.max_shift_c
                    ));
                }
            }
            let max_id = match &ev.targets {
                crate::ensemble::Targets::All => None,
                crate::ensemble::Targets::Ids(ids) => ids.iter().copied().max(),
                crate::ensemble::Targets::Range { start, end } => {
                    if end <= start {
                        errs.push(format!("events[{i}] has an empty target range"));
                    }
                    end.checked_sub(1)
                }
            };
            if let Some(m) = max_id {
                if m >= self.population.n {
                    errs.push(format!("events[{i}] addresses unknown load {m}"));
                }
            }
        }
        if let Some(m) = self.output.per_tcl_sample.iter().copied().max() {
            if m >= self.population.n {
                errs.push(format!("output.per_tcl_sample addresses unknown load {m}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errs))
        }
    }

    /// Set a dotted key (`population.n`, `events.0.action.hold_min`) to a
    /// value parsed as TOML, falling back to a bare string.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Scenario, String> {
        let mut doc: toml::Value = toml::Value::try_from(self).map_err(|e| e.to_string())?;
        let value = parse_scalar(raw);
        let mut cursor = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (depth, part) in parts.iter().enumerate() {
            let last = depth + 1 == parts.len();
            cursor = match cursor {
                toml::Value::Table(t) => {
                    if last {
                        t.insert((*part).to_owned(), value);
                        break;
                    }
                    t.get_mut(*part).ok_or_else(|| format!("no key `{part}` in `{key}`"))?
                }
                toml::Value::Array(a) => {
                    let i: usize = part.parse().map_err(|_| format!("`{part}` is not an index"))?;
                    let len = a.len();
                    let slot = a
                        .get_mut(i)
                        .ok_or_else(|| format!("index {i} out of range ({len})"))?;
                    if last {
                        *slot = value;
                        break;
                    }
                    slot
                }
                _ => return Err(format!("`{part}` is not a table in `{key}`")),
            };
        }
        doc.try_into().map_err(|e: toml::de::Error| e.to_string())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}
