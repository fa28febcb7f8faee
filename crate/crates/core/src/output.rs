//! Result files: `power.csv`, `summary.txt`, `per_tcl_sample.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ensemble::PowerTrace;
use crate::metrics::{Settling, TraceStats};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One recorded state of one load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TclSample {
    pub t_h: f64,
    pub id: usize,
    pub theta: f64,
    pub on: bool,
}

pub fn render_power_csv(trace: &PowerTrace) -> String {
    let mut out = String::from("t_hours,power_mw");
    for (name, _) in &trace.columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, v) in trace.values.iter().enumerate() {
        let _ = write!(out, "{:.6},{:.6}", trace.time_at(i), v);
        for (_, col) in &trace.columns {
            let _ = write!(out, ",{:.6}", col[i]);
        }
        out.push('\n');
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_owned(), |x| format!("{x:.6}"))
}

/// `key=value` lines; keys in a fixed order, then `extra` as given.
pub fn render_summary(stats: &TraceStats, extra: &[(String, String)]) -> String {
    let settling = match stats.settling_time {
        Some(Settling::Settled(h)) => format!("{h:.6}"),
        Some(Settling::Unsettled) => "unsettled".to_owned(),
        None => "na".to_owned(),
    };
    let mut out = String::new();
    let _ = writeln!(out, "baseline_mean_mw={}", fmt_opt(stats.baseline_mean));
    let _ = writeln!(out, "osc_amplitude_mw={}", fmt_opt(stats.osc_amplitude));
    let _ = writeln!(out, "settling_time_h={settling}");
    let _ = writeln!(out, "pulse_energy_mwh={}", fmt_opt(stats.pulse_energy));
    let _ = writeln!(out, "residual_std_mw={}", fmt_opt(stats.residual_std));
    for (k, v) in extra {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

pub fn write_outputs(
    dir: &Path,
    trace: &PowerTrace,
    stats: &TraceStats,
    extra: &[(String, String)],
    per_tcl: &[TclSample],
) -> Result<Vec<PathBuf>, OutputError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let power = dir.join("power.csv");
    std::fs::write(&power, render_power_csv(trace)).map_err(io_err(&power))?;
    written.push(power);

    let summary = dir.join("summary.txt");
    std::fs::write(&summary, render_summary(stats, extra)).map_err(io_err(&summary))?;
    written.push(summary);

    if !per_tcl.is_empty() {
        let path = dir.join("per_tcl_sample.csv");
        let mut out = String::from("t_hours,tcl_id,theta_c,on\n");
        for s in per_tcl {
            let _ = writeln!(out, "{:.6},{},{:.6},{}", s.t_h, s.id, s.theta, u8::from(s.on));
        }
        std::fs::write(&path, out).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_power_csv(path: &Path) -> Result<PowerTrace, OutputError> {
    let fmt = |message: String| OutputError::Format {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| fmt("empty file".into()))?
        .split(',')
        .collect();
    if header.len() < 2 || header[0] != "t_hours" || header[1] != "power_mw" {
        return Err(fmt(format!("unexpected header {header:?}")));
    }
    let mut times = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len() - 1];
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(fmt(format!("row {} has {} cells", row + 2, cells.len())));
        }
        let parse = |j: usize| {
            cells[j]
                .parse::<f64>()
                .map_err(|_| fmt(format!("row {}, column {}: `{}`", row + 2, header[j], cells[j])))
        };
        times.push(parse(0)?);
        for (j, col) in cols.iter_mut().enumerate() {
            col.push(parse(j + 1)?);
        }
    }
    if times.len() < 2 {
        return Err(fmt("need at least two samples".into()));
    }
    // Times are printed to 1e-6 h; the full span recovers the step to 0.1 s.
    let span_s = (times[times.len() - 1] - times[0]) * 3600.0;
    let dt_s = (span_s / (times.len() - 1) as f64 * 10.0).round() / 10.0;
    let mut cols = cols.into_iter();
    let mut trace = PowerTrace::new(times[0], dt_s, cols.next().unwrap_or_default());
    trace.columns = header[2..]
        .iter()
        .map(|s| (*s).to_owned())
        .zip(cols)
        .collect();
    Ok(trace)
}

pub fn read_summary(path: &Path) -> Result<BTreeMap<String, String>, OutputError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .collect())
}
