//! Post-processing of aggregate power traces.
//!
//! All functions are pure: they read a [`PowerTrace`] and return numbers.

use thiserror::Error;

use crate::ensemble::PowerTrace;

/// Pre-event window used for the baseline level, hours.
pub const BASELINE_WINDOW_H: f64 = 2.0;
/// Shortest usable pre-event window, hours.
pub const MIN_BASELINE_WINDOW_H: f64 = 1.0;
pub const DEFAULT_TOLERANCE: f64 = 0.05;
/// Added to the commanded pulse length when excluding it from the
/// oscillation search, minutes.
pub const EXCLUDE_MARGIN_MIN: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("event at {event_h} h is outside the trace [{start_h}, {end_h}] h")]
    EventOutsideTrace { event_h: f64, start_h: f64, end_h: f64 },
    #[error("only {available_h:.3} h of trace before the event; need at least {MIN_BASELINE_WINDOW_H} h")]
    ShortBaseline { available_h: f64 },
    #[error("traces are not aligned (t0 {0} vs {1}, dt {2} vs {3})")]
    Misaligned(f64, f64, f64, f64),
    #[error("window [{0}, {1}) h contains no samples")]
    EmptyWindow(f64, f64),
    #[error("tolerance must be in (0, 1), got {0}")]
    BadTolerance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Settling {
    /// Hours after the event.
    Settled(f64),
    Unsettled,
}

impl Settling {
    pub fn hours(&self) -> Option<f64> {
        match self {
            Settling::Settled(h) => Some(*h),
            Settling::Unsettled => None,
        }
    }
}

/// Summary statistics of one run. Entries that do not apply are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceStats {
    pub baseline_mean: Option<f64>,
    pub osc_amplitude: Option<f64>,
    pub settling_time: Option<Settling>,
    pub pulse_energy: Option<f64>,
    pub residual_std: Option<f64>,
}

fn check_event(trace: &PowerTrace, event_h: f64) -> Result<(), MetricsError> {
    if trace.is_empty() || event_h < trace.t0_h - 1e-9 || event_h > trace.end_h() + 1e-9 {
        return Err(MetricsError::EventOutsideTrace {
            event_h,
            start_h: trace.t0_h,
            end_h: trace.end_h(),
        });
    }
    Ok(())
}

/// Mean over the window of up to [`BASELINE_WINDOW_H`] before `event_h`.
pub fn baseline_mean(trace: &PowerTrace, event_h: f64) -> Result<f64, MetricsError> {
    check_event(trace, event_h)?;
    let available = event_h - trace.t0_h;
    if available < MIN_BASELINE_WINDOW_H - 1e-9 {
        return Err(MetricsError::ShortBaseline {
            available_h: available,
        });
    }
    let lo = trace.index_at(event_h - BASELINE_WINDOW_H.min(available));
    let hi = trace.index_at(event_h);
    let window = &trace.values[lo..hi];
    Ok(window.iter().sum::<f64>() / window.len() as f64)
}

/// Largest deviation from the pre-event baseline after `event_h + exclude`.
pub fn oscillation_amplitude(
    trace: &PowerTrace,
    event_h: f64,
    exclude_min: f64,
) -> Result<f64, MetricsError> {
    let base = baseline_mean(trace, event_h)?;
    let start = trace.index_at(event_h + exclude_min / 60.0);
    Ok(trace.values[start.min(trace.len())..]
        .iter()
        .map(|v| (v - base).abs())
        .fold(0.0, f64::max))
}

/// Time after `event_h` from which the trace stays within
/// `baseline·(1 ± tol)` until the end.
pub fn settling_time(
    trace: &PowerTrace,
    event_h: f64,
    tol_fraction: f64,
) -> Result<Settling, MetricsError> {
    if !(tol_fraction > 0.0 && tol_fraction < 1.0) {
        return Err(MetricsError::BadTolerance(tol_fraction));
    }
    let base = baseline_mean(trace, event_h)?;
    let band = base.abs() * tol_fraction;
    let first = trace.index_at(event_h);
    let last_out = trace.values[first..]
        .iter()
        .rposition(|v| (v - base).abs() > band)
        .map(|i| i + first);
    match last_out {
        None => Ok(Settling::Settled(0.0)),
        Some(i) if i + 1 >= trace.len() => Ok(Settling::Unsettled),
        Some(i) => Ok(Settling::Settled((trace.time_at(i + 1) - event_h).max(0.0))),
    }
}

fn check_aligned(a: &PowerTrace, b: &PowerTrace) -> Result<(), MetricsError> {
    if (a.t0_h - b.t0_h).abs() > 1e-9 || (a.dt_sample_s - b.dt_sample_s).abs() > 1e-9 {
        return Err(MetricsError::Misaligned(
            a.t0_h,
            b.t0_h,
            a.dt_sample_s,
            b.dt_sample_s,
        ));
    }
    Ok(())
}

/// Signed energy split of `controlled - baseline` over a window, MWh.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBalance {
    pub net: f64,
    /// Integral of the positive part (extra consumption).
    pub absorbed: f64,
    /// Integral of the negative part, as a positive number.
    pub released: f64,
}

/// Left-Riemann integral of `controlled - baseline` over samples whose time
/// lies in `[from_h, to_h)`. Each sample holds for one sample interval.
pub fn energy_balance(
    controlled: &PowerTrace,
    baseline: &PowerTrace,
    window: (f64, f64),
) -> Result<EnergyBalance, MetricsError> {
    check_aligned(controlled, baseline)?;
    let n = controlled.len().min(baseline.len());
    let lo = controlled.index_at(window.0).min(n);
    let hi = controlled.index_at(window.1).min(n);
    if hi <= lo {
        return Err(MetricsError::EmptyWindow(window.0, window.1));
    }
    let dt = controlled.dt_h();
    let mut out = EnergyBalance::default();
    for i in lo..hi {
        let d = (controlled.values[i] - baseline.values[i]) * dt;
        out.net += d;
        if d > 0.0 {
            out.absorbed += d;
        } else {
            out.released -= d;
        }
    }
    Ok(out)
}

/// Net `∫(controlled - baseline) dt` over the window, MWh.
pub fn pulse_energy(
    controlled: &PowerTrace,
    baseline: &PowerTrace,
    window: (f64, f64),
) -> Result<f64, MetricsError> {
    energy_balance(controlled, baseline, window).map(|b| b.net)
}

/// Population standard deviation of the trace over `[from_h, to_h)`.
pub fn residual_std(trace: &PowerTrace, window: (f64, f64)) -> Result<f64, MetricsError> {
    let lo = trace.index_at(window.0);
    let hi = trace.index_at(window.1).min(trace.len());
    if hi <= lo {
        return Err(MetricsError::EmptyWindow(window.0, window.1));
    }
    let w = &trace.values[lo..hi];
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    Ok((w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt())
}

/// Pointwise `a - b` of aligned traces.
pub fn difference(a: &PowerTrace, b: &PowerTrace) -> Result<PowerTrace, MetricsError> {
    check_aligned(a, b)?;
    let values = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    Ok(PowerTrace::new(a.t0_h, a.dt_sample_s, values))
}
