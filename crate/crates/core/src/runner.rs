//! End-to-end execution of a [`Scenario`].

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dispatch::{estimate_alphas, DispatchError, Dispatcher, FluctuationForecast, OffsetPlan};
use crate::ensemble::{sample_population, EnsembleError, PowerTrace, Simulator};
use crate::metrics::{self, Settling, TraceStats, DEFAULT_TOLERANCE, EXCLUDE_MARGIN_MIN};
use crate::output::TclSample;
use crate::scenario::{load_ambient_trace, load_forecast, Ambient, AmbientSpec, Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

impl RunError {
    /// Configuration problems, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        match self {
            RunError::Scenario(_) => true,
            RunError::Ensemble(e) => matches!(
                e,
                EnsembleError::EmptyPopulation
                    | EnsembleError::Model(_)
                    | EnsembleError::InvalidHeterogeneity(_)
                    | EnsembleError::InvalidStep(_)
                    | EnsembleError::InvalidHorizon(_)
                    | EnsembleError::UnknownLoad { .. }
                    | EnsembleError::EventOutsideHorizon { .. }
                    | EnsembleError::UnsortedSchedule { .. }
            ),
            RunError::Dispatch(_) => false,
        }
    }
}

/// Where the metrics were anchored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Analysis {
    pub event_h: Option<f64>,
    pub exclude_min: f64,
    pub tolerance: f64,
    pub residual_window: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Controlled fleet; extra columns hold the reference and fluctuation
    /// series when present.
    pub trace: PowerTrace,
    pub reference: Option<PowerTrace>,
    pub stats: TraceStats,
    pub analysis: Analysis,
    pub per_tcl: Vec<TclSample>,
    pub plan: Option<OffsetPlan>,
    pub warnings: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub warmup_h: f64,
}

impl RunOutput {
    /// Extra `summary.txt` entries beyond the metrics.
    pub fn summary_extra(&self, scenario: &Scenario) -> Vec<(String, String)> {
        let mut v = vec![
            ("seed".to_owned(), self.seed.to_string()),
            ("config_hash".to_owned(), self.config_hash.clone()),
            (
                "scenario".to_owned(),
                scenario.name.clone().unwrap_or_else(|| "unnamed".into()),
            ),
            ("n".to_owned(), scenario.population.n.to_string()),
            ("warmup_h".to_owned(), format!("{:.6}", self.warmup_h)),
            (
                "event_t_h".to_owned(),
                self.analysis.event_h.map_or("na".into(), |t| format!("{t:.6}")),
            ),
            ("exclude_min".to_owned(), format!("{:.6}", self.analysis.exclude_min)),
            ("tolerance".to_owned(), format!("{}", self.analysis.tolerance)),
        ];
        if let Some((a, b)) = self.analysis.residual_window {
            v.push(("residual_window_h".to_owned(), format!("{a:.6}:{b:.6}")));
        }
        if let Some(plan) = &self.plan {
            v.push(("groups".to_owned(), plan.pulses.len().to_string()));
        }
        v.push(("warnings".to_owned(), self.warnings.len().to_string()));
        v
    }
}

/// Stable short hash of the scenario as serialized.
pub fn config_hash(scenario: &Scenario) -> String {
    let digest = Sha256::digest(scenario.to_toml().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn ambient_of(scenario: &Scenario) -> Result<Ambient, ScenarioError> {
    Ok(match &scenario.ambient {
        AmbientSpec::Constant(v) => Ambient::Constant(*v),
        AmbientSpec::Trace(p) => Ambient::Trace(load_ambient_trace(p)?),
    })
}

/// Build the fleet, equilibrate it and return the simulator at `t = 0`.
pub fn prepare(scenario: &Scenario) -> Result<(Simulator, f64), RunError> {
    scenario.validate()?;
    let ambient = ambient_of(scenario)?;
    let amb0 = ambient.at(0.0);
    let pop = sample_population(
        &scenario.base_params(),
        &scenario.population.heterogeneity,
        scenario.population.n,
        scenario.seed,
        amb0,
    )?;
    let warmup = scenario
        .simulation
        .warmup_h
        .unwrap_or_else(|| 5.0 * pop.mean_period_h(amb0).unwrap_or(0.0));
    let mut sim = Simulator::new(
        pop,
        ambient,
        scenario.noise.into(),
        scenario.simulation.dt_s,
        0.0,
    )?
    .with_max_shift(scenario.simulation.max_shift_c);
    if let Some(k) = scenario.simulation.threads {
        sim = sim.with_threads(k)?;
    }
    sim.equilibrate(warmup);
    Ok((sim, warmup))
}

pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput, RunError> {
    let (mut sim, warmup_h) = prepare(scenario)?;
    let sim_spec = &scenario.simulation;
    let horizon = sim_spec.horizon_h;
    let decimation = sim_spec.decimation();
    let mut warnings = Vec::new();

    let forecast = match &scenario.dispatch {
        Some(d) => Some(load_forecast(&d.forecast)?),
        None => None,
    };
    let want_reference = sim_spec
        .reference
        .unwrap_or(!scenario.events.is_empty() || forecast.is_some());
    let reference = if want_reference {
        Some(sim.clone().run(&[], horizon, decimation)?)
    } else {
        None
    };

    let mut schedule = scenario.events.clone();
    let mut plan = None;
    if let (Some(fc), Some(d)) = (&forecast, &scenario.dispatch) {
        let snapshot = operator_snapshot(&sim, reference.as_ref(), fc);
        let lr = estimate_alphas(&snapshot, None)?;
        let cycle = d.cycle_estimate_h.unwrap_or_else(|| {
            sim.population()
                .mean_period_h(sim.ambient_now())
                .unwrap_or(1.0)
        });
        let mut dispatcher = Dispatcher::new(snapshot.n_total, cycle, d.seed.unwrap_or(scenario.seed));
        let p = dispatcher.plan_offsets(fc, &lr)?;
        for w in &p.warnings {
            warnings.push(format!(
                "pool exhausted at t={:.4} h: granted {} of {} loads",
                w.t_start_h, w.granted, w.requested
            ));
        }
        schedule.extend(p.schedule());
        schedule.sort_by(|a, b| a.t_h.total_cmp(&b.t_h));
        plan = Some(p);
    }

    let ids = &scenario.output.per_tcl_sample;
    let mut per_tcl = Vec::new();
    let mut trace = sim.run_observed(&schedule, horizon, decimation, |s| {
        let t_h = s.time_h();
        for &id in ids {
            if let Some(l) = s.population().get(id) {
                per_tcl.push(TclSample {
                    t_h,
                    id,
                    theta: l.state.theta,
                    on: l.state.on,
                });
            }
        }
    })?;

    if let Some(r) = &reference {
        trace.columns.push(("unperturbed_mw".into(), r.values.clone()));
    }
    if let Some(fc) = &forecast {
        let fluct: Vec<f64> = (0..trace.len()).map(|i| fc.level_at(trace.time_at(i))).collect();
        let total = trace.values.iter().zip(&fluct).map(|(a, b)| a + b).collect();
        trace.columns.push(("fluctuation_mw".into(), fluct.clone()));
        trace.columns.push(("total_mw".into(), total));
        if let Some(r) = &reference {
            let uncontrolled = r.values.iter().zip(&fluct).map(|(a, b)| a + b).collect();
            trace.columns.push(("uncontrolled_total_mw".into(), uncontrolled));
        }
    }

    let (stats, analysis) = analyse(&trace, reference.as_ref(), &schedule, forecast.as_ref(), &mut warnings);
    Ok(RunOutput {
        trace,
        reference,
        stats,
        analysis,
        per_tcl,
        plan,
        warnings,
        seed: scenario.seed,
        config_hash: config_hash(scenario),
        warmup_h,
    })
}

/// Aggregate knowledge available to the operator: fleet size, mean rated
/// power, and the average draw over the hour before the first fluctuation.
fn operator_snapshot(
    sim: &Simulator,
    reference: Option<&PowerTrace>,
    fc: &FluctuationForecast,
) -> crate::ensemble::FleetSnapshot {
    let mut snap = sim.snapshot();
    if let (Some(r), Some((start, _))) = (reference, fc.window()) {
        let hi = r.index_at(start).min(r.len());
        let lo = r.index_at(start - 1.0).min(hi);
        if hi > lo {
            snap.aggregate_mw = r.values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
    }
    snap
}

fn analyse(
    trace: &PowerTrace,
    reference: Option<&PowerTrace>,
    schedule: &[crate::ensemble::ControlEvent],
    forecast: Option<&FluctuationForecast>,
    warnings: &mut Vec<String>,
) -> (TraceStats, Analysis) {
    let first = schedule.first();
    let event_h = first.map(|e| e.t_h);
    let exclude_min = first.map_or(0.0, |e| e.action.commanded_duration_min()) + EXCLUDE_MARGIN_MIN;
    let mut stats = TraceStats::default();
    let mut residual_window = None;

    let mut note = |what: &str, e: metrics::MetricsError| warnings.push(format!("{what}: {e}"));
    match event_h {
        Some(t) => {
            match metrics::baseline_mean(trace, t) {
                Ok(b) => stats.baseline_mean = Some(b),
                Err(e) => note("baseline", e),
            }
            if stats.baseline_mean.is_some() {
                stats.osc_amplitude = metrics::oscillation_amplitude(trace, t, exclude_min).ok();
                stats.settling_time = metrics::settling_time(trace, t, DEFAULT_TOLERANCE).ok();
            }
            if let Some(r) = reference {
                match metrics::pulse_energy(trace, r, (t, trace.end_h() + 1e-6)) {
                    Ok(e) => stats.pulse_energy = Some(e),
                    Err(e) => note("pulse energy", e),
                }
            }
        }
        None => {
            let n = trace.len().max(1) as f64;
            stats.baseline_mean = Some(trace.values.iter().sum::<f64>() / n);
        }
    }

    let (series, window) = match forecast.and_then(|f| f.window()) {
        Some(w) => (trace.select("total_mw").unwrap_or_else(|| trace.clone()), w),
        None => (trace.clone(), (event_h.unwrap_or(trace.t0_h), trace.end_h() + 1e-6)),
    };
    match metrics::residual_std(&series, window) {
        Ok(s) => {
            stats.residual_std = Some(s);
            residual_window = Some(window);
        }
        Err(e) => note("residual", e),
    }
    if matches!(stats.settling_time, Some(Settling::Unsettled)) && event_h.is_none() {
        stats.settling_time = None;
    }
    (
        stats,
        Analysis {
            event_h,
            exclude_min,
            tolerance: DEFAULT_TOLERANCE,
            residual_window,
        },
    )
}

/// Recompute metrics from a saved trace.
pub fn recompute_stats(
    trace: &PowerTrace,
    event_h: Option<f64>,
    exclude_min: f64,
    tolerance: f64,
    residual_window: Option<(f64, f64)>,
) -> TraceStats {
    let mut stats = TraceStats::default();
    if let Some(t) = event_h {
        stats.baseline_mean = metrics::baseline_mean(trace, t).ok();
        stats.osc_amplitude = metrics::oscillation_amplitude(trace, t, exclude_min).ok();
        stats.settling_time = metrics::settling_time(trace, t, tolerance).ok();
        if let Some(r) = trace.select("unperturbed_mw") {
            stats.pulse_energy = metrics::pulse_energy(trace, &r, (t, trace.end_h() + 1e-6)).ok();
        }
    } else {
        stats.baseline_mean = Some(trace.values.iter().sum::<f64>() / trace.len().max(1) as f64);
    }
    let series = if trace.column("total_mw").is_some() {
        trace.select("total_mw").unwrap_or_else(|| trace.clone())
    } else {
        trace.clone()
    };
    let window = residual_window.unwrap_or((event_h.unwrap_or(trace.t0_h), trace.end_h() + 1e-6));
    stats.residual_std = metrics::residual_std(&series, window).ok();
    stats
}
