//! Cross-checks of simulated behaviour against closed forms and
//! brute-force estimates.

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dispatch::estimate_alphas;
use crate::ensemble::{Action, ControlEvent, EnsembleError, Simulator, Targets};
use crate::model::{analytic_duty, analytic_phase_time, Phase, TclParams, TclState};
use crate::protocol::Spt2Direction;
use crate::runner::{prepare, RunError};
use crate::scenario::{AmbientSpec, Scenario};

/// Least-squares line `y = slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Simulated (ON, OFF) phase durations in hours for one noise-free load,
/// timed over the first full cycle starting from the lower edge.
pub fn measure_phase_times(params: &TclParams, theta_amb: f64, dt_s: f64) -> (f64, f64) {
    let band = params.band();
    let mut s = TclState::new(band.lower, false, params);
    let dt_h = dt_s / 3600.0;
    let mut t = 0.0;
    let mut last_switch = 0.0;
    let (mut on_h, mut off_h) = (f64::NAN, f64::NAN);
    // Two switches: OFF→ON ends the OFF phase, ON→OFF ends the ON phase.
    let limit = 100.0 * params.time_constant_h();
    while t < limit && on_h.is_nan() {
        let was_on = s.on;
        s.step(params, theta_amb, dt_s, 0.0);
        t += dt_h;
        if s.on != was_on {
            if was_on {
                on_h = t - last_switch;
            } else {
                off_h = t - last_switch;
            }
            last_switch = t;
        }
    }
    (on_h, off_h)
}

/// Mean power change (MW) over the hold window when `size` random loads
/// receive an SP-T2 pulse now. Positive for either direction.
pub fn measure_pulse(
    sim: &Simulator,
    size: usize,
    direction: Spt2Direction,
    hold_min: f64,
    seed: u64,
) -> Result<f64, EnsembleError> {
    let n = sim.population().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..n).choose_multiple(&mut rng, size.min(n));
    ids.sort_unstable();
    let event = ControlEvent {
        t_h: sim.time_h(),
        targets: Targets::Ids(ids),
        action: Action::Spt2 {
            direction,
            hold_min,
        },
    };
    let horizon = hold_min / 60.0;
    let decimation = 1;
    let reference = sim.clone().run(&[], horizon, decimation)?;
    let controlled = sim.clone().run(&[event], horizon, decimation)?;
    // Samples over [t, t + hold): the signal is applied before the first
    // sample is taken and the forced cohort is released at the last one.
    let k = controlled.len() - 1;
    let diffs: Vec<f64> = controlled.values[..k]
        .iter()
        .zip(&reference.values[..k])
        .map(|(c, r)| c - r)
        .collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
    Ok(match direction {
        Spt2Direction::Down => -mean,
        Spt2Direction::Up => mean,
    })
}

/// Regress measured pulse magnitude (MW) on group size.
pub fn alpha_regression(
    sim: &Simulator,
    sizes: &[usize],
    direction: Spt2Direction,
    hold_min: f64,
    seed: u64,
) -> Result<LineFit, EnsembleError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, &size) in sizes.iter().enumerate() {
        xs.push(size as f64);
        ys.push(measure_pulse(sim, size, direction, hold_min, seed.wrapping_add(k as u64))?);
    }
    fit_line(&xs, &ys).ok_or(EnsembleError::EmptyPopulation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub expected: f64,
    pub measured: f64,
    pub rel_tol: f64,
}

impl OracleCheck {
    fn new(name: &str, expected: f64, measured: f64, rel_tol: f64) -> Self {
        OracleCheck {
            name: name.to_owned(),
            expected,
            measured,
            rel_tol,
        }
    }

    pub fn rel_error(&self) -> f64 {
        ((self.measured - self.expected) / self.expected).abs()
    }

    pub fn passed(&self) -> bool {
        self.rel_error() <= self.rel_tol
    }
}

/// Smallest fleet for which the group-size regression is attempted.
pub const MIN_REGRESSION_FLEET: usize = 1000;

pub fn run_oracles(scenario: &Scenario) -> Result<Vec<OracleCheck>, RunError> {
    scenario.validate()?;
    let params = scenario.base_params();
    let amb0 = match &scenario.ambient {
        AmbientSpec::Constant(v) => Some(*v),
        AmbientSpec::Trace(_) => None,
    };
    let (mut sim, _) = prepare(scenario)?;
    let amb = amb0.unwrap_or_else(|| sim.ambient_now());
    let mut out = Vec::new();

    let dt = scenario.simulation.dt_s;
    let (on_h, off_h) = measure_phase_times(&params, amb, dt);
    if let (Ok(on), Ok(off)) = (
        analytic_phase_time(&params, amb, Phase::On),
        analytic_phase_time(&params, amb, Phase::Off),
    ) {
        // Switches land on step boundaries, so allow one step on top.
        let step_h = dt / 3600.0;
        out.push(OracleCheck::new("phase_on_h", on, on_h, 0.01 + step_h / on));
        out.push(OracleCheck::new("phase_off_h", off, off_h, 0.01 + step_h / off));
        if let Ok(d) = analytic_duty(&params, amb) {
            out.push(OracleCheck::new("duty", d, on_h / (on_h + off_h), 0.01));
        }
        // Halving the step should halve the phase-time error.
        let err = |dt: f64| (measure_phase_times(&params, amb, dt).1 - off).abs();
        let ratio = err(2.0 * dt) / err(dt);
        if ratio.is_finite() {
            out.push(OracleCheck::new("euler_order", 2.0, ratio, 0.15));
        }
    }

    if let Some(amb) = amb0 {
        let expected = sim.population().expected_power(amb);
        let period = sim.population().mean_period_h(amb).unwrap_or(1.0);
        let trace = sim.clone().run(&[], 3.0 * period, 1)?;
        let mean = trace.values.iter().sum::<f64>() / trace.len() as f64;
        out.push(OracleCheck::new("steady_state_mw", expected, mean, 0.02));

        let n = sim.population().len();
        if n >= MIN_REGRESSION_FLEET {
            let snap = sim.snapshot();
            let snap = crate::ensemble::FleetSnapshot {
                aggregate_mw: mean,
                ..snap
            };
            if let Ok(lr) = estimate_alphas(&snap, None) {
                let sizes: Vec<usize> = [40, 20, 10, 5].iter().map(|d| n / d).collect();
                sim.step();
                let down = alpha_regression(&sim, &sizes, Spt2Direction::Down, 2.0, scenario.seed)?;
                let up = alpha_regression(&sim, &sizes, Spt2Direction::Up, 2.0, scenario.seed)?;
                out.push(OracleCheck::new("alpha_minus_kw", lr.alpha_minus, down.slope * 1e3, 0.10));
                out.push(OracleCheck::new("alpha_plus_kw", lr.alpha_plus, up.slope * 1e3, 0.10));
                out.push(OracleCheck::new("alpha_minus_r2", 1.0, down.r2, 0.01));
                out.push(OracleCheck::new("alpha_plus_r2", 1.0, up.r2, 0.01));
            }
        }
    }
    Ok(out)
}
