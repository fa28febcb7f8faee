//! Heterogeneous populations and the stepped simulation loop.

use std::sync::Arc;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    analytic_duty, analytic_period, hours_to_secs, power, ModelError, NoiseSpec, TclParams,
    TclState,
};
use crate::protocol::{ProtocolError, Spt1Direction, Spt2Direction};
use crate::scenario::Ambient;

/// Minimum band width accepted when bands are drawn from table statistics.
pub const MIN_SAMPLED_BAND_WIDTH: f64 = 0.5;
const MAX_BAND_RESAMPLES: usize = 100;

/// Default comfort bound on a single setpoint shift, °C.
pub const DEFAULT_MAX_SHIFT_C: f64 = 2.0;

// Stream-key salts so noise and heterogeneity draws never overlap.
const NOISE_SALT: u64 = 0x6e6f_6973_655f_7331;
const HETEROGENEITY_SALT: u64 = 0x6865_7465_726f_6731;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("population must contain at least one load")]
    EmptyPopulation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("band sampling produced width < {MIN_SAMPLED_BAND_WIDTH} °C after {MAX_BAND_RESAMPLES} draws (load {load})")]
    BandSampling { load: usize },
    #[error("invalid heterogeneity setting {0}")]
    InvalidHeterogeneity(String),
    #[error("time step must be > 0 s, got {0}")]
    InvalidStep(f64),
    #[error("horizon must be > 0 h, got {0}")]
    InvalidHorizon(f64),
    #[error("event at t={t_h} h addresses unknown load {id} (population size {n})")]
    UnknownLoad { t_h: f64, id: usize, n: usize },
    #[error("event at t={t_h} h lies outside [{start_h}, {end_h}] h")]
    EventOutsideHorizon { t_h: f64, start_h: f64, end_h: f64 },
    #[error("schedule is not sorted by time (event {index})")]
    UnsortedSchedule { index: usize },
    #[error("load {id}: {source}")]
    Protocol {
        id: usize,
        #[source]
        source: ProtocolError,
    },
    #[error("cannot build worker pool: {0}")]
    ThreadPool(String),
}

/// Normal moments for the upper and lower band edges, °C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandStats {
    pub udl_mean: f64,
    pub udl_sd: f64,
    pub ldl_mean: f64,
    pub ldl_sd: f64,
}

impl BandStats {
    /// Edge statistics reported for the downward-pulse fleet.
    pub const DOWNWARD_FLEET: BandStats = BandStats {
        udl_mean: 21.2463,
        udl_sd: 0.2895,
        ldl_mean: 19.2435,
        ldl_sd: 0.4076,
    };
    /// Edge statistics reported for the upward-pulse fleet.
    pub const UPWARD_FLEET: BandStats = BandStats {
        udl_mean: 21.2521,
        udl_sd: 0.2891,
        ldl_mean: 19.2552,
        ldl_sd: 0.4052,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BandSampling {
    /// Every load uses the base setpoint and half-width.
    #[default]
    None,
    TableStats(BandStats),
}

/// Per-load parameter spread. Jitters are widths of an additive `U(0,1)`
/// draw in the parameter's own unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityCfg {
    #[serde(default)]
    pub r_jitter: f64,
    #[serde(default)]
    pub c_jitter: f64,
    #[serde(default)]
    pub p_jitter: f64,
    #[serde(default)]
    pub band_sampling: BandSampling,
}

impl Default for HeterogeneityCfg {
    fn default() -> Self {
        HeterogeneityCfg::none()
    }
}

impl HeterogeneityCfg {
    pub fn none() -> Self {
        HeterogeneityCfg {
            r_jitter: 0.0,
            c_jitter: 0.0,
            p_jitter: 0.0,
            band_sampling: BandSampling::None,
        }
    }

    /// `R + U(0,1)`, `C + U(0,1)`, homogeneous power.
    pub fn standard() -> Self {
        HeterogeneityCfg {
            r_jitter: 1.0,
            c_jitter: 1.0,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        for (name, v) in [
            ("r_jitter", self.r_jitter),
            ("c_jitter", self.c_jitter),
            ("p_jitter", self.p_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EnsembleError::InvalidHeterogeneity(format!("{name}={v}")));
            }
        }
        if let BandSampling::TableStats(s) = self.band_sampling {
            let ok = [s.udl_mean, s.udl_sd, s.ldl_mean, s.ldl_sd]
                .iter()
                .all(|v| v.is_finite())
                && s.udl_sd >= 0.0
                && s.ldl_sd >= 0.0;
            if !ok {
                return Err(EnsembleError::InvalidHeterogeneity(format!("{s:?}")));
            }
        }
        Ok(())
    }
}

/// One load of the population with its private noise stream.
#[derive(Debug, Clone)]
pub struct Tcl {
    pub params: TclParams,
    pub state: TclState,
    rng: ChaCha8Rng,
}

impl Tcl {
    fn step(&mut self, theta_amb: f64, dt_s: f64, noise: &NoiseSpec) {
        let xi = if noise.is_active() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            noise.xi(dt_s, z)
        } else {
            0.0
        };
        self.state.step(&self.params, theta_amb, dt_s, xi);
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    loads: Vec<Tcl>,
    seed: u64,
}

fn stream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    rng
}

/// Draw a population of `n` loads around `base`.
///
/// Parameters come from a single heterogeneity stream consumed in load
/// order; each load additionally owns an independent noise stream keyed by
/// its index. Initial temperature is uniform in the load's band and the
/// initial state is ON with probability equal to the load's duty cycle at
/// `theta_amb_init`.
pub fn sample_population(
    base: &TclParams,
    het: &HeterogeneityCfg,
    n: usize,
    seed: u64,
    theta_amb_init: f64,
) -> Result<Population, EnsembleError> {
    if n == 0 {
        return Err(EnsembleError::EmptyPopulation);
    }
    base.validate()?;
    het.validate()?;
    let mut rng = stream(seed, HETEROGENEITY_SALT, 0);
    let mut loads = Vec::with_capacity(n);
    for i in 0..n {
        let mut params = *base;
        params.r += het.r_jitter * rng.sample::<f64, _>(Open01);
        params.c += het.c_jitter * rng.sample::<f64, _>(Open01);
        params.p += het.p_jitter * rng.sample::<f64, _>(Open01);
        if let BandSampling::TableStats(stats) = het.band_sampling {
            let udl = Normal::new(stats.udl_mean, stats.udl_sd)
                .map_err(|e| EnsembleError::InvalidHeterogeneity(e.to_string()))?;
            let ldl = Normal::new(stats.ldl_mean, stats.ldl_sd)
                .map_err(|e| EnsembleError::InvalidHeterogeneity(e.to_string()))?;
            let (lo, hi) = (0..MAX_BAND_RESAMPLES)
                .map(|_| (ldl.sample(&mut rng), udl.sample(&mut rng)))
                .find(|(lo, hi)| hi - lo >= MIN_SAMPLED_BAND_WIDTH)
                .ok_or(EnsembleError::BandSampling { load: i })?;
            params.setpoint = 0.5 * (lo + hi);
            params.deadband_halfwidth = 0.5 * (hi - lo);
        }
        params.validate()?;

        let band = params.band();
        let theta = band.lower + band.width() * rng.random::<f64>();
        let duty = analytic_duty(&params, theta_amb_init).unwrap_or(0.5);
        let on = rng.random::<f64>() < duty;
        loads.push(Tcl {
            params,
            state: TclState::new(theta, on, &params),
            rng: stream(seed, NOISE_SALT, i as u64),
        });
    }
    Ok(Population { loads, seed })
}

impl Population {
    /// Build from explicit per-load parameters and states.
    pub fn from_loads(
        loads: Vec<(TclParams, TclState)>,
        seed: u64,
    ) -> Result<Population, EnsembleError> {
        if loads.is_empty() {
            return Err(EnsembleError::EmptyPopulation);
        }
        let loads = loads
            .into_iter()
            .enumerate()
            .map(|(i, (params, state))| {
                params.validate()?;
                Ok(Tcl {
                    params,
                    state,
                    rng: stream(seed, NOISE_SALT, i as u64),
                })
            })
            .collect::<Result<Vec<_>, EnsembleError>>()?;
        Ok(Population { loads, seed })
    }

    pub fn len(&self) -> usize {
        self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loads.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn loads(&self) -> &[Tcl] {
        &self.loads
    }

    pub fn get(&self, id: usize) -> Option<&Tcl> {
        self.loads.get(id)
    }

    /// Total draw in MW, summed in index order.
    pub fn aggregate_power(&self) -> f64 {
        self.loads
            .iter()
            .map(|l| power(&l.state, &l.params))
            .sum::<f64>()
            / 1000.0
    }

    /// Sum of rated powers in MW.
    pub fn rated_power(&self) -> f64 {
        self.loads.iter().map(|l| l.params.p).sum::<f64>() / 1000.0
    }

    /// `Σ P_i · duty_i` in MW at a given ambient; infeasible loads count as
    /// always ON.
    pub fn expected_power(&self, theta_amb: f64) -> f64 {
        self.loads
            .iter()
            .map(|l| l.params.p * analytic_duty(&l.params, theta_amb).unwrap_or(1.0))
            .sum::<f64>()
            / 1000.0
    }

    pub fn mean_rated_power_kw(&self) -> f64 {
        1000.0 * self.rated_power() / self.len() as f64
    }

    /// Mean natural cycle length in hours over loads with a finite cycle.
    pub fn mean_period_h(&self, theta_amb: f64) -> Option<f64> {
        let periods: Vec<f64> = self
            .loads
            .iter()
            .filter_map(|l| analytic_period(&l.params, theta_amb).ok())
            .collect();
        if periods.is_empty() {
            None
        } else {
            Some(periods.iter().sum::<f64>() / periods.len() as f64)
        }
    }
}

/// Which loads a control event addresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    All,
    Ids(Vec<usize>),
    /// Half-open index range.
    Range { start: usize, end: usize },
}

impl Targets {
    fn ids(&self, n: usize) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            Targets::All => Box::new(0..n),
            Targets::Ids(ids) => Box::new(ids.iter().copied()),
            Targets::Range { start, end } => Box::new(*start..*end),
        }
    }

    fn max_id(&self, n: usize) -> Option<usize> {
        match self {
            Targets::All => n.checked_sub(1),
            Targets::Ids(ids) => ids.iter().copied().max(),
            Targets::Range { start, end } => (end > start).then(|| end - 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Action {
    SetpointShift { delta_c: f64 },
    Spt1 { direction: Spt1Direction, hold_min: f64 },
    Spt2 { direction: Spt2Direction, hold_min: f64 },
}

impl Action {
    /// Length of the commanded part of the response, minutes.
    pub fn commanded_duration_min(&self) -> f64 {
        match self {
            Action::SetpointShift { .. } => 0.0,
            Action::Spt1 { hold_min, .. } | Action::Spt2 { hold_min, .. } => *hold_min,
        }
    }
}

/// A broadcast signal delivered to a subset of loads at `t_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlEvent {
    pub t_h: f64,
    pub targets: Targets,
    pub action: Action,
}

/// Aggregate power series sampled every `dt_sample_s`, first sample at `t0_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    pub t0_h: f64,
    pub dt_sample_s: f64,
    /// MW.
    pub values: Vec<f64>,
    /// Extra named series aligned with `values`.
    pub columns: Vec<(String, Vec<f64>)>,
}

impl PowerTrace {
    pub fn new(t0_h: f64, dt_sample_s: f64, values: Vec<f64>) -> Self {
        PowerTrace {
            t0_h,
            dt_sample_s,
            values,
            columns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dt_h(&self) -> f64 {
        self.dt_sample_s / 3600.0
    }

    pub fn time_at(&self, i: usize) -> f64 {
        self.t0_h + i as f64 * self.dt_h()
    }

    pub fn end_h(&self) -> f64 {
        self.time_at(self.len().saturating_sub(1))
    }

    /// Index of the first sample at or after `t_h`.
    pub fn index_at(&self, t_h: f64) -> usize {
        let x = (t_h - self.t0_h) / self.dt_h();
        let i = (x - 1e-6).ceil().max(0.0) as usize;
        i.min(self.len())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// New trace with `values` replaced by a named column.
    pub fn select(&self, name: &str) -> Option<PowerTrace> {
        self.column(name)
            .map(|v| PowerTrace::new(self.t0_h, self.dt_sample_s, v.to_vec()))
    }
}

/// Snapshot of what the grid operator may know about the fleet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FleetSnapshot {
    pub n_total: usize,
    pub aggregate_mw: f64,
    pub mean_p_kw: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ApplyReport {
    pub addressed: usize,
    pub switched: usize,
}

/// Drives a population through time.
#[derive(Clone)]
pub struct Simulator {
    pop: Population,
    ambient: Ambient,
    noise: NoiseSpec,
    dt_s: f64,
    step_index: u64,
    t_start_h: f64,
    max_shift_c: f64,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Simulator {
    pub fn new(
        pop: Population,
        ambient: Ambient,
        noise: NoiseSpec,
        dt_s: f64,
        t_start_h: f64,
    ) -> Result<Self, EnsembleError> {
        if !(dt_s.is_finite() && dt_s > 0.0) {
            return Err(EnsembleError::InvalidStep(dt_s));
        }
        Ok(Simulator {
            pop,
            ambient,
            noise,
            dt_s,
            step_index: 0,
            t_start_h,
            max_shift_c: DEFAULT_MAX_SHIFT_C,
            pool: None,
        })
    }

    /// Run per-load updates on a dedicated pool of `threads` workers.
    /// Results do not depend on the thread count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self, EnsembleError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| EnsembleError::ThreadPool(e.to_string()))?;
        self.pool = Some(Arc::new(pool));
        Ok(self)
    }

    pub fn with_max_shift(mut self, bound_c: f64) -> Self {
        self.max_shift_c = bound_c;
        self
    }

    pub fn population(&self) -> &Population {
        &self.pop
    }

    pub fn into_population(self) -> Population {
        self.pop
    }

    pub fn dt_s(&self) -> f64 {
        self.dt_s
    }

    pub fn time_h(&self) -> f64 {
        self.t_start_h + self.step_index as f64 * self.dt_s / 3600.0
    }

    pub fn ambient_now(&self) -> f64 {
        self.ambient.at(self.time_h())
    }

    pub fn aggregate_power(&self) -> f64 {
        self.pop.aggregate_power()
    }

    pub fn snapshot(&self) -> FleetSnapshot {
        FleetSnapshot {
            n_total: self.pop.len(),
            aggregate_mw: self.pop.aggregate_power(),
            mean_p_kw: self.pop.mean_rated_power_kw(),
        }
    }

    /// Advance every load by one step.
    pub fn step(&mut self) {
        let theta_amb = self.ambient.at(self.time_h());
        let dt = self.dt_s;
        let noise = self.noise;
        let loads = &mut self.pop.loads;
        let mut work = move || {
            loads
                .par_iter_mut()
                .with_min_len(512)
                .for_each(|l| l.step(theta_amb, dt, &noise));
        };
        match &self.pool {
            Some(pool) => pool.install(work),
            None => work(),
        }
        self.step_index += 1;
    }

    /// Run `warmup_h` hours of uncontrolled operation ending at the current
    /// clock time, which is left unchanged.
    pub fn equilibrate(&mut self, warmup_h: f64) {
        let steps = (hours_to_secs(warmup_h.max(0.0)) / self.dt_s).round() as u64;
        if steps == 0 {
            return;
        }
        let (start, index) = (self.t_start_h, self.step_index);
        self.t_start_h = self.time_h() - steps as f64 * self.dt_s / 3600.0;
        self.step_index = 0;
        for _ in 0..steps {
            self.step();
        }
        self.t_start_h = start;
        self.step_index = index;
    }

    /// Deliver a control event to its targets now.
    pub fn apply(&mut self, event: &ControlEvent) -> Result<ApplyReport, EnsembleError> {
        let n = self.pop.len();
        if let Some(max) = event.targets.max_id(n) {
            if max >= n {
                return Err(EnsembleError::UnknownLoad {
                    t_h: event.t_h,
                    id: max,
                    n,
                });
            }
        }
        let t_h = self.time_h();
        let mut report = ApplyReport::default();
        for id in event.targets.ids(n) {
            let load = &mut self.pop.loads[id];
            let state = &mut load.state;
            let ctl = &mut state.controller;
            let wanted = match event.action {
                Action::SetpointShift { delta_c } => ctl.apply_setpoint_shift(
                    delta_c,
                    t_h,
                    self.max_shift_c,
                    state.theta,
                    state.commanded,
                ),
                Action::Spt1 {
                    direction,
                    hold_min,
                } => ctl
                    .apply_spt1(direction, hold_min * 60.0)
                    .map(|_| state.commanded),
                Action::Spt2 {
                    direction,
                    hold_min,
                } => ctl.apply_spt2(direction, hold_min * 60.0, state.commanded),
            }
            .map_err(|source| EnsembleError::Protocol { id, source })?;
            report.addressed += 1;
            if wanted != state.commanded {
                report.switched += 1;
            }
            state.command(wanted, &load.params);
        }
        Ok(report)
    }

    /// Simulate `horizon_h` hours from the current clock, delivering
    /// `schedule` and sampling aggregate power every `decimation` steps.
    /// The trace includes both end points. `observe` sees the simulator at
    /// every recorded sample.
    pub fn run_observed(
        &mut self,
        schedule: &[ControlEvent],
        horizon_h: f64,
        decimation: usize,
        mut observe: impl FnMut(&Simulator),
    ) -> Result<PowerTrace, EnsembleError> {
        if !(horizon_h.is_finite() && horizon_h > 0.0) {
            return Err(EnsembleError::InvalidHorizon(horizon_h));
        }
        let decimation = decimation.max(1);
        let t0 = self.time_h();
        let steps = (hours_to_secs(horizon_h) / self.dt_s).round() as usize;
        let end = t0 + steps as f64 * self.dt_s / 3600.0;
        let n = self.pop.len();

        let mut at_step = Vec::with_capacity(schedule.len());
        for (i, ev) in schedule.iter().enumerate() {
            if i > 0 && ev.t_h < schedule[i - 1].t_h {
                return Err(EnsembleError::UnsortedSchedule { index: i });
            }
            if !(ev.t_h >= t0 - 1e-9 && ev.t_h <= end + 1e-9) {
                return Err(EnsembleError::EventOutsideHorizon {
                    t_h: ev.t_h,
                    start_h: t0,
                    end_h: end,
                });
            }
            if let Some(max) = ev.targets.max_id(n) {
                if max >= n {
                    return Err(EnsembleError::UnknownLoad {
                        t_h: ev.t_h,
                        id: max,
                        n,
                    });
                }
            }
            at_step.push((hours_to_secs(ev.t_h - t0) / self.dt_s).round() as usize);
        }

        let mut values = Vec::with_capacity(steps / decimation + 1);
        let mut next_event = 0;
        for k in 0..=steps {
            while next_event < schedule.len() && at_step[next_event] == k {
                self.apply(&schedule[next_event])?;
                next_event += 1;
            }
            if k % decimation == 0 {
                values.push(self.aggregate_power());
                observe(self);
            }
            if k < steps {
                self.step();
            }
        }
        Ok(PowerTrace::new(t0, self.dt_s * decimation as f64, values))
    }

    pub fn run(
        &mut self,
        schedule: &[ControlEvent],
        horizon_h: f64,
        decimation: usize,
    ) -> Result<PowerTrace, EnsembleError> {
        self.run_observed(schedule, horizon_h, decimation, |_| {})
    }
}
