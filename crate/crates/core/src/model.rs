//! Single-load thermal dynamics and hysteresis switching.
//!
//! The indoor temperature of an air-conditioned space follows a first-order
//! linear ODE whose drift depends on the compressor state:
//!
//! ```text
//! dθ/dt = -(θ - θ_amb + P·R + ξ) / (C·R)   compressor ON
//! dθ/dt = -(θ - θ_amb + ξ) / (C·R)         compressor OFF
//! ```
//!
//! `C·R` is in hours, so rates are °C/h. Time steps and timers are given in
//! seconds at the API boundary and converted with [`secs_to_hours`].

use thiserror::Error;

use crate::protocol::Controller;

pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// Reference step for the noise discretization. At `dt == NOISE_DT_REF_S`
/// each step draws `ξ = σ·z`.
pub const NOISE_DT_REF_S: f64 = 10.0;

/// Timer comparisons tolerate this much float drift (seconds).
pub(crate) const TIMER_EPS_S: f64 = 1e-9;

#[inline]
pub fn secs_to_hours(s: f64) -> f64 {
    s / SECONDS_PER_HOUR
}

#[inline]
pub fn hours_to_secs(h: f64) -> f64 {
    h * SECONDS_PER_HOUR
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter {name}={value}: {reason}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("{phase:?} phase can never complete: asymptote {asymptote:.3} °C does not cross the band edge {edge:.3} °C")]
    InfeasiblePhase {
        phase: Phase,
        asymptote: f64,
        edge: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    On,
    Off,
}

/// Hysteresis band `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub lower: f64,
    pub upper: f64,
}

impl Band {
    pub fn around(setpoint: f64, halfwidth: f64) -> Self {
        Band {
            lower: setpoint - halfwidth,
            upper: setpoint + halfwidth,
        }
    }

    pub fn shifted(self, delta: f64) -> Self {
        Band {
            lower: self.lower + delta,
            upper: self.upper + delta,
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    /// Plain thermostat rule: switch ON at or above the upper edge, OFF at or
    /// below the lower edge, otherwise keep the current state.
    #[inline]
    pub fn hysteresis(&self, theta: f64, on: bool) -> bool {
        if theta >= self.upper {
            true
        } else if theta <= self.lower {
            false
        } else {
            on
        }
    }
}

/// Physical and comfort parameters of one load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TclParams {
    /// Thermal resistance, °C/kW.
    pub r: f64,
    /// Thermal capacitance, kWh/°C.
    pub c: f64,
    /// Electrical power while ON, kW.
    pub p: f64,
    pub setpoint: f64,
    pub deadband_halfwidth: f64,
    /// Lag between a switch command and the compressor state change, seconds.
    pub actuation_delay_s: f64,
}

impl TclParams {
    pub fn new(
        r: f64,
        c: f64,
        p: f64,
        setpoint: f64,
        deadband_halfwidth: f64,
    ) -> Result<Self, ModelError> {
        let params = TclParams {
            r,
            c,
            p,
            setpoint,
            deadband_halfwidth,
            actuation_delay_s: 0.0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_actuation_delay(mut self, delay_s: f64) -> Result<Self, ModelError> {
        self.actuation_delay_s = delay_s;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |name, value: f64, ok: bool, reason| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(ModelError::InvalidParam {
                    name,
                    value,
                    reason,
                })
            }
        };
        check("r", self.r, self.r > 0.0, "must be > 0")?;
        check("c", self.c, self.c > 0.0, "must be > 0")?;
        check("p", self.p, self.p >= 0.0, "must be >= 0")?;
        check("setpoint", self.setpoint, true, "must be finite")?;
        check(
            "deadband_halfwidth",
            self.deadband_halfwidth,
            self.deadband_halfwidth > 0.0,
            "must be > 0",
        )?;
        check(
            "actuation_delay_s",
            self.actuation_delay_s,
            self.actuation_delay_s >= 0.0,
            "must be >= 0",
        )
    }

    pub fn band(&self) -> Band {
        Band::around(self.setpoint, self.deadband_halfwidth)
    }

    /// `C·R` in hours.
    pub fn time_constant_h(&self) -> f64 {
        self.c * self.r
    }

    /// Temperature the load relaxes to if left in `phase` forever.
    pub fn asymptote(&self, theta_amb: f64, phase: Phase) -> f64 {
        match phase {
            Phase::On => theta_amb - self.p * self.r,
            Phase::Off => theta_amb,
        }
    }
}

/// Additive temperature fluctuation `ξ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviation of `ξ` at the reference step, °C.
    pub sigma: f64,
    pub enabled: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma: 0.05,
            enabled: true,
        }
    }
}

impl NoiseSpec {
    pub fn off() -> Self {
        NoiseSpec {
            sigma: 0.0,
            enabled: false,
        }
    }

    pub fn is_active(&self) -> bool {
        self.enabled && self.sigma > 0.0
    }

    /// Per-step `ξ` for a unit-normal draw `z`. The `√(dt_ref/dt)` factor
    /// keeps the temperature increment variance proportional to `dt`, so
    /// refining the step does not change the diffusion strength.
    #[inline]
    pub fn xi(&self, dt_s: f64, z: f64) -> f64 {
        if self.is_active() {
            self.sigma * (NOISE_DT_REF_S / dt_s).sqrt() * z
        } else {
            0.0
        }
    }
}

/// Right-hand side of the thermal ODE, °C/h.
#[inline]
pub fn derivative(theta: f64, on: bool, params: &TclParams, theta_amb: f64, xi: f64) -> f64 {
    let load = if on { params.p * params.r } else { 0.0 };
    -(theta - theta_amb + load + xi) / params.time_constant_h()
}

/// Zero-noise closed-form temperature after `t_h` hours in a fixed state.
pub fn analytic_solution(
    theta0: f64,
    on: bool,
    params: &TclParams,
    theta_amb: f64,
    t_h: f64,
) -> f64 {
    let phase = if on { Phase::On } else { Phase::Off };
    let inf = params.asymptote(theta_amb, phase);
    inf + (theta0 - inf) * (-t_h / params.time_constant_h()).exp()
}

/// Exact zero-noise duration of a full ON (upper→lower) or OFF (lower→upper)
/// traverse of the band, in hours.
pub fn analytic_phase_time(
    params: &TclParams,
    theta_amb: f64,
    phase: Phase,
) -> Result<f64, ModelError> {
    let band = params.band();
    let inf = params.asymptote(theta_amb, phase);
    let (start, end) = match phase {
        Phase::On => (band.upper, band.lower),
        Phase::Off => (band.lower, band.upper),
    };
    let feasible = match phase {
        Phase::On => inf < end,
        Phase::Off => inf > end,
    };
    if !feasible {
        return Err(ModelError::InfeasiblePhase {
            phase,
            asymptote: inf,
            edge: end,
        });
    }
    Ok(params.time_constant_h() * ((start - inf) / (end - inf)).ln())
}

/// Full cycle length in hours.
pub fn analytic_period(params: &TclParams, theta_amb: f64) -> Result<f64, ModelError> {
    Ok(analytic_phase_time(params, theta_amb, Phase::On)?
        + analytic_phase_time(params, theta_amb, Phase::Off)?)
}

/// Fraction of a cycle spent ON.
pub fn analytic_duty(params: &TclParams, theta_amb: f64) -> Result<f64, ModelError> {
    let on = analytic_phase_time(params, theta_amb, Phase::On)?;
    let off = analytic_phase_time(params, theta_amb, Phase::Off)?;
    Ok(on / (on + off))
}

/// A switch command waiting out the actuation delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingSwitch {
    pub target_on: bool,
    pub remaining_s: f64,
}

/// Mutable trajectory state of one load.
#[derive(Debug, Clone, PartialEq)]
pub struct TclState {
    pub theta: f64,
    /// Physical compressor state; drives dynamics and power.
    pub on: bool,
    /// Last state requested by the controller. Equals `on` unless a command
    /// is in flight.
    pub commanded: bool,
    pub pending: Option<PendingSwitch>,
    pub controller: Controller,
}

impl TclState {
    pub fn new(theta: f64, on: bool, params: &TclParams) -> Self {
        TclState {
            theta,
            on,
            commanded: on,
            pending: None,
            controller: Controller::baseline(params.band()),
        }
    }

    pub fn timer_remaining(&self) -> Option<f64> {
        self.controller.timer_remaining
    }

    /// Protocol signal received, waiting for a band edge.
    pub fn armed(&self) -> bool {
        self.controller.is_armed()
    }

    /// One explicit-Euler step of `dt_s` seconds: integrate temperature with
    /// the current compressor state, then let the controller decide.
    pub fn step(&mut self, params: &TclParams, theta_amb: f64, dt_s: f64, xi: f64) {
        let rate = derivative(self.theta, self.on, params, theta_amb, xi);
        self.theta += secs_to_hours(dt_s) * rate;

        if let Some(pending) = self.pending.as_mut() {
            pending.remaining_s -= dt_s;
            if pending.remaining_s <= TIMER_EPS_S {
                self.on = pending.target_on;
                self.pending = None;
            }
        }

        let wanted = self.controller.decide(self.theta, self.commanded, dt_s);
        self.command(wanted, params);
    }

    /// Route a controller command through the actuation delay.
    pub fn command(&mut self, wanted: bool, params: &TclParams) {
        if wanted == self.commanded {
            return;
        }
        self.commanded = wanted;
        if params.actuation_delay_s <= TIMER_EPS_S || wanted == self.on {
            self.on = wanted;
            self.pending = None;
        } else {
            self.pending = Some(PendingSwitch {
                target_on: wanted,
                remaining_s: params.actuation_delay_s,
            });
        }
    }
}

/// Instantaneous electrical draw, kW.
#[inline]
pub fn power(state: &TclState, params: &TclParams) -> f64 {
    if state.on {
        params.p
    } else {
        0.0
    }
}
