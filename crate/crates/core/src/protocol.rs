//! Per-load controller state machines.
//!
//! Every load runs the plain hysteresis rule unless a broadcast signal has
//! put it into one of the protocol modes:
//!
//! * setpoint shift: the band moves by `delta` and stays there;
//! * SP-T1: the next natural edge is delayed by a hold of `M` minutes;
//! * SP-T2: loads in the addressed state are forced over for `Δt`, the rest
//!   hold for `Δt` at their next edge.
//!
//! Protocol phases only move forward. Once a protocol reaches its terminal
//! phase the load is back on plain hysteresis over the band it had when the
//! signal arrived.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Band, TIMER_EPS_S};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("load is still executing a protocol ({0})")]
    Busy(&'static str),
    #[error("setpoint shift {delta} °C exceeds the comfort bound ±{bound} °C")]
    ShiftOutOfBounds { delta: f64, bound: f64 },
    #[error("hold duration must be finite and >= 0, got {0} s")]
    InvalidHold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spt1Direction {
    /// Stay OFF for `M` more minutes after reaching the upper edge.
    ExtendOff,
    /// Stay ON for `M` more minutes after reaching the lower edge.
    ExtendOn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Spt1Phase {
    Armed,
    Holding,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spt2Direction {
    /// Downward power pulse: ON loads are forced OFF.
    Down,
    /// Upward power pulse: OFF loads are forced ON.
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Spt2Phase {
    ForcedHold,
    Released,
    AwaitingEdge,
    EdgeHold,
    Done,
}

impl Spt2Direction {
    /// Compressor state of the cohort that gets forced at signal time.
    fn forced_cohort(self) -> bool {
        match self {
            Spt2Direction::Down => true,
            Spt2Direction::Up => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerMode {
    Baseline,
    SetpointShift {
        delta: f64,
        applied_at_h: f64,
    },
    Spt1 {
        direction: Spt1Direction,
        hold_s: f64,
        phase: Spt1Phase,
        stored_band: Band,
    },
    Spt2 {
        direction: Spt2Direction,
        hold_s: f64,
        phase: Spt2Phase,
        stored_band: Band,
    },
}

impl ControllerMode {
    pub fn is_active_protocol(&self) -> bool {
        match self {
            ControllerMode::Spt1 { phase, .. } => *phase != Spt1Phase::Done,
            ControllerMode::Spt2 { phase, .. } => {
                !matches!(phase, Spt2Phase::Released | Spt2Phase::Done)
            }
            _ => false,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ControllerMode::Baseline => "baseline",
            ControllerMode::SetpointShift { .. } => "setpoint-shift",
            ControllerMode::Spt1 { .. } => "SP-T1",
            ControllerMode::Spt2 { .. } => "SP-T2",
        }
    }
}

/// Controller state carried by each load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controller {
    pub mode: ControllerMode,
    /// Active hysteresis band.
    pub band: Band,
    /// Seconds left on the protocol timer while holding.
    pub timer_remaining: Option<f64>,
}

impl Controller {
    pub fn baseline(band: Band) -> Self {
        Controller {
            mode: ControllerMode::Baseline,
            band,
            timer_remaining: None,
        }
    }

    pub fn is_armed(&self) -> bool {
        matches!(
            self.mode,
            ControllerMode::Spt1 {
                phase: Spt1Phase::Armed,
                ..
            } | ControllerMode::Spt2 {
                phase: Spt2Phase::AwaitingEdge,
                ..
            }
        )
    }

    fn ensure_idle(&self) -> Result<(), ProtocolError> {
        if self.mode.is_active_protocol() {
            Err(ProtocolError::Busy(self.mode.name()))
        } else {
            Ok(())
        }
    }

    /// Move the band by `delta` keeping its width. Returns the commanded
    /// state: an ON load already below the new lower edge turns OFF and an
    /// OFF load above the new upper edge turns ON at once.
    pub fn apply_setpoint_shift(
        &mut self,
        delta: f64,
        t_h: f64,
        bound: f64,
        theta: f64,
        on: bool,
    ) -> Result<bool, ProtocolError> {
        if !delta.is_finite() || delta.abs() > bound {
            return Err(ProtocolError::ShiftOutOfBounds { delta, bound });
        }
        self.ensure_idle()?;
        let total = match self.mode {
            ControllerMode::SetpointShift { delta: prev, .. } => prev + delta,
            _ => delta,
        };
        self.band = self.band.shifted(delta);
        self.mode = ControllerMode::SetpointShift {
            delta: total,
            applied_at_h: t_h,
        };
        self.timer_remaining = None;
        Ok(self.band.hysteresis(theta, on))
    }

    /// Arm SP-T1. Nothing switches at signal time.
    pub fn apply_spt1(
        &mut self,
        direction: Spt1Direction,
        hold_s: f64,
    ) -> Result<(), ProtocolError> {
        check_hold(hold_s)?;
        self.ensure_idle()?;
        self.mode = ControllerMode::Spt1 {
            direction,
            hold_s,
            phase: Spt1Phase::Armed,
            stored_band: self.band,
        };
        self.timer_remaining = None;
        Ok(())
    }

    /// Start SP-T2 and return the commanded state. Loads in the forced cohort
    /// flip immediately for `hold_s`; the others wait for their next edge.
    /// A load sitting exactly on an edge is classified by `on`.
    pub fn apply_spt2(
        &mut self,
        direction: Spt2Direction,
        hold_s: f64,
        on: bool,
    ) -> Result<bool, ProtocolError> {
        check_hold(hold_s)?;
        self.ensure_idle()?;
        let stored_band = self.band;
        let forced = on == direction.forced_cohort();
        let (phase, commanded) = if !forced {
            (Spt2Phase::AwaitingEdge, on)
        } else if hold_s > TIMER_EPS_S {
            self.timer_remaining = Some(hold_s);
            (Spt2Phase::ForcedHold, !on)
        } else {
            (Spt2Phase::Released, on)
        };
        self.mode = ControllerMode::Spt2 {
            direction,
            hold_s,
            phase,
            stored_band,
        };
        Ok(commanded)
    }

    /// Apply this step's rule and return the commanded compressor state.
    /// `on` is the current commanded state and `dt_s` the step just taken.
    pub fn decide(&mut self, theta: f64, on: bool, dt_s: f64) -> bool {
        match self.mode {
            ControllerMode::Baseline | ControllerMode::SetpointShift { .. } => {
                self.band.hysteresis(theta, on)
            }
            ControllerMode::Spt1 {
                direction,
                hold_s,
                phase,
                stored_band,
            } => match phase {
                Spt1Phase::Armed => {
                    let at_edge = match direction {
                        Spt1Direction::ExtendOff => !on && theta >= self.band.upper,
                        Spt1Direction::ExtendOn => on && theta <= self.band.lower,
                    };
                    if at_edge {
                        self.set_spt1_phase(Spt1Phase::Holding);
                        self.timer_remaining = Some(hold_s);
                        if hold_s <= TIMER_EPS_S {
                            return self.finish_spt1(stored_band, theta, on);
                        }
                        on
                    } else {
                        self.band.hysteresis(theta, on)
                    }
                }
                Spt1Phase::Holding => {
                    if self.tick(dt_s) {
                        self.finish_spt1(stored_band, theta, on)
                    } else {
                        on
                    }
                }
                Spt1Phase::Done => self.band.hysteresis(theta, on),
            },
            ControllerMode::Spt2 {
                direction,
                hold_s,
                phase,
                stored_band,
            } => match phase {
                Spt2Phase::ForcedHold => {
                    if self.tick(dt_s) {
                        self.set_spt2_phase(Spt2Phase::Released);
                        self.band = stored_band;
                        direction.forced_cohort()
                    } else {
                        !direction.forced_cohort()
                    }
                }
                Spt2Phase::AwaitingEdge => {
                    let at_edge = match direction {
                        Spt2Direction::Down => !on && theta >= stored_band.upper,
                        Spt2Direction::Up => on && theta <= stored_band.lower,
                    };
                    if at_edge {
                        self.set_spt2_phase(Spt2Phase::EdgeHold);
                        self.timer_remaining = Some(hold_s);
                        if hold_s <= TIMER_EPS_S {
                            return self.finish_spt2(stored_band, theta, on);
                        }
                        on
                    } else {
                        stored_band.hysteresis(theta, on)
                    }
                }
                Spt2Phase::EdgeHold => {
                    if self.tick(dt_s) {
                        self.finish_spt2(stored_band, theta, on)
                    } else {
                        on
                    }
                }
                Spt2Phase::Released | Spt2Phase::Done => self.band.hysteresis(theta, on),
            },
        }
    }

    /// Decrement the hold timer; true when it has run out.
    fn tick(&mut self, dt_s: f64) -> bool {
        let left = self.timer_remaining.unwrap_or(0.0) - dt_s;
        if left <= TIMER_EPS_S {
            self.timer_remaining = None;
            true
        } else {
            self.timer_remaining = Some(left);
            false
        }
    }

    fn finish_spt1(&mut self, stored_band: Band, _theta: f64, on: bool) -> bool {
        self.set_spt1_phase(Spt1Phase::Done);
        self.band = stored_band;
        self.timer_remaining = None;
        // The hold replaced exactly one edge switch; perform it now.
        !on
    }

    fn finish_spt2(&mut self, stored_band: Band, _theta: f64, on: bool) -> bool {
        self.set_spt2_phase(Spt2Phase::Done);
        self.band = stored_band;
        self.timer_remaining = None;
        !on
    }

    fn set_spt1_phase(&mut self, next: Spt1Phase) {
        if let ControllerMode::Spt1 { phase, .. } = &mut self.mode {
            debug_assert!(next > *phase);
            *phase = next;
        }
    }

    fn set_spt2_phase(&mut self, next: Spt2Phase) {
        if let ControllerMode::Spt2 { phase, .. } = &mut self.mode {
            debug_assert!(next > *phase);
            *phase = next;
        }
    }
}

fn check_hold(hold_s: f64) -> Result<(), ProtocolError> {
    if hold_s.is_finite() && hold_s >= 0.0 {
        Ok(())
    } else {
        Err(ProtocolError::InvalidHold(hold_s))
    }
}
