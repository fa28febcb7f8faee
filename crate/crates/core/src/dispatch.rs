//! Operator-side offsetting of forecast demand fluctuations.
//!
//! The operator only knows the fleet size, its aggregate draw and the mean
//! rated power ([`FleetSnapshot`]). From these it derives the expected
//! response per addressed load, sizes a group for every forecast
//! fluctuation and commands it with an SP-T2 pulse of matching sign and
//! duration. Groups are drawn from a pool of loads that have not been
//! commanded recently, so no load is switched twice before it has settled.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ensemble::{Action, ControlEvent, FleetSnapshot, Targets};
use crate::protocol::Spt2Direction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("fleet must contain at least one load")]
    EmptyFleet,
    #[error("mean rated power must be > 0 kW, got {0}")]
    NoPower(f64),
    #[error("duty estimate {0} leaves no controllable headroom (need 0 < duty < 1)")]
    DegenerateDuty(f64),
    #[error("fluctuation magnitude must be > 0 MW, got {0}")]
    NonPositiveMagnitude(f64),
}

/// Expected power change per addressed load, kW.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearResponse {
    /// Drop when a random group is commanded OFF.
    pub alpha_minus: f64,
    /// Rise when a random group is commanded ON.
    pub alpha_plus: f64,
}

/// Response coefficients from aggregate knowledge only. A random load is ON
/// with probability `duty`, so commanding it OFF removes `duty·P̄` on
/// average and commanding it ON adds `(1-duty)·P̄`. Without an explicit
/// estimate, `duty = aggregate / (N·P̄)`.
pub fn estimate_alphas(
    snapshot: &FleetSnapshot,
    duty_estimate: Option<f64>,
) -> Result<LinearResponse, DispatchError> {
    if snapshot.n_total == 0 {
        return Err(DispatchError::EmptyFleet);
    }
    if !(snapshot.mean_p_kw > 0.0) {
        return Err(DispatchError::NoPower(snapshot.mean_p_kw));
    }
    let duty = duty_estimate.unwrap_or(
        1000.0 * snapshot.aggregate_mw / (snapshot.n_total as f64 * snapshot.mean_p_kw),
    );
    if !(duty > 0.0 && duty < 1.0) {
        return Err(DispatchError::DegenerateDuty(duty));
    }
    Ok(LinearResponse {
        alpha_minus: duty * snapshot.mean_p_kw,
        alpha_plus: (1.0 - duty) * snapshot.mean_p_kw,
    })
}

/// Outcome of sizing a group against the available pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSize {
    pub requested: usize,
    pub granted: usize,
}

impl GroupSize {
    pub fn is_partial(&self) -> bool {
        self.granted < self.requested
    }
}

fn size_group(magnitude_mw: f64, alpha_kw: f64, pool: usize) -> Result<GroupSize, DispatchError> {
    if !(magnitude_mw > 0.0) {
        return Err(DispatchError::NonPositiveMagnitude(magnitude_mw));
    }
    // Round up so the pulse is never undersized. The small relative slack
    // absorbs float noise in exact quotients like 6 MW / 6 kW.
    let exact = 1000.0 * magnitude_mw / alpha_kw;
    let requested = ((exact * (1.0 - 1e-12)).ceil() as usize).max(1);
    Ok(GroupSize {
        requested,
        granted: requested.min(pool),
    })
}

/// Loads to command OFF against an upward fluctuation of `p_up_mw`.
pub fn group_size_up(
    p_up_mw: f64,
    lr: &LinearResponse,
    fresh: usize,
) -> Result<GroupSize, DispatchError> {
    size_group(p_up_mw, lr.alpha_minus, fresh)
}

/// Loads to command ON against a downward fluctuation of `p_dn_mw`.
pub fn group_size_down(
    p_dn_mw: f64,
    lr: &LinearResponse,
    fresh: usize,
) -> Result<GroupSize, DispatchError> {
    size_group(p_dn_mw, lr.alpha_plus, fresh)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctuationEvent {
    pub t_start_h: f64,
    pub duration_min: f64,
    /// Positive for an upward demand fluctuation.
    pub magnitude_mw: f64,
}

impl FluctuationEvent {
    pub fn end_h(&self) -> f64 {
        self.t_start_h + self.duration_min / 60.0
    }

    pub fn is_active(&self, t_h: f64) -> bool {
        t_h >= self.t_start_h - 1e-9 && t_h < self.end_h() - 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FluctuationForecast {
    events: Vec<FluctuationEvent>,
}

impl FluctuationForecast {
    pub fn new(events: Vec<FluctuationEvent>) -> Result<Self, String> {
        for (i, e) in events.iter().enumerate() {
            if !(e.duration_min > 0.0) {
                return Err(format!("event {i}: duration must be > 0"));
            }
            if !e.t_start_h.is_finite() || !e.magnitude_mw.is_finite() {
                return Err(format!("event {i}: non-finite value"));
            }
            if i > 0 && e.t_start_h < events[i - 1].t_start_h {
                return Err(format!("event {i}: not sorted by start time"));
            }
        }
        Ok(FluctuationForecast { events })
    }

    pub fn events(&self) -> &[FluctuationEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// External demand at `t_h`, MW.
    pub fn level_at(&self, t_h: f64) -> f64 {
        self.events
            .iter()
            .filter(|e| e.is_active(t_h))
            .map(|e| e.magnitude_mw)
            .sum()
    }

    /// Span from the first start to the last end, hours.
    pub fn window(&self) -> Option<(f64, f64)> {
        let start = self.events.first()?.t_start_h;
        let end = self
            .events
            .iter()
            .map(FluctuationEvent::end_h)
            .fold(f64::NEG_INFINITY, f64::max);
        Some((start, end))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Commitment {
    pub ids: Vec<usize>,
    pub release_h: f64,
}

/// Which loads may be commanded next.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLedger {
    fresh: BTreeSet<usize>,
    committed: BTreeMap<usize, Commitment>,
    next_group: usize,
}

impl GroupLedger {
    pub fn new(n_total: usize) -> Self {
        GroupLedger {
            fresh: (0..n_total).collect(),
            committed: BTreeMap::new(),
            next_group: 0,
        }
    }

    pub fn fresh_len(&self) -> usize {
        self.fresh.len()
    }

    pub fn fresh(&self) -> &BTreeSet<usize> {
        &self.fresh
    }

    pub fn committed(&self) -> &BTreeMap<usize, Commitment> {
        &self.committed
    }

    /// Return every group whose release time has passed to the pool.
    pub fn release_due(&mut self, t_h: f64) {
        let due: Vec<usize> = self
            .committed
            .iter()
            .filter(|(_, c)| c.release_h <= t_h + 1e-9)
            .map(|(&g, _)| g)
            .collect();
        for g in due {
            if let Some(c) = self.committed.remove(&g) {
                self.fresh.extend(c.ids);
            }
        }
    }

    /// Draw `count` loads uniformly without replacement and commit them.
    fn commit(&mut self, count: usize, release_h: f64, rng: &mut ChaCha8Rng) -> (usize, Vec<usize>) {
        let mut ids = self.fresh.iter().copied().choose_multiple(rng, count);
        ids.sort_unstable();
        for id in &ids {
            self.fresh.remove(id);
        }
        let group = self.next_group;
        self.next_group += 1;
        self.committed.insert(
            group,
            Commitment {
                ids: ids.clone(),
                release_h,
            },
        );
        (group, ids)
    }

    /// True when no load is both fresh and committed, and no load sits in
    /// two groups.
    pub fn is_consistent(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.committed
            .values()
            .flat_map(|c| c.ids.iter())
            .all(|id| !self.fresh.contains(id) && seen.insert(*id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolWarning {
    pub t_start_h: f64,
    pub requested: usize,
    pub granted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPulse {
    pub group: usize,
    pub event: ControlEvent,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OffsetPlan {
    pub pulses: Vec<PlannedPulse>,
    pub warnings: Vec<PoolWarning>,
}

impl OffsetPlan {
    pub fn schedule(&self) -> Vec<ControlEvent> {
        self.pulses.iter().map(|p| p.event.clone()).collect()
    }
}

/// Plans group pulses and tracks which loads are available.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    pub ledger: GroupLedger,
    /// Operator's estimate of the natural cycle, hours. A group returns to
    /// the pool after its pulse, one cycle for the edge cohort to finish
    /// and one more cycle to settle.
    pub cycle_estimate_h: f64,
    rng: ChaCha8Rng,
}

impl Dispatcher {
    pub fn new(n_total: usize, cycle_estimate_h: f64, seed: u64) -> Self {
        Dispatcher {
            ledger: GroupLedger::new(n_total),
            cycle_estimate_h,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Emit one SP-T2 command per forecast event, sized by the linear
    /// response and drawn from the fresh pool.
    pub fn plan_offsets(
        &mut self,
        forecast: &FluctuationForecast,
        lr: &LinearResponse,
    ) -> Result<OffsetPlan, DispatchError> {
        let mut plan = OffsetPlan::default();
        for ev in forecast.events() {
            if ev.magnitude_mw == 0.0 {
                continue;
            }
            self.ledger.release_due(ev.t_start_h);
            let fresh = self.ledger.fresh_len();
            let (size, direction) = if ev.magnitude_mw > 0.0 {
                (group_size_up(ev.magnitude_mw, lr, fresh)?, Spt2Direction::Down)
            } else {
                (group_size_down(-ev.magnitude_mw, lr, fresh)?, Spt2Direction::Up)
            };
            if size.is_partial() {
                plan.warnings.push(PoolWarning {
                    t_start_h: ev.t_start_h,
                    requested: size.requested,
                    granted: size.granted,
                });
            }
            if size.granted == 0 {
                continue;
            }
            let release_h = ev.end_h() + 2.0 * self.cycle_estimate_h;
            let (group, ids) = self.ledger.commit(size.granted, release_h, &mut self.rng);
            plan.pulses.push(PlannedPulse {
                group,
                event: ControlEvent {
                    t_h: ev.t_start_h,
                    targets: Targets::Ids(ids),
                    action: Action::Spt2 {
                        direction,
                        hold_min: ev.duration_min,
                    },
                },
            });
        }
        Ok(plan)
    }
}
