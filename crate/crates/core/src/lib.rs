//! Simulation of heterogeneous thermostatically controlled load (TCL)
//! populations under timer-based pulse protocols.
//!
//! * [`model`]: single-load thermal dynamics and closed forms.
//! * [`protocol`]: per-load controller state machines.
//! * [`ensemble`]: populations, the stepped simulator and power traces.
//! * [`dispatch`]: operator-side group sizing and rotation.
//! * [`metrics`]: trace statistics.
//! * [`scenario`], [`output`], [`runner`]: configuration and file I/O.
//! * [`oracle`]: closed-form and brute-force cross-checks.

pub mod dispatch;
pub mod ensemble;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod output;
pub mod protocol;
pub mod runner;
pub mod scenario;
