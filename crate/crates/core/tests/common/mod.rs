#![allow(dead_code)]

use std::path::PathBuf;

use tclsim::ensemble::{sample_population, HeterogeneityCfg, Simulator};
use tclsim::model::{NoiseSpec, TclParams};
use tclsim::scenario::Ambient;

pub const AMB: f64 = 32.0;

pub fn house() -> TclParams {
    TclParams::new(2.0, 1.8, 14.0, 20.0, 0.75).unwrap()
}

/// Time for the ODE to carry θ from `from` to `to` at fixed switch state.
pub fn crossing_time_h(p: &TclParams, amb: f64, on: bool, from: f64, to: f64) -> f64 {
    let inf = if on { amb - p.p * p.r } else { amb };
    p.c * p.r * ((from - inf) / (to - inf)).ln()
}

/// (t_on, t_off) in hours.
pub fn phase_times_h(p: &TclParams, amb: f64) -> (f64, f64) {
    let lo = p.setpoint - p.deadband_halfwidth;
    let hi = p.setpoint + p.deadband_halfwidth;
    (
        crossing_time_h(p, amb, true, hi, lo),
        crossing_time_h(p, amb, false, lo, hi),
    )
}

pub fn duty(p: &TclParams, amb: f64) -> f64 {
    let (on, off) = phase_times_h(p, amb);
    on / (on + off)
}

pub fn fleet(n: usize, seed: u64, noise: NoiseSpec) -> Simulator {
    let pop = sample_population(&house(), &HeterogeneityCfg::standard(), n, seed, AMB).unwrap();
    Simulator::new(pop, Ambient::Constant(AMB), noise, 10.0, 0.0).unwrap()
}

pub fn mean_period_h(sim: &Simulator, amb: f64) -> f64 {
    let loads = sim.population().loads();
    loads
        .iter()
        .map(|l| {
            let (a, b) = phase_times_h(&l.params, amb);
            a + b
        })
        .sum::<f64>()
        / loads.len() as f64
}

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
