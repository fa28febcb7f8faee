mod common;

use common::*;
use proptest::prelude::*;
use tclsim::dispatch::{
    estimate_alphas, Dispatcher, FluctuationEvent, FluctuationForecast, LinearResponse,
};
use tclsim::ensemble::{Action, FleetSnapshot, Targets};
use tclsim::model::NoiseSpec;
use tclsim::oracle::measure_pulse;
use tclsim::protocol::Spt2Direction;

fn lr() -> LinearResponse {
    estimate_alphas(
        &FleetSnapshot {
            n_total: 2000,
            aggregate_mw: 12.0,
            mean_p_kw: 14.0,
        },
        None,
    )
    .unwrap()
}

fn forecast_strategy() -> impl Strategy<Value = Vec<FluctuationEvent>> {
    prop::collection::vec((0.0..3.0f64, 1.0..10.0f64, -4.0..4.0f64), 0..25).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v.into_iter()
            .map(|(t, d, m)| FluctuationEvent {
                t_start_h: t,
                duration_min: d,
                magnitude_mw: m,
            })
            .collect()
    })
}

fn ids(t: &Targets) -> &[usize] {
    match t {
        Targets::Ids(v) => v,
        other => panic!("dispatcher emitted {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn no_load_is_committed_twice(events in forecast_strategy(), cycle in 0.2..1.5f64, seed: u64) {
        let n = 2000;
        let forecast = FluctuationForecast::new(events).unwrap();
        let mut d = Dispatcher::new(n, cycle, seed);
        let plan = d.plan_offsets(&forecast, &lr()).unwrap();
        prop_assert!(d.ledger.is_consistent());
        prop_assert_eq!(d.ledger.fresh_len() + d.ledger.committed().values().map(|c| c.ids.len()).sum::<usize>(), n);

        // A load may only reappear once its earlier group has been released.
        let mut busy_until = vec![f64::NEG_INFINITY; n];
        for p in &plan.pulses {
            let Action::Spt2 { hold_min, .. } = p.event.action else {
                panic!("dispatcher emitted {:?}", p.event.action);
            };
            let release = p.event.t_h + hold_min / 60.0 + 2.0 * cycle;
            for &id in ids(&p.event.targets) {
                prop_assert!(id < n);
                prop_assert!(busy_until[id] <= p.event.t_h + 1e-9, "load {id} reused early");
                busy_until[id] = release;
            }
        }
    }

    #[test]
    fn direction_follows_fluctuation_sign(events in forecast_strategy(), seed: u64) {
        let forecast = FluctuationForecast::new(events.clone()).unwrap();
        let plan = Dispatcher::new(100_000, 0.8, seed).plan_offsets(&forecast, &lr()).unwrap();
        let nonzero: Vec<_> = events.iter().filter(|e| e.magnitude_mw != 0.0).collect();
        prop_assert_eq!(plan.pulses.len(), nonzero.len());
        prop_assert!(plan.warnings.is_empty());
        for (p, e) in plan.pulses.iter().zip(nonzero) {
            let Action::Spt2 { direction, hold_min } = p.event.action else { unreachable!() };
            prop_assert_eq!(hold_min, e.duration_min);
            let alpha = if e.magnitude_mw > 0.0 {
                prop_assert_eq!(direction, Spt2Direction::Down);
                lr().alpha_minus
            } else {
                prop_assert_eq!(direction, Spt2Direction::Up);
                lr().alpha_plus
            };
            // Smallest group whose linear response covers the fluctuation.
            let k = ids(&p.event.targets).len() as f64;
            prop_assert!(k * alpha >= 1000.0 * e.magnitude_mw.abs() * (1.0 - 1e-9));
            prop_assert!((k - 1.0) * alpha < 1000.0 * e.magnitude_mw.abs());
        }
    }
}

#[test]
fn released_loads_rotate_back_in() {
    let n = 300;
    let ev = |t: f64| FluctuationEvent {
        t_start_h: t,
        duration_min: 5.0,
        magnitude_mw: 0.8,
    };
    // The second event comes before the first group's release; the third
    // comes after.
    let forecast = FluctuationForecast::new(vec![ev(0.0), ev(0.5), ev(3.0)]).unwrap();
    let mut d = Dispatcher::new(n, 1.0, 5);
    let plan = d.plan_offsets(&forecast, &lr()).unwrap();
    assert!(plan.warnings.is_empty());
    let g: Vec<&[usize]> = plan.pulses.iter().map(|p| ids(&p.event.targets)).collect();
    assert!(g[0].iter().all(|id| !g[1].contains(id)));
    assert!(g[0].len() + g[1].len() <= n);
    assert_eq!(g[2].len(), g[0].len());
}

#[test]
fn exhausted_pool_is_reported() {
    let forecast = FluctuationForecast::new(vec![FluctuationEvent {
        t_start_h: 1.0,
        duration_min: 5.0,
        magnitude_mw: 100.0,
    }])
    .unwrap();
    let plan = Dispatcher::new(500, 1.0, 1).plan_offsets(&forecast, &lr()).unwrap();
    assert_eq!(plan.warnings.len(), 1);
    assert_eq!(plan.warnings[0].granted, 500);
    assert!(plan.warnings[0].requested > 500);
}

#[test]
fn delivered_pulse_matches_sizing() {
    let n = 10_000;
    let mut sim = fleet(n, 21, NoiseSpec::default());
    sim.equilibrate(5.0);
    let expected = sim.population().expected_power(AMB);
    let lr = estimate_alphas(
        &FleetSnapshot {
            aggregate_mw: expected,
            ..sim.snapshot()
        },
        None,
    )
    .unwrap();
    let d = expected / sim.population().rated_power();
    let p_mw = sim.population().mean_rated_power_kw() / 1000.0;
    for (mw, dir) in [(2.0, Spt2Direction::Down), (3.0, Spt2Direction::Up)] {
        let alpha = match dir {
            Spt2Direction::Down => lr.alpha_minus,
            Spt2Direction::Up => lr.alpha_plus,
        };
        let k = (1000.0 * mw / alpha).ceil() as usize;
        let got = measure_pulse(&sim, k, dir, 3.0, 8).unwrap();
        // Binomial spread of the ON count in a random group.
        let tol = (3.0 * (k as f64 * d * (1.0 - d)).sqrt() * p_mw).max(0.05 * mw);
        assert!((got - mw).abs() <= tol, "{dir:?}: {got} MW for {mw} MW, tol {tol}");
    }
}
