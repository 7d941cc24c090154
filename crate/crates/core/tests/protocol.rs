//! Randomized conformance checks for the SMU command language and the stage
//! motion model.

mod common;

use std::sync::Arc;
use std::time::Duration;

use autolab_core::clock::{Clock, SharedClock, VirtualClock};
use autolab_core::scpi::{measure_current, parse_scpi, DeviceModel, SmuState};
use autolab_core::stage::{MotionState, MotionStatus, StageConfig, StageLimits, StagePose, StageSim};
use proptest::prelude::*;

use common::protocol::{oracle, pose, render, run, spelling, COMMON};

proptest! {
    #[test]
    fn long_and_short_forms_are_equivalent(spellings in prop::collection::vec(spelling(), 1..24)) {
        let device = DeviceModel::Ohmic { resistance: 1000.0 };
        let (mut a, mut b) = (SmuState::default(), SmuState::default());
        for s in &spellings {
            let variant = render(s, false);
            let canonical = render(s, true);
            prop_assert_eq!(parse_scpi(&variant).unwrap(), parse_scpi(&canonical).unwrap(), "{} vs {}", variant, canonical);
            prop_assert_eq!(run(&mut a, &device, &variant), run(&mut b, &device, &canonical));
            prop_assert_eq!(&a, &b);
        }
    }

    #[test]
    fn canonical_form_is_a_fixed_point(s in spelling(), extra in prop::sample::select(COMMON.to_vec())) {
        let line = format!("{};{extra}", render(&s, false));
        let parsed = parse_scpi(&line).unwrap();
        let canonical: Vec<String> = parsed.iter().map(ToString::to_string).collect();
        let reparsed = parse_scpi(&canonical.join(";")).unwrap();
        prop_assert_eq!(&parsed, &reparsed);
        let again: Vec<String> = reparsed.iter().map(ToString::to_string).collect();
        prop_assert_eq!(canonical, again);
    }

    #[test]
    fn error_queue_is_fifo(picks in prop::collection::vec(0usize..6, 0..40)) {
        let bad: [(&str, i32); 6] = [
            (":FOO?", -113),
            (":SOUR:VOLT", -109),
            (":SOUR:VOLT ON", -104),
            (":SOUR:VOLT 500", -222),
            (":OUTP MAYBE", -224),
            (":SYST:ERR? 1", -108),
        ];
        let device = DeviceModel::Open;
        let mut state = SmuState::default();
        for &k in &picks {
            run(&mut state, &device, bad[k].0);
        }
        prop_assert_eq!(state.pending_errors(), picks.len());
        for &k in &picks {
            let reply = run(&mut state, &device, ":SYST:ERR?");
            let code: i32 = reply[0].split(',').next().unwrap().parse().unwrap();
            prop_assert_eq!(code, bad[k].1);
        }
        prop_assert_eq!(run(&mut state, &device, ":SYST:ERR?"), vec!["0,\"No error\"".to_string()]);
    }

    #[test]
    fn compliance_bounds_current(v in -210.0f64..210.0, r in 1e-3f64..1e9, ilim in 1e-9f64..1.0) {
        let device = DeviceModel::Ohmic { resistance: r };
        let mut state = SmuState::default();
        run(&mut state, &device, &format!(":SOUR:VOLT:ILIM {ilim:e};:SOUR:VOLT {v:e};:OUTP ON"));
        prop_assert_eq!(state.pending_errors(), 0);
        let i = measure_current(&state, &device);
        prop_assert!(i.abs() <= state.current_limit());
        let free = state.source_level / r;
        if free.abs() <= state.current_limit() {
            prop_assert_eq!(i, free);
        } else {
            prop_assert_eq!(i, state.current_limit().copysign(v));
        }
    }

    #[test]
    fn current_is_monotone_in_bias(v1 in -210.0f64..210.0, v2 in -210.0f64..210.0, r in 1.0f64..1e6, ilim in 1e-6f64..0.5) {
        let device = DeviceModel::Ohmic { resistance: r };
        let at = |v: f64| {
            let mut s = SmuState::default();
            run(&mut s, &device, &format!(":SOUR:VOLT:ILIM {ilim:e};:SOUR:VOLT {v:e};:OUTP ON"));
            measure_current(&s, &device)
        };
        let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
        prop_assert!(at(lo) <= at(hi));
    }
}

proptest! {
    #[test]
    fn stage_never_overshoots(start in pose(), target in pose(), v in 10.0f64..20_000.0, steps in prop::collection::vec(0.0f64..2.0, 1..40)) {
        let mut m = MotionState::new(start, v, StageLimits::default());
        m.begin_move(target).unwrap();
        let total = start.distance(&target);
        let mut t = 0.0;
        for dt in steps {
            m.advance_clock(dt);
            t += dt;
            let p = m.current();
            prop_assert!(start.distance(&p) <= total + 1e-9);
            let expect = oracle(start, target, v, t);
            prop_assert!(p.distance(&expect) < 1e-6, "{:?} vs {:?}", p, expect);
            // collinear with the segment
            let cross = (target.x - start.x) * (p.y - start.y) - (target.y - start.y) * (p.x - start.x);
            prop_assert!(cross.abs() <= 1e-6 * total.max(1.0) * total.max(1.0));
            prop_assert_eq!(m.status() == MotionStatus::Idle, p == target);
        }
    }

    #[test]
    fn clock_advancement_is_additive(start in pose(), target in pose(), v in 10.0f64..20_000.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let mut split = MotionState::new(start, v, StageLimits::default());
        split.begin_move(target).unwrap();
        let mut whole = split.clone();
        split.advance_clock(a);
        split.advance_clock(b);
        whole.advance_clock(a + b);
        prop_assert!(split.current().distance(&whole.current()) < 1e-6);
        prop_assert_eq!(split.status(), whole.status());
    }

    #[test]
    fn simulator_follows_virtual_clock(target in pose(), ticks in prop::collection::vec(0u64..3_000, 1..20)) {
        let clock = Arc::new(VirtualClock::new());
        let shared: SharedClock = clock.clone();
        let config = StageConfig::default();
        let mut sim = StageSim::new(config, shared);
        let reply = sim.handle_line(&format!("MOVE {} {}", target.x, target.y));
        prop_assert_eq!(reply, "OK");
        let mut elapsed = 0u64;
        for ms in ticks {
            clock.advance(Duration::from_millis(ms));
            elapsed += ms;
            let expect = oracle(config.home, target, config.velocity, elapsed as f64 / 1000.0);
            prop_assert!(sim.pose().distance(&expect) < 1e-6);
        }
        prop_assert_eq!(clock.now(), Duration::from_millis(elapsed));
    }

    #[test]
    fn out_of_range_moves_are_refused(start in pose(), x in -1e6f64..1e6, y in -1e6f64..1e6) {
        let limits = StageLimits::default();
        let mut m = MotionState::new(start, 5000.0, limits);
        let before = m.clone();
        let reply = m.handle_command(&format!("MOVE {x} {y}"));
        if limits.contains(&StagePose { x, y }) {
            prop_assert_eq!(reply, "OK");
        } else {
            prop_assert_eq!(reply, "ERR 2 RANGE");
            prop_assert_eq!(m, before);
        }
    }
}
