mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use autolab_core::clock::{SharedClock, VirtualClock};
use autolab_core::events::{EventHub, EventKind, EventSink, Recv};
use autolab_core::scan::{export_csv, export_pgm, run_scan, ScanOptions, ScanPlan, CSV_HEADER};
use autolab_core::scene::Scene;
use autolab_core::transport::{NoiseConfig, Rack, RackConfig, SceneSource};
use common::{connect, formatted, scan_on, scan_oracle, scene_rack};
use proptest::prelude::*;
use serde_json::Value;

fn plan(nx: usize, ny: usize, pitch: f64) -> ScanPlan {
    ScanPlan { nx, ny, pitch_x: pitch, pitch_y: pitch, ..ScanPlan::default() }
}

fn check_against_oracle(scene: Scene, plan: &ScanPlan) {
    let clock: SharedClock = VirtualClock::shared();
    let rack = scene_rack(scene.clone(), clock);
    let frame = scan_on(&rack, plan);
    assert!(frame.complete, "{:?}", frame.abort_reason);
    assert_eq!(frame.acquired, plan.nx * plan.ny);
    assert_eq!(formatted(&frame), scan_oracle(&scene, plan, 0.1));
}

#[test]
fn checkerboard_matches_oracle() {
    check_against_oracle(Scene::checkerboard(6, 5, 100.0), &plan(6, 5, 100.0));
}

#[test]
fn uniform_and_dark_scenes_match_oracle() {
    check_against_oracle(Scene::uniform(4, 3, 0.5, 100.0), &plan(4, 3, 100.0));
    check_against_oracle(Scene::uniform(3, 3, 0.0, 100.0), &plan(3, 3, 100.0));
}

#[test]
fn scan_beyond_scene_reads_dark() {
    // 3x3 scene, 5x4 scan: the outer pixels see no reflectance
    check_against_oracle(Scene::checkerboard(3, 3, 100.0), &plan(5, 4, 100.0));
}

#[test]
fn bias_and_identity_recorded() {
    let clock: SharedClock = VirtualClock::shared();
    let rack = scene_rack(Scene::uniform(2, 2, 1.0, 100.0), clock);
    let p = ScanPlan { bias: -0.5, ..plan(2, 2, 100.0) };
    let frame = scan_on(&rack, &p);
    assert!(frame.data.iter().all(|v| (*v - (-0.5 / 1000.0)).abs() < 1e-12), "{:?}", frame.data);
    assert!(frame.meta.rack_identity.starts_with("VirtualLab,Model 2450"));
    // the final :OUTP OFF has no reply; give the server a moment to apply it
    let smu = rack.smu().unwrap();
    let deadline = std::time::Instant::now() + Duration::from_secs(2);
    while smu.lock().unwrap().state().output_on && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(!smu.lock().unwrap().state().output_on);
}

#[test]
fn two_by_two_event_stream() {
    let clock: SharedClock = VirtualClock::shared();
    let rack = scene_rack(Scene::checkerboard(2, 2, 100.0), clock.clone());
    let hub = EventHub::new();
    let sub = hub.subscribe("scan-1", 0);
    let sink = hub.sink("scan-1");
    let (mut smu, mut stage) = connect(&rack);
    let frame = run_scan(&plan(2, 2, 100.0), &mut smu, &mut stage, &clock, &sink, ScanOptions::default()).unwrap();
    assert!(frame.complete);
    let mut events = Vec::new();
    loop {
        match sub.recv_timeout(Duration::from_secs(1)) {
            Recv::Event(e) => events.push(e),
            Recv::Closed => break,
            Recv::Timeout => panic!("stream did not close"),
        }
    }
    let kinds: Vec<EventKind> = events.iter().map(|e| e.kind).collect();
    assert_eq!(kinds, [EventKind::PixelMeasured, EventKind::PixelMeasured, EventKind::PixelMeasured, EventKind::PixelMeasured, EventKind::ScanFinished]);
    let order: Vec<(u64, u64)> =
        events[..4].iter().map(|e| (e.payload["col"].as_u64().unwrap(), e.payload["row"].as_u64().unwrap())).collect();
    assert_eq!(order, [(0, 0), (1, 0), (1, 1), (0, 1)]);
    for w in events.windows(2) {
        assert_eq!(w[1].seq, w[0].seq + 1);
    }
    assert_eq!(events[0].payload["current_A"].as_f64().unwrap(), frame.get(0, 0));
}

/// Stops the rack after a fixed number of pixels.
struct Saboteur {
    rack: Mutex<Option<Rack>>,
    after: usize,
    seen: Mutex<usize>,
}

impl EventSink for Saboteur {
    fn emit(&self, kind: EventKind, _: Value) {
        if kind == EventKind::PixelMeasured {
            let mut seen = self.seen.lock().unwrap();
            *seen += 1;
            if *seen == self.after {
                drop(self.rack.lock().unwrap().take());
            }
        }
    }
}

#[test]
fn instrument_loss_yields_partial_frame() {
    let clock: SharedClock = VirtualClock::shared();
    let rack = scene_rack(Scene::checkerboard(4, 4, 100.0), clock.clone());
    let (mut smu, mut stage) = connect(&rack);
    let sink = Arc::new(Saboteur { rack: Mutex::new(Some(rack)), after: 3, seen: Mutex::new(0) });
    let frame = run_scan(&plan(4, 4, 100.0), &mut smu, &mut stage, &clock, sink.as_ref(), ScanOptions::default()).unwrap();
    assert!(!frame.complete);
    assert_eq!(frame.acquired, 3);
    assert!(frame.abort_reason.is_some());
    assert!(frame.data.iter().all(|v| v.is_finite()));
    let csv = export_csv(&frame);
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
}

#[test]
fn plan_outside_stage_travel_is_rejected() {
    let clock: SharedClock = VirtualClock::shared();
    let rack = scene_rack(Scene::uniform(2, 2, 1.0, 100.0), clock.clone());
    let (mut smu, mut stage) = connect(&rack);
    let p = plan(1000, 2, 100.0);
    let err = run_scan(&p, &mut smu, &mut stage, &clock, &autolab_core::events::NullSink, ScanOptions::default()).unwrap_err();
    assert!(err.to_string().contains("x axis"), "{err}");
}

#[test]
fn seeded_noise_is_reproducible() {
    let frame_with = |seed: u64| {
        let clock: SharedClock = VirtualClock::shared();
        let config = RackConfig {
            scene: Some(SceneSource::Loaded(Scene::checkerboard(3, 3, 100.0))),
            noise: Some(NoiseConfig { sigma_amps: 1e-6, seed }),
            ..RackConfig::ephemeral()
        };
        let rack = Rack::up(config, clock).unwrap();
        scan_on(&rack, &plan(3, 3, 100.0)).data
    };
    assert_eq!(frame_with(7), frame_with(7));
    assert_ne!(frame_with(7), frame_with(8));
}

#[test]
fn exports_of_a_scanned_frame() {
    let clock: SharedClock = VirtualClock::shared();
    let rack = scene_rack(Scene::checkerboard(3, 2, 100.0), clock);
    let frame = scan_on(&rack, &plan(3, 2, 100.0));
    let pgm = export_pgm(&frame);
    let lines: Vec<&str> = pgm.lines().collect();
    assert_eq!(&lines[..3], ["P2", "3 2", "65535"]);
    // top file row is the highest y: row 1 is 0 1 0, row 0 is 1 0 1
    assert_eq!(lines[3].split_whitespace().collect::<Vec<_>>(), ["0", "65535", "0"]);
    assert_eq!(lines[4].split_whitespace().collect::<Vec<_>>(), ["65535", "0", "65535"]);
}

fn small_scene() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..5).prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(0.0f64..=1.0, w * h)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn random_scenes_match_oracle((w, h, values) in small_scene(), bias in -2.0f64..2.0) {
        let scene = Scene::from_rows(w, h, values, 100.0).unwrap();
        let p = ScanPlan { bias: (bias * 1000.0).round() / 1000.0, ..plan(w, h, 100.0) };
        let clock: SharedClock = VirtualClock::shared();
        let rack = scene_rack(scene.clone(), clock);
        let frame = scan_on(&rack, &p);
        prop_assert!(frame.complete);
        prop_assert_eq!(formatted(&frame), scan_oracle(&scene, &p, 0.1));
    }
}
