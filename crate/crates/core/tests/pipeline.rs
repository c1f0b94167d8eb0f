//! Training and phantom invariants on full synthetic sessions.

use sonomyo_core::classify::Index;
use sonomyo_core::frames::average_frames;
use sonomyo_core::synthsim::{synth_training_session, Phantom, PhantomConfig};
use sonomyo_core::training::{
    build_database, detect_plateaus, rest_distance_series, HoldKind, MetronomeSchedule, MotionClass, PhaseKind,
    PlateauParams, TrainingDatabase, TrainingSession,
};
use sonomyo_core::{correlation, Frame};

fn session(schedule: MetronomeSchedule) -> TrainingSession<'static> {
    TrainingSession {
        session_id: "pipeline",
        schedule,
        tick_rate_hz: 30.0,
        plateau: PlateauParams::default(),
    }
}

fn motion(db_id: &str) -> MotionClass {
    PhantomConfig::default()
        .motions
        .into_iter()
        .find(|m| m.id == db_id)
        .unwrap()
}

#[test]
fn plateaus_are_one_per_hold_and_inside_it() {
    let phantom = Phantom::new(PhantomConfig::default()).unwrap();
    for reps in [1, 3, 5] {
        let schedule = MetronomeSchedule {
            repetitions: reps,
            ..MetronomeSchedule::default()
        };
        let frames = synth_training_session(&phantom, "WP", &schedule, 21).unwrap();
        let signal = rest_distance_series(&frames).unwrap();
        let plateaus = detect_plateaus(&signal, &schedule, 30.0, &PlateauParams::default()).unwrap();
        assert_eq!(plateaus.len(), 2 * reps as usize);
        let phases = schedule.phases(30.0);
        for p in &plateaus {
            let kind = match p.kind {
                HoldKind::Motion => PhaseKind::HoldEndState,
                HoldKind::Rest => PhaseKind::HoldRest,
            };
            let hold = phases
                .iter()
                .find(|ph| ph.kind == kind && ph.repetition == p.repetition)
                .unwrap();
            assert!(p.start_index >= hold.start && p.end_index < hold.end, "{p:?} outside {hold:?}");
            assert!(p.len() >= PlateauParams::default().min_length(30.0));
        }
    }
}

#[test]
fn representatives_are_plateau_averages_and_storage_is_append_only() {
    let phantom = Phantom::new(PhantomConfig::default()).unwrap();
    let schedule = MetronomeSchedule::default();
    let pg = synth_training_session(&phantom, "PG", &schedule, 1).unwrap();
    let db1 = build_database(&pg, &session(schedule), &motion("PG"), TrainingDatabase::new(MotionClass::rest())).unwrap();

    let plateaus = detect_plateaus(&rest_distance_series(&pg).unwrap(), &schedule, 30.0, &PlateauParams::default()).unwrap();
    let averages = |kind: HoldKind| -> Vec<Frame> {
        plateaus
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| average_frames(&pg[p.start_index..=p.end_index]).unwrap())
            .collect()
    };
    assert_eq!(db1.entries("PG"), averages(HoldKind::Motion).as_slice());
    assert_eq!(db1.entries("rest"), averages(HoldKind::Rest).as_slice());

    let wp = synth_training_session(&phantom, "WP", &schedule, 2).unwrap();
    let db2 = build_database(&wp, &session(schedule), &motion("WP"), db1.clone()).unwrap();
    assert_eq!(db2.entries("PG"), db1.entries("PG"));
    assert_eq!(&db2.entries("rest")[..db1.entries("rest").len()], db1.entries("rest"));
    assert_eq!(db2.rest_reference(), db1.rest_reference());
    assert_eq!(db2.provenance()[0], db1.provenance()[0]);
    assert_eq!(db2.entries("WP").len(), 5);
}

#[test]
fn end_state_predictions_survive_100_noise_seeds() {
    let cfg = PhantomConfig::default();
    assert!(cfg.noise_sigma <= 0.02);
    let phantom = Phantom::new(cfg.clone()).unwrap();
    let schedule = MetronomeSchedule::default();
    let mut db = TrainingDatabase::new(MotionClass::rest());
    for (k, m) in cfg.motions.iter().enumerate() {
        let frames = synth_training_session(&phantom, &m.id, &schedule, k as u64).unwrap();
        db = build_database(&frames, &session(schedule), m, db).unwrap();
    }
    let index = Index::build(&db, false).unwrap();
    let reference = phantom.render_frame("PG", 1.0, 7).unwrap();
    for seed in 0..100u64 {
        let p = Phantom::new(PhantomConfig {
            noise_seed: 1000 + seed,
            ..cfg.clone()
        })
        .unwrap();
        let f = p.render_frame("PG", 1.0, 7).unwrap();
        assert_ne!(f.pixels(), reference.pixels(), "seed {seed} did not change the noise");
        for m in &cfg.motions {
            let f = p.render_frame(&m.id, 1.0, seed).unwrap();
            assert_eq!(index.classify(&f).unwrap().class_id, m.id, "noise seed {seed}");
        }
    }
}

#[test]
fn noiseless_correlation_rises_with_activation() {
    let phantom = Phantom::new(PhantomConfig {
        noise_sigma: 0.0,
        ..PhantomConfig::default()
    })
    .unwrap();
    for m in PhantomConfig::default().motions {
        let template = phantom.motion_template(&m.id).unwrap();
        let r: Vec<f64> = (0..=50)
            .map(|i| {
                let f = phantom.render_frame(&m.id, i as f64 / 50.0, 0).unwrap();
                correlation(&f, &template).unwrap().value()
            })
            .collect();
        assert!(r.windows(2).all(|w| w[1] > w[0]), "{}: {r:?}", m.id);
        assert_eq!(r[50], 1.0);
    }
}

#[test]
fn rendering_is_bit_deterministic() {
    let a = Phantom::new(PhantomConfig::default()).unwrap();
    let b = Phantom::new(PhantomConfig::default()).unwrap();
    for tick in [0, 1, 999] {
        assert_eq!(
            a.render_frame("Tr", 0.37, tick).unwrap().pixels(),
            b.render_frame("Tr", 0.37, tick).unwrap().pixels()
        );
    }
}
