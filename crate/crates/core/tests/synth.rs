use std::collections::HashSet;
use std::sync::Arc;

use proptest::prelude::*;
use scenflow_core::metrics::{min_sttc, near_miss, MetricsConfig};
use scenflow_core::scene::{validate_scenario, ActorState, ManeuverLabel, Scenario, Source};
use scenflow_core::synth::{
    gen_nominal, generate_pool, inject_hero, label_scenario, max_decel, reject, HeroSpec, LabelThresholds, Maneuver,
    MapPreset, MixConfig, MixSampler, PoolKind, RejectReason, Slot, SynthConfig, Verdict,
};

fn toy() -> SynthConfig {
    SynthConfig {
        dt: 0.2,
        history_steps: 5,
        future_steps: 25,
        ..Default::default()
    }
}

fn highway(n: usize, seed: u64) -> Scenario {
    gen_nominal(Arc::new(MapPreset::Highway.build()), n, seed, &SynthConfig::default()).unwrap()
}

fn frames(s: &Scenario) -> impl Iterator<Item = &Vec<ActorState>> {
    s.history.iter().chain(&s.future)
}

fn brake(intensity: f64) -> HeroSpec {
    HeroSpec {
        maneuver: Maneuver::HardBrake,
        trigger_time: 1.0,
        intensity,
        target: Slot::Lead,
        insert: true,
    }
}

#[test]
fn followers_keep_the_minimum_gap() {
    let min_gap = SynthConfig::default().idm.min_gap;
    for seed in 0..20 {
        let s = highway(2, seed + 7);
        for f in frames(&s) {
            let (a, b) = (&f[0], &f[1]);
            if (a.y - b.y).abs() < 1.0 {
                let gap = (a.x - b.x).abs() - 0.5 * (a.length + b.length);
                assert!(gap >= min_gap - 1e-9, "seed {seed}: gap {gap}");
            }
        }
    }
}

#[test]
fn nominal_generation_is_deterministic_and_valid() {
    let a = highway(4, 3);
    assert_eq!(a, highway(4, 3));
    assert_ne!(a, highway(4, 4));
    assert!(validate_scenario(&a).is_valid());
    assert!(reject(&a, &SynthConfig::default().checks, &SynthConfig::default()).is_accept());
}

#[test]
fn nominal_speeds_stay_near_the_desired_speed() {
    let pool = generate_pool(PoolKind::SimNominal, 60, 1, &toy(), false).unwrap();
    for s in &pool.scenarios {
        let limit = s.map.speed_limit;
        for f in frames(s) {
            assert!(f.iter().all(|a| a.v <= 1.05 * limit), "{}", s.id);
        }
    }
}

#[test]
fn gentle_brake_stays_nominal_and_hard_brake_lowers_ttc() {
    let cfg = SynthConfig::default();
    let m = MetricsConfig::default();
    let mut checked = 0;
    for seed in 0..40 {
        let s = highway(4, seed);
        let (Ok(soft), Ok(hard)) = (
            inject_hero(&s, &brake(0.0), seed, &cfg),
            inject_hero(&s, &brake(1.0), seed, &cfg),
        ) else {
            continue;
        };
        if label_scenario(&s, &cfg.labels, &m) != ManeuverLabel::Nominal {
            continue;
        }
        assert!(max_decel(&soft) <= cfg.idm.decel_comfort + 1e-9);
        assert_eq!(label_scenario(&soft, &cfg.labels, &m), ManeuverLabel::Nominal);
        assert_eq!(hard.source, Source::SimCritical);
        if min_sttc(&s, &m).unwrap() < 10.0 || min_sttc(&hard, &m).unwrap() < 10.0 {
            assert!(min_sttc(&hard, &m).unwrap() < min_sttc(&s, &m).unwrap());
        }
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn cut_in_into_an_empty_slot_inserts_one_actor() {
    let cfg = SynthConfig::default();
    let spec = HeroSpec {
        maneuver: Maneuver::CutIn,
        trigger_time: 1.0,
        intensity: 0.5,
        target: Slot::LeftNeighbor,
        insert: true,
    };
    let mut inserted = 0;
    for seed in 0..40 {
        let s = highway(2, seed);
        let ego = s.ego_index().unwrap();
        let ego_y = s.current()[ego].y;
        let left_occupied = s.current().iter().any(|a| (a.y - ego_y - 3.5).abs() < 1.0);
        if left_occupied {
            continue;
        }
        if let Ok(out) = inject_hero(&s, &spec, seed, &cfg) {
            assert_eq!(out.n_actors(), s.n_actors() + 1);
            inserted += 1;
        }
    }
    assert!(inserted > 0);
}

#[test]
fn rejection_checks() {
    let cfg = SynthConfig::default();
    let s = highway(3, 11);
    assert!(reject(&s, &cfg.checks, &cfg).is_accept());

    let mut overlap = s.clone();
    overlap.future[3][1] = overlap.future[3][0];
    assert!(matches!(
        reject(&overlap, &cfg.checks, &cfg),
        Verdict::Reject {
            reason: RejectReason::Collision,
            ..
        }
    ));

    let mut teleport = s.clone();
    for f in &mut teleport.future[10..] {
        f[2].x += 50.0;
    }
    assert!(matches!(
        reject(&teleport, &cfg.checks, &cfg),
        Verdict::Reject {
            reason: RejectReason::Kinematic,
            ..
        }
    ));
}

/// Ego at 10 m/s behind a stopped car with bumper gap `gap`, held for one
/// future step so only the present frame is closing.
fn closing(gap: f64) -> Scenario {
    let mut s = highway(2, 0);
    let car = |x: f64, v: f64| ActorState {
        length: 4.0,
        ..ActorState::car(x, 0.0, 0.0, v)
    };
    s.ego = s.actors[0];
    s.history = vec![vec![car(100.0, 10.0), car(104.0 + gap, 0.0)]];
    s.future = vec![vec![car(100.0, 10.0), car(104.0 + gap, 10.0)]];
    s
}

#[test]
fn labels_follow_ttc_thresholds() {
    let th = LabelThresholds::default();
    let m = MetricsConfig::default();
    let mut still = highway(3, 2);
    for f in still.history.iter_mut().chain(&mut still.future) {
        for (k, a) in f.iter_mut().enumerate() {
            *a = ActorState::car(20.0 * k as f64, 0.0, 0.0, 0.0);
        }
    }
    assert_eq!(label_scenario(&still, &th, &m), ManeuverLabel::Nominal);
    let two = closing(20.0);
    assert_eq!(min_sttc(&two, &m).unwrap(), 2.0);
    assert_eq!(label_scenario(&two, &th, &m), ManeuverLabel::SafetyCritical);
    let one = closing(10.0);
    assert_eq!(min_sttc(&one, &m).unwrap(), 1.0);
    assert_eq!(label_scenario(&one, &th, &m), ManeuverLabel::VerySafetyCritical);
}

#[test]
fn mix_sampler_pool_selection() {
    let real: Vec<Scenario> = (0..3)
        .map(|k| Scenario {
            id: format!("r{k}"),
            ..highway(2, k)
        })
        .collect();
    let sim: Vec<Scenario> = (0..5)
        .map(|k| Scenario {
            id: format!("s{k}"),
            ..highway(2, 10 + k)
        })
        .collect();
    let draw = |alpha: f64, seed: u64, n: usize| -> Vec<String> {
        MixSampler::new(
            &real,
            &sim,
            &MixConfig {
                alpha_real: alpha,
                seed,
                upsample_real: 2,
            },
        )
        .unwrap()
        .take(n)
        .map(|s| s.id.clone())
        .collect()
    };
    assert!(draw(1.0, 0, 200).iter().all(|id| id.starts_with('r')));
    assert!(draw(0.0, 0, 200).iter().all(|id| id.starts_with('s')));
    let mixed = draw(0.4, 9, 10_000);
    let frac = mixed.iter().filter(|id| id.starts_with('r')).count() as f64 / 1e4;
    assert!((0.37..=0.43).contains(&frac), "{frac}");
    assert_eq!(mixed, draw(0.4, 9, 10_000));
    assert!(MixSampler::new(
        &[],
        &sim,
        &MixConfig {
            alpha_real: 0.3,
            seed: 0,
            upsample_real: 1
        }
    )
    .is_err());
}

#[test]
fn critical_pool_has_more_near_misses_than_nominal() {
    let cfg = toy();
    let m = MetricsConfig::default();
    let nominal = generate_pool(PoolKind::SimNominal, 200, 21, &cfg, false).unwrap();
    let mut critical = generate_pool(PoolKind::SimAggressive, 100, 22, &cfg, false)
        .unwrap()
        .scenarios;
    critical.extend(
        generate_pool(PoolKind::SimTuned, 100, 23, &cfg, false)
            .unwrap()
            .scenarios,
    );
    assert!(near_miss(&critical, &m).unwrap() > near_miss(&nominal.scenarios, &m).unwrap());
    for s in nominal.scenarios.iter().chain(&critical) {
        assert!(validate_scenario(s).is_valid(), "{}", s.id);
    }
}

#[test]
fn pools_are_identical_serial_and_parallel() {
    let cfg = toy();
    for kind in [
        PoolKind::SimNominal,
        PoolKind::SimAggressive,
        PoolKind::SimTuned,
        PoolKind::PseudoReal,
    ] {
        let a = generate_pool(kind, 24, 5, &cfg, false).unwrap();
        let b = generate_pool(kind, 24, 5, &cfg, true).unwrap();
        assert_eq!(a.scenarios, b.scenarios);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.rejected(), a.log.attempts - a.log.accepted);
        let ids: HashSet<&str> = a.scenarios.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), a.scenarios.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn harder_braking_never_relaxes_the_label(seed in 0u64..500, lo in 0.0..1.0f64, step in 0.0..1.0f64) {
        let cfg = SynthConfig { future_steps: 25, history_steps: 5, dt: 0.2, ..Default::default() };
        let m = MetricsConfig::default();
        let s = gen_nominal(Arc::new(MapPreset::Highway.build()), 4, seed, &cfg).unwrap();
        let hi = (lo + step).min(1.0);
        let (Ok(a), Ok(b)) = (inject_hero(&s, &brake(lo), seed, &cfg), inject_hero(&s, &brake(hi), seed, &cfg)) else {
            return Ok(());
        };
        prop_assert!(label_scenario(&b, &cfg.labels, &m).index() >= label_scenario(&a, &cfg.labels, &m).index());
    }
}
