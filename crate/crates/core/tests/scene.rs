use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use scenflow_core::io::{read_scenarios, write_scenarios};
use scenflow_core::scene::{
    relative_pose, validate_scenario, wrap_angle, ActorState, IssueKind, LaneGraph, LaneNode, ManeuverLabel, Pose2,
    Scenario, Source,
};
use scenflow_core::synth::{gen_nominal, MapPreset, SynthConfig};

fn tiny_map() -> LaneGraph {
    LaneGraph {
        nodes: (0..20)
            .map(|k| LaneNode {
                x: 2.0 * k as f64,
                y: 0.0,
                heading: 0.0,
                lane_id: 0,
            })
            .collect(),
        successors: (0..19).map(|k| (k, k + 1)).collect(),
        left: vec![],
        right: vec![],
        spacing: 2.0,
        speed_limit: 15.0,
    }
}

fn three_actor() -> Scenario {
    let row = |dx: f64| {
        vec![
            ActorState::car(0.0 + dx, 0.0, 0.0, 1.0),
            ActorState::car(10.0 + dx, 0.0, 0.0, 1.0),
            ActorState::car(20.0 + dx, 0.0, 0.0, 1.0),
        ]
    };
    Scenario {
        id: "three".into(),
        map: Arc::new(tiny_map()),
        actors: vec![1, 2, 3],
        history: vec![row(0.0), row(0.1)],
        future: vec![row(0.2), row(0.3)],
        dt: 0.1,
        ego: 1,
        source: Source::SimNominal,
        label: ManeuverLabel::Nominal,
    }
}

#[test]
fn well_formed_scenario_has_empty_report() {
    assert!(validate_scenario(&three_actor()).is_valid());
}

#[test]
fn nan_coordinate_is_reported_with_actor_and_step() {
    let mut s = three_actor();
    s.history[0][1].x = f64::NAN;
    let report = validate_scenario(&s);
    let issue = report.issues.iter().find(|i| i.kind == IssueKind::NonFinite).unwrap();
    assert_eq!(issue.actor, Some(2));
    assert_eq!(issue.timestep, Some(-1));
}

#[test]
fn coincident_future_boxes_are_reported_as_collision() {
    let mut s = three_actor();
    s.future[1][2] = s.future[1][1];
    let report = validate_scenario(&s);
    assert!(report.issues.iter().any(|i| i.kind == IssueKind::Collision));
}

#[test]
fn relative_pose_examples() {
    let r = relative_pose(&Pose2::new(1.0, 2.0, 0.3), &Pose2::new(1.0, 2.0, 0.3));
    assert_eq!((r.x, r.y, r.yaw), (0.0, 0.0, 0.0));
    let r = relative_pose(&Pose2::new(0.0, 0.0, 0.0), &Pose2::new(3.0, 4.0, 0.0));
    assert_eq!((r.x, r.y, r.yaw), (3.0, 4.0, 0.0));
    let r = relative_pose(&Pose2::new(0.0, 0.0, PI / 2.0), &Pose2::new(0.0, 5.0, PI / 2.0));
    assert!((r.x - 5.0).abs() < 1e-12 && r.y.abs() < 1e-12 && r.yaw.abs() < 1e-12);
}

#[test]
fn generated_scenarios_round_trip_through_files() {
    let cfg = SynthConfig::default();
    let pool: Vec<Scenario> = (0..3)
        .map(|seed| gen_nominal(Arc::new(MapPreset::UrbanGrid.build()), 4, seed, &cfg).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_scenarios(&mut buf, &pool).unwrap();
    let back = read_scenarios(buf.as_slice()).unwrap();
    assert_eq!(back, pool);
}

fn pose() -> impl Strategy<Value = Pose2> {
    (-500.0..500.0f64, -500.0..500.0f64, -PI..PI).prop_map(|(x, y, yaw)| Pose2::new(x, y, yaw))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn relative_pose_inverts(a in pose(), b in pose()) {
        let r = relative_pose(&a, &b);
        let back = a.compose(&r);
        prop_assert!((back.x - b.x).abs() < 1e-9);
        prop_assert!((back.y - b.y).abs() < 1e-9);
        prop_assert!(wrap_angle(back.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn relative_pose_is_viewpoint_invariant(a in pose(), b in pose(), g in pose()) {
        let r0 = relative_pose(&a, &b);
        let r1 = relative_pose(&g.compose(&a), &g.compose(&b));
        prop_assert!((r0.x - r1.x).abs() < 1e-9);
        prop_assert!((r0.y - r1.y).abs() < 1e-9);
        prop_assert!(wrap_angle(r0.yaw - r1.yaw).abs() < 1e-9);
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval(theta in -1e4..1e4f64) {
        let w = wrap_angle(theta);
        prop_assert!(w > -PI && w <= PI);
        let turns = (theta - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn scenario_file_round_trip_is_exact(
        xs in proptest::collection::vec(-1e3..1e3f64, 6),
        yaw in -PI..PI,
        v in -5.0..40.0f64,
    ) {
        let mut s = three_actor();
        for (k, x) in xs.iter().enumerate() {
            let row = if k < 3 { &mut s.history[0] } else { &mut s.future[0] };
            row[k % 3].x = *x;
            row[k % 3].yaw = wrap_angle(yaw + k as f64);
            row[k % 3].v = v / (k + 1) as f64;
        }
        let mut buf = Vec::new();
        write_scenarios(&mut buf, std::slice::from_ref(&s)).unwrap();
        let back = read_scenarios(buf.as_slice()).unwrap();
        prop_assert_eq!(&back[0], &s);
    }
}
