//! Scenario domain types and frame utilities.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry;
pub use scenflow_tensor::wrap_angle;

/// Per-timestep kinematic state of one actor. `v` is signed longitudinal speed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub v: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl ActorState {
    /// A 4.8 x 1.9 x 1.5 m passenger car.
    pub fn car(x: f64, y: f64, yaw: f64, v: f64) -> Self {
        Self {
            x,
            y,
            z: 0.0,
            yaw: wrap_angle(yaw),
            v,
            length: 4.8,
            width: 1.9,
            height: 1.5,
        }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2 {
            x: self.x,
            y: self.y,
            yaw: self.yaw,
        }
    }

    pub fn fields(&self) -> [f64; 8] {
        [
            self.x,
            self.y,
            self.z,
            self.yaw,
            self.v,
            self.length,
            self.width,
            self.height,
        ]
    }

    pub fn from_fields(f: [f64; 8]) -> Self {
        Self {
            x: f[0],
            y: f[1],
            z: f[2],
            yaw: f[3],
            v: f[4],
            length: f[5],
            width: f[6],
            height: f[7],
        }
    }

    /// Field order used by the scenario file format.
    pub const FIELD_NAMES: [&'static str; 8] = ["x", "y", "z", "yaw", "v", "length", "width", "height"];
}

/// Control input: longitudinal acceleration and front-wheel steering angle.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub steer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    /// Applies this pose as a rigid transform to `p` (p is expressed in this frame).
    pub fn compose(&self, p: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            x: self.x + c * p.x - s * p.y,
            y: self.y + s * p.x + c * p.y,
            yaw: wrap_angle(self.yaw + p.yaw),
        }
    }
}

/// `b` expressed in `a`'s body frame; the yaw difference is wrapped.
pub fn relative_pose(a: &Pose2, b: &Pose2) -> Pose2 {
    let (s, c) = a.yaw.sin_cos();
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    Pose2 {
        x: c * dx + s * dy,
        y: -s * dx + c * dy,
        yaw: wrap_angle(b.yaw - a.yaw),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneNode {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub lane_id: u32,
}

/// Polyline lane graph. `left` holds `(a, b)` meaning `b` is the left
/// neighbor of `a`; `right` likewise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneGraph {
    pub nodes: Vec<LaneNode>,
    pub successors: Vec<(usize, usize)>,
    pub left: Vec<(usize, usize)>,
    pub right: Vec<(usize, usize)>,
    pub spacing: f64,
    /// Posted speed on every lane, m/s.
    pub speed_limit: f64,
}

/// A lane as an ordered polyline of node indices.
#[derive(Clone, Debug)]
pub struct Lane {
    pub id: u32,
    pub nodes: Vec<usize>,
}

/// Closest point on a lane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaneProjection {
    pub lane_id: u32,
    /// Arc length along the lane.
    pub s: f64,
    /// Signed lateral offset, positive to the left.
    pub d: f64,
    pub heading: f64,
}

impl LaneGraph {
    /// Lanes in id order, each walked along successor edges.
    pub fn lanes(&self) -> Vec<Lane> {
        let mut by_lane: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            by_lane.entry(n.lane_id).or_default().push(i);
        }
        let mut succ: BTreeMap<usize, usize> = BTreeMap::new();
        let mut has_pred = vec![false; self.nodes.len()];
        for &(a, b) in &self.successors {
            if self.nodes[a].lane_id == self.nodes[b].lane_id {
                succ.insert(a, b);
                has_pred[b] = true;
            }
        }
        by_lane
            .into_iter()
            .map(|(id, members)| {
                let start = members.iter().copied().find(|&i| !has_pred[i]).unwrap_or(members[0]);
                let mut order = vec![start];
                let mut cur = start;
                while let Some(&next) = succ.get(&cur) {
                    if order.len() > members.len() {
                        break;
                    }
                    order.push(next);
                    cur = next;
                }
                Lane { id, nodes: order }
            })
            .collect()
    }

    pub fn lane(&self, id: u32) -> Option<Lane> {
        self.lanes().into_iter().find(|l| l.id == id)
    }

    /// Projects a point onto one lane polyline. Points past either end are
    /// extrapolated along the end segment.
    pub fn project_onto(&self, lane: &Lane, x: f64, y: f64) -> LaneProjection {
        let pts: Vec<(f64, f64)> = lane.nodes.iter().map(|&i| (self.nodes[i].x, self.nodes[i].y)).collect();
        if pts.len() == 1 {
            let n = &self.nodes[lane.nodes[0]];
            let rel = relative_pose(&Pose2::new(n.x, n.y, n.heading), &Pose2::new(x, y, 0.0));
            return LaneProjection {
                lane_id: lane.id,
                s: rel.x,
                d: rel.y,
                heading: n.heading,
            };
        }
        let mut best: Option<(f64, LaneProjection)> = None;
        let mut s_acc = 0.0;
        let last = pts.len() - 2;
        for k in 0..=last {
            let (ax, ay) = pts[k];
            let (bx, by) = pts[k + 1];
            let (ex, ey) = (bx - ax, by - ay);
            let seg = (ex * ex + ey * ey).sqrt();
            let (ux, uy) = (ex / seg, ey / seg);
            let mut t = (x - ax) * ux + (y - ay) * uy;
            if k > 0 {
                t = t.max(0.0);
            }
            if k < last {
                t = t.min(seg);
            }
            let (px, py) = (ax + ux * t, ay + uy * t);
            let dist2 = (x - px).powi(2) + (y - py).powi(2);
            let d = ux * (y - ay) - uy * (x - ax);
            let proj = LaneProjection {
                lane_id: lane.id,
                s: s_acc + t,
                d,
                heading: uy.atan2(ux),
            };
            if best.as_ref().is_none_or(|(b, _)| dist2 < *b) {
                best = Some((dist2, proj));
            }
            s_acc += seg;
        }
        best.unwrap().1
    }

    /// Point and heading at arc length `s` along a lane (extrapolated past the ends).
    pub fn point_at(&self, lane: &Lane, s: f64) -> (f64, f64, f64) {
        let pts: Vec<(f64, f64)> = lane.nodes.iter().map(|&i| (self.nodes[i].x, self.nodes[i].y)).collect();
        if pts.len() == 1 {
            let n = &self.nodes[lane.nodes[0]];
            return (n.x + s * n.heading.cos(), n.y + s * n.heading.sin(), n.heading);
        }
        let mut s_acc = 0.0;
        for k in 0..pts.len() - 1 {
            let (ax, ay) = pts[k];
            let (bx, by) = pts[k + 1];
            let seg = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
            if s <= s_acc + seg || k == pts.len() - 2 {
                let t = if k == 0 { s - s_acc } else { (s - s_acc).max(0.0) };
                let h = (by - ay).atan2(bx - ax);
                return (ax + t * h.cos(), ay + t * h.sin(), h);
            }
            s_acc += seg;
        }
        unreachable!()
    }

    /// Shortest distance from a point to any lane centerline.
    pub fn distance_to_lanes(&self, x: f64, y: f64) -> f64 {
        let mut best = f64::INFINITY;
        for &(a, b) in &self.successors {
            let (na, nb) = (&self.nodes[a], &self.nodes[b]);
            best = best.min(geometry::point_segment_distance(x, y, na.x, na.y, nb.x, nb.y));
        }
        if self.successors.is_empty() {
            for n in &self.nodes {
                best = best.min(((x - n.x).powi(2) + (y - n.y).powi(2)).sqrt());
            }
        }
        best
    }

    /// Structural problems: dangling edges and asymmetric neighbor pairs.
    pub fn problems(&self) -> Vec<String> {
        let n = self.nodes.len();
        let mut out = Vec::new();
        for (kind, edges) in [
            ("successor", &self.successors),
            ("left", &self.left),
            ("right", &self.right),
        ] {
            for &(a, b) in edges.iter() {
                if a >= n || b >= n {
                    out.push(format!("{kind} edge ({a}, {b}) references a missing node"));
                }
            }
        }
        for &(a, b) in &self.left {
            if !self.right.contains(&(b, a)) {
                out.push(format!("node {b} is left of {a} but {a} is not right of {b}"));
            }
        }
        for &(a, b) in &self.right {
            if !self.left.contains(&(b, a)) {
                out.push(format!("node {b} is right of {a} but {a} is not left of {b}"));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    SimNominal,
    SimCritical,
    RealCritical,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::SimNominal => "sim_nominal",
            Source::SimCritical => "sim_critical",
            Source::RealCritical => "real_critical",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverLabel {
    Nominal,
    SafetyCritical,
    VerySafetyCritical,
}

impl ManeuverLabel {
    pub const ALL: [ManeuverLabel; 3] = [
        ManeuverLabel::Nominal,
        ManeuverLabel::SafetyCritical,
        ManeuverLabel::VerySafetyCritical,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ManeuverLabel::Nominal => "nominal",
            ManeuverLabel::SafetyCritical => "safety_critical",
            ManeuverLabel::VerySafetyCritical => "very_safety_critical",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for ManeuverLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type ActorId = u32;

/// One traffic scenario. `history[t][i]` / `future[t][i]` index timestep
/// then actor; the last history entry is the present (t = 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub map: Arc<LaneGraph>,
    pub actors: Vec<ActorId>,
    pub history: Vec<Vec<ActorState>>,
    pub future: Vec<Vec<ActorState>>,
    pub dt: f64,
    pub ego: ActorId,
    pub source: Source,
    pub label: ManeuverLabel,
}

impl Scenario {
    pub fn n_actors(&self) -> usize {
        self.actors.len()
    }

    pub fn ego_index(&self) -> Option<usize> {
        self.actors.iter().position(|&a| a == self.ego)
    }

    /// The present (last observed) state of every actor.
    pub fn current(&self) -> &[ActorState] {
        self.history.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Trajectory of actor `i` from the present through the future.
    pub fn future_track(&self, i: usize) -> Vec<ActorState> {
        let mut out = Vec::with_capacity(self.future.len() + 1);
        if let Some(now) = self.history.last() {
            out.push(now[i]);
        }
        out.extend(self.future.iter().map(|f| f[i]));
        out
    }

    /// Same scenario with the future dropped.
    pub fn history_only(&self) -> Scenario {
        Scenario {
            future: Vec::new(),
            ..self.clone()
        }
    }

    /// Applies a rigid transform to every pose and to the map.
    pub fn transformed(&self, g: &Pose2) -> Scenario {
        let tf_state = |s: &ActorState| {
            let p = g.compose(&s.pose());
            ActorState {
                x: p.x,
                y: p.y,
                yaw: p.yaw,
                ..*s
            }
        };
        let mut map = (*self.map).clone();
        for n in &mut map.nodes {
            let p = g.compose(&Pose2::new(n.x, n.y, n.heading));
            n.x = p.x;
            n.y = p.y;
            n.heading = p.yaw;
        }
        Scenario {
            map: Arc::new(map),
            history: self.history.iter().map(|t| t.iter().map(tf_state).collect()).collect(),
            future: self.future.iter().map(|t| t.iter().map(tf_state).collect()).collect(),
            ..self.clone()
        }
    }

    /// Reorders actors by `perm` (new position i holds old actor `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Scenario {
        let reorder = |row: &Vec<ActorState>| perm.iter().map(|&j| row[j]).collect::<Vec<_>>();
        Scenario {
            actors: perm.iter().map(|&j| self.actors[j]).collect(),
            history: self.history.iter().map(reorder).collect(),
            future: self.future.iter().map(reorder).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum IssueKind {
    Structure,
    NonFinite,
    NonPositiveExtent,
    YawNotWrapped,
    Collision,
    MapTopology,
}

/// One violated invariant. Timesteps count from `-(H-1)` (oldest history)
/// through 0 (present) to `T` (last future step).
#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub kind: IssueKind,
    pub actor: Option<ActorId>,
    pub timestep: Option<i64>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ValidationOptions {
    pub check_collisions: bool,
    /// Whether an empty future counts as a violation.
    pub require_future: bool,
    pub iou_threshold: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            check_collisions: true,
            require_future: true,
            iou_threshold: geometry::DEFAULT_IOU_THRESHOLD,
        }
    }
}

pub fn validate_scenario(s: &Scenario) -> ValidationReport {
    validate_scenario_with(s, &ValidationOptions::default())
}

pub fn validate_scenario_with(s: &Scenario, opts: &ValidationOptions) -> ValidationReport {
    let mut issues = Vec::new();
    let structure = |msg: String| Issue {
        kind: IssueKind::Structure,
        actor: None,
        timestep: None,
        message: msg,
    };
    let n = s.actors.len();
    if s.history.is_empty() {
        issues.push(structure("history is empty".into()));
    }
    if opts.require_future && s.future.is_empty() {
        issues.push(structure("future is empty".into()));
    }
    if !(s.dt.is_finite() && s.dt > 0.0) {
        issues.push(structure(format!("dt must be positive, got {}", s.dt)));
    }
    if s.ego_index().is_none() {
        issues.push(structure(format!("ego {} is not among the actors", s.ego)));
    }
    let mut ids = s.actors.clone();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != n {
        issues.push(structure("duplicate actor ids".into()));
    }
    for p in s.map.problems() {
        issues.push(Issue {
            kind: IssueKind::MapTopology,
            actor: None,
            timestep: None,
            message: p,
        });
    }
    let h = s.history.len() as i64;
    let steps = s
        .history
        .iter()
        .enumerate()
        .map(|(k, row)| (k as i64 - h + 1, row))
        .chain(s.future.iter().enumerate().map(|(k, row)| (k as i64 + 1, row)));
    for (t, row) in steps {
        if row.len() != n {
            issues.push(Issue {
                kind: IssueKind::Structure,
                actor: None,
                timestep: Some(t),
                message: format!("{} states for {} actors", row.len(), n),
            });
            continue;
        }
        for (st, &id) in row.iter().zip(&s.actors) {
            let mut push = |kind, message: String| {
                issues.push(Issue {
                    kind,
                    actor: Some(id),
                    timestep: Some(t),
                    message,
                })
            };
            if st.fields().iter().any(|v| !v.is_finite()) {
                push(IssueKind::NonFinite, format!("non-finite state {st:?}"));
                continue;
            }
            if st.length <= 0.0 || st.width <= 0.0 || st.height <= 0.0 {
                push(IssueKind::NonPositiveExtent, "box extents must be positive".into());
            }
            if !(st.yaw > -std::f64::consts::PI && st.yaw <= std::f64::consts::PI) {
                push(IssueKind::YawNotWrapped, format!("yaw {} outside (-pi, pi]", st.yaw));
            }
        }
        if opts.check_collisions && t >= 1 {
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (&row[i], &row[j]);
                    if a.fields().iter().chain(b.fields().iter()).any(|v| !v.is_finite()) {
                        continue;
                    }
                    let iou = geometry::box_iou(a, b);
                    if iou > opts.iou_threshold {
                        issues.push(Issue {
                            kind: IssueKind::Collision,
                            actor: Some(s.actors[i]),
                            timestep: Some(t),
                            message: format!("collides with actor {} (IOU {iou:.3})", s.actors[j]),
                        });
                    }
                }
            }
        }
    }
    ValidationReport { issues }
}
