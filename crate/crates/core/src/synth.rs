//! Training-corpus synthesis: IDM lane-following traffic, scripted hero
//! maneuvers, rejection checks, heuristic labels and the real/sim mixing stream.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{idm_accel, idm_free_accel, step, DynamicsConfig, DynamicsError, IdmParams};
use crate::geometry::box_iou;
use crate::metrics::{min_sttc, MetricsConfig};
use crate::scene::{
    relative_pose, validate_scenario_with, wrap_angle, Action, ActorState, LaneGraph, LaneNode, ManeuverLabel, Pose2,
    Scenario, Source, ValidationOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("could not place {0} actors without violating spacing")]
    Placement(usize),
    #[error("hero slot unresolvable: {0}")]
    Injection(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Deterministic RNG for item `stream` of a run seeded with `master`.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapPreset {
    /// Three parallel 400 m lanes along +x.
    Highway,
    /// Two parallel 400 m lanes crossed by three side roads.
    UrbanGrid,
}

const LANE_WIDTH: f64 = 3.5;
const MAP_LENGTH: f64 = 400.0;

fn straight_lane(graph: &mut LaneGraph, lane_id: u32, x0: f64, y0: f64, heading: f64, length: f64) -> Vec<usize> {
    let n = (length / graph.spacing).round() as usize + 1;
    let (s, c) = heading.sin_cos();
    let start = graph.nodes.len();
    for k in 0..n {
        let d = k as f64 * graph.spacing;
        graph.nodes.push(LaneNode {
            x: x0 + c * d,
            y: y0 + s * d,
            heading,
            lane_id,
        });
        if k > 0 {
            graph.successors.push((start + k - 1, start + k));
        }
    }
    (start..start + n).collect()
}

fn link_neighbors(graph: &mut LaneGraph, right: &[usize], left: &[usize]) {
    for (&r, &l) in right.iter().zip(left) {
        graph.left.push((r, l));
        graph.right.push((l, r));
    }
}

impl MapPreset {
    pub fn build(self) -> LaneGraph {
        let (speed_limit, n_main) = match self {
            MapPreset::Highway => (30.0, 3),
            MapPreset::UrbanGrid => (15.0, 2),
        };
        let mut g = LaneGraph {
            nodes: Vec::new(),
            successors: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            spacing: 2.0,
            speed_limit,
        };
        let y0 = -LANE_WIDTH * (n_main - 1) as f64 / 2.0;
        let lanes: Vec<Vec<usize>> = (0..n_main)
            .map(|k| straight_lane(&mut g, k as u32, 0.0, y0 + LANE_WIDTH * k as f64, 0.0, MAP_LENGTH))
            .collect();
        for w in lanes.windows(2) {
            link_neighbors(&mut g, &w[0], &w[1]);
        }
        if self == MapPreset::UrbanGrid {
            for (k, x) in [100.0, 200.0, 300.0].into_iter().enumerate() {
                straight_lane(
                    &mut g,
                    (n_main + k) as u32,
                    x,
                    -100.0,
                    std::f64::consts::FRAC_PI_2,
                    200.0,
                );
            }
        }
        g
    }

    /// Lanes that traffic is spawned on.
    pub fn driving_lanes(self) -> Vec<u32> {
        match self {
            MapPreset::Highway => vec![0, 1, 2],
            MapPreset::UrbanGrid => vec![0, 1],
        }
    }

    pub fn ego_lane(self) -> u32 {
        match self {
            MapPreset::Highway => 1,
            MapPreset::UrbanGrid => 0,
        }
    }
}

/// Cached polyline of one lane for fast projection.
#[derive(Clone, Debug)]
struct Track {
    id: u32,
    pts: Vec<(f64, f64)>,
    cum: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Frenet {
    s: f64,
    d: f64,
}

impl Track {
    fn from_graph(g: &LaneGraph) -> Vec<Track> {
        g.lanes()
            .into_iter()
            .map(|lane| {
                let pts: Vec<(f64, f64)> = lane.nodes.iter().map(|&i| (g.nodes[i].x, g.nodes[i].y)).collect();
                let mut cum = vec![0.0];
                for w in pts.windows(2) {
                    let last = *cum.last().unwrap();
                    cum.push(last + (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1));
                }
                Track { id: lane.id, pts, cum }
            })
            .collect()
    }

    fn segment(&self, k: usize) -> ((f64, f64), f64, f64, f64) {
        let (a, b) = (self.pts[k], self.pts[k + 1]);
        let len = self.cum[k + 1] - self.cum[k];
        (a, (b.0 - a.0) / len, (b.1 - a.1) / len, len)
    }

    fn project(&self, x: f64, y: f64) -> Frenet {
        let last = self.pts.len() - 2;
        let mut best = (f64::INFINITY, Frenet { s: 0.0, d: 0.0 });
        for k in 0..=last {
            let (a, ux, uy, len) = self.segment(k);
            let mut t = (x - a.0) * ux + (y - a.1) * uy;
            if k > 0 {
                t = t.max(0.0);
            }
            if k < last {
                t = t.min(len);
            }
            let (px, py) = (a.0 + ux * t, a.1 + uy * t);
            let dist2 = (x - px).powi(2) + (y - py).powi(2);
            if dist2 < best.0 {
                best = (
                    dist2,
                    Frenet {
                        s: self.cum[k] + t,
                        d: ux * (y - a.1) - uy * (x - a.0),
                    },
                );
            }
        }
        best.1
    }

    /// Point at arc length `s` shifted `d` to the left, with the local heading.
    fn point(&self, s: f64, d: f64) -> (f64, f64, f64) {
        let last = self.pts.len() - 2;
        let k = match self.cum.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(i) => (i - 1).min(last),
            None => last,
        };
        let (a, ux, uy, _) = self.segment(k);
        let t = s - self.cum[k];
        (a.0 + ux * t - uy * d, a.1 + uy * t + ux * d, uy.atan2(ux))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelThresholds {
    pub very_critical_ttc: f64,
    pub very_critical_decel: f64,
    pub critical_ttc: f64,
    pub critical_decel: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            very_critical_ttc: 1.5,
            very_critical_decel: 6.0,
            critical_ttc: 3.0,
            critical_decel: 3.0,
        }
    }
}

/// Which rejection checks run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckSet {
    pub collision: bool,
    pub off_road: bool,
    pub kinematic: bool,
    pub validation: bool,
    /// Largest lateral distance from any lane centerline, meters.
    pub max_lane_offset: f64,
}

impl Default for CheckSet {
    fn default() -> Self {
        Self {
            collision: true,
            off_road: true,
            kinematic: true,
            validation: true,
            max_lane_offset: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dt: f64,
    pub history_steps: usize,
    pub future_steps: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    /// Probability that an attempt uses the highway preset rather than the urban grid.
    pub highway_fraction: f64,
    /// Base IDM parameters; `v_desired` is replaced per actor from the map speed limit.
    pub idm: IdmParams,
    pub dynamics: DynamicsConfig,
    /// Standard deviation of Gaussian noise added to commanded acceleration.
    pub control_noise: f64,
    pub labels: LabelThresholds,
    pub checks: CheckSet,
    pub metrics: MetricsConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            history_steps: 10,
            future_steps: 50,
            min_actors: 4,
            max_actors: 6,
            highway_fraction: 0.5,
            idm: IdmParams::highway(),
            dynamics: DynamicsConfig::default(),
            control_noise: 0.0,
            labels: LabelThresholds::default(),
            checks: CheckSet::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.history_steps == 0 || self.future_steps == 0 {
            return bad("history and future must each hold at least one step");
        }
        if self.min_actors < 2 || self.max_actors < self.min_actors {
            return bad("need 2 <= min_actors <= max_actors");
        }
        if !(0.0..=1.0).contains(&self.highway_fraction) {
            return bad("highway_fraction must lie in [0, 1]");
        }
        if self.control_noise.is_nan() || self.control_noise < 0.0 {
            return bad("control_noise must be non-negative");
        }
        self.idm.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    CutIn,
    HardBrake,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Lead,
    LeftNeighbor,
    RightNeighbor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeroSpec {
    pub maneuver: Maneuver,
    /// Seconds after the present at which the maneuver starts.
    pub trigger_time: f64,
    pub intensity: f64,
    pub target: Slot,
    /// Insert a new actor when the slot is empty.
    pub insert: bool,
}

/// Peak braking for a hard-brake hero.
pub fn hard_brake_decel(intensity: f64) -> f64 {
    1.5 + 6.5 * intensity.clamp(0.0, 1.0).powf(1.5)
}

/// Bumper gap ahead of the ego that a cut-in aims for.
pub fn cut_in_gap(intensity: f64) -> f64 {
    22.0 - 17.0 * intensity.clamp(0.0, 1.0)
}

/// How much slower than the ego a cut-in hero drives.
pub fn cut_in_deficit(intensity: f64) -> f64 {
    1.0 + 4.0 * intensity.clamp(0.0, 1.0)
}

const CUT_IN_DURATION: f64 = 3.0;
const BRAKE_RAMP: f64 = 0.6;

/// Minimum-jerk blend from 0 to 1 over `u` in [0, 1].
fn quintic(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

#[derive(Clone, Debug)]
enum Plan {
    Follow,
    HardBrake {
        trigger: usize,
        decel: f64,
        release_speed: Option<f64>,
        released: bool,
    },
    CutIn {
        trigger: usize,
        ego: usize,
        gap: f64,
        deficit: f64,
        from_d: Option<f64>,
        hold_speed: Option<f64>,
    },
}

#[derive(Clone, Debug)]
struct Agent {
    state: ActorState,
    lane: usize,
    idm: IdmParams,
    plan: Plan,
}

struct Sim<'a> {
    tracks: &'a [Track],
    cfg: &'a SynthConfig,
    agents: Vec<Agent>,
    noise: Option<Normal<f64>>,
}

impl Sim<'_> {
    fn lead_of(&self, i: usize, lane: usize) -> Option<(f64, f64)> {
        let me = &self.agents[i].state;
        let track = &self.tracks[lane];
        let own = track.project(me.x, me.y);
        let mut best: Option<(f64, f64)> = None;
        for (j, other) in self.agents.iter().enumerate() {
            if j == i {
                continue;
            }
            let o = &other.state;
            let f = track.project(o.x, o.y);
            if f.d.abs() > 0.5 * (me.width + o.width) + 0.3 {
                continue;
            }
            let ds = f.s - own.s;
            if ds <= 0.0 {
                continue;
            }
            let gap = ds - 0.5 * (me.length + o.length);
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, o.v * wrap_angle(o.yaw - me.yaw).cos()));
            }
        }
        best
    }

    fn idm_for(&self, i: usize, lane: usize, idm: &IdmParams) -> f64 {
        let v = self.agents[i].state.v;
        match self.lead_of(i, lane) {
            Some((gap, v_lead)) => idm_accel(gap.max(0.1), v, v_lead, idm, self.cfg.dynamics.decel_limit)
                .expect("IDM parameters validated with the config"),
            None => idm_free_accel(v, idm).max(-self.cfg.dynamics.decel_limit),
        }
    }

    fn pursuit(&self, i: usize, lane: usize, offset: impl Fn(f64) -> f64) -> f64 {
        let st = &self.agents[i].state;
        let track = &self.tracks[lane];
        let f = track.project(st.x, st.y);
        let look = (0.8 * st.v.abs() + 4.0).clamp(5.0, 30.0);
        let ahead_time = look / st.v.abs().max(1.0);
        let (tx, ty, _) = track.point(f.s + look, offset(ahead_time));
        let rel = relative_pose(&st.pose(), &Pose2::new(tx, ty, 0.0));
        let dist = rel.x.hypot(rel.y).max(1e-6);
        let wb = self.cfg.dynamics.wheelbase(st);
        let alpha = rel.y.atan2(rel.x);
        (2.0 * wb * alpha.sin() / dist).atan()
    }

    fn frenet(&self, i: usize, lane: usize) -> Frenet {
        let st = &self.agents[i].state;
        self.tracks[lane].project(st.x, st.y)
    }

    fn action(&mut self, i: usize, k: usize) -> Action {
        let dt = self.cfg.dt;
        let agent = self.agents[i].clone();
        let lane = agent.lane;
        let v = agent.state.v;
        let (accel, steer) = match agent.plan {
            Plan::Follow => (self.idm_for(i, lane, &agent.idm), self.pursuit(i, lane, |_| 0.0)),
            Plan::HardBrake {
                trigger,
                decel,
                release_speed,
                released,
            } => {
                let follow = self.idm_for(i, lane, &agent.idm);
                let steer = self.pursuit(i, lane, |_| 0.0);
                if k < trigger || released {
                    (follow, steer)
                } else {
                    let release = release_speed.unwrap_or(v * (0.3 - 0.2 * (decel - 1.5) / 6.5).max(0.05));
                    if v <= release {
                        self.agents[i].plan = Plan::HardBrake {
                            trigger,
                            decel,
                            release_speed: Some(release),
                            released: true,
                        };
                        (follow, steer)
                    } else {
                        self.agents[i].plan = Plan::HardBrake {
                            trigger,
                            decel,
                            release_speed: Some(release),
                            released: false,
                        };
                        let ramp = (((k - trigger + 1) as f64 * dt) / BRAKE_RAMP).min(1.0);
                        ((-decel * ramp).min(follow), steer)
                    }
                }
            }
            Plan::CutIn {
                trigger,
                ego,
                gap,
                deficit,
                from_d,
                hold_speed,
            } => {
                let ego_lane = self.agents[ego].lane;
                let ego_state = self.agents[ego].state;
                if k < trigger {
                    let me = self.frenet(i, ego_lane);
                    let them = self.frenet(ego, ego_lane);
                    let err = (me.s - them.s) - (gap + 0.5 * (agent.state.length + ego_state.length));
                    let v_ref = ego_state.v - deficit;
                    let position = (-0.5 * err - 1.2 * (v - v_ref)).clamp(-3.0, 2.0);
                    (
                        position.min(self.idm_for(i, lane, &agent.idm)),
                        self.pursuit(i, lane, |_| 0.0),
                    )
                } else {
                    let d0 = from_d.unwrap_or_else(|| self.frenet(i, ego_lane).d);
                    let hold = hold_speed.unwrap_or((ego_state.v - deficit).max(1.0));
                    self.agents[i].plan = Plan::CutIn {
                        trigger,
                        ego,
                        gap,
                        deficit,
                        from_d: Some(d0),
                        hold_speed: Some(hold),
                    };
                    self.agents[i].lane = ego_lane;
                    let elapsed = (k - trigger) as f64 * dt;
                    let steer = self.pursuit(i, ego_lane, |ahead| {
                        d0 * (1.0 - quintic((elapsed + ahead) / CUT_IN_DURATION))
                    });
                    let accel = (hold - v).clamp(-3.0, 2.0).min(self.idm_for(i, ego_lane, &agent.idm));
                    (accel, steer)
                }
            }
        };
        self.finish(accel, steer, v)
    }

    fn finish(&self, accel: f64, steer: f64, v: f64) -> Action {
        // Never reverse: stopping is the hardest allowed outcome.
        let accel = accel.max(-v / self.cfg.dt);
        self.cfg.dynamics.clamp(Action { accel, steer })
    }
}

impl Sim<'_> {
    /// Runs `steps` transitions; returns the states after each one.
    fn run(&mut self, steps: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<ActorState>>, SynthError> {
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps {
            let mut actions: Vec<Action> = (0..self.agents.len()).map(|i| self.action(i, k)).collect();
            if let Some(noise) = self.noise {
                for (a, ag) in actions.iter_mut().zip(&self.agents) {
                    let noisy = a.accel + noise.sample(rng);
                    *a = self.cfg.dynamics.clamp(Action {
                        accel: noisy.max(-ag.state.v / self.cfg.dt),
                        steer: a.steer,
                    });
                }
            }
            for (ag, a) in self.agents.iter_mut().zip(&actions) {
                ag.state = step(&ag.state, a, self.cfg.dt, &self.cfg.dynamics)?;
            }
            out.push(self.agents.iter().map(|a| a.state).collect());
        }
        Ok(out)
    }
}

fn track_index(tracks: &[Track], lane_id: u32) -> Option<usize> {
    tracks.iter().position(|t| t.id == lane_id)
}

fn preset_of(map: &LaneGraph) -> MapPreset {
    if map.lanes().len() > 3 {
        MapPreset::UrbanGrid
    } else {
        MapPreset::Highway
    }
}

/// Samples an actor footprint.
fn sample_car(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    (
        rng.gen_range(4.2..5.2),
        rng.gen_range(1.75..2.0),
        rng.gen_range(1.4..1.7),
    )
}

/// (lane, s, v, (length, width, height), v_desired) of an actor already placed.
type Placed = (usize, f64, f64, (f64, f64, f64), f64);

/// IDM lane-following traffic on `map`. Actor 0 is the ego; actor 1 starts as its lead.
pub fn gen_nominal(map: Arc<LaneGraph>, n_actors: usize, seed: u64, cfg: &SynthConfig) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    if n_actors < 2 {
        return Err(SynthError::Config(format!("need at least 2 actors, got {n_actors}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tracks = Track::from_graph(&map);
    let preset = preset_of(&map);
    let driving: Vec<usize> = preset
        .driving_lanes()
        .into_iter()
        .filter_map(|id| track_index(&tracks, id))
        .collect();
    let ego_lane = track_index(&tracks, preset.ego_lane())
        .or_else(|| driving.first().copied())
        .ok_or_else(|| SynthError::Config("map has no lanes".into()))?;
    let limit = map.speed_limit;
    let horizon = (cfg.history_steps + cfg.future_steps) as f64 * cfg.dt;
    let ego_s = 40.0 + 0.25 * limit;
    let max_start = MAP_LENGTH - 1.05 * limit * horizon - 20.0;
    if max_start <= ego_s {
        return Err(SynthError::Config(format!(
            "map too short for a {horizon:.1} s horizon"
        )));
    }

    let mut placed: Vec<Placed> = Vec::new();
    let fits = |placed: &[Placed], lane: usize, s: f64, v: f64, len: f64| {
        placed.iter().all(|&(l, s2, v2, dims, _)| {
            if l != lane {
                return true;
            }
            let (rear_v, ds) = if s2 > s { (v, s2 - s) } else { (v2, s - s2) };
            ds - 0.5 * (len + dims.0) >= cfg.idm.min_gap + cfg.idm.time_headway * rear_v
        })
    };
    for k in 0..n_actors {
        let mut ok = false;
        for _ in 0..200 {
            let v_des = limit * rng.gen_range(0.9..1.05);
            let v = v_des * rng.gen_range(0.75..0.95);
            let dims = sample_car(&mut rng);
            let (lane, s) = match k {
                0 => (ego_lane, ego_s),
                1 => {
                    let need = cfg.idm.min_gap + cfg.idm.time_headway * placed[0].2 + 0.5 * (dims.0 + placed[0].3 .0);
                    (ego_lane, ego_s + need + rng.gen_range(2.0..25.0))
                }
                _ => (
                    *driving.choose(&mut rng).unwrap(),
                    (ego_s + rng.gen_range(-35.0..60.0)).clamp(10.0, max_start),
                ),
            };
            if fits(&placed, lane, s, v, dims.0) {
                placed.push((lane, s, v, dims, v_des));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SynthError::Placement(n_actors));
        }
    }

    let agents: Vec<Agent> = placed
        .iter()
        .map(|&(lane, s, v, (length, width, height), v_des)| {
            let (x, y, yaw) = tracks[lane].point(s, 0.0);
            Agent {
                state: ActorState {
                    x,
                    y,
                    z: 0.0,
                    yaw: wrap_angle(yaw),
                    v,
                    length,
                    width,
                    height,
                },
                lane,
                idm: IdmParams {
                    v_desired: v_des,
                    ..cfg.idm
                },
                plan: Plan::Follow,
            }
        })
        .collect();
    let initial: Vec<ActorState> = agents.iter().map(|a| a.state).collect();
    let mut sim = Sim {
        tracks: &tracks,
        cfg,
        agents,
        noise: noise_dist(cfg.control_noise),
    };
    let steps = cfg.history_steps - 1 + cfg.future_steps;
    let mut frames = vec![initial];
    frames.extend(sim.run(steps, &mut rng)?);
    let future = frames.split_off(cfg.history_steps);
    Ok(Scenario {
        id: format!("nominal-{seed:016x}"),
        map,
        actors: (0..n_actors as u32).collect(),
        history: frames,
        future,
        dt: cfg.dt,
        ego: 0,
        source: Source::SimNominal,
        label: ManeuverLabel::Nominal,
    })
}

fn noise_dist(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma validated non-negative"))
}

/// Desired speed recovered from an observed state: at least the typical cruising speed.
fn estimated_desired_speed(v: f64, limit: f64) -> f64 {
    v.clamp(0.9 * limit, 1.05 * limit)
}

/// Lane index an actor is driving in and its offset from that lane.
fn nearest_track(tracks: &[Track], driving: &[usize], s: &ActorState) -> (usize, Frenet) {
    driving
        .iter()
        .map(|&l| (l, tracks[l].project(s.x, s.y)))
        .min_by(|a, b| a.1.d.abs().total_cmp(&b.1.d.abs()))
        .expect("at least one driving lane")
}

/// Neighbor lane of `lane` on the given side, looked up through the graph edges.
fn neighbor_track(map: &LaneGraph, tracks: &[Track], lane: usize, left: bool) -> Option<usize> {
    let id = tracks[lane].id;
    let edges = if left { &map.left } else { &map.right };
    let &(_, b) = edges.iter().find(|&&(a, _)| map.nodes[a].lane_id == id)?;
    track_index(tracks, map.nodes[b].lane_id)
}

/// Re-simulates the future with a scripted hero; every other actor reacts through IDM.
pub fn inject_hero(s: &Scenario, spec: &HeroSpec, seed: u64, cfg: &SynthConfig) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    let horizon = s.future.len() as f64 * s.dt;
    if !(spec.trigger_time > 0.0 && spec.trigger_time <= horizon) {
        return Err(SynthError::Config(format!(
            "trigger time {} outside the future horizon (0, {horizon}]",
            spec.trigger_time
        )));
    }
    if !(0.0..=1.0).contains(&spec.intensity) {
        return Err(SynthError::Config(format!(
            "intensity {} outside [0, 1]",
            spec.intensity
        )));
    }
    let ego = s
        .ego_index()
        .ok_or_else(|| SynthError::Injection("scenario has no ego".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SynthConfig { dt: s.dt, ..*cfg };
    let tracks = Track::from_graph(&s.map);
    let preset = preset_of(&s.map);
    let driving: Vec<usize> = preset
        .driving_lanes()
        .into_iter()
        .filter_map(|id| track_index(&tracks, id))
        .collect();
    let limit = s.map.speed_limit;
    let now = s.current();
    let mut actors = s.actors.clone();
    let mut history = s.history.clone();
    let mut agents: Vec<Agent> = now
        .iter()
        .map(|st| Agent {
            state: *st,
            lane: nearest_track(&tracks, &driving, st).0,
            idm: IdmParams {
                v_desired: estimated_desired_speed(st.v, limit),
                ..cfg.idm
            },
            plan: Plan::Follow,
        })
        .collect();
    let ego_lane = agents[ego].lane;
    let ego_s = tracks[ego_lane].project(now[ego].x, now[ego].y).s;
    let slot_lane = match spec.target {
        Slot::Lead => Some(ego_lane),
        Slot::LeftNeighbor => neighbor_track(&s.map, &tracks, ego_lane, true),
        Slot::RightNeighbor => neighbor_track(&s.map, &tracks, ego_lane, false),
    }
    .ok_or_else(|| SynthError::Injection(format!("no lane for slot {:?}", spec.target)))?;
    let trigger = ((spec.trigger_time / s.dt).round() as usize).max(1) - 1;

    let hero = match spec.maneuver {
        Maneuver::HardBrake => {
            let lead = (0..agents.len())
                .filter(|&j| j != ego && agents[j].lane == slot_lane)
                .map(|j| (j, tracks[slot_lane].project(now[j].x, now[j].y).s - ego_s))
                .filter(|&(_, ds)| ds > 0.0 && ds < 80.0)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let (j, _) = lead.ok_or_else(|| SynthError::Injection("no actor ahead in the slot lane".into()))?;
            agents[j].plan = Plan::HardBrake {
                trigger,
                decel: hard_brake_decel(spec.intensity),
                release_speed: None,
                released: false,
            };
            j
        }
        Maneuver::CutIn => {
            if spec.target == Slot::Lead {
                return Err(SynthError::Injection("a cut-in needs a neighbor slot".into()));
            }
            let gap = cut_in_gap(spec.intensity);
            let deficit = cut_in_deficit(spec.intensity);
            let existing = (0..agents.len())
                .filter(|&j| j != ego && agents[j].lane == slot_lane)
                .map(|j| (j, tracks[slot_lane].project(now[j].x, now[j].y).s - ego_s))
                .filter(|&(_, ds)| (-5.0..45.0).contains(&ds))
                .min_by(|a, b| (a.1 - gap).abs().total_cmp(&(b.1 - gap).abs()));
            let j = match existing {
                Some((j, _)) => j,
                None if spec.insert => {
                    let (length, width, height) = sample_car(&mut rng);
                    let ego_state = now[ego];
                    let v = (ego_state.v - deficit).max(1.0);
                    let hero_s = ego_s + gap + 0.5 * (length + ego_state.length);
                    let clear = (0..agents.len()).all(|j| {
                        let f = tracks[slot_lane].project(now[j].x, now[j].y);
                        f.d.abs() > 0.5 * (width + now[j].width) + 0.3
                            || (f.s - hero_s).abs() - 0.5 * (length + now[j].length) > cfg.idm.min_gap + 3.0
                    });
                    if !clear {
                        return Err(SynthError::Injection("no room to insert a hero".into()));
                    }
                    let (x, y, yaw) = tracks[slot_lane].point(hero_s, 0.0);
                    let hero_now = ActorState {
                        x,
                        y,
                        z: 0.0,
                        yaw: wrap_angle(yaw),
                        v,
                        length,
                        width,
                        height,
                    };
                    let h = history.len();
                    for (k, row) in history.iter_mut().enumerate() {
                        let back = (h - 1 - k) as f64 * s.dt * v;
                        let (bx, by, _) = tracks[slot_lane].point(hero_s - back, 0.0);
                        row.push(ActorState {
                            x: bx,
                            y: by,
                            ..hero_now
                        });
                    }
                    actors.push(actors.iter().max().map_or(0, |m| m + 1));
                    agents.push(Agent {
                        state: hero_now,
                        lane: slot_lane,
                        idm: IdmParams {
                            v_desired: estimated_desired_speed(v, limit),
                            ..cfg.idm
                        },
                        plan: Plan::Follow,
                    });
                    agents.len() - 1
                }
                None => return Err(SynthError::Injection("slot is empty and insertion is disabled".into())),
            };
            agents[j].plan = Plan::CutIn {
                trigger,
                ego,
                gap,
                deficit,
                from_d: None,
                hold_speed: None,
            };
            j
        }
    };
    debug_assert!(hero != ego);

    let mut sim = Sim {
        tracks: &tracks,
        cfg: &cfg,
        agents,
        noise: noise_dist(cfg.control_noise),
    };
    let future = sim.run(s.future.len(), &mut rng)?;
    Ok(Scenario {
        id: format!("{}-hero", s.id),
        actors,
        history,
        future,
        source: Source::SimCritical,
        ..s.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Generation,
    Injection,
    Invalid,
    Collision,
    OffRoad,
    Kinematic,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Generation => "generation",
            RejectReason::Injection => "injection",
            RejectReason::Invalid => "invalid",
            RejectReason::Collision => "collision",
            RejectReason::OffRoad => "off_road",
            RejectReason::Kinematic => "kinematic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Accept,
    Reject { reason: RejectReason, detail: String },
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Largest implied |acceleration| over the whole scenario, from both the
/// recorded speeds and the displacement between consecutive positions.
pub fn max_implied_accel(s: &Scenario) -> f64 {
    let frames: Vec<&Vec<ActorState>> = s.history.iter().chain(&s.future).collect();
    let mut worst: f64 = 0.0;
    for i in 0..s.n_actors() {
        let speeds: Vec<f64> = frames
            .windows(2)
            .map(|w| (w[1][i].x - w[0][i].x).hypot(w[1][i].y - w[0][i].y) / s.dt)
            .collect();
        for w in frames.windows(2) {
            worst = worst.max(((w[1][i].v - w[0][i].v) / s.dt).abs());
        }
        for w in speeds.windows(2) {
            worst = worst.max(((w[1] - w[0]) / s.dt).abs());
        }
    }
    worst
}

pub fn reject(s: &Scenario, checks: &CheckSet, cfg: &SynthConfig) -> Verdict {
    let no = |reason, detail: String| Verdict::Reject { reason, detail };
    if checks.validation {
        let opts = ValidationOptions {
            check_collisions: false,
            ..Default::default()
        };
        if let Some(issue) = validate_scenario_with(s, &opts).issues.first() {
            return no(RejectReason::Invalid, issue.message.clone());
        }
    }
    if checks.collision {
        for (t, row) in s.future.iter().enumerate() {
            for i in 0..row.len() {
                for j in i + 1..row.len() {
                    let iou = box_iou(&row[i], &row[j]);
                    if iou > cfg.metrics.iou_threshold {
                        return no(
                            RejectReason::Collision,
                            format!(
                                "actors {} and {} overlap at step {} (IOU {iou:.3})",
                                s.actors[i],
                                s.actors[j],
                                t + 1
                            ),
                        );
                    }
                }
            }
        }
    }
    if checks.off_road {
        for row in s.history.iter().chain(&s.future) {
            for (st, id) in row.iter().zip(&s.actors) {
                let d = s.map.distance_to_lanes(st.x, st.y);
                if d > checks.max_lane_offset {
                    return no(RejectReason::OffRoad, format!("actor {id} is {d:.2} m from every lane"));
                }
            }
        }
    }
    if checks.kinematic {
        let a = max_implied_accel(s);
        if a > cfg.dynamics.decel_limit {
            return no(RejectReason::Kinematic, format!("implied acceleration {a:.2} m/s^2"));
        }
    }
    Verdict::Accept
}

/// Hardest deceleration in the future (including the step out of the present), m/s^2.
pub fn max_decel(s: &Scenario) -> f64 {
    let frames: Vec<&Vec<ActorState>> = s.history.last().into_iter().chain(&s.future).collect();
    let mut worst: f64 = 0.0;
    for w in frames.windows(2) {
        for (a, b) in w[0].iter().zip(w[1].iter()) {
            worst = worst.max((a.v - b.v) / s.dt);
        }
    }
    worst
}

pub fn label_scenario(s: &Scenario, th: &LabelThresholds, metrics: &MetricsConfig) -> ManeuverLabel {
    let ttc = min_sttc(s, metrics).unwrap_or(metrics.ttc_cap);
    let decel = max_decel(s);
    if ttc < th.very_critical_ttc || decel > th.very_critical_decel {
        ManeuverLabel::VerySafetyCritical
    } else if ttc < th.critical_ttc || decel > th.critical_decel {
        ManeuverLabel::SafetyCritical
    } else {
        ManeuverLabel::Nominal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    SimNominal,
    /// Most intense hero maneuvers.
    SimAggressive,
    /// Moderate maneuvers under tighter kinematic limits.
    SimTuned,
    /// Stand-in for logged safety-critical data: different driver population
    /// and road mix, milder maneuvers, noisy control.
    PseudoReal,
}

impl PoolKind {
    pub const ALL: [PoolKind; 4] = [
        PoolKind::SimNominal,
        PoolKind::SimAggressive,
        PoolKind::SimTuned,
        PoolKind::PseudoReal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::SimNominal => "sim_nominal",
            PoolKind::SimAggressive => "sim_aggressive",
            PoolKind::SimTuned => "sim_tuned",
            PoolKind::PseudoReal => "pseudo_real",
        }
    }

    pub fn source(self) -> Source {
        match self {
            PoolKind::SimNominal => Source::SimNominal,
            PoolKind::SimAggressive | PoolKind::SimTuned => Source::SimCritical,
            PoolKind::PseudoReal => Source::RealCritical,
        }
    }

    pub fn profile(self) -> PoolProfile {
        match self {
            PoolKind::SimNominal => PoolProfile {
                kind: self,
                hero: None,
                highway_fraction: None,
                time_headway: None,
                control_noise: 0.0,
            },
            PoolKind::SimAggressive => PoolProfile {
                kind: self,
                hero: Some(HeroSampling {
                    intensity: (0.7, 1.0),
                    trigger: (0.2, 1.2),
                    cut_in_fraction: 0.5,
                }),
                highway_fraction: None,
                time_headway: None,
                control_noise: 0.0,
            },
            PoolKind::SimTuned => PoolProfile {
                kind: self,
                hero: Some(HeroSampling {
                    intensity: (0.3, 0.7),
                    trigger: (0.2, 1.2),
                    cut_in_fraction: 0.5,
                }),
                highway_fraction: None,
                time_headway: None,
                control_noise: 0.0,
            },
            PoolKind::PseudoReal => PoolProfile {
                kind: self,
                hero: Some(HeroSampling {
                    intensity: (0.35, 0.85),
                    trigger: (0.2, 1.2),
                    cut_in_fraction: 0.7,
                }),
                highway_fraction: Some(0.2),
                time_headway: Some(1.2),
                control_noise: 0.3,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeroSampling {
    pub intensity: (f64, f64),
    pub trigger: (f64, f64),
    pub cut_in_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolProfile {
    pub kind: PoolKind,
    pub hero: Option<HeroSampling>,
    /// Overrides the config's map mix.
    pub highway_fraction: Option<f64>,
    pub time_headway: Option<f64>,
    pub control_noise: f64,
}

impl PoolProfile {
    fn sim_config(&self, base: &SynthConfig) -> SynthConfig {
        SynthConfig {
            highway_fraction: self.highway_fraction.unwrap_or(base.highway_fraction),
            idm: IdmParams {
                time_headway: self.time_headway.unwrap_or(base.idm.time_headway),
                ..base.idm
            },
            control_noise: base.control_noise.max(self.control_noise),
            ..*base
        }
    }

    fn sample_hero(&self, h: &HeroSampling, rng: &mut ChaCha8Rng, horizon: f64) -> HeroSpec {
        let maneuver = if rng.gen_bool(h.cut_in_fraction) {
            Maneuver::CutIn
        } else {
            Maneuver::HardBrake
        };
        let target = match maneuver {
            Maneuver::HardBrake => Slot::Lead,
            Maneuver::CutIn if rng.gen_bool(0.5) => Slot::LeftNeighbor,
            Maneuver::CutIn => Slot::RightNeighbor,
        };
        HeroSpec {
            maneuver,
            trigger_time: rng.gen_range(h.trigger.0..=h.trigger.1).min(horizon),
            intensity: rng.gen_range(h.intensity.0..=h.intensity.1),
            target,
            insert: true,
        }
    }
}

/// One generation attempt: nominal traffic, an optional hero, checks and labelling.
pub fn attempt(
    profile: &PoolProfile,
    master_seed: u64,
    index: u64,
    base: &SynthConfig,
) -> Result<Scenario, (RejectReason, String)> {
    let cfg = profile.sim_config(base);
    let mut rng = stream_rng(master_seed, index);
    let preset = if rng.gen_bool(cfg.highway_fraction) {
        MapPreset::Highway
    } else {
        MapPreset::UrbanGrid
    };
    let map = Arc::new(preset.build());
    let n = rng.gen_range(cfg.min_actors..=cfg.max_actors);
    let mut s = gen_nominal(map.clone(), n, rng.gen(), &cfg).map_err(|e| (RejectReason::Generation, e.to_string()))?;
    if let Some(h) = &profile.hero {
        let spec = profile.sample_hero(h, &mut rng, cfg.future_steps as f64 * cfg.dt);
        let mut hero_spec = spec;
        if preset == MapPreset::UrbanGrid && spec.target == Slot::RightNeighbor {
            hero_spec.target = Slot::LeftNeighbor;
        }
        s = inject_hero(&s, &hero_spec, rng.gen(), &cfg).map_err(|e| (RejectReason::Injection, e.to_string()))?;
    }
    if let Verdict::Reject { reason, detail } = reject(&s, &cfg.checks, &cfg) {
        return Err((reason, detail));
    }
    s.id = format!("{}-{index:06}", profile.kind.as_str());
    s.source = profile.kind.source();
    s.label = label_scenario(&s, &cfg.labels, &cfg.metrics);
    Ok(s)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionLog {
    pub attempts: usize,
    pub accepted: usize,
    pub by_reason: BTreeMap<RejectReason, usize>,
}

impl RejectionLog {
    pub fn rejected(&self) -> usize {
        self.by_reason.values().sum()
    }
}

#[derive(Clone, Debug)]
pub struct Pool {
    pub kind: PoolKind,
    pub scenarios: Vec<Scenario>,
    pub log: RejectionLog,
}

/// Generates `n` accepted scenarios. Attempts are evaluated in chunks (in
/// parallel when `parallel`) and accepted in attempt order, so the result does
/// not depend on scheduling.
pub fn generate_pool(
    kind: PoolKind,
    n: usize,
    master_seed: u64,
    cfg: &SynthConfig,
    parallel: bool,
) -> Result<Pool, SynthError> {
    cfg.validate()?;
    let profile = kind.profile();
    let max_attempts = 50 * n.max(1) + 100;
    let chunk = 32usize;
    let mut log = RejectionLog::default();
    let mut scenarios = Vec::with_capacity(n);
    let mut next = 0u64;
    while scenarios.len() < n {
        if log.attempts >= max_attempts {
            return Err(SynthError::Config(format!(
                "pool {} accepted only {} of {n} after {} attempts",
                kind.as_str(),
                scenarios.len(),
                log.attempts
            )));
        }
        let ids: Vec<u64> = (next..next + chunk as u64).collect();
        next += chunk as u64;
        let results: Vec<_> = if parallel {
            ids.par_iter()
                .map(|&i| attempt(&profile, master_seed, i, cfg))
                .collect()
        } else {
            ids.iter().map(|&i| attempt(&profile, master_seed, i, cfg)).collect()
        };
        for r in results {
            if scenarios.len() >= n {
                break;
            }
            log.attempts += 1;
            match r {
                Ok(s) => {
                    log.accepted += 1;
                    scenarios.push(s);
                }
                Err((reason, _)) => *log.by_reason.entry(reason).or_default() += 1,
            }
        }
    }
    Ok(Pool { kind, scenarios, log })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub alpha_real: f64,
    pub seed: u64,
    pub upsample_real: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            alpha_real: 0.5,
            seed: 0,
            upsample_real: 1,
        }
    }
}

/// Infinite stream over two pools. Each draw picks the real pool with
/// probability `alpha_real`; within a pool, items come from shuffled epochs,
/// with the real pool repeated `upsample_real` times per epoch.
pub struct MixSampler<'a> {
    real: &'a [Scenario],
    sim: &'a [Scenario],
    alpha: f64,
    upsample: usize,
    rng: ChaCha8Rng,
    real_order: Vec<usize>,
    sim_order: Vec<usize>,
}

impl<'a> MixSampler<'a> {
    pub fn new(real: &'a [Scenario], sim: &'a [Scenario], cfg: &MixConfig) -> Result<Self, SynthError> {
        if !(0.0..=1.0).contains(&cfg.alpha_real) {
            return Err(SynthError::Config(format!(
                "alpha_real {} outside [0, 1]",
                cfg.alpha_real
            )));
        }
        if cfg.upsample_real == 0 {
            return Err(SynthError::Config("upsample_real must be positive".into()));
        }
        if cfg.alpha_real > 0.0 && real.is_empty() {
            return Err(SynthError::Config("real pool is empty but alpha_real > 0".into()));
        }
        if cfg.alpha_real < 1.0 && sim.is_empty() {
            return Err(SynthError::Config("sim pool is empty but alpha_real < 1".into()));
        }
        Ok(Self {
            real,
            sim,
            alpha: cfg.alpha_real,
            upsample: cfg.upsample_real,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            real_order: Vec::new(),
            sim_order: Vec::new(),
        })
    }
}

impl<'a> Iterator for MixSampler<'a> {
    type Item = &'a Scenario;

    fn next(&mut self) -> Option<&'a Scenario> {
        let from_real = self.rng.gen::<f64>() < self.alpha;
        let (pool, order, reps) = if from_real {
            (self.real, &mut self.real_order, self.upsample)
        } else {
            (self.sim, &mut self.sim_order, 1)
        };
        if order.is_empty() {
            *order = (0..reps).flat_map(|_| 0..pool.len()).collect();
            order.shuffle(&mut self.rng);
        }
        order.pop().map(|i| &pool[i])
    }
}
