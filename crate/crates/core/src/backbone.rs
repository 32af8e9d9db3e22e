//! Scene transformer: per-timestep actor tokens refined by interleaved
//! actor-to-map, actor-to-actor and actor-to-time attention.
//!
//! Every pose is expressed in one fixed frame (the ego pose at the scenario's
//! present). Attention between tokens receives the key's pose relative to the
//! query's pose twice: as an additive per-head logit bias from a small MLP,
//! and as a linear term added to the value. Map tokens are built only from
//! relative lane geometry, so the whole trunk is invariant to rigid motions
//! of the scene.
//!
//! Actor-actor and actor-map attention use fixed key sets: the `k` nearest
//! candidates at the anchor timestep, ordered by distance. The order depends
//! only on geometry, never on actor indices, so permuting actors permutes the
//! output exactly.

use std::rc::Rc;

use rand::Rng;
use scenflow_tensor::nn::{LayerNorm, Linear, Mlp};
use scenflow_tensor::{ParamStore, Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{relative_pose, wrap_angle, LaneGraph, Pose2, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("empty lane graph")]
    EmptyMap,
    #[error("sinusoidal embedding needs an even dimension, got {0}")]
    OddDimension(usize),
    #[error("scene shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub top_k_actors: usize,
    pub top_k_map_nodes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            top_k_actors: 8,
            top_k_map_nodes: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(BackboneError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.top_k_actors == 0 || self.top_k_map_nodes == 0 {
            return Err(BackboneError::Config("top-k sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Multiplier on the denoising time before the sinusoidal embedding.
pub const PE_TIME_SCALE: f64 = 100.0;

/// Interleaved `[sin, cos]` pairs of `t * PE_TIME_SCALE` at geometrically spaced
/// frequencies `10000^(-2i/dim)`.
pub fn sinusoidal_pe(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(BackboneError::OddDimension(dim));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let (s, c) = (t * PE_TIME_SCALE * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

pub const STATE_FEATURES: usize = 9;
pub const MAP_FEATURES: usize = 13;
const POS_SCALE: f64 = 30.0;
const REL_SCALE: f64 = 20.0;
const REL_SPEED_SCALE: f64 = 10.0;
/// Width of the pairwise relative features fed to attention.
pub const REL_FEATURES: usize = 6;
const SPEED_SCALE: f64 = 10.0;
const TIME_SCALE: f64 = 5.0;

/// Per-node features from relative lane geometry: curvature proxy, then the
/// successor, predecessor, left and right neighbor offsets in the node's frame,
/// each followed by a presence flag.
pub fn map_features(map: &LaneGraph) -> Vec<[f64; MAP_FEATURES]> {
    let n = map.nodes.len();
    let mut succ = vec![None; n];
    let mut pred = vec![None; n];
    let mut left = vec![None; n];
    let mut right = vec![None; n];
    for &(a, b) in &map.successors {
        succ[a] = Some(b);
        pred[b] = Some(a);
    }
    for &(a, b) in &map.left {
        left[a] = Some(b);
    }
    for &(a, b) in &map.right {
        right[a] = Some(b);
    }
    let pose = |i: usize| Pose2::new(map.nodes[i].x, map.nodes[i].y, map.nodes[i].heading);
    (0..n)
        .map(|i| {
            let me = pose(i);
            let mut f = [0.0; MAP_FEATURES];
            if let (Some(p), Some(s)) = (pred[i], succ[i]) {
                f[0] = wrap_angle(map.nodes[s].heading - map.nodes[p].heading) / (2.0 * map.spacing) * 10.0;
            }
            for (k, (other, scale)) in [
                (succ[i], map.spacing),
                (pred[i], map.spacing),
                (left[i], 3.5),
                (right[i], 3.5),
            ]
            .into_iter()
            .enumerate()
            {
                if let Some(o) = other {
                    let r = relative_pose(&me, &pose(o));
                    f[1 + 3 * k] = r.x / scale;
                    f[2 + 3 * k] = r.y / scale;
                    f[3 + 3 * k] = 1.0;
                }
            }
            f
        })
        .collect()
}

/// Length resolution, in meters, of top-k distance comparisons.
pub const DISTANCE_RESOLUTION: f64 = 1e-6;

fn distance_key(d: f64) -> i64 {
    (d / DISTANCE_RESOLUTION).round() as i64
}

/// A lane graph re-expressed in a scene frame, with node features precomputed.
#[derive(Clone, Debug)]
pub struct MapFrame {
    /// (x, y, heading) of every node in the frame.
    pub poses: Vec<(f64, f64, f64)>,
    pub features: Vec<[f64; MAP_FEATURES]>,
}

impl MapFrame {
    pub fn new(map: &LaneGraph, frame: &Pose2) -> Result<Self> {
        if map.nodes.is_empty() {
            return Err(BackboneError::EmptyMap);
        }
        let poses = map
            .nodes
            .iter()
            .map(|n| {
                let r = relative_pose(frame, &Pose2::new(n.x, n.y, n.heading));
                (r.x, r.y, r.yaw)
            })
            .collect();
        Ok(Self {
            poses,
            features: map_features(map),
        })
    }

    /// The `k` nodes nearest to `(x, y)`, nearest first (ties by node index).
    /// Distances are compared at `DISTANCE_RESOLUTION`, so mirror-symmetric
    /// nodes tie regardless of the frame they are expressed in.
    pub fn nearest(&self, x: f64, y: f64, k: usize) -> Vec<usize> {
        let mut d: Vec<(i64, usize)> = self
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| (distance_key((p.0 - x).hypot(p.1 - y)), i))
            .collect();
        let k = k.min(d.len());
        if k < d.len() {
            d.select_nth_unstable(k);
            d.truncate(k);
        }
        d.sort_unstable();
        d.into_iter().map(|(_, i)| i).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MapEncoder {
    mlp: Mlp,
}

impl MapEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, &[MAP_FEATURES, d_model, d_model], rng),
        }
    }

    /// Tokens for the listed nodes, in the listed order.
    pub fn encode_nodes(&self, tape: &Tape, store: &ParamStore, map: &MapFrame, nodes: &[usize]) -> Result<Var> {
        let vals: Vec<f64> = nodes.iter().flat_map(|&i| map.features[i]).collect();
        let x = tape.constant(&[nodes.len(), MAP_FEATURES], vals)?;
        Ok(self.mlp.forward(tape, store, &x)?)
    }
}

/// One token per lane node, `[n_nodes, d_model]`.
pub fn encode_map(tape: &Tape, store: &ParamStore, encoder: &MapEncoder, map: &LaneGraph) -> Result<Var> {
    let frame = MapFrame::new(map, &Pose2::new(0.0, 0.0, 0.0))?;
    let all: Vec<usize> = (0..map.nodes.len()).collect();
    encoder.encode_nodes(tape, store, &frame, &all)
}

/// Actor-side inputs to one backbone pass.
pub struct SceneInput<'a> {
    /// `[N, Tw, 4]`: x, y, yaw, v per actor and timestep, in the scene frame.
    pub kin: Var,
    /// Per actor: length, width, and 1 for the ego else 0.
    pub statics: Vec<[f64; 3]>,
    /// Per timestep: seconds relative to the anchor.
    pub times: Vec<f64>,
    /// Timestep whose poses choose the attention key sets.
    pub anchor: usize,
    pub map: &'a MapFrame,
}

/// Ego pose at the present, the frame every backbone input is expressed in.
pub fn scene_frame(s: &Scenario) -> Result<Pose2> {
    let ego = s
        .ego_index()
        .ok_or_else(|| BackboneError::Shape(format!("scenario {} has no ego", s.id)))?;
    let now = s
        .current()
        .get(ego)
        .ok_or_else(|| BackboneError::Shape(format!("scenario {} has no history", s.id)))?;
    Ok(now.pose())
}

/// Actor kinematics of a scenario in a fixed frame, ready to feed a backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorWindow {
    pub n: usize,
    pub steps: usize,
    /// `[n, steps, 4]` row-major: x, y, yaw, v.
    pub kin: Vec<f64>,
    pub statics: Vec<[f64; 3]>,
    pub times: Vec<f64>,
    pub anchor: usize,
}

impl ActorWindow {
    /// History, optionally followed by the future, anchored at the present.
    pub fn from_scenario(s: &Scenario, frame: &Pose2, include_future: bool) -> Result<Self> {
        Self::with_future_stride(s, frame, if include_future { 1 } else { 0 })
    }

    /// History followed by every `stride`-th future step, counted back from the
    /// last one. `stride = 0` drops the future.
    pub fn with_future_stride(s: &Scenario, frame: &Pose2, stride: usize) -> Result<Self> {
        let n = s.n_actors();
        let h = s.history.len();
        if n == 0 || h == 0 {
            return Err(BackboneError::Shape(format!("scenario {} is empty", s.id)));
        }
        let ego = s.ego_index();
        let t_len = s.future.len();
        let mut rows: Vec<(f64, &Vec<_>)> = s
            .history
            .iter()
            .enumerate()
            .map(|(t, r)| (t as f64 - (h - 1) as f64, r))
            .collect();
        if stride > 0 {
            rows.extend(
                s.future
                    .iter()
                    .enumerate()
                    .filter(|(t, _)| (t_len - 1 - t).is_multiple_of(stride))
                    .map(|(t, r)| ((t + 1) as f64, r)),
            );
        }
        let steps = rows.len();
        let mut kin = vec![0.0; n * steps * 4];
        for (t, (_, row)) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(BackboneError::Shape(format!("scenario {} has ragged timesteps", s.id)));
            }
            for (i, a) in row.iter().enumerate() {
                let r = relative_pose(frame, &a.pose());
                kin[(i * steps + t) * 4..(i * steps + t) * 4 + 4].copy_from_slice(&[r.x, r.y, r.yaw, a.v]);
            }
        }
        let now = s.current();
        Ok(Self {
            n,
            steps,
            kin,
            statics: (0..n)
                .map(|i| [now[i].length, now[i].width, if Some(i) == ego { 1.0 } else { 0.0 }])
                .collect(),
            times: rows.iter().map(|(t, _)| t * s.dt).collect(),
            anchor: h - 1,
        })
    }

    pub fn input<'a>(&self, tape: &Tape, map: &'a MapFrame) -> Result<SceneInput<'a>> {
        Ok(SceneInput {
            kin: tape.constant(&[self.n, self.steps, 4], self.kin.clone())?,
            statics: self.statics.clone(),
            times: self.times.clone(),
            anchor: self.anchor,
            map,
        })
    }
}

/// Pre-norm multi-head attention with a residual connection. Keys are fixed
/// per query by a row pairing; relative-pose features, when present, bias the
/// logits and shift the values.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    ln: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    rel_bias: Option<Mlp>,
    rel_value: Option<Linear>,
    n_heads: usize,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, relative: bool, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, rng),
            rel_bias: relative.then(|| Mlp::new(store, &format!("{name}.bias"), &[REL_FEATURES, 16, cfg.n_heads], rng)),
            rel_value: relative
                .then(|| Linear::new(store, &format!("{name}.relv"), REL_FEATURES * cfg.n_heads, d, rng)),
            n_heads: cfg.n_heads,
        }
    }
}

/// Which rows attend to which: row `r` of the flattened `[M * k]` pairing is
/// query `q_rows[r]` against key `k_rows[r]`, grouped `k` per query.
struct Pairing {
    q_rows: Rc<[usize]>,
    k_rows: Rc<[usize]>,
    k: usize,
    rel: Option<Var>,
}

struct Heads {
    /// `[REL_FEATURES, REL_FEATURES * heads]`: copies the relative features once per head.
    tile: Var,
    scale: f64,
    n: usize,
}

impl Heads {
    fn new(tape: &Tape, d: usize, h: usize) -> Result<Self> {
        let f = REL_FEATURES;
        let mut tile = vec![0.0; f * f * h];
        for head in 0..h {
            for j in 0..f {
                tile[j * f * h + head * f + j] = 1.0;
            }
        }
        Ok(Self {
            tile: tape.constant(&[f, f * h], tile)?,
            scale: 1.0 / ((d / h) as f64).sqrt(),
            n: h,
        })
    }
}

impl AttentionLayer {
    /// Residual update of `x` (`[M, d]`) attending into `keys` (`[K, d]`, or `x` itself).
    fn apply(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: &Var,
        keys: Option<&Var>,
        p: &Pairing,
        heads: &Heads,
    ) -> Result<Var> {
        let xn = self.ln.forward(tape, store, x)?;
        let src = keys.unwrap_or(&xn);
        let q = self.wq.forward(tape, store, &xn)?;
        let k = self.wk.forward(tape, store, src)?;
        let v = self.wv.forward(tape, store, src)?;
        let mut logits = q
            .pair_scores(&k, p.q_rows.clone(), p.k_rows.clone(), heads.n)?
            .scale(heads.scale);
        if let (Some(rel), Some(bias)) = (&p.rel, &self.rel_bias) {
            logits = logits.add(&bias.forward(tape, store, rel)?)?;
        }
        let r = logits.shape()[0];
        let w = logits
            .reshape(&[r / p.k, p.k, heads.n])?
            .softmax(1)?
            .reshape(&[r, heads.n])?;
        let mut mixed = w.pair_mix(&v, p.k_rows.clone(), p.k)?;
        if let (Some(rel), Some(rv)) = (&p.rel, &self.rel_value) {
            let identity: Rc<[usize]> = (0..r).collect();
            let agg = w.pair_mix(&rel.matmul(&heads.tile)?, identity, p.k)?;
            mixed = mixed.add(&rv.forward(tape, store, &agg)?)?;
        }
        Ok(x.add(&self.wo.forward(tape, store, &mixed)?)?)
    }

    /// Residual update of `x` (`[M, d]`). Row `r` of the pairing sends query
    /// `q_rows[r]` to key `k_rows[r]`, `k` consecutive rows per query; keys come
    /// from `keys` or, when absent, from `x`. `rel` holds `[M * k, REL_FEATURES]` relative
    /// poses and is required exactly when the layer was built `relative`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: &Var,
        keys: Option<&Var>,
        q_rows: &[usize],
        k_rows: &[usize],
        k: usize,
        rel: Option<&Var>,
    ) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 2 || k == 0 || q_rows.len() != shape[0] * k || k_rows.len() != q_rows.len() {
            return Err(BackboneError::Shape(format!(
                "{} query rows and {} key rows for {shape:?} with k = {k}",
                q_rows.len(),
                k_rows.len()
            )));
        }
        if rel.is_some() != self.rel_bias.is_some() {
            return Err(BackboneError::Shape(
                "relative features must match the layer kind".into(),
            ));
        }
        let d = shape[1];
        let heads = Heads::new(tape, d, self.n_heads)?;
        let pairing = Pairing {
            q_rows: q_rows.into(),
            k_rows: k_rows.into(),
            k,
            rel: rel.cloned(),
        };
        self.apply(tape, store, x, keys, &pairing, &heads)
    }
}

#[derive(Clone, Debug)]
struct Block {
    map: AttentionLayer,
    actors: AttentionLayer,
    time: AttentionLayer,
    ffn_ln: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    embed: Mlp,
    blocks: Vec<Block>,
    out_ln: LayerNorm,
}

/// `(dx, dy, sin dyaw, cos dyaw, dvx, dvy)` of key poses relative to query poses, rows
/// `[R, 5]` of `(x, y, cos yaw, sin yaw, speed)`.
fn relative_features(q: &Var, k: &Var) -> Result<Var> {
    let col = |v: &Var, c: usize| v.slice(1, c, c + 1);
    let (qx, qy, qc, qs, qv) = (col(q, 0)?, col(q, 1)?, col(q, 2)?, col(q, 3)?, col(q, 4)?);
    let (kx, ky, kc, ks, kv) = (col(k, 0)?, col(k, 1)?, col(k, 2)?, col(k, 3)?, col(k, 4)?);
    let ddx = kx.sub(&qx)?;
    let ddy = ky.sub(&qy)?;
    let dx = qc.mul(&ddx)?.add(&qs.mul(&ddy)?)?.scale(1.0 / REL_SCALE);
    let dy = qc.mul(&ddy)?.sub(&qs.mul(&ddx)?)?.scale(1.0 / REL_SCALE);
    let sin = qc.mul(&ks)?.sub(&qs.mul(&kc)?)?;
    let cos = qc.mul(&kc)?.add(&qs.mul(&ks)?)?;
    let dvx = kv.mul(&cos)?.sub(&qv)?.scale(1.0 / REL_SPEED_SCALE);
    let dvy = kv.mul(&sin)?.scale(1.0 / REL_SPEED_SCALE);
    Ok(Var::concat(&[dx, dy, sin, cos, dvx, dvy], 1)?)
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let blocks = (0..cfg.n_blocks)
            .map(|b| Block {
                map: AttentionLayer::new(store, &format!("{name}.b{b}.map"), &cfg, true, rng),
                actors: AttentionLayer::new(store, &format!("{name}.b{b}.actor"), &cfg, true, rng),
                time: AttentionLayer::new(store, &format!("{name}.b{b}.time"), &cfg, false, rng),
                ffn_ln: LayerNorm::new(store, &format!("{name}.b{b}.ffn_ln"), d),
                ffn: Mlp::new(store, &format!("{name}.b{b}.ffn"), &[d, 2 * d, d], rng),
            })
            .collect();
        Ok(Self {
            cfg,
            embed: Mlp::new(store, &format!("{name}.embed"), &[STATE_FEATURES, d, d], rng),
            blocks,
            out_ln: LayerNorm::new(store, &format!("{name}.out_ln"), d),
        })
    }

    /// Per-actor features `[N, d_model]` read from each actor's last-timestep token.
    /// `cond`, if given, is a `[N, d_model]` token added at every timestep.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        map_encoder: &MapEncoder,
        scene: &SceneInput<'_>,
        cond: Option<&Var>,
    ) -> Result<Var> {
        let shape = scene.kin.shape();
        if shape.len() != 3 || shape[2] != 4 {
            return Err(BackboneError::Shape(format!(
                "kinematics must be [N, Tw, 4], got {shape:?}"
            )));
        }
        let (n, tw) = (shape[0], shape[1]);
        if n == 0 || tw == 0 || scene.statics.len() != n || scene.times.len() != tw || scene.anchor >= tw {
            return Err(BackboneError::Shape(format!(
                "{n} actors x {tw} steps with {} statics, {} times, anchor {}",
                scene.statics.len(),
                scene.times.len(),
                scene.anchor
            )));
        }
        let d = self.cfg.d_model;
        let m = n * tw;
        let row = |i: usize, t: usize| i * tw + t;
        let kin_vals = scene.kin.to_vec();
        let at = |i: usize, t: usize, c: usize| kin_vals[row(i, t) * 4 + c];

        // Token features.
        let kin = &scene.kin;
        let x = kin.slice(2, 0, 1)?.scale(1.0 / POS_SCALE);
        let y = kin.slice(2, 1, 2)?.scale(1.0 / POS_SCALE);
        let yaw = kin.slice(2, 2, 3)?;
        let (cos, sin) = (yaw.cos(), yaw.sin());
        let v = kin.slice(2, 3, 4)?.scale(1.0 / SPEED_SCALE);
        let statics: Vec<f64> = (0..n)
            .flat_map(|i| {
                let s = scene.statics[i];
                scene
                    .times
                    .iter()
                    .flat_map(move |&tau| [s[0] / 5.0, s[1] / 2.0, s[2], tau / TIME_SCALE])
            })
            .collect();
        let statics = tape.constant(&[n, tw, 4], statics)?;
        let feats = Var::concat(&[x, y, cos.clone(), sin.clone(), v, statics], 2)?.reshape(&[m, STATE_FEATURES])?;
        let mut tokens = self.embed.forward(tape, store, &feats)?;
        if let Some(c) = cond {
            if c.shape() != [n, d] {
                return Err(BackboneError::Shape(format!(
                    "conditioning must be [{n}, {d}], got {:?}",
                    c.shape()
                )));
            }
            let rows: Vec<usize> = (0..m).map(|r| r / tw).collect();
            tokens = tokens.add(&c.gather(rows)?)?;
        }
        let poses = Var::concat(&[kin.slice(2, 0, 2)?, cos, sin, kin.slice(2, 3, 4)?], 2)?.reshape(&[m, 5])?;

        // Actor-actor key sets: self first, then nearest others at the anchor.
        let anchor_pose = |i: usize| Pose2::new(at(i, scene.anchor, 0), at(i, scene.anchor, 1), at(i, scene.anchor, 2));
        let ka = (self.cfg.top_k_actors + 1).min(n);
        let sets: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let me = anchor_pose(i);
                let mut others: Vec<(i64, i64, i64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let r = relative_pose(&me, &anchor_pose(j));
                        (distance_key(r.x.hypot(r.y)), distance_key(r.x), distance_key(r.y), j)
                    })
                    .collect();
                others.sort_unstable();
                std::iter::once(i)
                    .chain(others.into_iter().map(|o| o.3))
                    .take(ka)
                    .collect()
            })
            .collect();
        let mut aq = Vec::with_capacity(m * ka);
        let mut ak = Vec::with_capacity(m * ka);
        for (i, set) in sets.iter().enumerate() {
            for t in 0..tw {
                for &j in set {
                    aq.push(row(i, t));
                    ak.push(row(j, t));
                }
            }
        }
        let aq: Rc<[usize]> = aq.into();
        let ak: Rc<[usize]> = ak.into();
        let actor_rel = relative_features(&poses.gather(aq.clone())?, &poses.gather(ak.clone())?)?;
        let actor_pairs = Pairing {
            q_rows: aq,
            k_rows: ak,
            k: ka,
            rel: Some(actor_rel),
        };

        // Actor-map key sets over the union of nearest nodes.
        let km = self.cfg.top_k_map_nodes.min(scene.map.poses.len());
        let near: Vec<Vec<usize>> = (0..n)
            .map(|i| scene.map.nearest(at(i, scene.anchor, 0), at(i, scene.anchor, 1), km))
            .collect();
        let mut union: Vec<usize> = near.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        let slot = |node: usize| union.binary_search(&node).expect("node drawn from the union");
        let map_tokens = map_encoder.encode_nodes(tape, store, scene.map, &union)?;
        let mut mq = Vec::with_capacity(m * km);
        let mut mk = Vec::with_capacity(m * km);
        let mut node_pose = Vec::with_capacity(m * km * 5);
        for (i, nodes) in near.iter().enumerate() {
            for t in 0..tw {
                for &node in nodes {
                    mq.push(row(i, t));
                    mk.push(slot(node));
                    let (nx, ny, nh) = scene.map.poses[node];
                    node_pose.extend([nx, ny, nh.cos(), nh.sin(), 0.0]);
                }
            }
        }
        let mq: Rc<[usize]> = mq.into();
        let node_pose = tape.constant(&[m * km, 5], node_pose)?;
        let map_rel = relative_features(&poses.gather(mq.clone())?, &node_pose)?;
        let map_pairs = Pairing {
            q_rows: mq,
            k_rows: mk.into(),
            k: km,
            rel: Some(map_rel),
        };

        // Actor-time: every timestep of the same actor.
        let mut tq = Vec::with_capacity(m * tw);
        let mut tk = Vec::with_capacity(m * tw);
        for i in 0..n {
            for t in 0..tw {
                for u in 0..tw {
                    tq.push(row(i, t));
                    tk.push(row(i, u));
                }
            }
        }
        let time_pairs = Pairing {
            q_rows: tq.into(),
            k_rows: tk.into(),
            k: tw,
            rel: None,
        };

        let heads = Heads::new(tape, d, self.cfg.n_heads)?;
        let mut h = tokens;
        for b in &self.blocks {
            h = b.map.apply(tape, store, &h, Some(&map_tokens), &map_pairs, &heads)?;
            h = b.actors.apply(tape, store, &h, None, &actor_pairs, &heads)?;
            h = b.time.apply(tape, store, &h, None, &time_pairs, &heads)?;
            let f = b.ffn.forward(tape, store, &b.ffn_ln.forward(tape, store, &h)?)?;
            h = h.add(&f)?;
        }
        let last: Vec<usize> = (0..n).map(|i| row(i, tw - 1)).collect();
        Ok(self.out_ln.forward(tape, store, &h.gather(last)?)?)
    }
}
