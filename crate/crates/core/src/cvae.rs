//! Conditional VAE over per-actor latents.
//!
//! The prior sees the history, the posterior sees history and future; both
//! share one map encoder. The decoder rolls the scene forward closed-loop:
//! every `replan_every` steps a backbone pass over the most recent states
//! emits the next block of bounded (accel, steer) actions per actor, and the
//! bicycle model integrates them on the tape so position errors reach every
//! earlier decision.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scenflow_tensor::nn::Linear;
use scenflow_tensor::{adam_step, clip_grad_norm, AdamState, ParamStore, Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{
    scene_frame, ActorWindow, Backbone, BackboneConfig, BackboneError, MapEncoder, MapFrame, SceneInput,
};
use crate::dynamics::{infer_actions, rollout, DynamicsConfig, DynamicsError};
use crate::scene::{Action, ActorState, Pose2, Scenario};

pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 2.0;
const CHECKPOINT_MAGIC: &str = "scenflow.cvae 1";

#[derive(Debug, Error)]
pub enum CvaeError {
    #[error("invalid cvae config: {0}")]
    Config(String),
    #[error("invalid scenario {id}: {msg}")]
    Scenario { id: String, msg: String },
    #[error("expected {expected} latents, got {got}")]
    LatentMismatch { expected: usize, got: usize },
    #[error("loss is not finite at step {step}")]
    Diverged { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

pub type Result<T> = std::result::Result<T, CvaeError>;

/// Smooth map of a raw head output into `(LOG_STD_MIN, LOG_STD_MAX)`.
pub fn squash_log_std(raw: f64) -> f64 {
    let mid = 0.5 * (LOG_STD_MIN + LOG_STD_MAX);
    let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
    mid + half * (raw / half).tanh()
}

fn squash_log_std_var(raw: &Var) -> Var {
    let mid = 0.5 * (LOG_STD_MIN + LOG_STD_MAX);
    let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
    raw.scale(1.0 / half).tanh().scale(half).add_scalar(mid)
}

/// Per-actor diagonal Gaussians, optionally with a drawn sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSet {
    pub mean: Vec<Vec<f64>>,
    pub log_std: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<Vec<Vec<f64>>>,
}

impl LatentSet {
    pub fn n_actors(&self) -> usize {
        self.mean.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }

    /// `sample = mean + exp(log_std) * noise`, one noise row per actor.
    pub fn reparameterize(&self, noise: &[Vec<f64>]) -> Result<LatentSet> {
        if noise.len() != self.n_actors() {
            return Err(CvaeError::LatentMismatch {
                expected: self.n_actors(),
                got: noise.len(),
            });
        }
        let mut sample = Vec::with_capacity(noise.len());
        for ((m, l), e) in self.mean.iter().zip(&self.log_std).zip(noise) {
            if e.len() != m.len() {
                return Err(CvaeError::LatentMismatch {
                    expected: m.len(),
                    got: e.len(),
                });
            }
            sample.push(m.iter().zip(l).zip(e).map(|((m, l), e)| m + l.exp() * e).collect());
        }
        Ok(LatentSet {
            sample: Some(sample),
            ..self.clone()
        })
    }

    /// Standard normal draws shaped like this set.
    pub fn draw_noise(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        standard_noise(self.n_actors(), self.dim(), rng)
    }
}

pub fn standard_noise(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// KL(N(mq, exp(lq)^2) || N(mp, exp(lp)^2)) for one dimension.
pub fn gaussian_kl(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    lp - lq + ((2.0 * lq).exp() + (mq - mp).powi(2)) / (2.0 * (2.0 * lp).exp()) - 0.5
}

/// KL(q || p) summed over actors and dimensions.
pub fn latent_kl(q: &LatentSet, p: &LatentSet) -> Result<f64> {
    if q.n_actors() != p.n_actors() || q.dim() != p.dim() {
        return Err(CvaeError::LatentMismatch {
            expected: p.n_actors() * p.dim(),
            got: q.n_actors() * q.dim(),
        });
    }
    let mut total = 0.0;
    for i in 0..q.n_actors() {
        for k in 0..q.dim() {
            total += gaussian_kl(q.mean[i][k], q.log_std[i][k], p.mean[i][k], p.log_std[i][k]);
        }
    }
    Ok(total)
}

fn kl_var(mq: &Var, lq: &Var, mp: &Var, lp: &Var) -> Result<Var> {
    let var_ratio = lq.scale(2.0).exp().add(&mq.sub(mp)?.square())?;
    let term = var_ratio.mul(&lp.scale(-2.0).exp())?.scale(0.5);
    Ok(lp.sub(lq)?.add(&term)?.add_scalar(-0.5).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// Position term plus weighted action term.
    pub reconstruction: f64,
    pub position: f64,
    pub action: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeConfig {
    pub backbone: BackboneConfig,
    pub latent_dim: usize,
    pub beta: f64,
    pub action_weight: f64,
    /// Decoder steps between backbone passes.
    pub replan_every: usize,
    /// The posterior observes every `posterior_stride`-th future step.
    pub posterior_stride: usize,
    pub dt: f64,
    pub history_steps: usize,
    pub future_steps: usize,
    pub dynamics: DynamicsConfig,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            latent_dim: 16,
            beta: 0.5,
            action_weight: 0.1,
            replan_every: 5,
            posterior_stride: 5,
            dt: 0.1,
            history_steps: 10,
            future_steps: 50,
            dynamics: DynamicsConfig::default(),
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let bad = |m: &str| Err(CvaeError::Config(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if !(self.beta >= 0.0 && self.action_weight >= 0.0) {
            return bad("beta and action_weight must be non-negative");
        }
        if self.replan_every == 0 || self.posterior_stride == 0 || self.history_steps == 0 || self.future_steps == 0 {
            return bad("step counts and strides must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        Ok(())
    }
}

/// A scenario reduced to the constants the model consumes.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub frame: Pose2,
    pub map: MapFrame,
    pub history: ActorWindow,
    pub full: Option<ActorWindow>,
    /// `[n, T, 2]` ground-truth future positions in the scene frame.
    pub target_xy: Vec<f64>,
    /// `[n, T, 2]` bounded actions that reproduce the future.
    pub target_actions: Vec<f64>,
    pub wheelbase: Vec<f64>,
    pub present: Vec<ActorState>,
}

impl Prepared {
    pub fn n_actors(&self) -> usize {
        self.history.n
    }
}

/// Decoder output for one scene: actions and the rolled-out states.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// `actions[i][t]`.
    pub actions: Vec<Vec<Action>>,
    /// `future[t][i]` in the scenario's own frame.
    pub future: Vec<Vec<ActorState>>,
}

#[derive(Clone, Debug)]
pub struct Cvae {
    pub cfg: CvaeConfig,
    pub store: ParamStore,
    map_encoder: MapEncoder,
    prior_net: Backbone,
    posterior_net: Backbone,
    decoder_net: Backbone,
    prior_head: Linear,
    posterior_head: Linear,
    latent_in: Linear,
    fuse: Linear,
    action_head: Linear,
}

struct Rollout {
    /// Per future step: `[n]` vectors of x, y.
    xy: Vec<(Var, Var)>,
    /// `[n, T, 2]` raw bounded actions.
    actions: Var,
}

impl Cvae {
    pub fn new(cfg: CvaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.backbone.d_model;
        let dz = cfg.latent_dim;
        let map_encoder = MapEncoder::new(&mut store, "map", d, &mut rng);
        let prior_net = Backbone::new(&mut store, "prior", cfg.backbone, &mut rng)?;
        let posterior_net = Backbone::new(&mut store, "posterior", cfg.backbone, &mut rng)?;
        let decoder_net = Backbone::new(&mut store, "decoder", cfg.backbone, &mut rng)?;
        let prior_head = Linear::with_bound(&mut store, "prior_head", d, 2 * dz, 0.1, &mut rng);
        let posterior_head = Linear::with_bound(&mut store, "posterior_head", d, 2 * dz, 0.1, &mut rng);
        let latent_in = Linear::new(&mut store, "latent_in", dz, d, &mut rng);
        let fuse = Linear::new(&mut store, "fuse", d + dz, d, &mut rng);
        let action_head = Linear::with_bound(&mut store, "action_head", d, 2 * cfg.replan_every, 0.01, &mut rng);
        Ok(Self {
            cfg,
            store,
            map_encoder,
            prior_net,
            posterior_net,
            decoder_net,
            prior_head,
            posterior_head,
            latent_in,
            fuse,
            action_head,
        })
    }

    /// Validates shape against the config and caches frame-relative inputs.
    pub fn prepare(&self, s: &Scenario, with_future: bool) -> Result<Prepared> {
        let bad = |msg: String| CvaeError::Scenario { id: s.id.clone(), msg };
        let n = s.n_actors();
        if n == 0 || s.ego_index().is_none() {
            return Err(bad("needs actors and an ego".into()));
        }
        if s.history.len() != self.cfg.history_steps {
            return Err(bad(format!(
                "history has {} steps, model expects {}",
                s.history.len(),
                self.cfg.history_steps
            )));
        }
        if (s.dt - self.cfg.dt).abs() > 1e-9 {
            return Err(bad(format!("dt {} differs from model dt {}", s.dt, self.cfg.dt)));
        }
        if with_future && s.future.len() != self.cfg.future_steps {
            return Err(bad(format!(
                "future has {} steps, model expects {}",
                s.future.len(),
                self.cfg.future_steps
            )));
        }
        let frame = scene_frame(s)?;
        let map = MapFrame::new(&s.map, &frame)?;
        let history = ActorWindow::from_scenario(s, &frame, false)?;
        let present = s.current().to_vec();
        let wheelbase = present.iter().map(|a| self.cfg.dynamics.wheelbase(a)).collect();
        let t = self.cfg.future_steps;
        let (full, target_xy, target_actions) = if with_future {
            let full = ActorWindow::with_future_stride(s, &frame, self.cfg.posterior_stride)?;
            let mut xy = Vec::with_capacity(n * t * 2);
            let mut acts = Vec::with_capacity(n * t * 2);
            for i in 0..n {
                let track = s.future_track(i);
                for st in &track[1..] {
                    let p = crate::scene::relative_pose(&frame, &st.pose());
                    xy.extend([p.x, p.y]);
                }
                for a in infer_actions(&track, s.dt, &self.cfg.dynamics)? {
                    let a = self.cfg.dynamics.clamp(a);
                    acts.extend([a.accel, a.steer]);
                }
            }
            (Some(full), xy, acts)
        } else {
            (None, Vec::new(), Vec::new())
        };
        Ok(Prepared {
            frame,
            map,
            history,
            full,
            target_xy,
            target_actions,
            wheelbase,
            present,
        })
    }

    fn latent_vars(&self, tape: &Tape, p: &Prepared, posterior: bool) -> Result<(Var, Var)> {
        let (net, head, window) = if posterior {
            let full = p
                .full
                .as_ref()
                .ok_or_else(|| CvaeError::Config("posterior needs the future".into()))?;
            (&self.posterior_net, &self.posterior_head, full)
        } else {
            (&self.prior_net, &self.prior_head, &p.history)
        };
        let input = window.input(tape, &p.map)?;
        let feat = net.forward(tape, &self.store, &self.map_encoder, &input, None)?;
        let raw = head.forward(tape, &self.store, &feat)?;
        let dz = self.cfg.latent_dim;
        Ok((raw.slice(1, 0, dz)?, squash_log_std_var(&raw.slice(1, dz, 2 * dz)?)))
    }

    fn latent_set(&self, p: &Prepared, posterior: bool) -> Result<LatentSet> {
        let tape = Tape::new();
        let (m, l) = self.latent_vars(&tape, p, posterior)?;
        let dz = self.cfg.latent_dim;
        let rows = |v: Vec<f64>| v.chunks(dz).map(<[f64]>::to_vec).collect::<Vec<_>>();
        Ok(LatentSet {
            mean: rows(m.to_vec()),
            log_std: rows(l.to_vec()),
            sample: None,
        })
    }

    /// Prior latents from the history.
    pub fn prior(&self, p: &Prepared) -> Result<LatentSet> {
        self.latent_set(p, false)
    }

    /// Posterior latents from history and future.
    pub fn posterior(&self, p: &Prepared) -> Result<LatentSet> {
        self.latent_set(p, true)
    }

    /// Closed-loop decoding on the tape. `z` is `[n, d_z]`.
    fn rollout_vars(&self, tape: &Tape, p: &Prepared, z: &Var) -> Result<Rollout> {
        let n = p.n_actors();
        let h = self.cfg.history_steps;
        let k = self.cfg.replan_every;
        let dt = self.cfg.dt;
        let dyn_cfg = &self.cfg.dynamics;
        let hist = p.history.input(tape, &p.map)?.kin;
        let mut steps: Vec<Var> = (0..h)
            .map(|t| hist.slice(1, t, t + 1))
            .collect::<std::result::Result<_, _>>()?;
        let times: Vec<f64> = (0..h).map(|t| (t as f64 - (h - 1) as f64) * dt).collect();
        let wheelbase_inv = tape.constant(&[n], p.wheelbase.iter().map(|w| dt / w).collect())?;
        let col = |s: &Var, c: usize| -> Result<Var> { Ok(s.slice(2, c, c + 1)?.reshape(&[n])?) };
        let mut xy = Vec::with_capacity(self.cfg.future_steps);
        let mut actions = Vec::new();
        let cond = self.latent_in.forward(tape, &self.store, z)?;
        while xy.len() < self.cfg.future_steps {
            let kin = Var::concat(&steps[steps.len() - h..], 1)?;
            let input = SceneInput {
                kin,
                statics: p.history.statics.clone(),
                times: times.clone(),
                anchor: h - 1,
                map: &p.map,
            };
            let feat = self
                .decoder_net
                .forward(tape, &self.store, &self.map_encoder, &input, Some(&cond))?;
            let fused = self
                .fuse
                .forward(tape, &self.store, &Var::concat(&[feat, z.clone()], 1)?)?
                .gelu();
            let raw = self
                .action_head
                .forward(tape, &self.store, &fused)?
                .reshape(&[n, k, 2])?;
            let accel = raw.slice(2, 0, 1)?.tanh().scale(dyn_cfg.accel_max);
            let steer = raw.slice(2, 1, 2)?.tanh().scale(dyn_cfg.steer_max);
            let take = k.min(self.cfg.future_steps - xy.len());
            actions.push(Var::concat(&[accel.clone(), steer.clone()], 2)?.slice(1, 0, take)?);
            let last = steps.last().expect("history is non-empty").clone();
            let (mut x, mut y, mut yaw, mut v) = (col(&last, 0)?, col(&last, 1)?, col(&last, 2)?, col(&last, 3)?);
            for j in 0..take {
                let a = accel.slice(1, j, j + 1)?.reshape(&[n])?;
                let st = steer.slice(1, j, j + 1)?.reshape(&[n])?;
                let v_next = v.add(&a.scale(dt))?;
                let dyaw = v.mul(&st.tan())?.mul(&wheelbase_inv)?;
                let heading = yaw.add(&dyaw.scale(0.5))?;
                let v_mid = v.add(&v_next)?.scale(0.5 * dt);
                x = x.add(&v_mid.mul(&heading.cos())?)?;
                y = y.add(&v_mid.mul(&heading.sin())?)?;
                yaw = yaw.add(&dyaw)?.wrap_angle();
                v = v_next;
                xy.push((x.clone(), y.clone()));
                let parts = [&x, &y, &yaw, &v].map(|c| c.reshape(&[n, 1, 1]));
                let parts: Vec<Var> = parts.into_iter().collect::<std::result::Result<_, _>>()?;
                let state = Var::concat(&parts, 2)?;
                steps.push(state);
            }
        }
        Ok(Rollout {
            xy,
            actions: Var::concat(&actions, 1)?,
        })
    }

    /// Decodes one latent per actor into bounded actions and integrates them
    /// with the dynamics model.
    pub fn decode(&self, p: &Prepared, z: &[Vec<f64>]) -> Result<Decoded> {
        let n = p.n_actors();
        let dz = self.cfg.latent_dim;
        if z.len() != n {
            return Err(CvaeError::LatentMismatch {
                expected: n,
                got: z.len(),
            });
        }
        if let Some(bad) = z.iter().find(|r| r.len() != dz) {
            return Err(CvaeError::LatentMismatch {
                expected: dz,
                got: bad.len(),
            });
        }
        let tape = Tape::new();
        let zv = tape.constant(&[n, dz], z.concat())?;
        let out = self.rollout_vars(&tape, p, &zv)?;
        let t = self.cfg.future_steps;
        let raw = out.actions.to_vec();
        let actions: Vec<Vec<Action>> = (0..n)
            .map(|i| {
                (0..t)
                    .map(|s| {
                        self.cfg.dynamics.clamp(Action {
                            accel: raw[(i * t + s) * 2],
                            steer: raw[(i * t + s) * 2 + 1],
                        })
                    })
                    .collect()
            })
            .collect();
        let tracks = rollout(&p.present, &actions, self.cfg.dt, &self.cfg.dynamics)?;
        let future = (0..t).map(|s| tracks.iter().map(|tr| tr[s]).collect()).collect();
        Ok(Decoded { actions, future })
    }

    /// ELBO terms on the tape for a prepared scenario and posterior noise `eps` (`[n, d_z]`).
    fn elbo_vars(&self, tape: &Tape, p: &Prepared, eps: &[f64]) -> Result<(Var, [Var; 4])> {
        let n = p.n_actors();
        let t = self.cfg.future_steps;
        let (mq, lq) = self.latent_vars(tape, p, true)?;
        let (mp, lp) = self.latent_vars(tape, p, false)?;
        let noise = tape.constant(&[n, self.cfg.latent_dim], eps.to_vec())?;
        let z = mq.add(&lq.exp().mul(&noise)?)?;
        let out = self.rollout_vars(tape, p, &z)?;
        let xs: Vec<Var> = out
            .xy
            .iter()
            .map(|(x, _)| x.reshape(&[n, 1]))
            .collect::<std::result::Result<_, _>>()?;
        let ys: Vec<Var> = out
            .xy
            .iter()
            .map(|(_, y)| y.reshape(&[n, 1]))
            .collect::<std::result::Result<_, _>>()?;
        let pred = Var::concat(
            &[
                Var::concat(&xs, 1)?.reshape(&[n, t, 1])?,
                Var::concat(&ys, 1)?.reshape(&[n, t, 1])?,
            ],
            2,
        )?;
        let target = tape.constant(&[n, t, 2], p.target_xy.clone())?;
        let position = pred.sub(&target)?.square().sum().scale(1.0 / (n * t) as f64);
        let act_target = tape.constant(&[n, t, 2], p.target_actions.clone())?;
        let action = out.actions.sub(&act_target)?.square().mean();
        let recon = position.add(&action.scale(self.cfg.action_weight))?;
        let kl = kl_var(&mq, &lq, &mp, &lp)?;
        let total = recon.add(&kl.scale(self.cfg.beta))?;
        Ok((total, [recon, position, action, kl]))
    }

    /// ELBO breakdown for one scenario with the given posterior noise.
    pub fn elbo(&self, p: &Prepared, eps: &[Vec<f64>]) -> Result<ElboBreakdown> {
        let tape = Tape::new();
        let (total, [r, pos, a, kl]) = self.elbo_vars(&tape, p, &eps.concat())?;
        Ok(ElboBreakdown {
            reconstruction: r.item(),
            position: pos.item(),
            action: a.item(),
            kl: kl.item(),
            beta: self.cfg.beta,
            total: total.item(),
        })
    }

    /// Scalar ELBO on a caller's tape, for gradient checks.
    pub fn elbo_on_tape(&self, tape: &Tape, store: &ParamStore, p: &Prepared, eps: &[Vec<f64>]) -> Result<Var> {
        let view = Cvae {
            store: store.clone(),
            ..self.clone()
        };
        Ok(view.elbo_vars(tape, p, &eps.concat())?.0)
    }

    /// Mean reconstruction term over `data`, with posterior noise drawn from `seed`.
    pub fn mean_reconstruction(&self, data: &[Scenario], seed: u64) -> Result<f64> {
        if data.is_empty() {
            return Err(CvaeError::Config("no scenarios to evaluate".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for s in data {
            let p = self.prepare(s, true)?;
            let eps = standard_noise(p.n_actors(), self.cfg.latent_dim, &mut rng);
            total += self.elbo(&p, &eps)?.reconstruction;
        }
        Ok(total / data.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_string(&self.cfg).expect("config serializes");
        let mut out = format!("{CHECKPOINT_MAGIC}\n{cfg}\n").into_bytes();
        out.extend(self.store.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CvaeError::Checkpoint(m.to_string());
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(CHECKPOINT_MAGIC.as_bytes()) {
            return Err(bad("not a cvae checkpoint"));
        }
        let cfg: CvaeConfig = serde_json::from_slice(lines.next().ok_or_else(|| bad("missing config"))?)
            .map_err(|e| CvaeError::Checkpoint(e.to_string()))?;
        let stored = ParamStore::from_bytes(lines.next().ok_or_else(|| bad("missing parameters"))?)?;
        let mut model = Cvae::new(cfg, 0)?;
        if stored.len() != model.store.len() {
            return Err(bad("parameter count differs from the config"));
        }
        model.store.load_matching(&stored)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CvaeError::File {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CvaeError::File {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn hash(&self) -> String {
        crate::io::sha256_hex(&self.to_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub lr_final_ratio: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            lr: 1e-3,
            lr_final_ratio: 0.1,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

/// One line of the training log: batch means of the ELBO terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLogRecord {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Adam on the ELBO over scenarios drawn from `stream`, `batch_size` per step.
/// `on_step` sees every log record and the model right after its update.
pub fn train_vae<'a, I>(
    model: &mut Cvae,
    stream: I,
    tcfg: &VaeTrainConfig,
    mut on_step: impl FnMut(&VaeLogRecord, &Cvae),
) -> Result<Vec<VaeLogRecord>>
where
    I: IntoIterator<Item = &'a Scenario>,
{
    if tcfg.steps == 0
        || tcfg.batch_size == 0
        || tcfg.lr.is_nan()
        || tcfg.lr <= 0.0
        || !(0.0..=1.0).contains(&tcfg.lr_final_ratio)
    {
        return Err(CvaeError::Config(
            "steps, batch_size and lr must be positive and lr_final_ratio in [0, 1]".into(),
        ));
    }
    let mut stream = stream.into_iter();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = AdamState::new(&model.store, tcfg.lr);
    let mut log = Vec::with_capacity(tcfg.steps);
    let dz = model.cfg.latent_dim;
    for step in 1..=tcfg.steps {
        let tape = Tape::new();
        let mut total: Option<Var> = None;
        let (mut recon, mut kl) = (0.0, 0.0);
        for _ in 0..tcfg.batch_size {
            let s = stream
                .next()
                .ok_or_else(|| CvaeError::Config(format!("scenario stream ended at step {step}")))?;
            let p = model.prepare(s, true)?;
            let eps: Vec<f64> = standard_noise(p.n_actors(), dz, &mut rng).concat();
            let (loss, [r, _, _, k]) = model.elbo_vars(&tape, &p, &eps)?;
            recon += r.item();
            kl += k.item();
            total = Some(match total {
                Some(t) => t.add(&loss)?,
                None => loss,
            });
        }
        let b = tcfg.batch_size as f64;
        let loss = total.expect("batch is non-empty").scale(1.0 / b);
        let rec = VaeLogRecord {
            step,
            recon: recon / b,
            kl: kl / b,
            total: loss.item(),
        };
        if !(rec.total.is_finite() && rec.kl.is_finite()) {
            return Err(CvaeError::Diverged { step });
        }
        let mut grads = tape.backward(&loss)?.params(model.store.len());
        clip_grad_norm(&mut grads, tcfg.grad_clip);
        adam.lr = cosine_lr(tcfg.lr, tcfg.lr_final_ratio, step, tcfg.steps);
        adam_step(&mut model.store, &grads, &mut adam)?;
        on_step(&rec, model);
        log.push(rec);
    }
    Ok(log)
}

/// Cosine decay from `base` at step 1 to `base * final_ratio` at step `steps`.
pub fn cosine_lr(base: f64, final_ratio: f64, step: usize, steps: usize) -> f64 {
    let progress = if steps > 1 {
        (step - 1) as f64 / (steps - 1) as f64
    } else {
        0.0
    };
    base * (final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
