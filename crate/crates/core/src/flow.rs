//! Rectified flow in latent space: a velocity field learned on straight-line
//! interpolants between prior latents and safety-critical posterior latents of
//! a frozen VAE, integrated with forward Euler.
//!
//! The field is a scene transformer over the history. Each actor's token is
//! offset by a conditioning token built from the sinusoidal embedding of the
//! flow time, the actor's current latent and, when enabled, an embedding of
//! the maneuver label.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scenflow_tensor::nn::{Linear, Mlp};
use scenflow_tensor::{adam_step, clip_grad_norm, AdamState, ParamId, ParamStore, Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{sinusoidal_pe, Backbone, BackboneConfig, BackboneError, MapEncoder};
use crate::cvae::{cosine_lr, standard_noise, Cvae, CvaeError, LatentSet, Prepared};
use crate::scene::{ManeuverLabel, Scenario, Source};

const CHECKPOINT_MAGIC: &str = "scenflow.flow 1";
pub const LABEL_EMBED_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("velocity field is not finite at sampler step {step}")]
    NonFinite { step: usize },
    #[error("scenario {0} has nominal source; the flow trains on safety-critical data only")]
    NominalSource(String),
    #[error("vae checkpoint hash {got} differs from the frozen {expected}")]
    VaeChanged { expected: String, got: String },
    #[error("loss is not finite at step {step}")]
    Diverged { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// `t * z1 + (1 - t) * z0`, returning the endpoints themselves at `t = 0` and `t = 1`.
pub fn interpolate(z0: &[f64], z1: &[f64], t: f64) -> Result<Vec<f64>> {
    if z0.len() != z1.len() {
        return Err(FlowError::Shape(format!("{} vs {} entries", z0.len(), z1.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::Config(format!("t = {t} outside [0, 1]")));
    }
    Ok(if t == 0.0 {
        z0.to_vec()
    } else if t == 1.0 {
        z1.to_vec()
    } else {
        z0.iter().zip(z1).map(|(a, b)| t * b + (1.0 - t) * a).collect()
    })
}

/// Mean squared residual between a predicted velocity and the straight-line target `z1 - z0`.
pub fn flow_loss_value(v: &[f64], z0: &[f64], z1: &[f64]) -> Result<f64> {
    if v.len() != z0.len() || z0.len() != z1.len() || v.is_empty() {
        return Err(FlowError::Shape(format!(
            "{} / {} / {} entries",
            v.len(),
            z0.len(),
            z1.len()
        )));
    }
    Ok(v.iter()
        .zip(z0.iter().zip(z1))
        .map(|(v, (a, b))| (b - a - v).powi(2))
        .sum::<f64>()
        / v.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub n_sample_steps: usize,
    pub t_end: f64,
    pub conditioning: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_sample_steps: 20,
            t_end: 1.0,
            conditioning: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sample_steps == 0 {
            return Err(FlowError::Config("n_sample_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.t_end) {
            return Err(FlowError::Config(format!("t_end = {} outside [0, 1]", self.t_end)));
        }
        Ok(())
    }
}

/// A velocity over per-actor latent rows.
pub trait VelocityField {
    fn velocity(&self, z: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>>;
}

/// Forward Euler from `t = 0` to `cfg.t_end` in `cfg.n_sample_steps` equal steps.
pub fn euler_sample<F: VelocityField + ?Sized>(field: &F, z0: &[Vec<f64>], cfg: &FlowConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let dt = cfg.t_end / cfg.n_sample_steps as f64;
    let mut z = z0.to_vec();
    if cfg.t_end == 0.0 {
        return Ok(z);
    }
    for step in 0..cfg.n_sample_steps {
        let v = field.velocity(&z, step as f64 * dt)?;
        if v.len() != z.len() || v.iter().zip(&z).any(|(a, b)| a.len() != b.len()) {
            return Err(FlowError::Shape("velocity shape differs from the latent".into()));
        }
        if v.iter().flatten().any(|x| !x.is_finite()) {
            return Err(FlowError::NonFinite { step });
        }
        for (zr, vr) in z.iter_mut().zip(&v) {
            for (a, b) in zr.iter_mut().zip(vr) {
                *a += b * dt;
            }
        }
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowModelConfig {
    pub backbone: BackboneConfig,
    pub latent_dim: usize,
    pub conditioning: bool,
}

impl Default for FlowModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            latent_dim: 16,
            conditioning: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub cfg: FlowModelConfig,
    pub store: ParamStore,
    /// Hash of the VAE checkpoint this flow was trained against.
    pub vae_hash: String,
    map_encoder: MapEncoder,
    net: Backbone,
    cond: Mlp,
    label_table: ParamId,
    label_mlp: Mlp,
    head: Linear,
}

#[derive(Serialize, Deserialize)]
struct FlowHeader {
    cfg: FlowModelConfig,
    vae_hash: String,
}

impl FlowModel {
    pub fn new(cfg: FlowModelConfig, vae_hash: String, seed: u64) -> Result<Self> {
        cfg.backbone.validate()?;
        if cfg.latent_dim == 0 {
            return Err(FlowError::Config("latent_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.backbone.d_model;
        let map_encoder = MapEncoder::new(&mut store, "map", d, &mut rng);
        let net = Backbone::new(&mut store, "field", cfg.backbone, &mut rng)?;
        let cond = Mlp::new(&mut store, "cond", &[2 * d + cfg.latent_dim, d, d], &mut rng);
        let table: Vec<f64> = (0..ManeuverLabel::ALL.len() * LABEL_EMBED_DIM)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let label_table = store.add("label_table", &[ManeuverLabel::ALL.len(), LABEL_EMBED_DIM], table);
        let label_mlp = Mlp::new(&mut store, "label_mlp", &[LABEL_EMBED_DIM, d, d], &mut rng);
        let head = Linear::new(&mut store, "head", d + 2 * cfg.latent_dim, cfg.latent_dim, &mut rng);
        Ok(Self {
            cfg,
            store,
            vae_hash,
            map_encoder,
            net,
            cond,
            label_table,
            label_mlp,
            head,
        })
    }

    fn velocity_var(
        &self,
        tape: &Tape,
        store: &ParamStore,
        p: &Prepared,
        z: &Var,
        t: f64,
        label: Option<ManeuverLabel>,
    ) -> Result<Var> {
        let n = p.n_actors();
        let d = self.cfg.backbone.d_model;
        let dz = self.cfg.latent_dim;
        if z.shape() != [n, dz] {
            return Err(FlowError::Shape(format!(
                "latent {:?} for {n} actors of dim {dz}",
                z.shape()
            )));
        }
        let pe = sinusoidal_pe(t, d)?;
        let e_t = tape.constant(&[n, d], pe.repeat(n))?;
        let e_c = match (self.cfg.conditioning, label) {
            (true, Some(l)) => {
                let row = tape.param(store, self.label_table).gather(vec![l.index()])?;
                self.label_mlp.forward(tape, store, &row)?.gather(vec![0; n])?
            }
            (true, None) => return Err(FlowError::Config("conditional flow needs a label".into())),
            (false, _) => tape.zeros(&[n, d]),
        };
        let token = self
            .cond
            .forward(tape, store, &Var::concat(&[e_t, z.clone(), e_c], 1)?)?;
        let input = p.history.input(tape, &p.map)?;
        let feat = self.net.forward(tape, store, &self.map_encoder, &input, Some(&token))?;
        let skip = Var::concat(&[feat, z.clone(), z.scale(t)], 1)?;
        Ok(self.head.forward(tape, store, &skip)?)
    }

    /// Predicted velocity, one row per actor.
    pub fn velocity(
        &self,
        p: &Prepared,
        z: &[Vec<f64>],
        t: f64,
        label: Option<ManeuverLabel>,
    ) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let zv = latent_var(&tape, z, p.n_actors(), self.cfg.latent_dim)?;
        let v = self.velocity_var(&tape, &self.store, p, &zv, t, label)?.to_vec();
        Ok(v.chunks(self.cfg.latent_dim).map(<[f64]>::to_vec).collect())
    }

    /// Mean squared residual over the batch, actors and latent dimensions.
    pub fn loss_on_tape(&self, tape: &Tape, store: &ParamStore, batch: &[FlowSample<'_>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(FlowError::Config("empty batch".into()));
        }
        let dz = self.cfg.latent_dim;
        let mut total: Option<Var> = None;
        let mut count = 0usize;
        for item in batch {
            let n = item.prepared.n_actors();
            let z0: Vec<f64> = item.z0.concat();
            let z1: Vec<f64> = item.z1.concat();
            let zt = interpolate(&z0, &z1, item.t)?;
            let target: Vec<f64> = z1.iter().zip(&z0).map(|(b, a)| b - a).collect();
            let zt = tape.constant(&[n, dz], zt)?;
            let v = self.velocity_var(tape, store, item.prepared, &zt, item.t, item.label)?;
            let sq = v.sub(&tape.constant(&[n, dz], target)?)?.sum_squares();
            count += n * dz;
            total = Some(match total {
                Some(acc) => acc.add(&sq)?,
                None => sq,
            });
        }
        Ok(total.expect("batch is non-empty").scale(1.0 / count as f64))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&FlowHeader {
            cfg: self.cfg,
            vae_hash: self.vae_hash.clone(),
        })
        .expect("header serializes");
        let mut out = format!("{CHECKPOINT_MAGIC}\n{header}\n").into_bytes();
        out.extend(self.store.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| FlowError::Checkpoint(m.to_string());
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(CHECKPOINT_MAGIC.as_bytes()) {
            return Err(bad("not a flow checkpoint"));
        }
        let header: FlowHeader = serde_json::from_slice(lines.next().ok_or_else(|| bad("missing header"))?)
            .map_err(|e| FlowError::Checkpoint(e.to_string()))?;
        let stored = ParamStore::from_bytes(lines.next().ok_or_else(|| bad("missing parameters"))?)?;
        let mut model = FlowModel::new(header.cfg, header.vae_hash, 0)?;
        if stored.len() != model.store.len() {
            return Err(bad("parameter count differs from the config"));
        }
        model.store.load_matching(&stored)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| FlowError::File {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| FlowError::File {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn hash(&self) -> String {
        crate::io::sha256_hex(&self.to_bytes())
    }
}

fn latent_var(tape: &Tape, z: &[Vec<f64>], n: usize, dz: usize) -> Result<Var> {
    if z.len() != n || z.iter().any(|r| r.len() != dz) {
        return Err(FlowError::Shape(format!("expected {n} latents of dim {dz}")));
    }
    Ok(tape.constant(&[n, dz], z.concat())?)
}

/// One regression example: the flow should carry `z0` to `z1` on `prepared`.
pub struct FlowSample<'a> {
    pub prepared: &'a Prepared,
    pub z0: Vec<Vec<f64>>,
    pub z1: Vec<Vec<f64>>,
    pub t: f64,
    pub label: Option<ManeuverLabel>,
}

/// The flow field bound to one scene and label.
pub struct SceneField<'a> {
    pub model: &'a FlowModel,
    pub prepared: &'a Prepared,
    pub label: Option<ManeuverLabel>,
}

impl VelocityField for SceneField<'_> {
    fn velocity(&self, z: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
        self.model.velocity(self.prepared, z, t, self.label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub lr_final_ratio: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowLogRecord {
    pub step: usize,
    pub loss: f64,
}

/// Frozen-VAE encodings of one scenario.
pub struct Encoded {
    pub prepared: Prepared,
    pub prior: LatentSet,
    pub posterior: LatentSet,
    pub label: ManeuverLabel,
}

/// Runs the frozen VAE's prior and posterior on a scenario.
pub fn encode(vae: &Cvae, s: &Scenario) -> Result<Encoded> {
    let prepared = vae.prepare(s, true)?;
    Ok(Encoded {
        prior: vae.prior(&prepared)?,
        posterior: vae.posterior(&prepared)?,
        prepared,
        label: s.label,
    })
}

/// Adam on the flow loss over safety-critical scenarios from `stream`. The
/// VAE must hash to `vae_hash`; its encodings are cached per scenario id.
pub fn train_flow<'a, I>(
    vae: &Cvae,
    vae_hash: &str,
    stream: I,
    model_cfg: FlowModelConfig,
    tcfg: &FlowTrainConfig,
    mut on_step: impl FnMut(&FlowLogRecord),
) -> Result<(FlowModel, Vec<FlowLogRecord>)>
where
    I: IntoIterator<Item = &'a Scenario>,
{
    let got = vae.hash();
    if got != vae_hash {
        return Err(FlowError::VaeChanged {
            expected: vae_hash.to_string(),
            got,
        });
    }
    if tcfg.steps == 0
        || tcfg.batch_size == 0
        || tcfg.lr.is_nan()
        || tcfg.lr <= 0.0
        || !(0.0..=1.0).contains(&tcfg.lr_final_ratio)
    {
        return Err(FlowError::Config(
            "steps, batch_size and lr must be positive and lr_final_ratio in [0, 1]".into(),
        ));
    }
    if model_cfg.latent_dim != vae.cfg.latent_dim {
        return Err(FlowError::Config(format!(
            "flow latent_dim {} differs from the vae's {}",
            model_cfg.latent_dim, vae.cfg.latent_dim
        )));
    }
    let mut model = FlowModel::new(model_cfg, got, tcfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed_f10e);
    let mut adam = AdamState::new(&model.store, tcfg.lr);
    let mut cache: HashMap<String, Encoded> = HashMap::new();
    let mut stream = stream.into_iter();
    let mut log = Vec::with_capacity(tcfg.steps);
    let dz = model_cfg.latent_dim;
    for step in 1..=tcfg.steps {
        let mut picks = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let s = stream
                .next()
                .ok_or_else(|| FlowError::Config(format!("scenario stream ended at step {step}")))?;
            if s.source == Source::SimNominal {
                return Err(FlowError::NominalSource(s.id.clone()));
            }
            if !cache.contains_key(&s.id) {
                cache.insert(s.id.clone(), encode(vae, s)?);
            }
            picks.push(s.id.clone());
        }
        let mut batch = Vec::with_capacity(picks.len());
        for id in &picks {
            let e = &cache[id];
            let n = e.prepared.n_actors();
            let z0 = e
                .prior
                .reparameterize(&standard_noise(n, dz, &mut rng))?
                .sample
                .expect("sampled");
            let z1 = e
                .posterior
                .reparameterize(&standard_noise(n, dz, &mut rng))?
                .sample
                .expect("sampled");
            batch.push(FlowSample {
                prepared: &e.prepared,
                z0,
                z1,
                t: rng.gen::<f64>(),
                label: model_cfg.conditioning.then_some(e.label),
            });
        }
        let tape = Tape::new();
        let loss = model.loss_on_tape(&tape, &model.store, &batch)?;
        let rec = FlowLogRecord {
            step,
            loss: loss.item(),
        };
        if !rec.loss.is_finite() {
            return Err(FlowError::Diverged { step });
        }
        let mut grads = tape.backward(&loss)?.params(model.store.len());
        clip_grad_norm(&mut grads, tcfg.grad_clip);
        adam.lr = cosine_lr(tcfg.lr, tcfg.lr_final_ratio, step, tcfg.steps);
        adam_step(&mut model.store, &grads, &mut adam)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok((model, log))
}

/// A generated rollout with the latents that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub scenario: Scenario,
    pub z_prior: Vec<Vec<f64>>,
    pub z_pred: Vec<Vec<f64>>,
}

/// Prior, then flow up to `cfg.t_end`, then decode. `noise` is the prior
/// reparameterization noise, one row per actor.
pub fn generate(
    vae: &Cvae,
    flow: Option<&FlowModel>,
    s: &Scenario,
    label: Option<ManeuverLabel>,
    cfg: &FlowConfig,
    noise: &[Vec<f64>],
) -> Result<Generated> {
    cfg.validate()?;
    let prepared = vae.prepare(s, false)?;
    let z_prior = vae.prior(&prepared)?.reparameterize(noise)?.sample.expect("sampled");
    let z_pred = if cfg.t_end == 0.0 {
        z_prior.clone()
    } else {
        let flow = flow.ok_or_else(|| FlowError::Config("t_end > 0 needs a flow checkpoint".into()))?;
        if flow.vae_hash != vae.hash() {
            return Err(FlowError::VaeChanged {
                expected: flow.vae_hash.clone(),
                got: vae.hash(),
            });
        }
        if cfg.conditioning != flow.cfg.conditioning {
            return Err(FlowError::Config(
                "conditioning flag differs from the flow checkpoint".into(),
            ));
        }
        let field = SceneField {
            model: flow,
            prepared: &prepared,
            label: if cfg.conditioning { label } else { None },
        };
        euler_sample(&field, &z_prior, cfg)?
    };
    let decoded = vae.decode(&prepared, &z_pred)?;
    let mut scenario = s.clone();
    scenario.future = decoded.future;
    if let Some(l) = label {
        scenario.label = l;
    }
    Ok(Generated {
        scenario,
        z_prior,
        z_pred,
    })
}

/// A scalar flow with an MLP field, used to check the transport machinery in
/// isolation from the traffic stack.
pub mod toy {
    use super::*;

    #[derive(Clone, Debug)]
    pub struct ToyFlow {
        pub store: ParamStore,
        mlp: Mlp,
    }

    impl ToyFlow {
        pub fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "toy", &[3, 64, 64, 1], &mut rng);
            Self { store, mlp }
        }

        fn field_var(&self, tape: &Tape, store: &ParamStore, z: &[f64], t: &[f64]) -> Result<Var> {
            let x: Vec<f64> = z
                .iter()
                .zip(t)
                .flat_map(|(&z, &t)| [z / 3.0, t, (std::f64::consts::PI * t).sin()])
                .collect();
            let x = tape.constant(&[z.len(), 3], x)?;
            Ok(self.mlp.forward(tape, store, &x)?)
        }

        /// Flow loss on explicit pairs and times.
        pub fn loss_on_tape(&self, tape: &Tape, store: &ParamStore, z0: &[f64], z1: &[f64], t: &[f64]) -> Result<Var> {
            let zt: Vec<f64> = z0
                .iter()
                .zip(z1)
                .zip(t)
                .map(|((a, b), t)| t * b + (1.0 - t) * a)
                .collect();
            let v = self.field_var(tape, store, &zt, t)?;
            let target: Vec<f64> = z1.iter().zip(z0).map(|(b, a)| b - a).collect();
            Ok(v.sub(&tape.constant(&[z0.len(), 1], target)?)?.square().mean())
        }

        /// Trains on independent pairs from `source` and `target`; returns the loss curve.
        pub fn train(
            &mut self,
            steps: usize,
            batch: usize,
            lr: f64,
            seed: u64,
            mut source: impl FnMut(&mut ChaCha8Rng) -> f64,
            mut target: impl FnMut(&mut ChaCha8Rng) -> f64,
        ) -> Result<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut adam = AdamState::new(&self.store, lr);
            let mut curve = Vec::with_capacity(steps);
            for step in 1..=steps {
                let z0: Vec<f64> = (0..batch).map(|_| source(&mut rng)).collect();
                let z1: Vec<f64> = (0..batch).map(|_| target(&mut rng)).collect();
                let t: Vec<f64> = (0..batch).map(|_| rng.gen::<f64>()).collect();
                let tape = Tape::new();
                let loss = self.loss_on_tape(&tape, &self.store, &z0, &z1, &t)?;
                if !loss.item().is_finite() {
                    return Err(FlowError::Diverged { step });
                }
                curve.push(loss.item());
                let grads = tape.backward(&loss)?.params(self.store.len());
                adam_step(&mut self.store, &grads, &mut adam)?;
            }
            Ok(curve)
        }

        /// Euler-integrates every starting point at once.
        pub fn sample(&self, z0: &[f64], cfg: &FlowConfig) -> Result<Vec<f64>> {
            let rows: Vec<Vec<f64>> = z0.iter().map(|&z| vec![z]).collect();
            Ok(euler_sample(self, &rows, cfg)?.into_iter().map(|r| r[0]).collect())
        }
    }

    impl VelocityField for ToyFlow {
        fn velocity(&self, z: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
            let tape = Tape::new();
            let flat: Vec<f64> = z.iter().map(|r| r[0]).collect();
            let v = self.field_var(&tape, &self.store, &flat, &vec![t; flat.len()])?;
            Ok(v.to_vec().into_iter().map(|x| vec![x]).collect())
        }
    }
}
