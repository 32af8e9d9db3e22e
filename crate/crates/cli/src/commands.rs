//! The pipeline stages behind each subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use scenflow_core::cvae::{standard_noise, train_vae, Cvae};
use scenflow_core::flow::{generate as flow_generate, train_flow, FlowConfig, FlowModel};
use scenflow_core::io::{load_records, load_scenarios, save_records, Provenance, Record};
use scenflow_core::metrics::{near_miss, render_table, report, MetricsReport};
use scenflow_core::scene::{ManeuverLabel, Scenario};
use scenflow_core::synth::{generate_pool, stream_rng, MixConfig, MixSampler, PoolKind, RejectionLog};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{ensure_dir, sidecar, write_file, Manifest};

pub const VAE_CHECKPOINT: &str = "vae.ckpt";
pub const FLOW_CHECKPOINT: &str = "flow.ckpt";
pub const TRAIN_LOG: &str = "log.jsonl";
pub const MANIFEST: &str = "manifest.json";

/// Seed for one pool kind under a run seed.
pub fn pool_seed(seed: u64, kind: PoolKind) -> u64 {
    let k = PoolKind::ALL.iter().position(|&p| p == kind).expect("known kind") as u64;
    seed.wrapping_mul(PoolKind::ALL.len() as u64).wrapping_add(k)
}

pub fn pool_path(dir: &Path, kind: PoolKind) -> PathBuf {
    dir.join(format!("{}.jsonl", kind.as_str()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub pool: PoolKind,
    pub count: usize,
    pub near_miss_rate: f64,
    pub labels: BTreeMap<ManeuverLabel, usize>,
    pub rejections: RejectionLog,
}

/// Writes one scenario file per pool kind and prints per-pool statistics.
pub fn synth(cfg: &RunConfig, parallel: bool) -> Result<Vec<PoolStats>> {
    let sec = &cfg.synth;
    ensure_dir(&sec.out_dir)?;
    let mut manifest = Manifest::new("synth", cfg);
    let counts = [
        (PoolKind::SimNominal, sec.n_nominal),
        (PoolKind::SimAggressive, sec.n_aggressive),
        (PoolKind::SimTuned, sec.n_tuned),
        (PoolKind::PseudoReal, sec.n_pseudo_real),
    ];
    let mut stats = Vec::new();
    for (kind, n) in counts {
        if n == 0 {
            continue;
        }
        let seed = pool_seed(sec.seed, kind);
        let pool = generate_pool(kind, n, seed, &sec.scenario, parallel)?;
        let mut labels = BTreeMap::new();
        for s in &pool.scenarios {
            *labels.entry(s.label).or_insert(0) += 1;
        }
        let records: Vec<Record> = pool
            .scenarios
            .iter()
            .map(|s| Record {
                scenario: s.clone(),
                provenance: Some(Provenance {
                    seed: Some(seed),
                    generator: Some(format!("synth/{}", kind.as_str())),
                    ..Default::default()
                }),
            })
            .collect();
        let path = pool_path(&sec.out_dir, kind);
        save_records(&path, &records)?;
        manifest.output(&path)?;
        stats.push(PoolStats {
            pool: kind,
            count: pool.scenarios.len(),
            near_miss_rate: near_miss(&pool.scenarios, &sec.scenario.metrics)?,
            labels,
            rejections: pool.log,
        });
    }
    manifest.summary = to_json(&stats)?;
    manifest.write(&sec.out_dir.join(MANIFEST))?;
    print!("{}", pool_table(&stats));
    Ok(stats)
}

pub fn pool_table(stats: &[PoolStats]) -> String {
    let mut out = format!(
        "{:<16} {:>6} {:>9} {:>9} {:>9}  {}\n",
        "pool", "count", "near_miss", "attempts", "rejected", "labels"
    );
    for s in stats {
        let labels: Vec<String> = s.labels.iter().map(|(l, n)| format!("{l}={n}")).collect();
        let reasons: Vec<String> = s
            .rejections
            .by_reason
            .iter()
            .map(|(r, n)| format!("{}={n}", r.as_str()))
            .collect();
        out.push_str(&format!(
            "{:<16} {:>6} {:>9.3} {:>9} {:>9}  {} [{}]\n",
            s.pool.as_str(),
            s.count,
            s.near_miss_rate,
            s.rejections.attempts,
            s.rejections.rejected(),
            labels.join(" "),
            reasons.join(" ")
        ));
    }
    out
}

fn load_pools(paths: &[PathBuf], manifest: &mut Manifest) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_scenarios(p)?);
        manifest.input(p)?;
    }
    Ok(out)
}

fn write_log<T: Serialize>(path: &Path, log: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Data(e.to_string()))?);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Stage one: fits the VAE on the configured pools.
pub fn train_vae_cmd(cfg: &RunConfig) -> Result<TrainSummary> {
    let sec = &cfg.train_vae;
    if sec.pools.is_empty() {
        return Err(CliError::Config("train_vae.pools is empty".into()));
    }
    let mut manifest = Manifest::new("train-vae", cfg);
    let corpus = load_pools(&sec.pools, &mut manifest)?;
    if corpus.is_empty() {
        return Err(CliError::Data("training corpus is empty".into()));
    }
    let stream = MixSampler::new(
        &[],
        &corpus,
        &MixConfig {
            alpha_real: 0.0,
            seed: sec.train.seed,
            upsample_real: 1,
        },
    )?;
    let mut model = Cvae::new(sec.model, sec.init_seed)?;
    let log = train_vae(&mut model, stream, &sec.train, |r, _| {
        if r.step % 100 == 0 {
            info!("train-vae step {} recon {:.4} kl {:.4}", r.step, r.recon, r.kl);
        }
    })?;
    ensure_dir(&sec.out_dir)?;
    let ckpt = sec.out_dir.join(VAE_CHECKPOINT);
    model.save(&ckpt)?;
    let log_path = sec.out_dir.join(TRAIN_LOG);
    write_log(&log_path, &log)?;
    manifest.output(&ckpt)?;
    manifest.output(&log_path)?;
    let summary = TrainSummary {
        checkpoint: ckpt,
        hash: model.hash(),
        steps: log.len(),
        first_loss: log.first().map_or(f64::NAN, |r| r.total),
        final_loss: log.last().map_or(f64::NAN, |r| r.total),
    };
    manifest.checkpoints.insert("vae".into(), summary.hash.clone());
    manifest.summary = to_json(&summary)?;
    manifest.write(&sec.out_dir.join(MANIFEST))?;
    Ok(summary)
}

fn load_vae(path: &Path, stage: &str) -> Result<Cvae> {
    if !path.exists() {
        return Err(CliError::StageOrder(format!(
            "{stage} needs a stage-one VAE checkpoint, but {} does not exist; run train-vae first",
            path.display()
        )));
    }
    Ok(Cvae::load(path)?)
}

/// Stage two: fits the flow against a frozen VAE checkpoint.
pub fn train_flow_cmd(cfg: &RunConfig) -> Result<TrainSummary> {
    let sec = &cfg.train_flow;
    let vae = load_vae(&sec.vae_checkpoint, "train-flow")?;
    let mut manifest = Manifest::new("train-flow", cfg);
    manifest.input(&sec.vae_checkpoint)?;
    let vae_hash = vae.hash();
    let sim = load_pools(&sec.sim_pools, &mut manifest)?;
    let real = load_pools(&sec.real_pools, &mut manifest)?;
    let stream = MixSampler::new(
        &real,
        &sim,
        &MixConfig {
            alpha_real: sec.alpha_real,
            seed: sec.mix_seed,
            upsample_real: sec.upsample_real,
        },
    )?;
    let (model, log) = train_flow(&vae, &vae_hash, stream, sec.model, &sec.train, |r| {
        if r.step % 100 == 0 {
            info!("train-flow step {} loss {:.4}", r.step, r.loss);
        }
    })?;
    ensure_dir(&sec.out_dir)?;
    let ckpt = sec.out_dir.join(FLOW_CHECKPOINT);
    model.save(&ckpt)?;
    let log_path = sec.out_dir.join(TRAIN_LOG);
    write_log(&log_path, &log)?;
    manifest.output(&ckpt)?;
    manifest.output(&log_path)?;
    let summary = TrainSummary {
        checkpoint: ckpt,
        hash: model.hash(),
        steps: log.len(),
        first_loss: log.first().map_or(f64::NAN, |r| r.loss),
        final_loss: log.last().map_or(f64::NAN, |r| r.loss),
    };
    manifest.checkpoints.insert("vae".into(), vae_hash);
    manifest.checkpoints.insert("flow".into(), summary.hash.clone());
    manifest.summary = to_json(&summary)?;
    manifest.write(&sec.out_dir.join(MANIFEST))?;
    Ok(summary)
}

/// Rollout id for one grid cell.
pub fn rollout_id(parent: &str, label: Option<ManeuverLabel>, t_end: f64) -> String {
    let l = label.map_or("none", ManeuverLabel::as_str);
    format!("{parent}@{l}@t{t_end}")
}

/// Strips each input future and regenerates it on the label x t_end grid.
/// Every cell of one scenario shares the same prior noise.
pub fn generate(cfg: &RunConfig, parallel: bool) -> Result<Vec<Record>> {
    let sec = &cfg.generate;
    if sec.t_end.is_empty() {
        return Err(CliError::Config("generate.t_end grid is empty".into()));
    }
    let vae = load_vae(&sec.vae_checkpoint, "generate")?;
    let mut manifest = Manifest::new("generate", cfg);
    manifest.input(&sec.vae_checkpoint)?;
    manifest.checkpoints.insert("vae".into(), vae.hash());
    let flow = match &sec.flow_checkpoint {
        Some(p) if p.exists() => {
            let f = FlowModel::load(p)?;
            manifest.input(p)?;
            manifest.checkpoints.insert("flow".into(), f.hash());
            Some(f)
        }
        Some(p) if sec.t_end.iter().any(|&t| t > 0.0) => {
            return Err(CliError::StageOrder(format!(
                "flow checkpoint {} does not exist; run train-flow first",
                p.display()
            )))
        }
        _ => None,
    };
    let inputs = load_scenarios(&sec.input)?;
    manifest.input(&sec.input)?;
    if inputs.is_empty() {
        return Err(CliError::Data(format!("{} holds no scenarios", sec.input.display())));
    }
    let conditioning = flow.as_ref().is_some_and(|f| f.cfg.conditioning);
    let dz = vae.cfg.latent_dim;
    let one = |(k, s): (usize, &Scenario)| -> Result<Vec<Record>> {
        let noise = standard_noise(s.n_actors(), dz, &mut stream_rng(sec.seed, k as u64));
        let history = s.history_only();
        let labels: Vec<Option<ManeuverLabel>> = if !sec.labels.is_empty() {
            sec.labels.iter().copied().map(Some).collect()
        } else if conditioning {
            vec![Some(s.label)]
        } else {
            vec![None]
        };
        let mut out = Vec::with_capacity(labels.len() * sec.t_end.len());
        for &label in &labels {
            for &t_end in &sec.t_end {
                let fcfg = FlowConfig {
                    n_sample_steps: sec.n_sample_steps,
                    t_end,
                    conditioning,
                };
                let g = flow_generate(&vae, flow.as_ref(), &history, label, &fcfg, &noise)?;
                let mut scenario = g.scenario;
                scenario.id = rollout_id(&s.id, label, t_end);
                out.push(Record {
                    scenario,
                    provenance: Some(Provenance {
                        parent: Some(s.id.clone()),
                        seed: Some(sec.seed),
                        generator: Some(if t_end > 0.0 { "flow" } else { "prior" }.to_string()),
                        label,
                        t_end: Some(t_end),
                    }),
                });
            }
        }
        Ok(out)
    };
    let per: Vec<Result<Vec<Record>>> = if parallel {
        inputs.par_iter().enumerate().map(one).collect()
    } else {
        inputs.iter().enumerate().map(one).collect()
    };
    let mut records = Vec::new();
    for r in per {
        records.extend(r?);
    }
    crate::manifest::ensure_parent(&sec.out)?;
    save_records(&sec.out, &records)?;
    manifest.output(&sec.out)?;
    manifest.summary = serde_json::json!({ "inputs": inputs.len(), "rollouts": records.len() });
    manifest.write(&sidecar(&sec.out))?;
    info!("wrote {} rollouts to {}", records.len(), sec.out.display());
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TEndRow {
    pub t_end: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: ManeuverLabel,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: MetricsReport,
    /// Ordered by `t_end`.
    pub by_t_end: Vec<TEndRow>,
    pub by_label: Vec<LabelRow>,
}

impl Evaluation {
    pub fn table(&self) -> String {
        let mut rows = vec![("all".to_string(), self.overall.clone())];
        rows.extend(
            self.by_t_end
                .iter()
                .map(|r| (format!("t_end={}", r.t_end), r.report.clone())),
        );
        rows.extend(
            self.by_label
                .iter()
                .map(|r| (format!("label={}", r.label), r.report.clone())),
        );
        render_table(&rows)
    }
}

/// Scores rollouts against a reference pool, with optional breakdowns.
pub fn evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let sec = &cfg.evaluate;
    let mut manifest = Manifest::new("evaluate", cfg);
    let (_, records) = load_records(&sec.rollouts)?;
    manifest.input(&sec.rollouts)?;
    let reference = load_scenarios(&sec.reference)?;
    manifest.input(&sec.reference)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} holds no rollouts", sec.rollouts.display())));
    }
    let truth: Option<BTreeMap<String, Scenario>> = match &sec.truth {
        Some(p) => {
            manifest.input(p)?;
            Some(load_scenarios(p)?.into_iter().map(|s| (s.id.clone(), s)).collect())
        }
        None => None,
    };
    let score = |group: &[&Record]| -> Result<MetricsReport> {
        let generated: Vec<Scenario> = group.iter().map(|r| r.scenario.clone()).collect();
        let paired = match &truth {
            Some(t) => Some(
                group
                    .iter()
                    .map(|r| {
                        let parent = r
                            .provenance
                            .as_ref()
                            .and_then(|p| p.parent.clone())
                            .unwrap_or(r.scenario.id.clone());
                        t.get(&parent)
                            .cloned()
                            .ok_or_else(|| CliError::Data(format!("no ground truth for {parent}")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(report(&generated, &reference, paired.as_deref(), &sec.metrics)?)
    };
    let all: Vec<&Record> = records.iter().collect();
    let overall = score(&all)?;
    let mut by_t_end = Vec::new();
    if sec.by_t_end {
        let mut grid: Vec<f64> = records.iter().filter_map(|r| r.provenance.as_ref()?.t_end).collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        for t in grid {
            let group: Vec<&Record> = all
                .iter()
                .copied()
                .filter(|r| r.provenance.as_ref().and_then(|p| p.t_end) == Some(t))
                .collect();
            by_t_end.push(TEndRow {
                t_end: t,
                report: score(&group)?,
            });
        }
    }
    let mut by_label = Vec::new();
    if sec.by_label {
        for label in ManeuverLabel::ALL {
            let group: Vec<&Record> = all
                .iter()
                .copied()
                .filter(|r| r.provenance.as_ref().and_then(|p| p.label).unwrap_or(r.scenario.label) == label)
                .collect();
            if !group.is_empty() {
                by_label.push(LabelRow {
                    label,
                    report: score(&group)?,
                });
            }
        }
    }
    let eval = Evaluation {
        overall,
        by_t_end,
        by_label,
    };
    let mut text = serde_json::to_string_pretty(&eval).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_file(&sec.out, text.as_bytes())?;
    manifest.output(&sec.out)?;
    manifest.summary = to_json(&eval.overall)?;
    manifest.write(&sidecar(&sec.out))?;
    print!("{}", eval.table());
    Ok(eval)
}

/// Renders scenario `index` of `input` to an SVG file.
pub fn render(input: &Path, index: usize, out: &Path) -> Result<()> {
    let scenarios = load_scenarios(input)?;
    let s = scenarios.get(index).ok_or_else(|| {
        CliError::Data(format!(
            "{} has {} scenarios, no index {index}",
            input.display(),
            scenarios.len()
        ))
    })?;
    write_file(out, crate::render::svg(s).as_bytes())
}
