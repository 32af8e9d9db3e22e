//! Evaluation metrics over rollouts: minimum time-to-collision, near misses,
//! collisions, displacement error and kinematic Jensen-Shannon divergence.
//!
//! A rollout is a [`Scenario`] whose future holds the generated (or logged)
//! trajectories. Time-indexed metrics look at the present state plus the future.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::box_iou;
use crate::scene::{relative_pose, ActorState, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ego actor {0} not present in rollout")]
    MissingEgo(u32),
    #[error("empty rollout set")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Half-width of the heading-aligned corridor that defines a leading actor.
    pub corridor_half_width: f64,
    pub ttc_cap: f64,
    pub near_miss_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            corridor_half_width: 1.75,
            ttc_cap: 10.0,
            near_miss_threshold: 3.0,
            iou_threshold: crate::geometry::DEFAULT_IOU_THRESHOLD,
        }
    }
}

/// Lower bound for reported TTC, used once boxes already touch.
pub const MIN_TTC: f64 = 1e-3;

/// Present state followed by every future step.
fn timeline(s: &Scenario) -> impl Iterator<Item = &Vec<ActorState>> {
    s.history.last().into_iter().chain(s.future.iter())
}

/// TTC between the ego and its closest leading actor in one frame, if closing.
pub fn frame_ttc(frame: &[ActorState], ego: usize, cfg: &MetricsConfig) -> Option<f64> {
    let e = &frame[ego];
    let mut lead: Option<(f64, f64)> = None;
    for (j, o) in frame.iter().enumerate() {
        if j == ego {
            continue;
        }
        let rel = relative_pose(&e.pose(), &o.pose());
        if rel.x <= 0.0 || rel.y.abs() > cfg.corridor_half_width {
            continue;
        }
        let gap = rel.x - 0.5 * (e.length + o.length);
        let closing = e.v - o.v * rel.yaw.cos();
        if lead.is_none_or(|(g, _)| gap < g) {
            lead = Some((gap, closing));
        }
    }
    let (gap, closing) = lead?;
    if closing <= 0.0 {
        return None;
    }
    Some((gap / closing).max(MIN_TTC))
}

/// Minimum over timesteps of ego-to-lead TTC, capped at `cfg.ttc_cap`.
pub fn min_sttc(rollout: &Scenario, cfg: &MetricsConfig) -> Result<f64, MetricsError> {
    let ego = rollout.ego_index().ok_or(MetricsError::MissingEgo(rollout.ego))?;
    Ok(timeline(rollout)
        .filter_map(|f| frame_ttc(f, ego, cfg))
        .fold(cfg.ttc_cap, f64::min))
}

/// Fraction of actors whose footprint overlaps another's above the IOU threshold at any step.
pub fn collision_rate(rollout: &Scenario, cfg: &MetricsConfig) -> f64 {
    let n = rollout.n_actors();
    if n == 0 {
        return 0.0;
    }
    let mut hit = vec![false; n];
    for frame in timeline(rollout) {
        for i in 0..n {
            for j in i + 1..n {
                if box_iou(&frame[i], &frame[j]) > cfg.iou_threshold {
                    hit[i] = true;
                    hit[j] = true;
                }
            }
        }
    }
    hit.iter().filter(|&&h| h).count() as f64 / n as f64
}

/// Fraction of rollouts with minSTTC below the near-miss threshold and no collision.
pub fn near_miss(rollouts: &[Scenario], cfg: &MetricsConfig) -> Result<f64, MetricsError> {
    if rollouts.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in rollouts {
        if min_sttc(r, cfg)? < cfg.near_miss_threshold && collision_rate(r, cfg) == 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / rollouts.len() as f64)
}

/// Mean Euclidean position error over actors and future steps.
pub fn displacement_error(rollout: &Scenario, truth: &Scenario) -> Result<f64, MetricsError> {
    if rollout.future.len() != truth.future.len() || rollout.n_actors() != truth.n_actors() {
        return Err(MetricsError::Shape(format!(
            "rollout {}x{} vs truth {}x{}",
            rollout.future.len(),
            rollout.n_actors(),
            truth.future.len(),
            truth.n_actors()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (fr, ft) in rollout.future.iter().zip(&truth.future) {
        if fr.len() != ft.len() {
            return Err(MetricsError::Shape("ragged future".into()));
        }
        for (a, b) in fr.iter().zip(ft) {
            sum += (a.x - b.x).hypot(a.y - b.y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::Shape("empty future".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Velocity,
    Accel,
    Jerk,
}

impl Quantity {
    pub const ALL: [Quantity; 3] = [Quantity::Velocity, Quantity::Accel, Quantity::Jerk];

    pub fn bins(self) -> Bins {
        match self {
            Quantity::Velocity => Bins::new(0.0, 40.0, 64),
            Quantity::Accel => Bins::new(-10.0, 10.0, 64),
            Quantity::Jerk => Bins::new(-50.0, 50.0, 64),
        }
    }
}

/// Uniform histogram layout with one overflow bin at each end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Bins {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    /// Bin index in `0..n + 2`; 0 is underflow and `n + 1` overflow (NaN included).
    pub fn index(&self, v: f64) -> usize {
        if v < self.lo {
            return 0;
        }
        if v >= self.hi || v.is_nan() {
            return self.n + 1;
        }
        let k = ((v - self.lo) / (self.hi - self.lo) * self.n as f64) as usize;
        1 + k.min(self.n - 1)
    }

    pub fn histogram(&self, values: impl IntoIterator<Item = f64>) -> Vec<f64> {
        let mut h = vec![0.0; self.n + 2];
        let mut total = 0.0;
        for v in values {
            h[self.index(v)] += 1.0;
            total += 1.0;
        }
        if total > 0.0 {
            h.iter_mut().for_each(|c| *c /= total);
        }
        h
    }
}

/// Per-actor samples of one kinematic quantity, from the present through the future.
pub fn kinematic_samples(rollout: &Scenario, q: Quantity) -> Vec<f64> {
    let dt = rollout.dt;
    let mut out = Vec::new();
    for i in 0..rollout.n_actors() {
        let v: Vec<f64> = timeline(rollout).map(|f| f[i].v).collect();
        match q {
            Quantity::Velocity => out.extend(&v[1.min(v.len())..]),
            Quantity::Accel => out.extend(v.windows(2).map(|w| (w[1] - w[0]) / dt)),
            Quantity::Jerk => out.extend(v.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]) / (dt * dt))),
        }
    }
    out
}

/// Jensen-Shannon divergence (nats) between two discrete distributions.
/// Symmetric bit-for-bit in its arguments.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (term(a, m) + term(b, m))
        })
        .sum();
    total.clamp(0.0, std::f64::consts::LN_2)
}

pub fn kinematics_jsd(a: &[Scenario], b: &[Scenario], q: Quantity) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    let bins = q.bins();
    let ha = bins.histogram(a.iter().flat_map(|s| kinematic_samples(s, q)));
    let hb = bins.histogram(b.iter().flat_map(|s| kinematic_samples(s, q)));
    Ok(jsd(&ha, &hb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_rollouts: usize,
    pub median_minsttc: f64,
    pub near_miss_rate: f64,
    pub collision_rate: f64,
    /// Present only when ground truth was supplied.
    pub displacement_error: Option<f64>,
    pub jsd_velocity: f64,
    pub jsd_accel: f64,
    pub jsd_jerk: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Aggregates every metric for `generated`, with JSDs measured against `reference`.
/// `truth`, when given, pairs element-wise with `generated`.
pub fn report(
    generated: &[Scenario],
    reference: &[Scenario],
    truth: Option<&[Scenario]>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut ttcs = generated
        .iter()
        .map(|r| min_sttc(r, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let collisions: f64 = generated.iter().map(|r| collision_rate(r, cfg)).sum::<f64>() / generated.len() as f64;
    let displacement = match truth {
        Some(t) => {
            if t.len() != generated.len() {
                return Err(MetricsError::Shape(format!(
                    "{} rollouts vs {} ground truths",
                    generated.len(),
                    t.len()
                )));
            }
            let sum = generated
                .iter()
                .zip(t)
                .map(|(g, t)| displacement_error(g, t))
                .sum::<Result<f64, _>>()?;
            Some(sum / generated.len() as f64)
        }
        None => None,
    };
    Ok(MetricsReport {
        n_rollouts: generated.len(),
        near_miss_rate: near_miss(generated, cfg)?,
        median_minsttc: median(&mut ttcs),
        collision_rate: collisions,
        displacement_error: displacement,
        jsd_velocity: kinematics_jsd(generated, reference, Quantity::Velocity)?,
        jsd_accel: kinematics_jsd(generated, reference, Quantity::Accel)?,
        jsd_jerk: kinematics_jsd(generated, reference, Quantity::Jerk)?,
    })
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 8] = [
        "n",
        "median_minsttc",
        "near_miss",
        "collision",
        "disp_err",
        "jsd_vel",
        "jsd_acc",
        "jsd_jerk",
    ];

    pub fn cells(&self) -> Vec<String> {
        vec![
            self.n_rollouts.to_string(),
            format!("{:.3}", self.median_minsttc),
            format!("{:.3}", self.near_miss_rate),
            format!("{:.3}", self.collision_rate),
            self.displacement_error.map_or("-".to_string(), |d| format!("{d:.3}")),
            format!("{:.4}", self.jsd_velocity),
            format!("{:.4}", self.jsd_accel),
            format!("{:.4}", self.jsd_jerk),
        ]
    }
}

/// Aligned plain-text table, one row per labelled report.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let mut grid: Vec<Vec<String>> = vec![std::iter::once("run".to_string())
        .chain(MetricsReport::COLUMNS.iter().map(|c| c.to_string()))
        .collect()];
    for (name, r) in rows {
        grid.push(std::iter::once(name.clone()).chain(r.cells()).collect());
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &grid {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
