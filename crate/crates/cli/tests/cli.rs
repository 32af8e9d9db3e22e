use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scenflow_cli::commands::Evaluation;
use scenflow_cli::manifest::Manifest;
use scenflow_core::cvae::{standard_noise, Cvae};
use scenflow_core::io::{file_sha256, load_records, load_scenarios};
use scenflow_core::metrics::{report, MetricsConfig};
use scenflow_core::scene::{validate_scenario_with, ValidationOptions};
use scenflow_core::synth::stream_rng;

const TINY: &str = r#"
schema_version = 1

[synth]
seed = 4
n_nominal = 10
n_aggressive = 10
n_tuned = 10
n_pseudo_real = 10

[synth.scenario]
dt = 0.2
history_steps = 5
future_steps = 25

[train_vae]
pools = ["data/sim_nominal.jsonl", "data/sim_aggressive.jsonl", "data/pseudo_real.jsonl"]

[train_vae.model]
latent_dim = 4
dt = 0.2
history_steps = 5
future_steps = 25
backbone = { d_model = 8, n_heads = 2, n_blocks = 1, top_k_actors = 4, top_k_map_nodes = 4 }

[train_vae.train]
steps = 20
seed = 1

[train_flow]
sim_pools = ["data/sim_aggressive.jsonl", "data/sim_tuned.jsonl"]
real_pools = ["data/pseudo_real.jsonl"]
alpha_real = 0.4

[train_flow.model]
latent_dim = 4
backbone = { d_model = 8, n_heads = 2, n_blocks = 1, top_k_actors = 4, top_k_map_nodes = 4 }

[train_flow.train]
steps = 20

[generate]
input = "data/pseudo_real.jsonl"
t_end = [0.0, 0.5, 1.0]
n_sample_steps = 5
seed = 11

[evaluate]
rollouts = "runs/rollouts.jsonl"
reference = "data/pseudo_real.jsonl"
truth = "data/pseudo_real.jsonl"
"#;

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

fn scenflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenflow"))
        .current_dir(dir)
        .arg("--config")
        .arg("run.toml")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = scenflow(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(dir: &Path, parallel: bool) {
    let extra: &[&str] = if parallel { &["--parallel"] } else { &[] };
    for cmd in [
        &["synth"][..],
        &["train-vae"],
        &["train-flow"],
        &["generate"],
        &["evaluate"],
    ] {
        let args: Vec<&str> = cmd.iter().chain(extra).copied().collect();
        ok(dir, &args);
    }
}

/// Hash of every file under `dir` except the config, keyed by relative path.
fn tree_hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.toml" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), file_sha256(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_identical_across_reruns_and_thread_counts() {
    let (a, b, c) = (workdir(), workdir(), workdir());
    pipeline(a.path(), false);
    pipeline(b.path(), false);
    pipeline(c.path(), true);
    let ha = tree_hashes(a.path());
    assert!(ha.len() >= 14, "{ha:?}");
    assert_eq!(ha, tree_hashes(b.path()));
    assert_eq!(ha, tree_hashes(c.path()));
}

#[test]
fn synth_reports_pools_and_accounts_for_rejections() {
    let dir = workdir();
    let stdout = ok(dir.path(), &["synth"]);
    assert!(stdout.contains("sim_nominal") && stdout.contains("pseudo_real"));
    let m = Manifest::read(&dir.path().join("data/manifest.json")).unwrap();
    assert_eq!(m.command, "synth");
    assert_eq!(m.outputs.len(), 4);
    let stats = m.summary.as_array().unwrap();
    let mut rates = BTreeMap::new();
    for s in stats {
        let log = &s["rejections"];
        let rejected: u64 = log["by_reason"]
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(
            rejected,
            log["attempts"].as_u64().unwrap() - log["accepted"].as_u64().unwrap()
        );
        rates.insert(
            s["pool"].as_str().unwrap().to_string(),
            s["near_miss_rate"].as_f64().unwrap(),
        );
    }
    assert!(rates["sim_aggressive"] > rates["sim_nominal"]);
}

#[test]
fn flow_before_vae_is_a_stage_order_error() {
    let dir = workdir();
    ok(dir.path(), &["synth"]);
    let out = scenflow(dir.path(), &["train-flow"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-vae first"));
}

#[test]
fn exit_codes_distinguish_usage_data_and_numerical_failures() {
    let dir = workdir();
    assert_eq!(scenflow(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        scenflow(dir.path(), &["--set", "synth.bogus=1", "synth"]).status.code(),
        Some(1)
    );
    assert_eq!(scenflow(dir.path(), &["train-vae"]).status.code(), Some(2));
    ok(dir.path(), &["synth"]);
    std::fs::write(dir.path().join("broken.jsonl"), "{not json\n").unwrap();
    let out = scenflow(dir.path(), &["train-vae", "--pools", "broken.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let out = scenflow(
        dir.path(),
        &[
            "--set",
            "train_vae.train.lr=1e300",
            "--set",
            "train_vae.train.grad_clip=1e300",
            "train-vae",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flags_override_the_config_file() {
    let dir = workdir();
    ok(dir.path(), &["synth", "--n-per-pool", "3", "--out-dir", "pools"]);
    let m = Manifest::read(&dir.path().join("pools/manifest.json")).unwrap();
    assert_eq!(m.config.synth.n_nominal, 3);
    assert_eq!(
        load_scenarios(&dir.path().join("pools/sim_tuned.jsonl")).unwrap().len(),
        3
    );
}

#[test]
fn generation_grid_shares_noise_and_records_provenance() {
    let dir = workdir();
    for cmd in ["synth", "train-vae", "train-flow", "generate"] {
        ok(dir.path(), &[cmd]);
    }
    let vae_manifest = Manifest::read(&dir.path().join("runs/vae/manifest.json")).unwrap();
    let flow_manifest = Manifest::read(&dir.path().join("runs/flow/manifest.json")).unwrap();
    assert_eq!(flow_manifest.checkpoints["vae"], vae_manifest.checkpoints["vae"]);

    let inputs = load_scenarios(&dir.path().join("data/pseudo_real.jsonl")).unwrap();
    let (_, records) = load_records(&dir.path().join("runs/rollouts.jsonl")).unwrap();
    assert_eq!(records.len(), 3 * inputs.len());
    let vae = Cvae::load(&dir.path().join("runs/vae/vae.ckpt")).unwrap();
    let opts = ValidationOptions {
        check_collisions: false,
        ..Default::default()
    };
    for (k, s) in inputs.iter().enumerate() {
        let cells = &records[3 * k..3 * k + 3];
        let grid: Vec<f64> = cells
            .iter()
            .map(|r| r.provenance.as_ref().unwrap().t_end.unwrap())
            .collect();
        assert_eq!(grid, vec![0.0, 0.5, 1.0]);
        assert!(cells
            .iter()
            .all(|r| r.provenance.as_ref().unwrap().parent.as_deref() == Some(s.id.as_str())));
        // The t_end = 0 cell is the prior decode under this scenario's noise.
        let p = vae.prepare(&s.history_only(), false).unwrap();
        let noise = standard_noise(s.n_actors(), 4, &mut stream_rng(11, k as u64));
        let z = vae.prior(&p).unwrap().reparameterize(&noise).unwrap().sample.unwrap();
        assert_eq!(cells[0].scenario.future, vae.decode(&p, &z).unwrap().future);
        for r in cells {
            assert_eq!(r.scenario.history, s.history);
            let report = validate_scenario_with(&r.scenario, &opts);
            assert!(report.is_valid(), "{:?}", report.issues);
        }
    }
}

#[test]
fn evaluation_matches_direct_metric_calls() {
    let dir = workdir();
    for cmd in ["synth", "train-vae", "train-flow", "generate", "evaluate"] {
        ok(dir.path(), &[cmd]);
    }
    let text = std::fs::read_to_string(dir.path().join("runs/report.json")).unwrap();
    let eval: Evaluation = serde_json::from_str(&text).unwrap();
    let (_, records) = load_records(&dir.path().join("runs/rollouts.jsonl")).unwrap();
    let reference = load_scenarios(&dir.path().join("data/pseudo_real.jsonl")).unwrap();
    let generated: Vec<_> = records.iter().map(|r| r.scenario.clone()).collect();
    let truth: Vec<_> = records
        .iter()
        .map(|r| {
            let parent = r.provenance.as_ref().unwrap().parent.as_ref().unwrap();
            reference.iter().find(|s| &s.id == parent).unwrap().clone()
        })
        .collect();
    let direct = report(&generated, &reference, Some(&truth), &MetricsConfig::default()).unwrap();
    assert_eq!(eval.overall, direct);
    let order: Vec<f64> = eval.by_t_end.iter().map(|r| r.t_end).collect();
    assert_eq!(order, vec![0.0, 0.5, 1.0]);

    ok(
        dir.path(),
        &[
            "evaluate",
            "--rollouts",
            "data/sim_tuned.jsonl",
            "--reference",
            "data/sim_tuned.jsonl",
            "--truth",
            "data/sim_tuned.jsonl",
            "--out",
            "self.json",
        ],
    );
    let own: Evaluation =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("self.json")).unwrap()).unwrap();
    assert_eq!(
        (own.overall.jsd_velocity, own.overall.jsd_accel, own.overall.jsd_jerk),
        (0.0, 0.0, 0.0)
    );
    assert_eq!(own.overall.displacement_error, Some(0.0));
}

#[test]
fn render_is_deterministic_and_handles_empty_futures() {
    let dir = workdir();
    ok(dir.path(), &["synth"]);
    ok(
        dir.path(),
        &["render", "data/sim_nominal.jsonl", "a.svg", "--index", "2"],
    );
    ok(
        dir.path(),
        &["render", "data/sim_nominal.jsonl", "b.svg", "--index", "2"],
    );
    let a = std::fs::read(dir.path().join("a.svg")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.svg")).unwrap());
    let s = &load_scenarios(&dir.path().join("data/sim_nominal.jsonl")).unwrap()[2];
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains(&format!("actors: {} ", s.n_actors())));
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));

    let svg = scenflow_cli::render::svg(&s.history_only());
    assert!(svg.contains(&format!("actors: {} ", s.n_actors())));
    assert!(svg.contains("0 future steps"));
    assert_eq!(
        scenflow(
            dir.path(),
            &["render", "data/sim_nominal.jsonl", "c.svg", "--index", "99"]
        )
        .status
        .code(),
        Some(2)
    );
}
