use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scenflow_cli::commands;
use scenflow_cli::config::{parse_override, path_value, paths_value, resolve};
use scenflow_cli::error::{CliError, Result};

/// Safety-critical traffic scenario generation with a latent flow.
#[derive(Parser)]
#[command(name = "scenflow", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train_flow.alpha_real=0.4`. Repeatable; applied last.
    #[arg(long = "set", global = true, value_parser = parse_override)]
    sets: Vec<(String, toml::Value)>,
    /// Spread per-scenario work over threads. Outputs are identical either way.
    #[arg(long, global = true)]
    parallel: bool,
}

#[derive(Clone, Subcommand)]
enum Command {
    /// Generate the nominal, critical and pseudo-real scenario pools.
    Synth {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Scenario count for every pool.
        #[arg(long)]
        n_per_pool: Option<usize>,
    },
    /// Stage one: train the scenario VAE.
    TrainVae {
        #[arg(long, value_delimiter = ',')]
        pools: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage two: train the latent flow against a frozen VAE.
    TrainFlow {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sim_pools: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        real_pools: Vec<PathBuf>,
        #[arg(long)]
        alpha_real: Option<f64>,
        #[arg(long)]
        conditioning: Option<bool>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regenerate futures for a scenario file over a label x t_end grid.
    Generate {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        t_end: Vec<f64>,
        /// nominal, safety_critical or very_safety_critical.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score rollouts against a reference pool.
    Evaluate {
        #[arg(long)]
        rollouts: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw one scenario as SVG.
    Render {
        input: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn push<T: Into<toml::Value>>(o: &mut Vec<(String, toml::Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push((key.to_string(), v.into()));
    }
}

fn push_path(o: &mut Vec<(String, toml::Value)>, key: &str, v: Option<PathBuf>) {
    if let Some(p) = v {
        o.push((key.to_string(), path_value(&p)));
    }
}

fn push_paths(o: &mut Vec<(String, toml::Value)>, key: &str, v: Vec<PathBuf>) {
    if !v.is_empty() {
        o.push((key.to_string(), paths_value(&v)));
    }
}

fn int(v: Option<impl TryInto<i64>>) -> Result<Option<i64>> {
    v.map(|x| {
        x.try_into()
            .map_err(|_| CliError::Config("integer flag out of range".into()))
    })
    .transpose()
}

fn run(cli: Cli) -> Result<()> {
    let mut o = Vec::new();
    match cli.command.clone() {
        Command::Synth {
            out_dir,
            seed,
            n_per_pool,
        } => {
            push_path(&mut o, "synth.out_dir", out_dir);
            push(&mut o, "synth.seed", int(seed)?);
            let n = int(n_per_pool)?;
            for key in ["n_nominal", "n_aggressive", "n_tuned", "n_pseudo_real"] {
                push(&mut o, &format!("synth.{key}"), n);
            }
        }
        Command::TrainVae {
            pools,
            out_dir,
            steps,
            seed,
        } => {
            push_paths(&mut o, "train_vae.pools", pools);
            push_path(&mut o, "train_vae.out_dir", out_dir);
            push(&mut o, "train_vae.train.steps", int(steps)?);
            push(&mut o, "train_vae.train.seed", int(seed)?);
        }
        Command::TrainFlow {
            vae,
            sim_pools,
            real_pools,
            alpha_real,
            conditioning,
            out_dir,
            steps,
            seed,
        } => {
            push_path(&mut o, "train_flow.vae_checkpoint", vae);
            push_paths(&mut o, "train_flow.sim_pools", sim_pools);
            push_paths(&mut o, "train_flow.real_pools", real_pools);
            push(&mut o, "train_flow.alpha_real", alpha_real);
            push(&mut o, "train_flow.model.conditioning", conditioning);
            push_path(&mut o, "train_flow.out_dir", out_dir);
            push(&mut o, "train_flow.train.steps", int(steps)?);
            push(&mut o, "train_flow.train.seed", int(seed)?);
        }
        Command::Generate {
            vae,
            flow,
            input,
            out,
            t_end,
            labels,
            seed,
        } => {
            push_path(&mut o, "generate.vae_checkpoint", vae);
            push_path(&mut o, "generate.flow_checkpoint", flow);
            push_path(&mut o, "generate.input", input);
            push_path(&mut o, "generate.out", out);
            if !t_end.is_empty() {
                push(&mut o, "generate.t_end", Some(t_end));
            }
            if !labels.is_empty() {
                push(&mut o, "generate.labels", Some(labels));
            }
            push(&mut o, "generate.seed", int(seed)?);
        }
        Command::Evaluate {
            rollouts,
            reference,
            truth,
            out,
        } => {
            push_path(&mut o, "evaluate.rollouts", rollouts);
            push_path(&mut o, "evaluate.reference", reference);
            push_path(&mut o, "evaluate.truth", truth);
            push_path(&mut o, "evaluate.out", out);
        }
        Command::Render { .. } => {}
    }
    o.extend(cli.global.sets);
    let cfg = resolve(cli.global.config.as_deref(), &o)?;
    let parallel = cli.global.parallel;
    match cli.command {
        Command::Synth { .. } => {
            commands::synth(&cfg, parallel)?;
        }
        Command::TrainVae { .. } => {
            let s = commands::train_vae_cmd(&cfg)?;
            println!("vae checkpoint {} sha256 {}", s.checkpoint.display(), s.hash);
        }
        Command::TrainFlow { .. } => {
            let s = commands::train_flow_cmd(&cfg)?;
            println!("flow checkpoint {} sha256 {}", s.checkpoint.display(), s.hash);
        }
        Command::Generate { .. } => {
            let r = commands::generate(&cfg, parallel)?;
            println!("{} rollouts written to {}", r.len(), cfg.generate.out.display());
        }
        Command::Evaluate { .. } => {
            commands::evaluate(&cfg)?;
        }
        Command::Render { input, out, index } => commands::render(&input, index, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCENFLOW_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(CliError::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scenflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
