//! Command-line front end. Run directories default to `$FALLBACK_RL_OUT`
//! (falling back to `./runs`) unless the config pins `run.output_dir`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use fallback_rl::env;
use fallback_rl::eval::{
    self, alpha_sweep, evaluate, export_curves, load_policy_net, qlandscape, GreedyNet,
};
use fallback_rl::oracle::{self, Constraint};
use fallback_rl::train::{run_training, TrainConfig};

#[derive(Parser)]
#[command(
    name = "fallback-rl",
    version,
    about = "Fallback-strategy training on a two-way intersection"
)]
struct Cli {
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the optimal agent and its pseudo-agents from a config file.
    Train { config: PathBuf },
    /// Greedy-evaluate a checkpoint; optionally on a perturbed environment.
    Eval {
        ckpt: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Grow one target's collision radius, e.g. --perturb target=1,factor=1.5
        #[arg(long)]
        perturb: Option<String>,
    },
    /// Retrain the N=1 pair once per α and tabulate the final divergence.
    SweepAlpha {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
    },
    /// Mean greedy Q-value per (step, 1 m/s speed bin) from sampled rollouts.
    Qmap {
        ckpt: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        trajectories: usize,
    },
    /// Exact finite-horizon solve of the configured intersection. Without
    /// --constraint, reports both crossing strategies.
    Oracle {
        config: PathBuf,
        /// `none` or `cross-after-target-1`
        #[arg(long)]
        constraint: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Also write the per-strategy table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export plot-ready per-agent curves from a finished run directory.
    Curves { run_dir: PathBuf },
}

fn output_root() -> PathBuf {
    std::env::var_os("FALLBACK_RL_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

/// Deterministic run directory: the config's own `output_dir` if set, else
/// `<root>/<config stem><tag>-seed<seed>`.
fn run_dir_for(cfg: &TrainConfig, config_path: &Path, tag: &str) -> PathBuf {
    if let Some(dir) = &cfg.run.output_dir {
        return PathBuf::from(dir);
    }
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output_root().join(format!("{stem}{tag}-seed{}", cfg.run.seed))
}

fn parse_perturb(arg: &str) -> anyhow::Result<(usize, f64)> {
    let mut target = None;
    let mut factor = None;
    for part in arg.split(',') {
        match part.split_once('=') {
            Some(("target", v)) => target = Some(v.parse().context("bad perturb target")?),
            Some(("factor", v)) => factor = Some(v.parse().context("bad perturb factor")?),
            _ => bail!("perturb expects target=<1..3>,factor=<real>, got {part:?}"),
        }
    }
    match (target, factor) {
        (Some(t), Some(f)) => Ok((t, f)),
        _ => bail!("perturb needs both target= and factor="),
    }
}

fn oracle_text(sol: &oracle::OracleResult, dt: f64) -> String {
    let crossing = match sol.crossing_step {
        Some(k) => format!("{k} ({} s)", k as f64 * dt),
        None => "never".into(),
    };
    let actions: Vec<String> = sol.actions.iter().map(|a| a.accel().to_string()).collect();
    format!(
        "strategy {}\nvalue {}\nsteps {}\noutcome {}\ncrossing_step {}\nq_start {:?}\nmin_target_distance {:?}\nactions_mps2 [{}]\n",
        sol.constraint.as_str(),
        sol.value,
        sol.steps,
        sol.outcome.as_str(),
        crossing,
        sol.q_start,
        sol.min_target_distance,
        actions.join(",")
    )
}

fn oracle_csv_row(sol: &oracle::OracleResult, dt: f64) -> String {
    let (step, time) = match sol.crossing_step {
        Some(k) => (k.to_string(), (k as f64 * dt).to_string()),
        None => (String::new(), String::new()),
    };
    format!(
        "{},{},{},{},{},{},{},{},{}",
        sol.constraint.as_str(),
        sol.value,
        sol.steps,
        sol.outcome.as_str(),
        step,
        time,
        sol.min_target_distance[0],
        sol.min_target_distance[1],
        sol.min_target_distance[2]
    )
}

const ORACLE_CSV_HEADER: &str =
    "strategy,value,steps,outcome,crossing_step,crossing_time_s,min_d1,min_d2,min_d3";

fn main() -> anyhow::Result<()> {
    // Die quietly when a downstream pipe (`| head`, …) closes early instead
    // of panicking on the broken-pipe write error.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let dir = run_dir_for(&cfg, &config, "");
            println!(
                "training {} agents for {} steps each into {}",
                cfg.run.num_pseudo_agents + 1,
                cfg.run.steps_per_agent,
                dir.display()
            );
            let out = run_training(&cfg, &dir)?;
            println!(
                "finished after {} rounds ({} reference comparisons)",
                out.rounds, out.metric_evaluations
            );
            for slot in &out.agents {
                let rep = evaluate(
                    &GreedyNet(slot.learner.online()),
                    &format!("agent-{}", slot.id),
                    &cfg.environment,
                    1,
                    &[],
                )?;
                print!(
                    "agent {}: {} episodes, greedy return {} ({}, {} steps)",
                    slot.id,
                    slot.episodes,
                    rep.mean_return,
                    if rep.goal_rate > 0.0 {
                        "goal"
                    } else if rep.collision_rate > 0.0 {
                        "collision"
                    } else {
                        "timeout"
                    },
                    rep.mean_length
                );
                for &j in &slot.references {
                    if let Some(m) = out.final_metric_episode_mean(slot.id, j, 100) {
                        print!(", final-100 divergence vs {j}: {m:.4}");
                    }
                }
                println!();
            }
            for p in &out.final_checkpoints {
                println!("checkpoint {}", p.display());
            }
            Ok(())
        }
        Cmd::Eval {
            ckpt,
            config,
            episodes,
            perturb,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let net = load_policy_net(&ckpt, &cfg)?;
            let envc = match &perturb {
                Some(arg) => {
                    let (target, factor) = parse_perturb(arg)?;
                    env::perturb(&cfg.environment, target, factor)?
                }
                None => cfg.environment.clone(),
            };
            let id = ckpt.display().to_string();
            let rep = evaluate(&GreedyNet(&net), &id, &envc, episodes, &[])?;
            if let Some(arg) = &perturb {
                println!("perturbation {arg}");
            }
            print!("{}", rep.to_text());
            Ok(())
        }
        Cmd::SweepAlpha { config, alphas } => {
            let cfg = load_config(&config, cli.seed)?;
            let dir = run_dir_for(&cfg, &config, "-sweep");
            println!("sweeping α over {alphas:?} into {}", dir.display());
            let res = alpha_sweep(&cfg, &alphas, &dir)?;
            std::fs::create_dir_all(&dir)?;
            let csv_path = dir.join("sweep.csv");
            let mut buf = Vec::new();
            res.write_csv(&mut buf)?;
            std::fs::write(&csv_path, &buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
            println!("max adjacent jump {}", res.max_adjacent_jump());
            println!("wrote {}", csv_path.display());
            if res.rows.iter().any(|r| r.error.is_some()) {
                bail!("one or more sweep cells failed (see table)");
            }
            Ok(())
        }
        Cmd::Qmap {
            ckpt,
            config,
            trajectories,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let net = load_policy_net(&ckpt, &cfg)?;
            let land = qlandscape(&net, &cfg.environment, trajectories)?;
            let mut buf = Vec::new();
            land.write_csv(&mut buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
            eprintln!(
                "{} trajectories, {} visits, speed centroid {:.3} m/s, outcomes {:?}",
                land.trajectories,
                land.visits_total(),
                land.speed_centroid(),
                land.outcomes.iter().map(|o| o.as_str()).collect::<Vec<_>>()
            );
            Ok(())
        }
        Cmd::Oracle {
            config,
            constraint,
            gamma,
            csv,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let envc = &cfg.environment;
            let solutions = match constraint.as_deref() {
                Some(c) => vec![oracle::solve(envc, gamma, Constraint::parse(c)?)?],
                None => {
                    let (a, b) = oracle::two_solutions(envc, gamma)?;
                    vec![a, b]
                }
            };
            for sol in &solutions {
                println!("{}", oracle_text(sol, envc.dt));
            }
            if solutions.len() == 2 {
                println!("value_gap {}", solutions[0].value - solutions[1].value);
            }
            if let Some(path) = csv {
                let mut text = String::from(ORACLE_CSV_HEADER);
                for sol in &solutions {
                    text.push('\n');
                    text.push_str(&oracle_csv_row(sol, envc.dt));
                }
                text.push('\n');
                std::fs::write(&path, text)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Cmd::Curves { run_dir } => {
            let out = export_curves(&run_dir)?;
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            for msg in &out.missing {
                eprintln!("skipped {msg}");
            }
            if out.files.is_empty() {
                bail!("no curves exported");
            }
            println!("smoothing window {} episodes", eval::SMOOTHING_WINDOW);
            Ok(())
        }
    }
}
