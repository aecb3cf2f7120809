//! Post-training experiment harness: greedy policy evaluation, Q-value
//! landscapes over (time, speed), the shaping-scale sweep, the sensor-growth
//! perturbation comparison, and plot-ready curve export from episode logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::divergence::{metric, FeatureHistogram};
use crate::env::{self, EnvConfig};
use crate::learner::greedy_action;
use crate::mdp::{Action, Outcome, StateVector};
use crate::nn::{self, QNetwork};
use crate::train::{run_training, EpisodeRecord, TrainConfig};
use crate::{Error, Result};

/// Anything that can pick an action for an observation. Evaluation policies
/// are stateless: scripted ones index by step.
pub trait Policy {
    fn action(&self, obs: &StateVector, step: usize) -> Result<Action>;
}

/// ε = 0 greedy play of a value network.
pub struct GreedyNet<'a>(pub &'a QNetwork);

impl Policy for GreedyNet<'_> {
    fn action(&self, obs: &StateVector, _step: usize) -> Result<Action> {
        greedy_action(self.0, obs)
    }
}

/// Fixed action script (e.g. an exact planner's optimal sequence).
pub struct Scripted(pub Vec<Action>);

impl Policy for Scripted {
    fn action(&self, _obs: &StateVector, step: usize) -> Result<Action> {
        self.0.get(step).copied().ok_or_else(|| {
            Error::Contract(format!(
                "script of {} actions exhausted at step {step}",
                self.0.len()
            ))
        })
    }
}

/// One evaluation episode.
#[derive(Debug, Clone)]
pub struct EpisodeRollout {
    pub base_return: f64,
    pub length: usize,
    pub outcome: Outcome,
    pub speeds: Vec<f64>,
}

pub fn run_policy_episodes<P: Policy>(
    policy: &P,
    cfg: &EnvConfig,
    episodes: usize,
) -> Result<Vec<EpisodeRollout>> {
    if episodes == 0 {
        return Err(Error::Contract(
            "need at least one evaluation episode".into(),
        ));
    }
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut w = env::reset(cfg)?;
        let mut speeds = vec![w.speed];
        let mut base_return = 0.0;
        let mut step = 0usize;
        let outcome = loop {
            let obs = env::observe(&w, cfg);
            let a = policy.action(&obs, step)?;
            let sr = env::step(&w, a, cfg)?;
            base_return += sr.reward;
            step += 1;
            w = sr.next;
            speeds.push(w.speed);
            if sr.terminal {
                break sr.outcome.expect("terminal step carries an outcome");
            }
        };
        out.push(EpisodeRollout {
            base_return,
            length: step,
            outcome,
            speeds,
        });
    }
    Ok(out)
}

/// Aggregate evaluation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy_id: String,
    pub episodes: usize,
    pub mean_return: f64,
    pub min_return: f64,
    pub max_return: f64,
    pub collision_rate: f64,
    pub goal_rate: f64,
    pub mean_length: f64,
    /// Per-reference mean single-episode divergence, when pools were given.
    pub mean_metric_vs: Vec<(usize, f64)>,
}

pub fn report(
    policy_id: &str,
    rollouts: &[EpisodeRollout],
    references: &[(usize, &FeatureHistogram)],
) -> Result<EvalReport> {
    if rollouts.is_empty() {
        return Err(Error::Contract("empty rollout set".into()));
    }
    let n = rollouts.len() as f64;
    let returns: Vec<f64> = rollouts.iter().map(|r| r.base_return).collect();
    let mut mean_metric_vs = Vec::with_capacity(references.len());
    for (id, pool) in references {
        let mut sum = 0.0;
        for r in rollouts {
            sum += metric(&FeatureHistogram::from_speeds(&r.speeds), pool)?;
        }
        mean_metric_vs.push((*id, sum / n));
    }
    Ok(EvalReport {
        policy_id: policy_id.to_string(),
        episodes: rollouts.len(),
        mean_return: returns.iter().sum::<f64>() / n,
        min_return: returns.iter().cloned().fold(f64::INFINITY, f64::min),
        max_return: returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        collision_rate: rollouts
            .iter()
            .filter(|r| r.outcome == Outcome::Collision)
            .count() as f64
            / n,
        goal_rate: rollouts
            .iter()
            .filter(|r| r.outcome == Outcome::Goal)
            .count() as f64
            / n,
        mean_length: rollouts.iter().map(|r| r.length as f64).sum::<f64>() / n,
        mean_metric_vs,
    })
}

/// Greedy evaluation of a policy with optional reference pools.
pub fn evaluate<P: Policy>(
    policy: &P,
    policy_id: &str,
    cfg: &EnvConfig,
    episodes: usize,
    references: &[(usize, &FeatureHistogram)],
) -> Result<EvalReport> {
    let rollouts = run_policy_episodes(policy, cfg, episodes)?;
    report(policy_id, &rollouts, references)
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "policy {}\nepisodes {}\nmean_return {}\nmin_return {}\nmax_return {}\ncollision_rate {}\ngoal_rate {}\nmean_length {}\n",
            self.policy_id,
            self.episodes,
            self.mean_return,
            self.min_return,
            self.max_return,
            self.collision_rate,
            self.goal_rate,
            self.mean_length
        );
        for (id, m) in &self.mean_metric_vs {
            s.push_str(&format!("mean_metric_vs_{id} {m}\n"));
        }
        s
    }
}

/// Load a checkpoint for evaluation against a config, rejecting shape
/// mismatches between the stored network and the config's architecture.
pub fn load_policy_net(ckpt: &Path, cfg: &TrainConfig) -> Result<QNetwork> {
    let (net, _gamma, _step) = nn::load_checkpoint(ckpt)?;
    let want = cfg.learner.layer_sizes();
    if net.sizes() != want.as_slice() {
        return Err(Error::Contract(format!(
            "checkpoint architecture {:?} does not match config {:?}",
            net.sizes(),
            want
        )));
    }
    Ok(net)
}

/// Mean greedy-action value per (step, 1 m/s speed bin) over sampled
/// trajectories. Cells never visited are absent.
#[derive(Debug, Clone)]
pub struct QLandscape {
    /// (step index, speed bin) → (mean of max-Q over visits, visit count).
    pub cells: BTreeMap<(usize, usize), (f64, u64)>,
    pub trajectories: usize,
    pub outcomes: Vec<Outcome>,
}

impl QLandscape {
    pub fn visits_total(&self) -> u64 {
        self.cells.values().map(|(_, v)| *v).sum()
    }

    /// Visit-weighted mean speed bin: coarse "where does this policy live".
    pub fn speed_centroid(&self) -> f64 {
        let total = self.visits_total();
        assert!(total > 0, "landscape with no visits");
        self.cells
            .iter()
            .map(|((_, bin), (_, v))| *bin as f64 * *v as f64)
            .sum::<f64>()
            / total as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,speed_bin,mean_max_q,visits")?;
        for ((t, bin), (q, v)) in &self.cells {
            writeln!(w, "{t},{bin},{q},{v}")?;
        }
        Ok(())
    }
}

pub fn qlandscape(net: &QNetwork, cfg: &EnvConfig, n_traj: usize) -> Result<QLandscape> {
    if n_traj == 0 {
        return Err(Error::Contract("need at least one trajectory".into()));
    }
    let mut sums: BTreeMap<(usize, usize), (f64, u64)> = BTreeMap::new();
    let mut outcomes = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut w = env::reset(cfg)?;
        loop {
            let obs = env::observe(&w, cfg);
            let q = net.forward(obs.as_array())?;
            let max_q = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let bin = (w.speed.floor() as usize).min(cfg.v_max.floor() as usize - 1);
            let cell = sums.entry((w.step, bin)).or_insert((0.0, 0));
            cell.0 += max_q;
            cell.1 += 1;
            let a = greedy_action(net, &obs)?;
            let sr = env::step(&w, a, cfg)?;
            w = sr.next;
            if sr.terminal {
                outcomes.push(sr.outcome.unwrap());
                break;
            }
        }
    }
    let cells = sums
        .into_iter()
        .map(|(k, (sum, v))| (k, (sum / v as f64, v)))
        .collect();
    Ok(QLandscape {
        cells,
        trajectories: n_traj,
        outcomes,
    })
}

/// One row of the shaping-scale sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub alpha: f64,
    /// Mean of per-episode divergence vs agent 0 over the final 100 episodes.
    pub final_metric_episode_mean: f64,
    /// Divergence between the two agents' pooled final-100 stores.
    pub final_metric_pooled: f64,
    /// Greedy base return of the pseudo-agent after training.
    pub eval_return: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Largest |𝓜(α_{k+1}) − 𝓜(α_k)| over adjacent successful rows.
    pub fn max_adjacent_jump(&self) -> f64 {
        let ok: Vec<&SweepRow> = self.rows.iter().filter(|r| r.error.is_none()).collect();
        ok.windows(2)
            .map(|w| (w[1].final_metric_episode_mean - w[0].final_metric_episode_mean).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "alpha,final_metric_episode_mean,final_metric_pooled,eval_return,error"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.alpha,
                r.final_metric_episode_mean,
                r.final_metric_pooled,
                r.eval_return,
                r.error.as_deref().unwrap_or("")
            )?;
        }
        Ok(())
    }
}

/// Train a fresh optimal/pseudo pair per α — identical seeds, only the
/// shaping scale differs — and report the pseudo-agent's final divergence
/// from its reference. Per-α failures are recorded and the sweep continues.
pub fn alpha_sweep(base: &TrainConfig, alphas: &[f64], out_dir: &Path) -> Result<SweepResult> {
    if alphas.is_empty() {
        return Err(Error::Contract("sweep needs at least one alpha".into()));
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Contract("alphas must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = base.clone();
        cfg.run.num_pseudo_agents = 1;
        cfg.shaping.alpha = alpha;
        let dir = out_dir.join(format!("alpha-{alpha}"));
        let row = match sweep_cell(&cfg, &dir) {
            Ok(mut row) => {
                row.alpha = alpha;
                row
            }
            Err(e) => SweepRow {
                alpha,
                final_metric_episode_mean: f64::NAN,
                final_metric_pooled: f64::NAN,
                eval_return: f64::NAN,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(SweepResult { rows })
}

fn sweep_cell(cfg: &TrainConfig, dir: &Path) -> Result<SweepRow> {
    let out = run_training(cfg, dir)?;
    let episode_mean = out
        .final_metric_episode_mean(1, 0, 100)
        .ok_or_else(|| Error::Contract("pseudo-agent logged no reference metrics".into()))?;
    let pooled = out
        .final_metric_pooled(1, 0)
        .ok_or_else(|| Error::Contract("empty pools at sweep end".into()))?;
    let rollouts = run_policy_episodes(
        &GreedyNet(out.agents[1].learner.online()),
        &cfg.environment,
        1,
    )?;
    Ok(SweepRow {
        alpha: cfg.shaping.alpha,
        final_metric_episode_mean: episode_mean,
        final_metric_pooled: pooled,
        eval_return: rollouts[0].base_return,
        error: None,
    })
}

/// Paired base/perturbed evaluation of the optimal and pseudo policies.
#[derive(Debug, Clone)]
pub struct PerturbationCompare {
    pub factor: f64,
    pub target: usize,
    pub base_optimal: EvalReport,
    pub base_pseudo: EvalReport,
    pub perturbed_optimal: EvalReport,
    pub perturbed_pseudo: EvalReport,
}

impl PerturbationCompare {
    pub fn return_delta_optimal(&self) -> f64 {
        self.perturbed_optimal.mean_return - self.base_optimal.mean_return
    }

    pub fn return_delta_pseudo(&self) -> f64 {
        self.perturbed_pseudo.mean_return - self.base_pseudo.mean_return
    }

    pub fn collision_delta_optimal(&self) -> f64 {
        self.perturbed_optimal.collision_rate - self.base_optimal.collision_rate
    }

    pub fn collision_delta_pseudo(&self) -> f64 {
        self.perturbed_pseudo.collision_rate - self.base_pseudo.collision_rate
    }

    pub fn to_text(&self) -> String {
        format!(
            "perturbation target {} factor {}\n\n[optimal base]\n{}\n[optimal perturbed]\n{}\n[pseudo base]\n{}\n[pseudo perturbed]\n{}\nreturn_delta_optimal {}\nreturn_delta_pseudo {}\ncollision_delta_optimal {}\ncollision_delta_pseudo {}\n",
            self.target,
            self.factor,
            self.base_optimal.to_text(),
            self.perturbed_optimal.to_text(),
            self.base_pseudo.to_text(),
            self.perturbed_pseudo.to_text(),
            self.return_delta_optimal(),
            self.return_delta_pseudo(),
            self.collision_delta_optimal(),
            self.collision_delta_pseudo()
        )
    }
}

pub fn perturbation_compare(
    net_optimal: &QNetwork,
    net_pseudo: &QNetwork,
    cfg: &EnvConfig,
    target: usize,
    factor: f64,
    episodes: usize,
) -> Result<PerturbationCompare> {
    let perturbed = env::perturb(cfg, target, factor)?;
    Ok(PerturbationCompare {
        factor,
        target,
        base_optimal: evaluate(&GreedyNet(net_optimal), "optimal/base", cfg, episodes, &[])?,
        base_pseudo: evaluate(&GreedyNet(net_pseudo), "pseudo/base", cfg, episodes, &[])?,
        perturbed_optimal: evaluate(
            &GreedyNet(net_optimal),
            "optimal/perturbed",
            &perturbed,
            episodes,
            &[],
        )?,
        perturbed_pseudo: evaluate(
            &GreedyNet(net_pseudo),
            "pseudo/perturbed",
            &perturbed,
            episodes,
            &[],
        )?,
    })
}

/// Plot-ready per-agent curves derived from a run directory's episode logs.
#[derive(Debug, Clone)]
pub struct CurvesOutput {
    pub files: Vec<PathBuf>,
    /// Agents whose logs were missing or unreadable.
    pub missing: Vec<String>,
}

/// Smoothing window (episodes) for the base-return curve.
pub const SMOOTHING_WINDOW: usize = 100;

pub fn export_curves(run_dir: &Path) -> Result<CurvesOutput> {
    let mut agents: Vec<usize> = Vec::new();
    for entry in fs::read_dir(run_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name
            .strip_prefix("agent-")
            .and_then(|s| s.parse::<usize>().ok())
        {
            agents.push(id);
        }
    }
    agents.sort_unstable();
    if agents.is_empty() {
        return Err(Error::Contract(format!(
            "no agent-<id> directories under {}",
            run_dir.display()
        )));
    }

    let curves_dir = run_dir.join("curves");
    fs::create_dir_all(&curves_dir)?;
    let mut files = Vec::new();
    let mut missing = Vec::new();

    for id in agents {
        let log = run_dir.join(format!("agent-{id}")).join("episodes.csv");
        let text = match fs::read_to_string(&log) {
            Ok(t) => t,
            Err(e) => {
                missing.push(format!("agent-{id}: {e}"));
                continue;
            }
        };
        let mut records = Vec::new();
        let mut bad = None;
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            match EpisodeRecord::from_csv_row(line) {
                Ok(r) => records.push(r),
                Err(e) => {
                    bad = Some(format!("agent-{id}: line {}: {e}", lineno + 1));
                    break;
                }
            }
        }
        if let Some(msg) = bad {
            missing.push(msg);
            continue;
        }
        if records.is_empty() {
            missing.push(format!("agent-{id}: no episodes logged"));
            continue;
        }

        let refs: Vec<usize> = (0..id).collect();
        let has_comparison = records.iter().any(|r| r.comparison.is_some());
        let path = curves_dir.join(format!("agent-{id}.csv"));
        let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
        let mut header = String::from("step,episode,base_return,smoothed_base_return");
        for j in &refs {
            header.push_str(&format!(",m_ref_{j}"));
        }
        for j in &refs {
            header.push_str(&format!(",r_sub_ref_{j}"));
        }
        header.push_str(",epsilon");
        if has_comparison {
            header.push_str(",comparison_m,comparison_r");
        }
        writeln!(w, "{header}")?;

        let mut window_sum = 0.0;
        for (k, r) in records.iter().enumerate() {
            window_sum += r.base_return;
            if k >= SMOOTHING_WINDOW {
                window_sum -= records[k - SMOOTHING_WINDOW].base_return;
            }
            let denom = (k + 1).min(SMOOTHING_WINDOW) as f64;
            let mut row = format!(
                "{},{},{},{}",
                r.global_step,
                r.episode,
                r.base_return,
                window_sum / denom
            );
            let find = |j: usize| r.ref_metrics.iter().find(|rm| rm.reference == j);
            for j in &refs {
                match find(*j) {
                    Some(rm) => row.push_str(&format!(",{}", rm.metric)),
                    None => row.push_str(",skip"),
                }
            }
            for j in &refs {
                match find(*j) {
                    Some(rm) => row.push_str(&format!(",{}", rm.pseudo)),
                    None => row.push_str(",skip"),
                }
            }
            row.push_str(&format!(",{}", r.epsilon));
            if has_comparison {
                match r.comparison {
                    Some((m, rs)) => row.push_str(&format!(",{m},{rs}")),
                    None => row.push_str(",,"),
                }
            }
            writeln!(w, "{row}")?;
        }
        w.flush()?;
        files.push(path);
    }

    Ok(CurvesOutput { files, missing })
}
