//! Round-robin concurrent training of the optimal agent and N pseudo-agents.
//!
//! Agent 0 learns the plain task. Pseudo-agent i (1..=N) learns the same
//! task plus, on the final transition of each of its episodes, a penalty for
//! behaving like any agent that came before it: Π_i = {0, …, i−1}. The
//! penalty compares the episode's speed histogram against each reference's
//! pooled last-100-episode histogram at that moment — references are live,
//! still-learning policies, not frozen snapshots.
//!
//! Everything is sequential by design: one episode per active agent per
//! round, in id order, so identical configs reproduce byte-identical logs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{metric, pooled_speed_histogram, FeatureHistogram, ShapingParams};
use crate::env::{self, EnvConfig};
use crate::learner::{LearnerConfig, LearnerState};
use crate::mdp::{Outcome, ReplayBuffer, Transition, EPISODE_WINDOW};
use crate::nn;
use crate::{Error, Result};

/// `[run]` table of a training config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// N: pseudo-agents trained alongside agent 0.
    pub num_pseudo_agents: usize,
    /// Environment steps each agent trains for (episodes never stop early,
    /// so an agent may finish a few steps past its budget).
    pub steps_per_agent: u64,
    /// Master seed; per-agent (env, nets, exploration) tuples derive from it.
    pub seed: u64,
    /// Checkpoint cadence in per-agent env steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Log agent 0's pseudo-reward against its own pool (never trained on).
    pub log_comparison_channel: bool,
    /// Output directory; the CLI falls back to the output-root env variable
    /// when unset.
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_pseudo_agents: 1,
            steps_per_agent: 300_000,
            seed: 1,
            checkpoint_every: 50_000,
            log_comparison_channel: true,
            output_dir: None,
        }
    }
}

/// Independent seed streams for one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTuple {
    pub env: u64,
    pub nets: u64,
    pub exploration: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_agent == 0 {
            return Err(Error::Config("steps_per_agent must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic per-agent seed derivation from the master seed.
    pub fn agent_seeds(&self, agent: usize) -> SeedTuple {
        let base =
            splitmix64(self.seed).wrapping_add((agent as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        SeedTuple {
            env: splitmix64(base ^ 1),
            nets: splitmix64(base ^ 2),
            exploration: splitmix64(base ^ 3),
        }
    }

    /// Extra internal stream for replay-minibatch sampling.
    fn sampling_seed(&self, agent: usize) -> u64 {
        let base =
            splitmix64(self.seed).wrapping_add((agent as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        splitmix64(base ^ 4)
    }
}

/// Complete run configuration, one structured plain-text file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub environment: EnvConfig,
    pub learner: LearnerConfig,
    pub shaping: ShapingParams,
    pub run: RunConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        self.learner.validate()?;
        self.shaping.validate()?;
        self.run.validate()?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// One agent and its private training state.
pub struct AgentSlot {
    pub id: usize,
    pub learner: LearnerState,
    pub buffer: ReplayBuffer,
    /// Reference ids this agent is pushed away from: exactly {0, …, id−1}.
    pub references: Vec<usize>,
    /// Shaping applied to this agent's own episodes; α forced to 0 for
    /// agent 0 (it never shapes anyway, its reference list is empty).
    pub shaping: ShapingParams,
    pub episodes: u64,
    pub env_steps: u64,
}

impl AgentSlot {
    fn new(id: usize, cfg: &TrainConfig) -> Result<Self> {
        let seeds = cfg.run.agent_seeds(id);
        let mut nets_rng = ChaCha8Rng::seed_from_u64(seeds.nets);
        let learner = LearnerState::new(cfg.learner.clone(), &mut nets_rng)?;
        let shaping = if id == 0 {
            ShapingParams {
                alpha: 0.0,
                ..cfg.shaping
            }
        } else {
            cfg.shaping
        };
        Ok(AgentSlot {
            id,
            learner,
            buffer: ReplayBuffer::with_episode_window(cfg.learner.replay_capacity, EPISODE_WINDOW),
            references: (0..id).collect(),
            shaping,
            episodes: 0,
            env_steps: 0,
        })
    }
}

/// One reference comparison at an episode boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefMetric {
    pub reference: usize,
    pub metric: f64,
    pub pseudo: f64,
}

/// Divergence of one finished episode against every reference's current
/// pool. References with no completed episodes are skipped and reported.
pub fn reference_metrics(
    agent: &AgentSlot,
    own_speeds: &[f64],
    earlier: &[AgentSlot],
) -> Result<(Vec<RefMetric>, Vec<usize>)> {
    let own = FeatureHistogram::from_speeds(own_speeds);
    let mut metrics = Vec::with_capacity(agent.references.len());
    let mut skipped = Vec::new();
    for &j in &agent.references {
        let reference = &earlier[j];
        debug_assert_eq!(reference.id, j);
        if reference.buffer.episode_count() == 0 {
            skipped.push(j);
            continue;
        }
        let pooled = pooled_speed_histogram(reference.buffer.episode_features());
        let m = metric(&own, &pooled)?;
        metrics.push(RefMetric {
            reference: j,
            metric: m,
            pseudo: agent.shaping.pseudo_reward(m),
        });
    }
    Ok((metrics, skipped))
}

/// Agent 0's would-be pseudo-reward against its own pool, for plots only.
/// The returned value never touches a stored reward.
pub fn comparison_shaping(
    agent0: &AgentSlot,
    own_speeds: &[f64],
    shaping: &ShapingParams,
) -> Option<(f64, f64)> {
    if agent0.buffer.episode_count() == 0 {
        return None;
    }
    let own = FeatureHistogram::from_speeds(own_speeds);
    let pooled = pooled_speed_histogram(agent0.buffer.episode_features());
    let m = metric(&own, &pooled).ok()?;
    Some((m, shaping.pseudo_reward(m)))
}

/// One finished episode, as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub agent: usize,
    pub episode: u64,
    /// Agent's cumulative env steps at episode end.
    pub global_step: u64,
    pub base_return: f64,
    pub shaped_return: f64,
    pub length: usize,
    pub outcome: Outcome,
    pub epsilon: f64,
    pub ref_metrics: Vec<RefMetric>,
    pub skipped_refs: Vec<usize>,
    /// Agent 0 only, when the comparison channel is on: (metric, pseudo).
    pub comparison: Option<(f64, f64)>,
    /// Round-robin round this episode ran in.
    pub round: u64,
}

impl EpisodeRecord {
    pub fn pseudo_total(&self) -> f64 {
        self.ref_metrics.iter().fold(0.0, |acc, rm| acc + rm.pseudo)
    }
}

pub const EPISODE_CSV_HEADER: &str =
    "agent,episode,global_step,base_return,shaped_return,length,outcome,m_refs,r_sub_refs,epsilon,comparison_m,comparison_r";

fn ref_list(items: &[RefMetric], skipped: &[usize], pick: impl Fn(&RefMetric) -> f64) -> String {
    let mut parts: Vec<(usize, String)> = items
        .iter()
        .map(|rm| (rm.reference, format!("{}={}", rm.reference, pick(rm))))
        .collect();
    parts.extend(skipped.iter().map(|j| (*j, format!("{j}=skip"))));
    parts.sort_by_key(|(j, _)| *j);
    parts
        .into_iter()
        .map(|(_, s)| s)
        .collect::<Vec<_>>()
        .join(";")
}

impl EpisodeRecord {
    pub fn to_csv_row(&self) -> String {
        let (cmp_m, cmp_r) = match self.comparison {
            Some((m, r)) => (m.to_string(), r.to_string()),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.agent,
            self.episode,
            self.global_step,
            self.base_return,
            self.shaped_return,
            self.length,
            self.outcome.as_str(),
            ref_list(&self.ref_metrics, &self.skipped_refs, |rm| rm.metric),
            ref_list(&self.ref_metrics, &self.skipped_refs, |rm| rm.pseudo),
            self.epsilon,
            cmp_m,
            cmp_r
        )
    }

    /// Inverse of `to_csv_row`. The round-robin round is not serialized and
    /// parses back as 0.
    pub fn from_csv_row(row: &str) -> Result<EpisodeRecord> {
        let bad = |what: &str| Error::Format(format!("episode row: {what}: {row:?}"));
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != 12 {
            return Err(bad(&format!("expected 12 fields, got {}", cols.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, what: &str, row: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::Format(format!("episode row: bad {what} {s:?}: {row:?}")))
        }
        let outcome = Outcome::parse(cols[6])
            .ok_or_else(|| bad(&format!("unknown outcome {:?}", cols[6])))?;

        // the two ref lists carry the same ids and skip pattern
        let mut ref_metrics = Vec::new();
        let mut skipped_refs = Vec::new();
        let split_list = |s: &str| -> Result<Vec<(usize, Option<f64>)>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(';')
                .map(|item| {
                    let (id, val) = item
                        .split_once('=')
                        .ok_or_else(|| bad(&format!("ref item {item:?}")))?;
                    let id: usize = num(id, "ref id", row)?;
                    if val == "skip" {
                        Ok((id, None))
                    } else {
                        Ok((id, Some(num(val, "ref value", row)?)))
                    }
                })
                .collect()
        };
        let ms = split_list(cols[7])?;
        let rs = split_list(cols[8])?;
        if ms.len() != rs.len() {
            return Err(bad("metric and pseudo lists disagree"));
        }
        for ((jm, m), (jr, r)) in ms.into_iter().zip(rs) {
            if jm != jr {
                return Err(bad("metric and pseudo lists disagree"));
            }
            match (m, r) {
                (Some(metric), Some(pseudo)) => ref_metrics.push(RefMetric {
                    reference: jm,
                    metric,
                    pseudo,
                }),
                (None, None) => skipped_refs.push(jm),
                _ => return Err(bad("metric and pseudo lists disagree")),
            }
        }

        let comparison = match (cols[10], cols[11]) {
            ("", "") => None,
            (m, r) => Some((
                num(m, "comparison metric", row)?,
                num(r, "comparison pseudo", row)?,
            )),
        };

        Ok(EpisodeRecord {
            agent: num(cols[0], "agent", row)?,
            episode: num(cols[1], "episode", row)?,
            global_step: num(cols[2], "global step", row)?,
            base_return: num(cols[3], "base return", row)?,
            shaped_return: num(cols[4], "shaped return", row)?,
            length: num(cols[5], "length", row)?,
            outcome,
            epsilon: num(cols[9], "epsilon", row)?,
            ref_metrics,
            skipped_refs,
            comparison,
            round: 0,
        })
    }
}

/// Everything a finished run hands back: final agent states plus the full
/// episode history (the same rows that went to the CSV files).
pub struct TrainOutput {
    pub agents: Vec<AgentSlot>,
    pub records: Vec<EpisodeRecord>,
    pub rounds: u64,
    /// Reference-metric computations performed (comparison channel excluded).
    pub metric_evaluations: u64,
    pub final_checkpoints: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

impl TrainOutput {
    pub fn records_for(&self, agent: usize) -> impl Iterator<Item = &EpisodeRecord> {
        self.records.iter().filter(move |r| r.agent == agent)
    }

    /// Mean of per-episode divergence vs `reference` over the final
    /// `window` episodes of `agent`.
    pub fn final_metric_episode_mean(
        &self,
        agent: usize,
        reference: usize,
        window: usize,
    ) -> Option<f64> {
        let vals: Vec<f64> = self
            .records_for(agent)
            .filter_map(|r| {
                r.ref_metrics
                    .iter()
                    .find(|rm| rm.reference == reference)
                    .map(|rm| rm.metric)
            })
            .collect();
        if vals.is_empty() {
            return None;
        }
        let tail = &vals[vals.len().saturating_sub(window)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// Pooled variant: one divergence between the two agents' final pools.
    pub fn final_metric_pooled(&self, agent: usize, reference: usize) -> Option<f64> {
        let a = pooled_speed_histogram(self.agents[agent].buffer.episode_features());
        let b = pooled_speed_histogram(self.agents[reference].buffer.episode_features());
        metric(&a, &b).ok()
    }

    pub fn final_window_mean_base_return(&self, agent: usize, window: usize) -> Option<f64> {
        let vals: Vec<f64> = self.records_for(agent).map(|r| r.base_return).collect();
        if vals.is_empty() {
            return None;
        }
        let tail = &vals[vals.len().saturating_sub(window)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

struct AgentIo {
    csv: BufWriter<fs::File>,
    exploration_rng: ChaCha8Rng,
    sampling_rng: ChaCha8Rng,
    next_checkpoint: u64,
}

/// Train every agent to its step budget, writing logs and checkpoints under
/// `out_dir`. See the module docs for the schedule.
pub fn run_training(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;

    let n_agents = cfg.run.num_pseudo_agents + 1;
    let mut slots = Vec::with_capacity(n_agents);
    let mut ios = Vec::with_capacity(n_agents);
    for id in 0..n_agents {
        slots.push(AgentSlot::new(id, cfg)?);
        let dir = out_dir.join(format!("agent-{id}"));
        fs::create_dir_all(&dir)?;
        let mut csv = BufWriter::new(fs::File::create(dir.join("episodes.csv"))?);
        writeln!(csv, "{EPISODE_CSV_HEADER}")?;
        let seeds = cfg.run.agent_seeds(id);
        ios.push(AgentIo {
            csv,
            exploration_rng: ChaCha8Rng::seed_from_u64(seeds.exploration),
            sampling_rng: ChaCha8Rng::seed_from_u64(cfg.run.sampling_seed(id)),
            next_checkpoint: if cfg.run.checkpoint_every == 0 {
                u64::MAX
            } else {
                cfg.run.checkpoint_every
            },
        });
    }
    let mut merged = BufWriter::new(fs::File::create(out_dir.join("episodes.csv"))?);
    writeln!(merged, "{EPISODE_CSV_HEADER}")?;

    let mut records = Vec::new();
    let mut rounds = 0u64;
    let mut metric_evaluations = 0u64;

    while slots.iter().any(|s| s.env_steps < cfg.run.steps_per_agent) {
        for i in 0..n_agents {
            if slots[i].env_steps >= cfg.run.steps_per_agent {
                continue;
            }
            let record = run_episode(cfg, &mut slots, i, &mut ios[i], out_dir, rounds)?;
            metric_evaluations += record.ref_metrics.len() as u64;
            writeln!(ios[i].csv, "{}", record.to_csv_row())?;
            writeln!(merged, "{}", record.to_csv_row())?;
            records.push(record);
        }
        rounds += 1;
    }

    for io in &mut ios {
        io.csv.flush()?;
    }
    merged.flush()?;

    let mut final_checkpoints = Vec::with_capacity(n_agents);
    for slot in &slots {
        let path = out_dir
            .join(format!("agent-{}", slot.id))
            .join(format!("step-{}.ckpt", slot.env_steps));
        nn::save_checkpoint(
            slot.learner.online(),
            cfg.learner.gamma,
            slot.env_steps,
            &path,
        )?;
        final_checkpoints.push(path);
    }

    Ok(TrainOutput {
        agents: slots,
        records,
        rounds,
        metric_evaluations,
        final_checkpoints,
        out_dir: out_dir.to_path_buf(),
    })
}

/// One full episode for agent `i`: act, learn on the existing buffer every
/// step, then shape the final transition and commit the episode.
fn run_episode(
    cfg: &TrainConfig,
    slots: &mut [AgentSlot],
    i: usize,
    io: &mut AgentIo,
    out_dir: &Path,
    round: u64,
) -> Result<EpisodeRecord> {
    let (earlier, rest) = slots.split_at_mut(i);
    let slot = &mut rest[0];
    let envc = &cfg.environment;

    let mut w = env::reset(envc)?;
    let mut obs = env::observe(&w, envc);
    let mut speeds = vec![w.speed];
    let mut transitions: Vec<Transition> = Vec::new();
    let mut base_return = 0.0;
    let outcome;

    let clarify = |e: Error, slot: &AgentSlot| -> Error {
        match e {
            Error::Numeric(msg) => Error::Numeric(format!(
                "agent {} episode {} (env step {}): {msg}",
                slot.id, slot.episodes, slot.env_steps
            )),
            other => other,
        }
    };

    loop {
        let a = slot.learner.act(&obs, &mut io.exploration_rng)?;
        let sr = env::step(&w, a, envc)?;
        slot.learner.advance_env_step();
        slot.env_steps += 1;
        base_return += sr.reward;
        let next_obs = env::observe(&sr.next, envc);
        transitions.push(Transition {
            s: obs,
            a,
            r: sr.reward,
            s_next: next_obs,
            terminal: sr.terminal,
        });
        speeds.push(sr.next.speed);

        if slot.buffer.len() >= cfg.learner.warmup_transitions {
            let batch = slot
                .buffer
                .sample_minibatch(cfg.learner.minibatch_size, &mut io.sampling_rng)?;
            slot.learner
                .train_step(&batch)
                .map_err(|e| clarify(e, slot))?;
        }

        if slot.env_steps >= io.next_checkpoint {
            let path = out_dir
                .join(format!("agent-{}", slot.id))
                .join(format!("step-{}.ckpt", slot.env_steps));
            nn::save_checkpoint(
                slot.learner.online(),
                cfg.learner.gamma,
                slot.env_steps,
                &path,
            )?;
            io.next_checkpoint += cfg.run.checkpoint_every;
        }

        w = sr.next;
        obs = next_obs;
        if sr.terminal {
            outcome = sr.outcome.expect("terminal step carries an outcome");
            break;
        }
    }

    // shape the final transition from the references' current pools
    let (ref_metrics, skipped_refs) = reference_metrics(slot, &speeds, earlier)?;
    let pseudo_total = ref_metrics.iter().fold(0.0, |acc, rm| acc + rm.pseudo);
    let shaped_return = base_return + pseudo_total;
    if !shaped_return.is_finite() {
        return Err(clarify(
            Error::Numeric(format!("non-finite shaped return {shaped_return}")),
            slot,
        ));
    }
    let last = transitions
        .last_mut()
        .expect("episodes have at least one step");
    last.r += pseudo_total;

    let comparison = if slot.id == 0 && cfg.run.log_comparison_channel {
        comparison_shaping(slot, &speeds, &cfg.shaping)
    } else {
        None
    };

    let length = transitions.len();
    for t in transitions {
        slot.buffer.push(t);
    }
    slot.buffer.push_episode_features(speeds);

    let record = EpisodeRecord {
        agent: slot.id,
        episode: slot.episodes,
        global_step: slot.env_steps,
        base_return,
        shaped_return,
        length,
        outcome,
        epsilon: slot.learner.epsilon(),
        ref_metrics,
        skipped_refs,
        comparison,
        round,
    };
    slot.episodes += 1;
    Ok(record)
}
