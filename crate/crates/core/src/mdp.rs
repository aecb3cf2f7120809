//! Environment-agnostic MDP vocabulary: actions, observations, transitions,
//! trajectories, returns, and the uniform replay buffer.

use std::collections::VecDeque;

use rand::Rng;

use crate::{Error, Result};

/// The fixed longitudinal acceleration set, m/s², indexed 0..=5.
pub const ACCELERATIONS: [f64; 6] = [-4.0, -2.0, -1.0, 0.0, 1.0, 2.0];

/// Number of discrete actions.
pub const NUM_ACTIONS: usize = 6;

/// How many completed episodes the replay buffer remembers feature sequences
/// for (the rolling window reference distributions are built from).
pub const EPISODE_WINDOW: usize = 100;

/// A discrete longitudinal-acceleration action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Action {
    index: usize,
}

impl Action {
    /// Action from its index in `0..6`.
    pub fn from_index(index: usize) -> Result<Self> {
        if index < NUM_ACTIONS {
            Ok(Action { index })
        } else {
            Err(Error::Contract(format!(
                "action index {index} out of range"
            )))
        }
    }

    /// All actions in index order.
    pub fn all() -> [Action; NUM_ACTIONS] {
        [0, 1, 2, 3, 4, 5].map(|index| Action { index })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// Acceleration in m/s².
    pub fn accel(&self) -> f64 {
        ACCELERATIONS[self.index]
    }
}

/// The 8-component normalized observation fed to Q-networks:
/// `{x_ego, ẋ_ego, x₁, ttc₁, x₂, ttc₂, x₃, ttc₃}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector(pub [f64; 8]);

impl StateVector {
    pub fn as_array(&self) -> &[f64; 8] {
        &self.0
    }

    /// True when every component is finite and inside `[-1, 1]`.
    pub fn is_valid(&self) -> bool {
        self.0
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }
}

/// One replay-buffer record. `r` already includes the terminal pseudo-reward
/// when shaping applied (shaping only ever touches terminal transitions).
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    pub s: StateVector,
    pub a: Action,
    pub r: f64,
    pub s_next: StateVector,
    pub terminal: bool,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Goal,
    Collision,
    Timeout,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Goal => "goal",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
        }
    }

    pub fn parse(s: &str) -> Option<Outcome> {
        match s {
            "goal" => Some(Outcome::Goal),
            "collision" => Some(Outcome::Collision),
            "timeout" => Some(Outcome::Timeout),
            _ => None,
        }
    }
}

/// Raw (unnormalized) per-step snapshot of the ego along one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    /// Simulation time, seconds.
    pub t: f64,
    /// Ego arc-length along its path, meters.
    pub arc_length: f64,
    /// Ego speed, m/s.
    pub speed: f64,
}

/// Ordered state history of one episode plus how it ended.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub outcome: Outcome,
}

impl Trajectory {
    /// The speed column, which is what the divergence feature map projects to.
    pub fn speeds(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.speed).collect()
    }
}

/// Aggregate result of a finished episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOutcome {
    pub reason: Outcome,
    pub undiscounted: f64,
    pub discounted: f64,
    pub length: usize,
}

/// Uniform (non-prioritized) replay: a FIFO ring of transitions plus a side
/// store of the feature sequences of the last [`EPISODE_WINDOW`] completed
/// episodes. The side store is separate so metric computation never depends
/// on transition eviction order.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    ring: VecDeque<Transition>,
    inserted: u64,
    episode_window: usize,
    episodes: VecDeque<Vec<f64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self::with_episode_window(capacity, EPISODE_WINDOW)
    }

    pub fn with_episode_window(capacity: usize, episode_window: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            ring: VecDeque::with_capacity(capacity),
            inserted: 0,
            episode_window,
            episodes: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of transitions ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Store a transition; evicts the oldest once full.
    pub fn push(&mut self, t: Transition) {
        debug_assert!(t.r.is_finite(), "non-finite reward pushed to replay");
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(t);
        self.inserted += 1;
    }

    /// Record a finished episode's feature sequence in the rolling window.
    pub fn push_episode_features(&mut self, features: Vec<f64>) {
        if self.episodes.len() == self.episode_window {
            self.episodes.pop_front();
        }
        self.episodes.push_back(features);
    }

    /// Feature sequences of the last completed episodes, oldest first.
    pub fn episode_features(&self) -> impl Iterator<Item = &[f64]> {
        self.episodes.iter().map(|e| e.as_slice())
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    /// Iterate over stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.ring.iter()
    }

    /// Draw `n` distinct transitions uniformly at random.
    ///
    /// Refuses while the buffer holds fewer than `n` transitions so callers
    /// wait out their warmup period instead of training on duplicates.
    pub fn sample_minibatch<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.ring.len() < n {
            return Err(Error::Contract(format!(
                "minibatch of {n} requested from buffer of {}",
                self.ring.len()
            )));
        }
        let idx = rand::seq::index::sample(rng, self.ring.len(), n);
        Ok(idx.into_iter().map(|i| self.ring[i]).collect())
    }
}

/// `Σ_t γ^t r_t`. Empty input gives 0.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    assert!(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1]");
    let mut acc = 0.0;
    let mut w = 1.0;
    for r in rewards {
        acc += w * r;
        w *= gamma;
    }
    acc
}
