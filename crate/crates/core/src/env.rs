//! Deterministic two-way intersection simulator: the ego makes a left turn
//! along a fixed path (straight approach, quarter-circle arc, straight exit)
//! while three constant-speed oncoming targets drive down the lane the arc
//! crosses. Strictly a value-level state machine — stepping is a pure
//! function of `(state, action, config)`.

use serde::{Deserialize, Serialize};

use crate::mdp::{Action, Outcome, StateVector};
use crate::{Error, Result};

/// Reward on a colliding step.
pub const REWARD_COLLISION: f64 = -5.0;
/// Reward on every non-colliding step.
pub const REWARD_STEP: f64 = -0.1;

/// Full simulator configuration. All units SI.
///
/// The ego path starts `approach_length` before the arc entry, turns through
/// a quarter circle of `turn_radius`, then runs `exit_length` straight. The
/// oncoming lane is the vertical line `x = -lane_offset`, driven southbound
/// (decreasing y); it must cross the arc exactly once, which pins
/// `0 < lane_offset < turn_radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub approach_length: f64,
    pub turn_radius: f64,
    pub exit_length: f64,
    pub lane_offset: f64,
    pub initial_arc_length: f64,
    pub initial_speed: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub target_speed: f64,
    /// Signed distance of each target from the conflict point at step 0,
    /// measured along its travel direction (positive = still approaching).
    pub target_offsets: [f64; 3],
    pub collision_radius: f64,
    pub radius_multipliers: [f64; 3],
    /// Position normalization bound for observations, meters.
    pub pos_max: f64,
    /// Time-to-collision normalization bound for observations, seconds.
    pub ttc_max: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.1,
            max_steps: 150,
            approach_length: 30.0,
            turn_radius: 7.75,
            exit_length: 20.0,
            lane_offset: 7.2,
            initial_arc_length: 0.0,
            initial_speed: 20.0,
            v_min: 0.0,
            v_max: 30.0,
            target_speed: 20.0,
            target_offsets: [42.5, 72.5, 102.5],
            collision_radius: 2.5,
            radius_multipliers: [1.0, 1.0, 1.0],
            pos_max: 100.0,
            ttc_max: 10.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        if self.max_steps == 0 {
            return fail("max_steps must be at least 1".into());
        }
        if self.approach_length <= 0.0 || self.exit_length < 0.0 || self.turn_radius <= 0.0 {
            return fail("path segments must have positive length".into());
        }
        if !(self.lane_offset > 0.0 && self.lane_offset < self.turn_radius) {
            return fail(format!(
                "lane_offset {} must lie in (0, turn_radius) so the arc crosses the lane once",
                self.lane_offset
            ));
        }
        if self.v_min < 0.0 || self.v_max <= self.v_min {
            return fail(format!(
                "speed bounds [{}, {}] invalid",
                self.v_min, self.v_max
            ));
        }
        if !(self.v_min..=self.v_max).contains(&self.initial_speed) {
            return fail(format!(
                "initial_speed {} outside speed bounds",
                self.initial_speed
            ));
        }
        if self.initial_arc_length < 0.0 || self.initial_arc_length >= self.path_end() {
            return fail("initial_arc_length outside the path".into());
        }
        if self.target_speed != 20.0 {
            return fail(format!(
                "target_speed is fixed at 20 m/s, got {}",
                self.target_speed
            ));
        }
        if self.collision_radius <= 0.0 {
            return fail("collision_radius must be positive".into());
        }
        if self.radius_multipliers.iter().any(|m| !(*m > 0.0)) {
            return fail("radius multipliers must be positive".into());
        }
        if self.pos_max <= 0.0 || self.ttc_max <= 0.0 {
            return fail("normalization constants must be positive".into());
        }
        if self.target_offsets.iter().any(|o| !o.is_finite()) {
            return fail("target offsets must be finite".into());
        }
        Ok(())
    }

    /// Arc length of the quarter-circle turn.
    pub fn arc_length(&self) -> f64 {
        self.turn_radius * std::f64::consts::FRAC_PI_2
    }

    /// Total path length; reaching it is the goal.
    pub fn path_end(&self) -> f64 {
        self.approach_length + self.arc_length() + self.exit_length
    }

    /// Arc length at which the ego path crosses the oncoming lane.
    pub fn conflict_arc_length(&self) -> f64 {
        self.approach_length + self.turn_radius * self.conflict_angle()
    }

    fn conflict_angle(&self) -> f64 {
        ((self.turn_radius - self.lane_offset) / self.turn_radius).acos()
    }

    /// The 2-D conflict point where path and lane cross.
    pub fn conflict_point(&self) -> (f64, f64) {
        (
            -self.lane_offset,
            self.turn_radius * self.conflict_angle().sin(),
        )
    }

    /// Signed distance of target `i` (0-based) from the conflict point after
    /// `step` steps; positive while approaching, negative once past.
    pub fn target_distance(&self, i: usize, step: usize) -> f64 {
        self.target_offsets[i] - self.target_speed * self.dt * step as f64
    }

    /// 2-D position of target `i` (0-based) after `step` steps. Targets drive
    /// southbound: y decreases as the step count grows.
    pub fn target_point(&self, i: usize, step: usize) -> (f64, f64) {
        let (_, cy) = self.conflict_point();
        (-self.lane_offset, cy + self.target_distance(i, step))
    }

    pub fn effective_radius(&self, i: usize) -> f64 {
        self.collision_radius * self.radius_multipliers[i]
    }
}

/// Ground-truth simulator state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldState {
    pub step: usize,
    pub arc_length: f64,
    pub speed: f64,
    /// Signed per-target distance to the conflict point (positive = approaching).
    pub dist_to_conflict: [f64; 3],
    pub terminal: Option<Outcome>,
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy)]
pub struct StepResult {
    pub next: WorldState,
    pub reward: f64,
    pub terminal: bool,
    pub outcome: Option<Outcome>,
}

/// Start state: ego at its configured arc length and speed, targets at their
/// configured offsets, clock at zero.
pub fn reset(cfg: &EnvConfig) -> Result<WorldState> {
    cfg.validate()?;
    Ok(WorldState {
        step: 0,
        arc_length: cfg.initial_arc_length,
        speed: cfg.initial_speed,
        dist_to_conflict: [
            cfg.target_distance(0, 0),
            cfg.target_distance(1, 0),
            cfg.target_distance(2, 0),
        ],
        terminal: None,
    })
}

/// Advance the world one tick: speed first, then position by the new speed;
/// targets advance in lockstep. Terminal priority is collision, then goal,
/// then timeout.
pub fn step(w: &WorldState, a: Action, cfg: &EnvConfig) -> Result<StepResult> {
    if w.terminal.is_some() {
        return Err(Error::Contract("stepping a terminal state".into()));
    }
    let v_next = (w.speed + a.accel() * cfg.dt).clamp(cfg.v_min, cfg.v_max);
    let s_next = w.arc_length + v_next * cfg.dt;
    let step_next = w.step + 1;

    let mut next = WorldState {
        step: step_next,
        arc_length: s_next,
        speed: v_next,
        dist_to_conflict: [
            cfg.target_distance(0, step_next),
            cfg.target_distance(1, step_next),
            cfg.target_distance(2, step_next),
        ],
        terminal: None,
    };

    let outcome = if collision(&next, cfg) {
        Some(Outcome::Collision)
    } else if s_next >= cfg.path_end() {
        Some(Outcome::Goal)
    } else if step_next >= cfg.max_steps {
        Some(Outcome::Timeout)
    } else {
        None
    };
    next.terminal = outcome;

    let reward = if outcome == Some(Outcome::Collision) {
        REWARD_COLLISION
    } else {
        REWARD_STEP
    };
    Ok(StepResult {
        next,
        reward,
        terminal: outcome.is_some(),
        outcome,
    })
}

/// True iff some target is strictly inside its effective collision radius of
/// the ego. The ego's geometry is evaluated on the path, clamped at the path
/// end for the step that overshoots the goal.
pub fn collision(w: &WorldState, cfg: &EnvConfig) -> bool {
    let s = w.arc_length.min(cfg.path_end());
    let (ex, ey) = path_point(s, cfg).expect("clamped arc length is on the path");
    let (_, cy) = cfg.conflict_point();
    for i in 0..3 {
        let tx = -cfg.lane_offset;
        let ty = cy + w.dist_to_conflict[i];
        let d2 = (ex - tx) * (ex - tx) + (ey - ty) * (ey - ty);
        let r = cfg.effective_radius(i);
        if d2 < r * r {
            return true;
        }
    }
    false
}

/// Map arc length to the 2-D path point. The approach runs north to the arc
/// entry at the origin, the arc bends left (west), the exit runs west.
pub fn path_point(arc_length: f64, cfg: &EnvConfig) -> Result<(f64, f64)> {
    if !(0.0..=cfg.path_end()).contains(&arc_length) {
        return Err(Error::Contract(format!(
            "arc length {arc_length} outside [0, {}]",
            cfg.path_end()
        )));
    }
    let r = cfg.turn_radius;
    if arc_length <= cfg.approach_length {
        Ok((0.0, arc_length - cfg.approach_length))
    } else if arc_length <= cfg.approach_length + cfg.arc_length() {
        let theta = (arc_length - cfg.approach_length) / r;
        Ok((-r + r * theta.cos(), r * theta.sin()))
    } else {
        let into_exit = arc_length - cfg.approach_length - cfg.arc_length();
        Ok((-r - into_exit, r))
    }
}

/// Normalized observation: ego arc length and speed, then the three targets
/// ordered by ascending time-to-collision (ties by target index). A target
/// past the conflict point reports the saturated `ttc_max`.
pub fn observe(w: &WorldState, cfg: &EnvConfig) -> StateVector {
    let x_ego = (w.arc_length / cfg.pos_max).clamp(-1.0, 1.0);
    let v_ego = w.speed / cfg.v_max;

    let mut order: [usize; 3] = [0, 1, 2];
    let ttc = |i: usize| -> f64 {
        let d = w.dist_to_conflict[i];
        if d < 0.0 {
            cfg.ttc_max
        } else {
            (d / cfg.target_speed).clamp(0.0, cfg.ttc_max)
        }
    };
    order.sort_by(|&a, &b| ttc(a).partial_cmp(&ttc(b)).unwrap().then(a.cmp(&b)));

    let mut obs = [0.0; 8];
    obs[0] = x_ego;
    obs[1] = v_ego;
    for (slot, &i) in order.iter().enumerate() {
        obs[2 + 2 * slot] = (w.dist_to_conflict[i] / cfg.pos_max).clamp(-1.0, 1.0);
        obs[3 + 2 * slot] = ttc(i) / cfg.ttc_max;
    }
    StateVector(obs)
}

/// A copy of `cfg` with target `target` (1-based, as the targets are named)
/// given collision-radius multiplier `factor`.
pub fn perturb(cfg: &EnvConfig, target: usize, factor: f64) -> Result<EnvConfig> {
    if !(1..=3).contains(&target) {
        return Err(Error::Contract(format!(
            "target index {target} not in 1..=3"
        )));
    }
    if !(factor > 0.0) {
        return Err(Error::Contract(format!(
            "radius factor {factor} must be positive"
        )));
    }
    let mut out = cfg.clone();
    out.radius_multipliers[target - 1] = factor;
    Ok(out)
}
