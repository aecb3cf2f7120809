//! Exact finite-horizon planner for the intersection task.
//!
//! The simulator is deterministic and, for grid-compatible configs, closed
//! over an integer lattice: speeds are multiples of 0.1 m/s and positions
//! multiples of 0.1·dt m, because every acceleration times dt is a whole
//! number of speed quanta and position advances by the new speed times dt.
//! That makes plain backward induction over (time, speed, position) exact —
//! no interpolation, no discretization error — so the returned values are
//! certificates, not estimates.
//!
//! Collision and target bookkeeping are not reimplemented: per-step collision
//! tables are built by calling the simulator's own geometry at every lattice
//! point, and every extracted action sequence is replayed through
//! [`crate::env::step`] to produce the reported metadata.

use rand::Rng;

use crate::env::{self, EnvConfig, REWARD_COLLISION, REWARD_STEP};
use crate::mdp::{Action, Outcome, Snapshot, Trajectory, NUM_ACTIONS};
use crate::{Error, Result};

/// Speed lattice pitch, m/s.
const QV: f64 = 0.1;

/// Restriction on where the ego may cross the oncoming lane's conflict
/// point, expressed over the transition that carries it past.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    None,
    /// Crossing is forbidden while target 1 is still approaching: the ego
    /// must yield and pass behind it.
    CrossAfterTarget1,
    /// Crossing is forbidden once target 1 has passed: pass in front or not
    /// at all (feasibility-scan class).
    CrossBeforeTarget1,
    /// Crossing allowed only in the gap after target 1 and before target 2
    /// (feasibility-scan class).
    CrossBetweenTargets1And2,
}

impl Constraint {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Constraint::None),
            "cross-after-target-1" => Ok(Constraint::CrossAfterTarget1),
            "cross-before-target-1" => Ok(Constraint::CrossBeforeTarget1),
            "cross-between-targets-1-2" => Ok(Constraint::CrossBetweenTargets1And2),
            other => Err(Error::Config(format!("unknown constraint '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Constraint::None => "none",
            Constraint::CrossAfterTarget1 => "cross-after-target-1",
            Constraint::CrossBeforeTarget1 => "cross-before-target-1",
            Constraint::CrossBetweenTargets1And2 => "cross-between-targets-1-2",
        }
    }
}

/// Output of one solve: the optimal value from the start state plus the
/// replayed optimal trajectory's metadata.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub gamma: f64,
    pub constraint: Constraint,
    /// Optimal return from the start state (discounted by `gamma`).
    pub value: f64,
    /// Action values at the start state, one per action.
    pub q_start: [f64; NUM_ACTIONS],
    /// One optimal action sequence (lowest-index tie-break throughout).
    pub actions: Vec<Action>,
    pub outcome: Outcome,
    pub steps: usize,
    /// First state index at or past the conflict point, if the ego crossed.
    pub crossing_step: Option<usize>,
    /// Closest approach to each target over the replayed trajectory, m.
    pub min_target_distance: [f64; 3],
    /// Return of the replayed sequence through the simulator; must equal
    /// `value` to within numerical identity.
    pub replay_value: f64,
}

/// Integer lattice spec for a grid-compatible config.
struct Grid {
    n_v: usize,
    /// Non-terminal position indices are `0..n_s`; index `n_s` and beyond is
    /// at or past the path end.
    n_s: usize,
    dv0: usize,
    ds0: usize,
    v_lo: i64,
    v_hi: i64,
    /// Acceleration per action, in speed quanta.
    deltas: [i64; NUM_ACTIONS],
    /// Position quantum, m (= QV · dt).
    qs: f64,
    /// Smallest position index at or past the conflict point.
    cross_idx: usize,
}

fn lattice_int(x: f64, quantum: f64, what: &str) -> Result<i64> {
    let r = x / quantum;
    if (r - r.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{what} = {x} is not a multiple of {quantum}; exact planning needs lattice-aligned configs"
        )));
    }
    Ok(r.round() as i64)
}

fn grid(cfg: &EnvConfig) -> Result<Grid> {
    cfg.validate()?;
    let qs = QV * cfg.dt;
    let v_lo = lattice_int(cfg.v_min, QV, "v_min")?;
    let v_hi = lattice_int(cfg.v_max, QV, "v_max")?;
    let dv0 = lattice_int(cfg.initial_speed, QV, "initial_speed")?;
    let ds0 = lattice_int(cfg.initial_arc_length, qs, "initial_arc_length")?;
    let mut deltas = [0i64; NUM_ACTIONS];
    for (i, a) in Action::all().iter().enumerate() {
        deltas[i] = lattice_int(a.accel() * cfg.dt, QV, "accel*dt")?;
    }
    let ceil_idx = |x: f64| -> usize {
        let r = x / qs;
        if (r - r.round()).abs() < 1e-9 {
            r.round() as usize
        } else {
            r.ceil() as usize
        }
    };
    let n_s = ceil_idx(cfg.path_end());
    let cross_idx = ceil_idx(cfg.conflict_arc_length());
    Ok(Grid {
        n_v: (v_hi + 1) as usize,
        n_s,
        dv0: dv0 as usize,
        ds0: ds0 as usize,
        v_lo,
        v_hi,
        deltas,
        qs,
        cross_idx,
    })
}

/// Per-(step, position) collision flags, evaluated through the simulator's
/// geometry. Row `g.n_s` stands for every position at or past the path end
/// (the simulator clamps the ego there).
fn collision_table(cfg: &EnvConfig, g: &Grid) -> Vec<bool> {
    let rows = cfg.max_steps + 1;
    let cols = g.n_s + 1;
    let mut table = vec![false; rows * cols];
    for t in 0..rows {
        let dist = [
            cfg.target_distance(0, t),
            cfg.target_distance(1, t),
            cfg.target_distance(2, t),
        ];
        for ds in 0..cols {
            let arc = if ds == g.n_s {
                cfg.path_end()
            } else {
                ds as f64 * g.qs
            };
            let w = env::WorldState {
                step: t,
                arc_length: arc,
                speed: 0.0,
                dist_to_conflict: dist,
                terminal: None,
            };
            table[t * cols + ds] = env::collision(&w, cfg);
        }
    }
    table
}

/// A crossing transition moves the ego from below the conflict point to at or
/// past it. Whether it is allowed depends on which targets are still
/// approaching at arrival time.
fn crossing_allowed(c: Constraint, d1_next: f64, d2_next: f64) -> bool {
    match c {
        Constraint::None => true,
        Constraint::CrossAfterTarget1 => d1_next <= 0.0,
        Constraint::CrossBeforeTarget1 => d1_next > 0.0,
        Constraint::CrossBetweenTargets1And2 => d1_next <= 0.0 && d2_next > 0.0,
    }
}

struct DpOutcome {
    value: f64,
    q_start: [f64; NUM_ACTIONS],
    actions: Vec<Action>,
}

/// Backward induction over the full lattice. With `goal_only`, collision and
/// timeout terminals score −∞ so a finite value certifies that the class
/// contains a goal-reaching trajectory.
fn dp(cfg: &EnvConfig, g: &Grid, gamma: f64, constraint: Constraint, goal_only: bool) -> DpOutcome {
    let collide = collision_table(cfg, g);
    let cols = g.n_s + 1;
    let plane = g.n_v * g.n_s;
    let mut v_next = vec![0.0f64; plane];
    let mut v_cur = vec![0.0f64; plane];
    let mut best_actions = vec![0u8; cfg.max_steps * plane];
    let mut q_start = [f64::NEG_INFINITY; NUM_ACTIONS];

    let neg = f64::NEG_INFINITY;
    for t in (0..cfg.max_steps).rev() {
        let t_next = t + 1;
        let last_step = t_next == cfg.max_steps;
        let col_row = &collide[t_next * cols..(t_next + 1) * cols];
        let d1_next = cfg.target_distance(0, t_next);
        let d2_next = cfg.target_distance(1, t_next);
        let cross_ok = crossing_allowed(constraint, d1_next, d2_next);
        let actions_plane = &mut best_actions[t * plane..(t + 1) * plane];
        for dv in 0..g.n_v {
            let mut dvp = [0usize; NUM_ACTIONS];
            for a in 0..NUM_ACTIONS {
                dvp[a] = (dv as i64 + g.deltas[a]).clamp(g.v_lo, g.v_hi) as usize;
            }
            for ds in 0..g.n_s {
                let mut best_q = neg;
                let mut best_a = 0u8;
                for a in 0..NUM_ACTIONS {
                    let dsp = ds + dvp[a];
                    let crossing = ds < g.cross_idx && dsp >= g.cross_idx;
                    let q = if crossing && !cross_ok {
                        neg
                    } else if col_row[dsp.min(g.n_s)] {
                        if goal_only {
                            neg
                        } else {
                            REWARD_COLLISION
                        }
                    } else if dsp >= g.n_s {
                        REWARD_STEP
                    } else if last_step {
                        if goal_only {
                            neg
                        } else {
                            REWARD_STEP
                        }
                    } else {
                        let vn = v_next[dvp[a] * g.n_s + dsp];
                        if vn == neg {
                            neg
                        } else {
                            REWARD_STEP + gamma * vn
                        }
                    };
                    if q > best_q {
                        best_q = q;
                        best_a = a as u8;
                    }
                    if t == 0 && dv == g.dv0 && ds == g.ds0 {
                        q_start[a] = q;
                    }
                }
                v_cur[dv * g.n_s + ds] = best_q;
                actions_plane[dv * g.n_s + ds] = best_a;
            }
        }
        std::mem::swap(&mut v_cur, &mut v_next);
    }

    let value = v_next[g.dv0 * g.n_s + g.ds0];
    let mut actions = Vec::new();
    if value > neg {
        // walk the stored argmax planes forward from the start state
        let (mut dv, mut ds) = (g.dv0, g.ds0);
        for t in 0..cfg.max_steps {
            let a = best_actions[t * plane + dv * g.n_s + ds] as usize;
            actions.push(Action::from_index(a).unwrap());
            let dvp = (dv as i64 + g.deltas[a]).clamp(g.v_lo, g.v_hi) as usize;
            let dsp = ds + dvp;
            let t_next = t + 1;
            if collide[t_next * cols + dsp.min(g.n_s)] || dsp >= g.n_s || t_next == cfg.max_steps {
                break;
            }
            dv = dvp;
            ds = dsp;
        }
    }
    DpOutcome {
        value,
        q_start,
        actions,
    }
}

/// Solve the task exactly and replay the optimal sequence through the
/// simulator. `gamma = 1` gives plain undiscounted step counts.
pub fn solve(cfg: &EnvConfig, gamma: f64, constraint: Constraint) -> Result<OracleResult> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma {gamma} outside (0, 1]")));
    }
    let g = grid(cfg)?;
    let out = dp(cfg, &g, gamma, constraint, false);
    let replay = rollout(cfg, &out.actions, gamma)?;
    if (replay.ret - out.value).abs() > 1e-9 {
        return Err(Error::Numeric(format!(
            "planner value {} disagrees with simulator replay {}",
            out.value, replay.ret
        )));
    }
    Ok(OracleResult {
        gamma,
        constraint,
        value: out.value,
        q_start: out.q_start,
        actions: out.actions,
        outcome: replay.outcome,
        steps: replay.steps,
        crossing_step: replay.crossing_step,
        min_target_distance: replay.min_target_distance,
        replay_value: replay.ret,
    })
}

/// The two solutions that matter: the unconstrained optimum (pass in front of
/// target 1) and the yielding optimum (cross only after target 1 has passed).
pub fn two_solutions(cfg: &EnvConfig, gamma: f64) -> Result<(OracleResult, OracleResult)> {
    let unconstrained = solve(cfg, gamma, Constraint::None)?;
    let yielding = solve(cfg, gamma, Constraint::CrossAfterTarget1)?;
    Ok((unconstrained, yielding))
}

/// Best goal-reaching value per crossing-window class, or `None` when the
/// class contains no goal trajectory at all.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityScan {
    pub before_target_1: Option<f64>,
    pub between_targets_1_2: Option<f64>,
    pub after_target_1: Option<f64>,
}

pub fn feasibility_scan(cfg: &EnvConfig, gamma: f64) -> Result<FeasibilityScan> {
    let g = grid(cfg)?;
    let class = |c: Constraint| -> Option<f64> {
        let out = dp(cfg, &g, gamma, c, true);
        out.value.is_finite().then_some(out.value)
    };
    Ok(FeasibilityScan {
        before_target_1: class(Constraint::CrossBeforeTarget1),
        between_targets_1_2: class(Constraint::CrossBetweenTargets1And2),
        after_target_1: class(Constraint::CrossAfterTarget1),
    })
}

/// Replay summary of a fixed action sequence through the simulator.
#[derive(Debug, Clone)]
pub struct RolloutSummary {
    /// Discounted return at the given gamma.
    pub ret: f64,
    pub undiscounted: f64,
    pub steps: usize,
    pub outcome: Outcome,
    pub crossing_step: Option<usize>,
    pub min_target_distance: [f64; 3],
    pub trajectory: Trajectory,
}

/// Run a scripted action sequence from the start state until the episode
/// ends. Unused trailing actions are fine; running out before a terminal is
/// a contract error.
pub fn rollout(cfg: &EnvConfig, actions: &[Action], gamma: f64) -> Result<RolloutSummary> {
    let mut w = env::reset(cfg)?;
    let mut snapshots = vec![Snapshot {
        t: 0.0,
        arc_length: w.arc_length,
        speed: w.speed,
    }];
    let mut min_d = [f64::INFINITY; 3];
    let mut crossing_step = None;
    let mut ret = 0.0;
    let mut undiscounted = 0.0;
    let mut disc = 1.0;
    let mut steps = 0;
    let mut outcome = None;

    let track = |w: &env::WorldState,
                 min_d: &mut [f64; 3],
                 cross: &mut Option<usize>,
                 idx: usize,
                 cfg: &EnvConfig| {
        let s = w.arc_length.min(cfg.path_end());
        let (ex, ey) = env::path_point(s, cfg).expect("clamped arc length on path");
        let (_, cy) = cfg.conflict_point();
        for i in 0..3 {
            let (tx, ty) = (-cfg.lane_offset, cy + w.dist_to_conflict[i]);
            min_d[i] = min_d[i].min(((ex - tx).powi(2) + (ey - ty).powi(2)).sqrt());
        }
        if cross.is_none() && w.arc_length >= cfg.conflict_arc_length() {
            *cross = Some(idx);
        }
    };
    track(&w, &mut min_d, &mut crossing_step, 0, cfg);

    for a in actions {
        let r = env::step(&w, *a, cfg)?;
        steps += 1;
        ret += disc * r.reward;
        undiscounted += r.reward;
        disc *= gamma;
        w = r.next;
        snapshots.push(Snapshot {
            t: w.step as f64 * cfg.dt,
            arc_length: w.arc_length,
            speed: w.speed,
        });
        track(&w, &mut min_d, &mut crossing_step, steps, cfg);
        if r.terminal {
            outcome = r.outcome;
            break;
        }
    }
    let outcome = outcome.ok_or_else(|| {
        Error::Contract(format!(
            "action sequence exhausted after {steps} steps without a terminal"
        ))
    })?;
    Ok(RolloutSummary {
        ret,
        undiscounted,
        steps,
        outcome,
        crossing_step,
        min_target_distance: min_d,
        trajectory: Trajectory { snapshots, outcome },
    })
}

/// Compare the simulator against the lattice transition model on random
/// lattice states; any mismatch is a bug in one of the two.
pub fn check_lattice_agreement<R: Rng>(cfg: &EnvConfig, samples: usize, rng: &mut R) -> Result<()> {
    let g = grid(cfg)?;
    let collide = collision_table(cfg, &g);
    let cols = g.n_s + 1;
    for _ in 0..samples {
        let t = rng.random_range(0..cfg.max_steps);
        let dv = rng.random_range(0..g.n_v);
        let ds = rng.random_range(0..g.n_s);
        let a = rng.random_range(0..NUM_ACTIONS);
        let w = env::WorldState {
            step: t,
            arc_length: ds as f64 * g.qs,
            speed: dv as f64 * QV,
            dist_to_conflict: [
                cfg.target_distance(0, t),
                cfg.target_distance(1, t),
                cfg.target_distance(2, t),
            ],
            terminal: None,
        };
        let r = env::step(&w, Action::from_index(a).unwrap(), cfg)?;
        let dvp = (dv as i64 + g.deltas[a]).clamp(g.v_lo, g.v_hi) as usize;
        let dsp = ds + dvp;
        let check = |x: f64, grid_idx: usize, q: f64, what: &str| -> Result<()> {
            if (x - grid_idx as f64 * q).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "lattice drift: simulator {what} {x} vs lattice {}",
                    grid_idx as f64 * q
                )));
            }
            Ok(())
        };
        check(r.next.speed, dvp, QV, "speed")?;
        check(r.next.arc_length, dsp, g.qs, "position")?;
        let want = if collide[(t + 1) * cols + dsp.min(g.n_s)] {
            Some(Outcome::Collision)
        } else if dsp >= g.n_s {
            Some(Outcome::Goal)
        } else if t + 1 == cfg.max_steps {
            Some(Outcome::Timeout)
        } else {
            None
        };
        if r.outcome != want {
            return Err(Error::Numeric(format!(
                "lattice outcome mismatch at t={t} dv={dv} ds={ds} a={a}: simulator {:?} vs lattice {want:?}",
                r.outcome
            )));
        }
    }
    Ok(())
}
