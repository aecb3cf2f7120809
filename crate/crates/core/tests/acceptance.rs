//! Acceptance gate: one test per release criterion, each printing a PASS or
//! FAIL line (visible with `--nocapture`; cargo's own per-test ok/FAILED
//! lines mirror them). Expensive artifacts — the exact planner solutions and
//! the desk-scale training run — are computed once and shared.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fallback_rl::divergence::{metric, FeatureHistogram, ShapingParams};
use fallback_rl::env::{EnvConfig, REWARD_COLLISION, REWARD_STEP};
use fallback_rl::eval::{alpha_sweep, evaluate, perturbation_compare, qlandscape, GreedyNet};
use fallback_rl::learner::{LearnerConfig, LearnerState};
use fallback_rl::mdp::{Action, ReplayBuffer, Transition, NUM_ACTIONS};
use fallback_rl::nn::QNetwork;
use fallback_rl::oracle::{self, Constraint, OracleResult};
use fallback_rl::train::{run_training, RunConfig, TrainConfig, TrainOutput};

fn check(criterion: usize, what: &str, ok: bool, detail: &str) {
    println!(
        "acceptance criterion {criterion} ({what}): {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} ({what}): {detail}");
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn scratch(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!(
        "fallback-rl-acceptance-{tag}-{}",
        std::process::id()
    ))
}

struct OraclePair {
    unconstrained: OracleResult,
    yielding: OracleResult,
    elapsed: Duration,
}

fn oracle_pair() -> &'static OraclePair {
    static PAIR: OnceLock<OraclePair> = OnceLock::new();
    PAIR.get_or_init(|| {
        let cfg = EnvConfig::default();
        let start = Instant::now();
        let (unconstrained, yielding) = oracle::two_solutions(&cfg, 1.0).expect("planner solves");
        OraclePair {
            unconstrained,
            yielding,
            elapsed: start.elapsed(),
        }
    })
}

struct DeskRun {
    cfg: TrainConfig,
    out: TrainOutput,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = TrainConfig::load(&repo_config("desk.toml")).expect("desk config loads");
        let dir = scratch("desk");
        std::fs::remove_dir_all(&dir).ok();
        let out = run_training(&cfg, &dir).expect("desk training completes");
        DeskRun { cfg, out }
    })
}

#[test]
fn criterion_1_planner_certifies_both_crossing_strategies() {
    let pair = oracle_pair();
    let (fast, yielding) = (&pair.unconstrained, &pair.yielding);
    let cfg = EnvConfig::default();
    let t1_arrival = cfg.target_offsets[0] / cfg.target_speed;
    let t2_arrival = cfg.target_offsets[1] / cfg.target_speed;

    // the pass-between class must itself be feasible, and the constrained
    // optimum must actually cross inside the gap between targets 1 and 2
    let start = Instant::now();
    let between = oracle::solve(&cfg, 1.0, Constraint::CrossBetweenTargets1And2)
        .expect("pass-between planner solves");
    let elapsed = pair.elapsed + start.elapsed();

    let fast_cross = fast.crossing_step.map(|k| k as f64 * cfg.dt);
    let between_cross = between.crossing_step.map(|k| k as f64 * cfg.dt);
    let ok = fast.outcome == fallback_rl::mdp::Outcome::Goal
        && between.outcome == fallback_rl::mdp::Outcome::Goal
        && yielding.outcome == fallback_rl::mdp::Outcome::Goal
        && fast_cross.is_some_and(|t| t < t1_arrival)
        && between_cross.is_some_and(|t| t > t1_arrival && t < t2_arrival)
        && fast.value > between.value
        && (yielding.value - between.value).abs() < 1e-9
        && elapsed < Duration::from_secs(120);
    check(
        1,
        "two crossing strategies",
        ok,
        &format!(
            "fast V*={} crossing at {:?} s, pass-between V={} crossing at {:?} s (targets 1/2 at {}/{} s), yielding V={}, solved in {:.1} s",
            fast.value,
            fast_cross,
            between.value,
            between_cross,
            t1_arrival,
            t2_arrival,
            yielding.value,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_trained_optimal_agent_reaches_planner_value() {
    let run = desk_run();
    let v_star = oracle_pair().unconstrained.value;
    let rep = evaluate(
        &GreedyNet(run.out.agents[0].learner.online()),
        "optimal",
        &run.cfg.environment,
        100,
        &[],
    )
    .expect("evaluation runs");
    let ok = rep.mean_return >= v_star - 0.5 && rep.collision_rate == 0.0;
    check(
        2,
        "optimal agent convergence",
        ok,
        &format!(
            "greedy mean return {} (floor {}), collision rate {} over {} episodes",
            rep.mean_return,
            v_star - 0.5,
            rep.collision_rate,
            rep.episodes
        ),
    );
}

#[test]
fn criterion_3_pseudo_agent_learned_a_divergent_safe_fallback() {
    let run = desk_run();
    let v_yield = oracle_pair().yielding.value;
    let m_final = run
        .out
        .final_metric_episode_mean(1, 0, 100)
        .expect("pseudo-agent logged divergences");
    let rep = evaluate(
        &GreedyNet(run.out.agents[1].learner.online()),
        "pseudo",
        &run.cfg.environment,
        100,
        &[],
    )
    .expect("evaluation runs");
    let ok = m_final >= 0.8 && rep.collision_rate == 0.0 && rep.mean_return >= v_yield - 0.5;
    check(
        3,
        "fallback strategy learned",
        ok,
        &format!(
            "final-100 divergence {m_final} (need ≥ 0.8), collision rate {}, greedy return {} (floor {})",
            rep.collision_rate,
            rep.mean_return,
            v_yield - 0.5
        ),
    );
}

#[test]
fn criterion_4_shaping_scale_sweep_shows_a_threshold() {
    let base = TrainConfig::load(&repo_config("sweep.toml")).expect("sweep config loads");
    let dir = scratch("sweep");
    std::fs::remove_dir_all(&dir).ok();
    let res = alpha_sweep(&base, &[0.0, 0.25, 0.5, 0.75, 1.0, 1.5], &dir).expect("sweep runs");
    for row in &res.rows {
        println!(
            "  α={}: final-100 divergence {} (pooled {}), eval return {}{}",
            row.alpha,
            row.final_metric_episode_mean,
            row.final_metric_pooled,
            row.eval_return,
            row.error
                .as_deref()
                .map(|e| format!(" [FAILED: {e}]"))
                .unwrap_or_default()
        );
    }
    let at = |alpha: f64| {
        res.rows
            .iter()
            .find(|r| r.alpha == alpha)
            .filter(|r| r.error.is_none())
            .map(|r| r.final_metric_episode_mean)
    };
    let m0 = at(0.0);
    let m1 = at(1.0);
    let jump = res.max_adjacent_jump();
    let ok = m0.is_some_and(|m| m < 0.4) && m1.is_some_and(|m| m >= 0.8) && jump > 0.4;
    check(
        4,
        "α threshold",
        ok,
        &format!("divergence at α=0: {m0:?} (need < 0.4), at α=1: {m1:?} (need ≥ 0.8), max adjacent jump {jump} (need > 0.4)"),
    );
}

#[test]
fn criterion_5_radius_perturbation_breaks_optimal_but_not_fallback() {
    let run = desk_run();
    let cmp = perturbation_compare(
        run.out.agents[0].learner.online(),
        run.out.agents[1].learner.online(),
        &run.cfg.environment,
        1,
        1.5,
        100,
    )
    .expect("comparison runs");
    let drop_opt = -cmp.return_delta_optimal();
    let change_sub = cmp.return_delta_pseudo().abs();
    let ok = drop_opt >= 2.0 && change_sub < 0.2;
    check(
        5,
        "perturbation robustness",
        ok,
        &format!(
            "optimal return drop {drop_opt} (need ≥ 2.0, perturbed collision rate {}), pseudo |change| {change_sub} (need < 0.2)",
            cmp.perturbed_optimal.collision_rate
        ),
    );
}

// ---- criterion 6: numerical property suite ----

/// Central-difference gradient check of a scalar projection of the network
/// output; unit-floored relative error absorbs parameters whose true
/// gradient is 0 (dead ReLU units).
fn gradcheck_once(rng: &mut ChaCha8Rng) -> f64 {
    let mut net = QNetwork::init(&[8, 64, 64, 6], rng);
    let x: [f64; 8] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();

    let trace = net.forward_trace(&x).unwrap();
    let grads = net.backward(&trace, &w);
    // flatten in param_mut order: weights then biases, layer by layer
    let flat: Vec<f64> = grads
        .weights
        .iter()
        .zip(&grads.biases)
        .flat_map(|(wl, bl)| wl.iter().chain(bl.iter()).copied())
        .collect();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for p in 0..net.num_parameters() {
        let orig = *net.param_mut(p);
        *net.param_mut(p) = orig + h;
        let up: f64 = net
            .forward(&x)
            .unwrap()
            .iter()
            .zip(&w)
            .map(|(q, wi)| q * wi)
            .sum();
        *net.param_mut(p) = orig - h;
        let dn: f64 = net
            .forward(&x)
            .unwrap()
            .iter()
            .zip(&w)
            .map(|(q, wi)| q * wi)
            .sum();
        *net.param_mut(p) = orig;
        let numeric = (up - dn) / (2.0 * h);
        let rel = (numeric - flat[p]).abs() / (numeric.abs() + flat[p].abs()).max(1.0);
        worst = worst.max(rel);
    }
    worst
}

fn random_histogram(rng: &mut ChaCha8Rng) -> FeatureHistogram {
    let n = rng.random_range(1..200);
    let speeds: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
    FeatureHistogram::from_speeds(&speeds)
}

#[test]
fn criterion_6_numerical_property_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE97);

    // backprop vs central finite differences on 20 random nets
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        worst = worst.max(gradcheck_once(&mut rng));
    }
    assert!(worst <= 1e-4, "worst gradient-check relative error {worst}");

    // pseudometric axioms on 1000 random histogram triples
    for _ in 0..1000 {
        let (a, b, c) = (
            random_histogram(&mut rng),
            random_histogram(&mut rng),
            random_histogram(&mut rng),
        );
        let (ab, ba) = (metric(&a, &b).unwrap(), metric(&b, &a).unwrap());
        let (bc, ac) = (metric(&b, &c).unwrap(), metric(&a, &c).unwrap());
        assert!(ab >= 0.0 && ab <= 2.0, "divergence {ab} outside [0, 2]");
        assert_eq!(ab, ba, "asymmetric divergence");
        assert_eq!(metric(&a, &a).unwrap(), 0.0, "nonzero self-divergence");
        assert!(
            ac <= ab + bc + 1e-12,
            "triangle violation {ac} > {ab} + {bc}"
        );
    }

    // pseudo-reward bounds with the m = 0 worst case hit exactly
    let shaping = ShapingParams::default();
    assert_eq!(shaping.pseudo_reward(0.0), -10.0);
    for _ in 0..1000 {
        let m = rng.random_range(0.0..2.0);
        let r = shaping.pseudo_reward(m);
        assert!(
            r >= -shaping.alpha / shaping.delta && r < 0.0,
            "pseudo-reward {r} out of bounds at m={m}"
        );
    }

    // double-Q targets against a scalar re-derivation on random batches
    let lc = LearnerConfig {
        hidden_sizes: vec![16, 12],
        ..LearnerConfig::default()
    };
    let state = LearnerState::new(lc.clone(), &mut rng).unwrap();
    for _ in 0..50 {
        let batch: Vec<Transition> = (0..16)
            .map(|_| Transition {
                s: random_state(&mut rng),
                a: Action::from_index(rng.random_range(0..NUM_ACTIONS)).unwrap(),
                r: rng.random_range(-5.0..0.0),
                s_next: random_state(&mut rng),
                terminal: rng.random_range(0.0..1.0) < 0.2,
            })
            .collect();
        let ys = state.td_targets(&batch).unwrap();
        for (tr, y) in batch.iter().zip(&ys) {
            let want = if tr.terminal {
                tr.r
            } else {
                let online = state.online().forward(tr.s_next.as_array()).unwrap();
                let mut best = 0;
                for i in 1..NUM_ACTIONS {
                    if online[i] > online[best] {
                        best = i;
                    }
                }
                tr.r + lc.gamma * state.target().forward(tr.s_next.as_array()).unwrap()[best]
            };
            assert_eq!(*y, want, "double-Q target mismatch");
        }
    }

    // replay: FIFO eviction and χ²-uniform minibatch sampling
    let mut buf = ReplayBuffer::new(100);
    for k in 0..250 {
        buf.push(Transition {
            s: random_state(&mut rng),
            a: Action::from_index(0).unwrap(),
            r: k as f64,
            s_next: random_state(&mut rng),
            terminal: false,
        });
    }
    let kept: Vec<f64> = buf.iter().map(|t| t.r).collect();
    assert_eq!(kept.len(), 100);
    let mut sorted = kept.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(sorted, kept, "ring order scrambled");
    assert_eq!(kept[0], 150.0, "oldest surviving transition should be #150");

    let mut counts = [0u64; 100];
    let draws = 40_000;
    for _ in 0..draws / 20 {
        for t in buf.sample_minibatch(20, &mut rng).unwrap() {
            counts[(t.r as usize) - 150] += 1;
        }
    }
    let expect = draws as f64 / 100.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expect).powi(2) / expect)
        .sum();
    // χ²(0.99, 99) — sampling is without replacement inside a minibatch,
    // which only tightens the spread
    assert!(chi2 < 134.6416, "sampling non-uniform: χ² {chi2}");

    let elapsed = start.elapsed();
    let ok = elapsed < Duration::from_secs(60);
    check(
        6,
        "numerical properties",
        ok,
        &format!(
            "gradcheck worst rel err {worst:.2e}, divergence axioms ok, shaping bounds ok, double-Q ok, replay χ² {chi2:.1}, suite in {:.1} s",
            elapsed.as_secs_f64()
        ),
    );
}

fn random_state(rng: &mut ChaCha8Rng) -> fallback_rl::mdp::StateVector {
    fallback_rl::mdp::StateVector(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
}

// ---- criterion 7: algorithm structure ----

fn structural_config(n: usize, steps: u64) -> TrainConfig {
    TrainConfig {
        environment: EnvConfig::default(),
        learner: LearnerConfig {
            hidden_sizes: vec![16],
            minibatch_size: 8,
            warmup_transitions: 60,
            target_sync_period: 100,
            epsilon_decay_steps: 2_000,
            replay_capacity: 4_000,
            ..LearnerConfig::default()
        },
        shaping: ShapingParams::default(),
        run: RunConfig {
            num_pseudo_agents: n,
            steps_per_agent: steps,
            seed: 913,
            checkpoint_every: 0,
            log_comparison_channel: true,
            output_dir: None,
        },
    }
}

#[test]
fn criterion_7_algorithm_structure() {
    let cfg = structural_config(3, 3_000);
    let dir_a = scratch("structure-a");
    let dir_b = scratch("structure-b");
    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
    let out = run_training(&cfg, &dir_a).expect("training runs");

    // shaping lands only on terminal transitions, and never on agent 0's
    let base_rewards = [REWARD_STEP, REWARD_COLLISION];
    let mut shaped_terminals = 0u64;
    for slot in &out.agents {
        for t in slot.buffer.iter() {
            if slot.id == 0 || !t.terminal {
                assert!(
                    base_rewards.contains(&t.r),
                    "agent {} holds a shaped reward {} on a {} transition",
                    slot.id,
                    t.r,
                    if t.terminal {
                        "terminal"
                    } else {
                        "non-terminal"
                    }
                );
            } else if !base_rewards.contains(&t.r) {
                shaped_terminals += 1;
            }
        }
    }
    assert!(
        shaped_terminals > 0,
        "no shaped terminal reward ever stored"
    );

    // with N = 3, every full round performs 0+1+2+3 = 6 reference comparisons
    let mut per_round = std::collections::BTreeMap::<u64, (usize, usize)>::new();
    for r in &out.records {
        let e = per_round.entry(r.round).or_insert((0, 0));
        e.0 += 1;
        e.1 += r.ref_metrics.len() + r.skipped_refs.len();
    }
    let full_rounds: Vec<_> = per_round
        .values()
        .filter(|(agents, _)| *agents == 4)
        .collect();
    assert!(!full_rounds.is_empty());
    assert!(
        full_rounds.iter().all(|(_, refs)| *refs == 6),
        "a full N=3 round computed a reference count other than 6"
    );

    // identical seeds reproduce the episode logs byte for byte
    run_training(&cfg, &dir_b).expect("second training runs");
    let a = std::fs::read(dir_a.join("episodes.csv")).unwrap();
    let b = std::fs::read(dir_b.join("episodes.csv")).unwrap();
    let identical = a == b;
    assert!(
        identical,
        "episode logs differ between identically seeded runs"
    );

    // exact decomposition as logged: shaped = base + Σ pseudo, bitwise
    for r in &out.records {
        assert_eq!(
            r.shaped_return,
            r.base_return + r.pseudo_total(),
            "decomposition broken"
        );
    }

    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
    check(
        7,
        "algorithm structure",
        true,
        &format!(
            "terminal-only shaping ({shaped_terminals} shaped terminals), agent-0 purity, 6 comparisons per full round across {} rounds, byte-identical reruns",
            per_round.len()
        ),
    );
}

#[test]
fn criterion_8_planner_self_consistency() {
    let pair = oracle_pair();
    let mut worst_replay: f64 = 0.0;
    let mut worst_bellman: f64 = 0.0;
    for sol in [&pair.unconstrained, &pair.yielding] {
        let replay =
            oracle::rollout(&EnvConfig::default(), &sol.actions, sol.gamma).expect("replay runs");
        worst_replay = worst_replay.max((replay.ret - sol.value).abs());
        let best_q = sol
            .q_start
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        worst_bellman = worst_bellman.max((best_q - sol.value).abs());
    }
    let ok = worst_replay <= 1e-9 && worst_bellman <= 1e-9;
    check(
        8,
        "planner self-consistency",
        ok,
        &format!("replay disagreement {worst_replay:.2e}, Bellman disagreement at s₀ {worst_bellman:.2e}"),
    );
}

// ---- side checks derived from the perturbation experiment ----

/// The fallback lives at lower speeds than the optimal policy, and a target
/// its path never approaches can grow without affecting it at all.
#[test]
fn trained_policies_differ_in_speed_and_exposure() {
    let run = desk_run();
    let envc = &run.cfg.environment;
    let opt = run.out.agents[0].learner.online();
    let sub = run.out.agents[1].learner.online();

    let land_opt = qlandscape(opt, envc, 10).expect("landscape");
    let land_sub = qlandscape(sub, envc, 10).expect("landscape");
    assert!(
        land_opt.speed_centroid() > land_sub.speed_centroid(),
        "optimal centroid {} not above fallback centroid {}",
        land_opt.speed_centroid(),
        land_sub.speed_centroid()
    );

    // growing target 3 leaves a fallback that never nears it untouched
    let cmp = perturbation_compare(opt, sub, envc, 3, 1.5, 10).expect("comparison");
    assert_eq!(
        cmp.return_delta_pseudo(),
        0.0,
        "target-3 growth changed the fallback's episodes"
    );
}
