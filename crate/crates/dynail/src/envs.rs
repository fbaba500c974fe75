//! Analytic control environments with exact, hand-checkable dynamics.
//!
//! Two tasks: CartPole (discrete push-left/push-right, explicit Euler at
//! 0.02 s) and a torque-limited pendulum swing-up (continuous torque,
//! semi-implicit Euler at 0.05 s). Both are pure functions of
//! (state, action), so rollouts are bitwise reproducible from a seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("action does not match environment: {detail}")]
    ActionMismatch { detail: String },
    #[error("state has length {got}, expected {expected}")]
    BadStateDim { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionKind {
    Discrete { k: usize },
    /// Box action, componentwise bounds [lo, hi].
    Continuous { dim: usize, lo: f64, hi: f64 },
}

impl ActionKind {
    /// Length of the stored action vector (one-hot for discrete).
    pub fn vec_len(&self) -> usize {
        match self {
            ActionKind::Discrete { k } => *k,
            ActionKind::Continuous { dim, .. } => *dim,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EnvSpec {
    pub name: &'static str,
    pub state_dim: usize,
    pub action_kind: ActionKind,
    pub max_episode_len: usize,
    pub time_step: f64,
}

/// Concrete action consumed by `step`.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// One environment (or model) step. `true_reward` is for evaluation only:
/// the imitation learner never sees it, which is enforced by keeping the
/// field private to this module.
#[derive(Clone, Debug)]
pub struct Transition {
    pub s: Vec<f64>,
    /// Stored action representation: executed one-hot for discrete
    /// environments, executed (clamped) torque vector for continuous.
    pub a: Vec<f64>,
    /// Reparameterization noise the action was sampled with (empty for
    /// discrete actions); lets model-based unrolls replay the same draw.
    pub noise: Vec<f64>,
    pub s_next: Vec<f64>,
    pub done: bool,
    true_reward: f64,
}

impl Transition {
    pub fn new(
        s: Vec<f64>,
        a: Vec<f64>,
        noise: Vec<f64>,
        s_next: Vec<f64>,
        done: bool,
        true_reward: f64,
    ) -> Self {
        Transition {
            s,
            a,
            noise,
            s_next,
            done,
            true_reward,
        }
    }

    /// Evaluation-only reward. Training code must not call this; the
    /// corruption audit in the test suite checks that it does not.
    pub fn true_reward(&self) -> f64 {
        self.true_reward
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Environment,
    Model,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub origin: Origin,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_true_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.true_reward).sum()
    }

    /// Consecutive transitions must chain: `t[i].s_next == t[i+1].s`.
    pub fn is_consistent(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].s_next == w[1].s)
    }
}

/// What a policy hands back when sampling: the action the environment
/// executes plus the representation stored on the transition.
#[derive(Clone, Debug)]
pub struct SampledAction {
    pub executed: Action,
    pub stored: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Anything that can drive a rollout. Implemented by the policy network and
/// by the scripted test policies.
pub trait Agent {
    fn sample_action(&self, s: &[f64], rng: &mut dyn RngCore) -> SampledAction;
}

// ---- CartPole ---------------------------------------------------------

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
const POLE_HALF_LEN: f64 = 0.5;
const POLE_MASS_LEN: f64 = POLE_MASS * POLE_HALF_LEN;
const FORCE_MAG: f64 = 10.0;
const CARTPOLE_DT: f64 = 0.02;
const X_LIMIT: f64 = 2.4;
const THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;

// ---- Pendulum ---------------------------------------------------------

const PEND_G: f64 = 10.0;
const PEND_M: f64 = 1.0;
const PEND_L: f64 = 1.0;
const PEND_DT: f64 = 0.05;
pub const TORQUE_LIMIT: f64 = 2.0;
const SPEED_LIMIT: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Env {
    CartPole,
    Pendulum,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub s_next: Vec<f64>,
    pub done: bool,
    pub reward: f64,
}

impl Env {
    pub fn from_name(name: &str) -> Option<Env> {
        match name {
            "cartpole" => Some(Env::CartPole),
            "pendulum" => Some(Env::Pendulum),
            _ => None,
        }
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            Env::CartPole => EnvSpec {
                name: "cartpole",
                state_dim: 4,
                action_kind: ActionKind::Discrete { k: 2 },
                max_episode_len: 200,
                time_step: CARTPOLE_DT,
            },
            Env::Pendulum => EnvSpec {
                name: "pendulum",
                state_dim: 3,
                action_kind: ActionKind::Continuous {
                    dim: 1,
                    lo: -TORQUE_LIMIT,
                    hi: TORQUE_LIMIT,
                },
                max_episode_len: 200,
                time_step: PEND_DT,
            },
        }
    }

    /// Initial-state distribution: CartPole uniform in (-0.05, 0.05)^4;
    /// pendulum angle uniform on the circle, speed uniform in (-1, 1).
    pub fn initial_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            Env::CartPole => (0..4).map(|_| rng.gen_range(-0.05..0.05)).collect(),
            Env::Pendulum => {
                let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let thetadot = rng.gen_range(-1.0..1.0);
                vec![theta.cos(), theta.sin(), thetadot]
            }
        }
    }

    pub fn step(&self, s: &[f64], a: &Action) -> Result<StepOutcome, EnvError> {
        let spec = self.spec();
        if s.len() != spec.state_dim {
            return Err(EnvError::BadStateDim {
                expected: spec.state_dim,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::NonFinite { what: "input state" });
        }
        match (self, a) {
            (Env::CartPole, Action::Discrete(i)) => {
                if *i >= 2 {
                    return Err(EnvError::ActionMismatch {
                        detail: format!("discrete action {i} out of range for k=2"),
                    });
                }
                Ok(cartpole_step(s, *i))
            }
            (Env::Pendulum, Action::Continuous(u)) => {
                if u.len() != 1 {
                    return Err(EnvError::ActionMismatch {
                        detail: format!("torque vector has dim {}, expected 1", u.len()),
                    });
                }
                if !u[0].is_finite() {
                    return Err(EnvError::NonFinite { what: "torque" });
                }
                Ok(pendulum_step(s, u[0]))
            }
            _ => Err(EnvError::ActionMismatch {
                detail: format!("{:?} action on {} environment", a, spec.name),
            }),
        }
    }
}

/// Explicit-Euler cart-pole update of (x, x_dot, theta, theta_dot); push
/// left (a=0) or right (a=1) with fixed force magnitude. Reward is 1 on
/// every step, the terminating one included, so episode return equals
/// episode length.
pub fn cartpole_step(s: &[f64], a: usize) -> StepOutcome {
    let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
    let force = if a == 1 { FORCE_MAG } else { -FORCE_MAG };
    let (sin_t, cos_t) = theta.sin_cos();
    let temp = (force + POLE_MASS_LEN * theta_dot * theta_dot * sin_t) / TOTAL_MASS;
    let theta_acc = (GRAVITY * sin_t - cos_t * temp)
        / (POLE_HALF_LEN * (4.0 / 3.0 - POLE_MASS * cos_t * cos_t / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LEN * theta_acc * cos_t / TOTAL_MASS;
    let s_next = vec![
        x + CARTPOLE_DT * x_dot,
        x_dot + CARTPOLE_DT * x_acc,
        theta + CARTPOLE_DT * theta_dot,
        theta_dot + CARTPOLE_DT * theta_acc,
    ];
    let done = s_next[0].abs() > X_LIMIT || s_next[2].abs() > THETA_LIMIT;
    StepOutcome {
        s_next,
        done,
        reward: 1.0,
    }
}

/// Semi-implicit Euler pendulum update on state (cos th, sin th, th_dot),
/// with theta measured from upright. Torque is clamped to the limit, speed
/// to +-8. Reward penalizes distance from upright at the pre-step state.
/// Episodes are fixed length: `done` is always false here.
pub fn pendulum_step(s: &[f64], torque: f64) -> StepOutcome {
    let theta = s[1].atan2(s[0]);
    let theta_dot = s[2];
    let u = torque.clamp(-TORQUE_LIMIT, TORQUE_LIMIT);
    let err = wrap_to_pi(theta);
    let reward = -(err * err + 0.1 * theta_dot * theta_dot + 0.001 * u * u);
    let theta_acc =
        (3.0 * PEND_G / (2.0 * PEND_L)) * theta.sin() + (3.0 / (PEND_M * PEND_L * PEND_L)) * u;
    let new_dot = (theta_dot + PEND_DT * theta_acc).clamp(-SPEED_LIMIT, SPEED_LIMIT);
    let new_theta = theta + PEND_DT * new_dot;
    StepOutcome {
        s_next: vec![new_theta.cos(), new_theta.sin(), new_dot],
        done: false,
        reward,
    }
}

/// Wrap an angle to [-pi, pi].
pub fn wrap_to_pi(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = (theta + PI) % (2.0 * PI);
    if t < 0.0 {
        t += 2.0 * PI;
    }
    t - PI
}

/// Pendulum mechanical energy measured from the hanging rest state
/// (rigid rod: I = m l^2 / 3). Used by integration-accuracy checks.
pub fn pendulum_energy(s: &[f64]) -> f64 {
    let theta = s[1].atan2(s[0]);
    let theta_dot = s[2];
    let kinetic = PEND_M * PEND_L * PEND_L * theta_dot * theta_dot / 6.0;
    let potential = PEND_M * PEND_G * (PEND_L / 2.0) * (1.0 + theta.cos());
    kinetic + potential
}

/// Runs one episode: ends at `done`, at `max_len`, or at the environment's
/// own episode cap, whichever comes first. Deterministic given the seed.
pub fn rollout(
    env: Env,
    policy: &dyn Agent,
    max_len: usize,
    rng_seed: u64,
) -> Result<Trajectory, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let cap = max_len.min(env.spec().max_episode_len);
    let mut s = env.initial_state(&mut rng);
    let mut transitions = Vec::with_capacity(cap);
    for _ in 0..cap {
        let sampled = policy.sample_action(&s, &mut rng);
        let out = env.step(&s, &sampled.executed)?;
        let done = out.done;
        transitions.push(Transition::new(
            s,
            sampled.stored,
            sampled.noise,
            out.s_next.clone(),
            done,
            out.reward,
        ));
        if done {
            break;
        }
        s = out.s_next;
    }
    Ok(Trajectory {
        transitions,
        origin: Origin::Environment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pushes a fixed discrete action every step.
    struct AlwaysDiscrete(usize);

    impl Agent for AlwaysDiscrete {
        fn sample_action(&self, _s: &[f64], _rng: &mut dyn RngCore) -> SampledAction {
            let mut one_hot = vec![0.0; 2];
            one_hot[self.0] = 1.0;
            SampledAction {
                executed: Action::Discrete(self.0),
                stored: one_hot,
                noise: vec![],
            }
        }
    }

    /// Random torque in the legal range.
    struct RandomTorque;

    impl Agent for RandomTorque {
        fn sample_action(&self, _s: &[f64], rng: &mut dyn RngCore) -> SampledAction {
            let mut r = rand::rngs::StdRng::from_seed({
                let mut seed = [0u8; 32];
                rng.fill_bytes(&mut seed);
                seed
            });
            let u = r.gen_range(-TORQUE_LIMIT..TORQUE_LIMIT);
            SampledAction {
                executed: Action::Continuous(vec![u]),
                stored: vec![u],
                noise: vec![0.0],
            }
        }
    }

    #[test]
    fn cartpole_push_right_from_rest() {
        // Frozen hand evaluation: temp = 10/1.1, theta_acc = -14.6341...,
        // x_acc = 9.7561..., then one Euler step at dt = 0.02.
        let out = cartpole_step(&[0.0, 0.0, 0.0, 0.0], 1);
        let expect = [0.0, 0.1951219512195122, 0.0, -0.2926829268292683];
        for (got, want) in out.s_next.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
        assert!(!out.done);
        assert_eq!(out.reward, 1.0);
    }

    #[test]
    fn cartpole_push_left_mirrors_right_at_rest() {
        let right = cartpole_step(&[0.0, 0.0, 0.0, 0.0], 1);
        let left = cartpole_step(&[0.0, 0.0, 0.0, 0.0], 0);
        assert_eq!(left.s_next[1], -right.s_next[1]);
        assert_eq!(left.s_next[3], -right.s_next[3]);
        assert_eq!(left.s_next[0], 0.0);
        assert_eq!(left.s_next[2], 0.0);
    }

    #[test]
    fn cartpole_terminates_past_position_limit() {
        let out = cartpole_step(&[2.41, 0.0, 0.0, 0.0], 0);
        assert!(out.done);
        let out = cartpole_step(&[0.0, 0.0, 0.22, 0.0], 1);
        assert!(out.done, "0.22 rad exceeds the 12 degree limit");
    }

    #[test]
    fn cartpole_rejects_non_finite_state() {
        let err = Env::CartPole
            .step(&[f64::NAN, 0.0, 0.0, 0.0], &Action::Discrete(0))
            .unwrap_err();
        assert!(matches!(err, EnvError::NonFinite { .. }));
    }

    #[test]
    fn pendulum_equilibria_are_fixed_points() {
        // Upright (unstable) and hanging (stable), both at rest, u = 0.
        for s in [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]] {
            let out = pendulum_step(&s, 0.0);
            for (got, want) in out.s_next.iter().zip(s) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pendulum_torque_from_hanging() {
        // Gravity vanishes at theta = pi, so one step integrates torque
        // alone: th_dot = 0.05 * 3 * 2 = 0.3.
        let out = pendulum_step(&[-1.0, 0.0, 0.0], 2.0);
        assert!((out.s_next[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn pendulum_clamps_torque_and_speed() {
        let big = pendulum_step(&[-1.0, 0.0, 0.0], 50.0);
        let legal = pendulum_step(&[-1.0, 0.0, 0.0], TORQUE_LIMIT);
        assert_eq!(big.s_next, legal.s_next);
        let fast = pendulum_step(&[0.0, 1.0, 7.9], TORQUE_LIMIT);
        assert!(fast.s_next[2] <= SPEED_LIMIT);
    }

    #[test]
    fn pendulum_reward_is_zero_only_at_upright_rest() {
        let out = pendulum_step(&[1.0, 0.0, 0.0], 0.0);
        assert_eq!(out.reward, 0.0);
        let down = pendulum_step(&[-1.0, 0.0, 0.0], 0.0);
        let pi = std::f64::consts::PI;
        assert!((down.reward + pi * pi).abs() < 1e-9);
    }

    #[test]
    fn pendulum_energy_drift_is_small_per_step() {
        // Free swing from theta = pi/2 at rest. The symplectic update keeps
        // the average energy drift rate well under 2% per step over 50 steps
        // (explicit Euler sits at ~2.1% and would fail this bound).
        let mut s = vec![0.0, 1.0, 0.0];
        let e0 = pendulum_energy(&s);
        assert!((e0 - 5.0).abs() < 1e-12);
        let steps = 50;
        for _ in 0..steps {
            let out = pendulum_step(&s, 0.0);
            s = out.s_next;
            assert!(s[2].abs() < SPEED_LIMIT, "speed clamp engaged mid-test");
        }
        let rate = (pendulum_energy(&s) - e0).abs() / e0 / steps as f64;
        assert!(rate < 0.02, "drift rate {rate} per step");
    }

    #[test]
    fn rollout_same_seed_is_bitwise_identical() {
        let a = rollout(Env::CartPole, &AlwaysDiscrete(1), 200, 7).unwrap();
        let b = rollout(Env::CartPole, &AlwaysDiscrete(1), 200, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.transitions.iter().zip(&b.transitions) {
            assert_eq!(x.s, y.s);
            assert_eq!(x.a, y.a);
            assert_eq!(x.s_next, y.s_next);
        }
        let c = rollout(Env::Pendulum, &RandomTorque, 200, 7).unwrap();
        let d = rollout(Env::Pendulum, &RandomTorque, 200, 7).unwrap();
        for (x, y) in c.transitions.iter().zip(&d.transitions) {
            assert_eq!(x.s, y.s);
            assert_eq!(x.a, y.a);
        }
    }

    #[test]
    fn rollout_chains_states_and_respects_max_len() {
        let t = rollout(Env::Pendulum, &RandomTorque, 200, 3).unwrap();
        assert!(t.is_consistent());
        assert_eq!(t.len(), 200);
        let one = rollout(Env::Pendulum, &RandomTorque, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn constant_push_destabilizes_cartpole() {
        let t = rollout(Env::CartPole, &AlwaysDiscrete(1), 200, 11).unwrap();
        assert!(t.len() < 200, "constant force should topple the pole");
        assert!(t.transitions.last().unwrap().done);
        // Return-equals-length contract for CartPole.
        assert_eq!(t.total_true_reward(), t.len() as f64);
    }
}
