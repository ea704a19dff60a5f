//! Multi-confounded classic-control environments.
//!
//! * Pendulum, confounders `m` (mass) and `l` (length): gravity 10, `dt`
//!   0.05, torque in `[-2, 2]`, angular speed clamped to 8. The cost is
//!   `wrap(theta)^2 + 0.1 theta_dot^2 + 0.001 u^2` measured before the step.
//! * CartPole swing-up, confounders `f` (force scale) and `l` (pole length):
//!   cart and pole mass 0.5, friction 0.1, gravity 9.82, `dt` 0.01; action in
//!   `[-1, 1]` multiplied by `f`. The reward is `cos(theta)` of the next state.
//!
//! Both start hanging down with small uniform noise, integrate with
//! semi-implicit Euler and run a fixed 200-step horizon with no early
//! termination. Observations are not normalized here.

mod registry;

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use registry::{ConfounderGrid, ConfounderSetting, Registry, Split};

use crate::error::{Error, Result};

/// Longest episode any environment runs.
pub const TASK_HORIZON: usize = 200;

const PENDULUM_G: f64 = 10.0;
const PENDULUM_DT: f64 = 0.05;
const PENDULUM_MAX_SPEED: f64 = 8.0;
const PENDULUM_MAX_TORQUE: f64 = 2.0;

const CART_MASS: f64 = 0.5;
const POLE_MASS: f64 = 0.5;
const CART_FRICTION: f64 = 0.1;
const CART_G: f64 = 9.82;
const CART_DT: f64 = 0.01;

const RESET_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Pendulum,
    CartPole,
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pendulum" => Ok(EnvKind::Pendulum),
            "cartpole" => Ok(EnvKind::CartPole),
            other => Err(Error::Config(format!("unknown environment {other:?}"))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::CartPole => "cartpole",
        })
    }
}

impl EnvKind {
    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::Pendulum => 3,
            EnvKind::CartPole => 5,
        }
    }

    pub fn act_dim(self) -> usize {
        1
    }

    /// Symmetric bound on every action component.
    pub fn action_bound(self) -> f64 {
        match self {
            EnvKind::Pendulum => PENDULUM_MAX_TORQUE,
            EnvKind::CartPole => 1.0,
        }
    }

    pub fn confounders(self) -> &'static [&'static str] {
        match self {
            EnvKind::Pendulum => &["m", "l"],
            EnvKind::CartPole => &["f", "l"],
        }
    }

    /// Index of `cos(theta)` and `sin(theta)` in the observation.
    pub fn trig_indices(self) -> (usize, usize) {
        match self {
            EnvKind::Pendulum => (0, 1),
            EnvKind::CartPole => (2, 3),
        }
    }

    /// Reward of the transition `obs --action--> next_obs`.
    pub fn reward(self, obs: &[f64], action: &[f64], next_obs: &[f64]) -> f64 {
        match self {
            EnvKind::Pendulum => {
                let theta = obs[1].atan2(obs[0]);
                let u = action[0].clamp(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE);
                -(theta * theta + 0.1 * obs[2] * obs[2] + 0.001 * u * u)
            }
            EnvKind::CartPole => next_obs[2],
        }
    }

    /// Applies the true dynamics to an observation. Used by the oracle planner.
    pub fn true_next(self, setting: &ConfounderSetting, obs: &[f64], action: &[f64]) -> Vec<f64> {
        Env::new(self, setting.clone()).transition(obs, action)
    }
}

/// Maps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub setting: ConfounderSetting,
}

/// A single environment instance with fixed confounders.
#[derive(Clone, Debug)]
pub struct Env {
    kind: EnvKind,
    setting: ConfounderSetting,
    // Pendulum: [theta, theta_dot, _, _]; CartPole: [x, x_dot, theta, theta_dot].
    phys: [f64; 4],
    step_index: usize,
    clamped_actions: u64,
}

impl Env {
    pub fn new(kind: EnvKind, setting: ConfounderSetting) -> Self {
        Self { kind, setting, phys: [0.0; 4], step_index: 0, clamped_actions: 0 }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn setting(&self) -> &ConfounderSetting {
        &self.setting
    }

    fn param(&self, name: &str) -> f64 {
        self.setting.get(name).unwrap_or(match name {
            "f" => 10.0,
            "l" if self.kind == EnvKind::CartPole => 0.6,
            _ => 1.0,
        })
    }

    /// Starts a new episode near the hanging-down position.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        let mut noise = || rng.random_range(-RESET_NOISE..RESET_NOISE);
        self.phys = match self.kind {
            EnvKind::Pendulum => [PI + noise(), noise(), 0.0, 0.0],
            EnvKind::CartPole => [noise(), noise(), PI + noise(), noise()],
        };
        self.step_index = 0;
        self.observation()
    }

    /// Sets the raw physical state: `[theta, theta_dot]` or `[x, x_dot, theta, theta_dot]`.
    pub fn set_physical_state(&mut self, state: &[f64]) {
        self.phys = [0.0; 4];
        self.phys[..state.len()].copy_from_slice(state);
    }

    pub fn physical_state(&self) -> &[f64] {
        match self.kind {
            EnvKind::Pendulum => &self.phys[..2],
            EnvKind::CartPole => &self.phys,
        }
    }

    fn set_observation(&mut self, obs: &[f64]) {
        self.phys = match self.kind {
            EnvKind::Pendulum => [obs[1].atan2(obs[0]), obs[2], 0.0, 0.0],
            EnvKind::CartPole => [obs[0], obs[1], obs[3].atan2(obs[2]), obs[4]],
        };
    }

    /// Jumps to `obs`, applies the (clamped) action without counting a step,
    /// and returns the resulting observation.
    pub fn transition(&mut self, obs: &[f64], action: &[f64]) -> Vec<f64> {
        self.set_observation(obs);
        let b = self.kind.action_bound();
        self.advance(action[0].clamp(-b, b));
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        match self.kind {
            EnvKind::Pendulum => vec![self.phys[0].cos(), self.phys[0].sin(), self.phys[1]],
            EnvKind::CartPole => vec![self.phys[0], self.phys[1], self.phys[2].cos(), self.phys[2].sin(), self.phys[3]],
        }
    }

    pub fn state(&self) -> EnvState {
        EnvState { observation: self.observation(), step_index: self.step_index, setting: self.setting.clone() }
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// How many actions were out of bounds and got clamped.
    pub fn clamped_actions(&self) -> u64 {
        self.clamped_actions
    }

    fn advance(&mut self, u: f64) {
        match self.kind {
            EnvKind::Pendulum => {
                let (m, l) = (self.param("m"), self.param("l"));
                let [theta, theta_dot, ..] = self.phys;
                let acc = 3.0 * PENDULUM_G / (2.0 * l) * theta.sin() + 3.0 / (m * l * l) * u;
                let new_dot = (theta_dot + acc * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                self.phys[0] = theta + new_dot * PENDULUM_DT;
                self.phys[1] = new_dot;
            }
            EnvKind::CartPole => {
                let (force_scale, l) = (self.param("f"), self.param("l"));
                let force = force_scale * u;
                let [x, x_dot, theta, theta_dot] = self.phys;
                let (s, c) = theta.sin_cos();
                let total = CART_MASS + POLE_MASS;
                let mp_l = POLE_MASS * l;
                let x_acc = (-2.0 * mp_l * theta_dot * theta_dot * s + 3.0 * POLE_MASS * CART_G * s * c + 4.0 * force
                    - 4.0 * CART_FRICTION * x_dot)
                    / (4.0 * total - 3.0 * POLE_MASS * c * c);
                let theta_acc = (-3.0 * mp_l * theta_dot * theta_dot * s * c
                    + 6.0 * total * CART_G * s
                    + 6.0 * (force - CART_FRICTION * x_dot) * c)
                    / (4.0 * l * total - 3.0 * mp_l * c * c);
                let new_x_dot = x_dot + x_acc * CART_DT;
                let new_theta_dot = theta_dot + theta_acc * CART_DT;
                self.phys = [x + new_x_dot * CART_DT, new_x_dot, theta + new_theta_dot * CART_DT, new_theta_dot];
            }
        }
    }

    /// Advances one step. Out-of-bound actions are clamped and counted.
    pub fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64)> {
        if action.len() != self.kind.act_dim() {
            return Err(Error::Dimension(format!("action of width {} for {}", action.len(), self.kind)));
        }
        if !action[0].is_finite() {
            return Err(Error::NonFinite("action".into()));
        }
        let bound = self.kind.action_bound();
        let u = action[0].clamp(-bound, bound);
        if u != action[0] {
            self.clamped_actions += 1;
        }
        let obs = self.observation();
        self.advance(u);
        self.step_index += 1;
        let next = self.observation();
        let reward = self.kind.reward(&obs, &[u], &next);
        Ok((next, reward))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// One episode's transitions under a single confounder setting.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    pub setting: ConfounderSetting,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn setting_id(&self) -> u64 {
        self.setting.setting_id
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Anything that can choose an action from the current observation and the
/// episode so far.
pub trait ActionSource {
    fn act(&mut self, obs: &[f64], history: &[Transition]) -> Result<Vec<f64>>;
}

impl<F> ActionSource for F
where
    F: FnMut(&[f64], &[Transition]) -> Result<Vec<f64>>,
{
    fn act(&mut self, obs: &[f64], history: &[Transition]) -> Result<Vec<f64>> {
        self(obs, history)
    }
}

/// Runs one episode of exactly `horizon` steps.
pub fn rollout<R: Rng + ?Sized>(
    kind: EnvKind,
    policy: &mut dyn ActionSource,
    setting: &ConfounderSetting,
    horizon: usize,
    episode_id: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    if horizon == 0 || horizon > TASK_HORIZON {
        return Err(Error::Contract(format!("horizon {horizon} outside 1..={TASK_HORIZON}")));
    }
    let mut env = Env::new(kind, setting.clone());
    let mut obs = env.reset(rng);
    let mut transitions = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let action = policy.act(&obs, &transitions)?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("episode {episode_id} aborted: policy produced {action:?} at step {step}")));
        }
        let (next, reward) = env.step(&action)?;
        transitions.push(Transition { state: obs, action, reward, next_state: next.clone() });
        obs = next;
    }
    Ok(Trajectory { episode_id, setting: setting.clone(), transitions })
}

/// Uniform random actions within the environment's bounds.
pub fn random_policy<R: Rng>(kind: EnvKind, mut rng: R) -> impl FnMut(&[f64], &[Transition]) -> Result<Vec<f64>> {
    let b = kind.action_bound();
    move |_, _| Ok((0..kind.act_dim()).map(|_| rng.random_range(-b..=b)).collect())
}

/// Writes trajectories as CSV with columns
/// `episode_id, setting_id, step, s*, a*, reward, ns*`.
pub fn write_trajectories_csv<W: Write>(w: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let Some(first) = trajectories.iter().find(|t| !t.is_empty()) else {
        out.flush()?;
        return Ok(());
    };
    let ds = first.transitions[0].state.len();
    let da = first.transitions[0].action.len();
    let mut header = vec!["episode_id".to_string(), "setting_id".into(), "step".into()];
    header.extend((0..ds).map(|i| format!("s{i}")));
    header.extend((0..da).map(|i| format!("a{i}")));
    header.push("reward".into());
    header.extend((0..ds).map(|i| format!("ns{i}")));
    out.write_record(&header)?;
    for traj in trajectories {
        for (step, t) in traj.transitions.iter().enumerate() {
            let mut rec = vec![traj.episode_id.to_string(), traj.setting_id().to_string(), step.to_string()];
            rec.extend(t.state.iter().map(f64::to_string));
            rec.extend(t.action.iter().map(f64::to_string));
            rec.push(t.reward.to_string());
            rec.extend(t.next_state.iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads what [`write_trajectories_csv`] wrote. Confounder values are not
/// stored, so settings come back as bare ids.
pub fn read_trajectories_csv<R: Read>(r: R) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let count = |p: &str| header.iter().filter(|h| h.starts_with(p) && h[p.len()..].parse::<usize>().is_ok()).count();
    let (ds, da) = (count("s"), count("a"));
    if ds == 0 || da == 0 || header.len() != 3 + 2 * ds + da + 1 {
        return Err(Error::Format("unexpected trajectory CSV header".into()));
    }
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("bad field {i}")))
        };
        let episode_id = num(0)? as u64;
        let setting_id: u64 = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format("bad setting_id".into()))?;
        let state = (0..ds).map(|i| num(3 + i)).collect::<Result<Vec<_>>>()?;
        let action = (0..da).map(|i| num(3 + ds + i)).collect::<Result<Vec<_>>>()?;
        let reward = num(3 + ds + da)?;
        let next_state = (0..ds).map(|i| num(4 + ds + da + i)).collect::<Result<Vec<_>>>()?;
        let t = Transition { state, action, reward, next_state };
        match trajectories.last_mut() {
            Some(last) if last.episode_id == episode_id => last.transitions.push(t),
            _ => trajectories.push(Trajectory {
                episode_id,
                setting: ConfounderSetting { values: vec![], setting_id, split: Split::Train },
                transitions: vec![t],
            }),
        }
    }
    Ok(trajectories)
}
