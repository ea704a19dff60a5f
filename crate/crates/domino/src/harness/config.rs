//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::context::{EncoderConfig, NceConfig};
use crate::envs::{EnvKind, Split};
use crate::mibench::MiConfig;
use crate::planner::CemConfig;
use crate::policy::{PolicyConfig, PpoConfig};
use crate::worldmodel::PredictionConfig;
use crate::{Error, Result};

/// Which context encoder variant to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// `N` disentangled heads.
    Domino,
    /// One entangled head of the same total width.
    Mino,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domino" => Ok(Self::Domino),
            "mino" => Ok(Self::Mino),
            other => Err(Error::Config(format!("unknown ablation {other:?} (expected domino or mino)"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Domino => "domino",
            Self::Mino => "mino",
        })
    }
}

/// What `evaluate` drives the environment with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalAgent {
    /// Policy checkpoint if one exists, otherwise the planner.
    Auto,
    Random,
    Planner,
    Policy,
}

impl FromStr for EvalAgent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "random" => Ok(Self::Random),
            "planner" => Ok(Self::Planner),
            "policy" => Ok(Self::Policy),
            other => Err(Error::Config(format!("unknown eval agent {other:?}"))),
        }
    }
}

impl std::fmt::Display for EvalAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Random => "random",
            Self::Planner => "planner",
            Self::Policy => "policy",
        })
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("cannot parse {value:?} for key {key:?}")))
}

macro_rules! config {
    ($($(#[$doc:meta])* $field:ident : $ty:ty = $default:expr,)*) => {
        /// Every knob of every pipeline. Defaults reproduce the reference run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[$doc])* pub $field: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl ExperimentConfig {
            /// All recognised keys, in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field),)*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => self.$field = parse_value(key, value)?,)*
                    other => return Err(Error::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// Renders the config in the same format `parse` reads.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($field), self.$field);)*
                s
            }
        }
    };
}

config! {
    env: EnvKind = EnvKind::Pendulum,
    seed: u64 = 0,
    /// Split used by `eval` and `export-embeddings`.
    split: Split = Split::Test,
    ablation: Ablation = Ablation::Domino,

    n_heads: usize = 2,
    ctx_dim: usize = 10,
    h_past: usize = 10,
    h_future: usize = 5,
    trunk_width: usize = 128,
    trunk_layers: usize = 3,
    traj_width: usize = 64,
    tau_traj: f64 = 0.004,
    tau_ctx: f64 = 0.1,

    batch_size: usize = 128,
    negatives: usize = 15,
    buffer_capacity: usize = 200,

    wm_hidden: usize = 200,
    wm_layers: usize = 4,
    wm_heads: usize = 3,
    lr_model: f64 = 1e-4,

    iterations: usize = 10,
    trajectories_per_iteration: usize = 10,
    episode_length: usize = 200,
    epochs: usize = 50,
    /// Optimizer steps per epoch; 0 derives it from the buffer size.
    steps_per_epoch: usize = 0,
    /// Random-policy trajectories per split for held-out prediction error.
    heldout_trajectories: usize = 4,

    cem_candidates: usize = 200,
    cem_horizon: usize = 30,
    cem_iterations: usize = 5,
    cem_elite_fraction: f64 = 0.1,
    cem_std_floor: f64 = 0.05,
    cem_stochastic: bool = false,

    timesteps: usize = 500_000,
    rollout_length: usize = 200,
    ppo_epochs: usize = 8,
    ppo_minibatches: usize = 4,
    lr_policy: f64 = 5e-4,
    entropy_coef: f64 = 0.01,
    value_coef: f64 = 0.5,
    kl_target: f64 = 0.01,
    kl_alpha: f64 = 2.0,
    kl_beta_high: f64 = 1.5,
    kl_beta_low: f64 = 1.0 / 1.5,
    kl_coef_init: f64 = 1.0,
    gamma: f64 = 0.99,
    gae_lambda: f64 = 0.95,
    normalize_advantages: bool = true,
    policy_hidden: usize = 64,
    log_std_init: f64 = -0.5,
    eval_interval: usize = 10_000,
    /// Path of the model-based checkpoint; empty means `<out>/model_based.ckpt`.
    encoder_checkpoint: String = String::new(),
    /// Train PPO on a randomly initialised frozen encoder instead of a checkpoint.
    random_encoder: bool = false,

    eval_episodes: usize = 5,
    eval_agent: EvalAgent = EvalAgent::Auto,

    embed_settings: usize = 5,
    embed_trajectories: usize = 20,

    mi_pairs: usize = 2,
    mi_rho: f64 = 0.99,
    mi_k: usize = 16,
    mi_steps: usize = 3000,
    mi_batch: usize = 128,
    mi_lr: f64 = 1e-3,
    mi_seeds: usize = 5,
}

impl ExperimentConfig {
    /// Reads `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Heads and per-head width after the ablation is applied. MINO keeps
    /// the total width and collapses to one head.
    pub fn context_layout(&self) -> (usize, usize) {
        match self.ablation {
            Ablation::Domino => (self.n_heads, self.ctx_dim),
            Ablation::Mino => (1, self.n_heads * self.ctx_dim),
        }
    }

    pub fn context_width(&self) -> usize {
        let (n, m) = self.context_layout();
        n * m
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let (n, m) = self.context_layout();
        EncoderConfig {
            h_past: self.h_past,
            trunk_width: self.trunk_width,
            trunk_layers: self.trunk_layers,
            traj_width: self.traj_width,
            ..EncoderConfig::new(self.env.obs_dim(), self.env.act_dim(), n, m)
        }
    }

    pub fn nce_config(&self) -> NceConfig {
        NceConfig { tau_traj: self.tau_traj, tau_ctx: self.tau_ctx }
    }

    pub fn prediction_config(&self) -> PredictionConfig {
        PredictionConfig {
            hidden: self.wm_hidden,
            layers: self.wm_layers,
            heads: self.wm_heads,
            ..PredictionConfig::new(self.env.obs_dim(), self.env.act_dim(), self.context_width())
        }
    }

    pub fn cem_config(&self) -> CemConfig {
        CemConfig {
            candidates: self.cem_candidates,
            horizon: self.cem_horizon,
            iterations: self.cem_iterations,
            elite_fraction: self.cem_elite_fraction,
            std_floor: self.cem_std_floor,
            stochastic: self.cem_stochastic,
            ..CemConfig::for_env(self.env)
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            hidden: self.policy_hidden,
            log_std_init: self.log_std_init,
            ..PolicyConfig::new(self.env.obs_dim(), self.context_width(), self.env.act_dim(), self.env.action_bound())
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            epochs: self.ppo_epochs,
            minibatches: self.ppo_minibatches,
            lr: self.lr_policy,
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
            kl_target: self.kl_target,
            kl_alpha: self.kl_alpha,
            beta_high: self.kl_beta_high,
            beta_low: self.kl_beta_low,
            gamma: self.gamma,
            lambda: self.gae_lambda,
            normalize_advantages: self.normalize_advantages,
        }
    }

    pub fn mi_config(&self) -> MiConfig {
        MiConfig { k: self.mi_k, steps: self.mi_steps, batch: self.mi_batch, lr: self.mi_lr, ..MiConfig::default() }
    }

    /// Rejects inconsistent settings before any rollout happens.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder_config().validate().map_err(as_config)?;
        self.cem_config().validate().map_err(as_config)?;
        self.mi_config().validate().map_err(as_config)?;
        if self.episode_length == 0 || self.episode_length > crate::envs::TASK_HORIZON {
            return bad(format!("episode_length {} outside 1..={}", self.episode_length, crate::envs::TASK_HORIZON));
        }
        if self.h_future == 0 {
            return bad("h_future must be positive".into());
        }
        if self.h_past + self.h_future + 1 > self.episode_length {
            return bad(format!(
                "episode_length {} too short for h_past {} + h_future {}",
                self.episode_length, self.h_past, self.h_future
            ));
        }
        if self.batch_size == 0 || self.negatives == 0 || self.buffer_capacity == 0 {
            return bad("batch_size, negatives and buffer_capacity must be positive".into());
        }
        if self.wm_heads == 0 || self.wm_layers == 0 || self.wm_hidden == 0 {
            return bad("world model dimensions must be positive".into());
        }
        for (name, v) in [("lr_model", self.lr_model), ("lr_policy", self.lr_policy), ("tau_traj", self.tau_traj), ("tau_ctx", self.tau_ctx)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.rollout_length == 0 || self.ppo_epochs == 0 || self.ppo_minibatches == 0 || self.ppo_minibatches > self.rollout_length {
            return bad(format!(
                "rollout_length {} with {} epochs x {} minibatches is unusable",
                self.rollout_length, self.ppo_epochs, self.ppo_minibatches
            ));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]".into());
        }
        if !(self.kl_beta_low < 1.0 && self.kl_beta_high > 1.0 && self.kl_alpha > 1.0 && self.kl_coef_init >= 0.0) {
            return bad("adaptive KL constants need beta_low < 1 < beta_high, alpha > 1, coef >= 0".into());
        }
        if !(-1.0 < self.mi_rho && self.mi_rho < 1.0) || self.mi_pairs == 0 {
            return bad(format!("mi_rho {} / mi_pairs {} invalid", self.mi_rho, self.mi_pairs));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn values_and_comments() {
        let c = ExperimentConfig::parse("env = cartpole  # swing-up\nseed=7\nablation = mino\ncem_stochastic = true\n").unwrap();
        assert_eq!(c.env, EnvKind::CartPole);
        assert_eq!(c.seed, 7);
        assert!(c.cem_stochastic);
        assert_eq!(c.context_layout(), (1, 20));
        assert_eq!(c.encoder_config().context_width(), 20);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let e = ExperimentConfig::parse("seed = 1\nlearning_rate = 3\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("line 2") && m.contains("learning_rate")), "{e}");
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(ExperimentConfig::parse("seed = -1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("env = acrobot"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("no equals sign"), Err(Error::Config(_))));
        let c = ExperimentConfig::parse("h_past = 150\nh_future = 60").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("kl_beta_low", "0.25").unwrap();
        c.set("encoder_checkpoint", "runs/a.ckpt").unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(ExperimentConfig::KEYS.len(), c.to_text().lines().count());
    }
}
