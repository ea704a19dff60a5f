//! Cross-entropy-method model-predictive control.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ad::Tensor;
use crate::context::EncoderParams;
use crate::envs::{ActionSource, ConfounderSetting, Env, EnvKind, Transition};
use crate::error::{dim_err, Error, Result};
use crate::replay::Segment;
use crate::rng::StreamRng;
use crate::worldmodel::{PredictionParams, SELECT_WINDOW};

#[derive(Clone, Debug, PartialEq)]
pub struct CemConfig {
    pub candidates: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub elite_fraction: f64,
    /// Initial standard deviation per action dimension.
    pub init_std: Vec<f64>,
    pub std_floor: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// Sample imagined transitions from the model's Gaussian instead of
    /// following its mean.
    pub stochastic: bool,
}

impl CemConfig {
    /// 200 candidates, horizon 30, 5 iterations, 10% elites, initial std half
    /// the action range.
    pub fn for_env(kind: EnvKind) -> Self {
        let b = kind.action_bound();
        let da = kind.act_dim();
        Self {
            candidates: 200,
            horizon: 30,
            iterations: 5,
            elite_fraction: 0.1,
            init_std: vec![b; da],
            std_floor: 0.05,
            action_low: vec![-b; da],
            action_high: vec![b; da],
            stochastic: false,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn num_elites(&self) -> usize {
        (self.candidates as f64 * self.elite_fraction).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("CEM: {m}")));
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 0.5) {
            return err("elite fraction must lie in (0, 0.5]");
        }
        if self.num_elites() < 2 {
            return err("candidates x elite fraction must be at least 2");
        }
        if self.horizon == 0 {
            return err("horizon must be positive");
        }
        let da = self.action_dim();
        if da == 0 || self.action_high.len() != da || self.init_std.len() != da {
            return err("action bounds and init std must share one width");
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return err("action bounds must satisfy low < high");
        }
        if self.init_std.iter().any(|s| !(*s >= 0.0)) || !(self.std_floor >= 0.0) {
            return err("standard deviations must be non-negative");
        }
        Ok(())
    }
}

/// The refit sampling distribution after the last CEM iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// `horizon` rows of `action_dim` values.
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    /// Best candidate return of the final iteration; `-inf` with zero iterations.
    pub best_return: f64,
    /// Mean elite return per iteration.
    pub elite_returns: Vec<f64>,
}

impl Plan {
    pub fn first_action(&self) -> &[f64] {
        &self.mean[0]
    }
}

/// Batched one-step dynamics used for imagined rollouts.
pub trait BatchDynamics {
    /// `states` is `n x ds`, `actions` `n x da`; returns `n x ds`.
    fn predict_next(&mut self, states: &Tensor, actions: &Tensor) -> Result<Tensor>;
}

/// The learned world model with a fixed context and head.
pub struct LearnedDynamics<'a> {
    pub model: &'a PredictionParams,
    pub context: Vec<f64>,
    pub head: usize,
    /// Present when imagined rollouts sample from the head's Gaussian.
    pub rng: Option<StreamRng>,
}

impl BatchDynamics for LearnedDynamics<'_> {
    fn predict_next(&mut self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let rng = self.rng.as_mut().map(|r| r as &mut dyn rand::RngCore);
        self.model.predict_next_batch(states, actions, &self.context, self.head, rng)
    }
}

/// The true simulator, for checking the planner in isolation from learning.
pub struct OracleDynamics {
    env: Env,
}

impl OracleDynamics {
    pub fn new(kind: EnvKind, setting: ConfounderSetting) -> Self {
        Self { env: Env::new(kind, setting) }
    }
}

impl BatchDynamics for OracleDynamics {
    fn predict_next(&mut self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let (n, ds) = states.dims();
        let mut out = Vec::with_capacity(n * ds);
        for r in 0..n {
            out.extend(self.env.transition(states.row_slice(r), actions.row_slice(r)));
        }
        Tensor::matrix(n, ds, out)
    }
}

/// Summed reward of every candidate; candidates that hit a non-finite value
/// score `-inf`.
fn evaluate(
    dynamics: &mut dyn BatchDynamics,
    reward: &dyn Fn(&[f64], &[f64], &[f64]) -> f64,
    state: &[f64],
    candidates: &[f64],
    n: usize,
    cfg: &CemConfig,
) -> Result<Vec<f64>> {
    let (ds, da, h) = (state.len(), cfg.action_dim(), cfg.horizon);
    let mut states = Tensor::matrix(n, ds, state.repeat(n))?;
    let mut returns = vec![0.0f64; n];
    let mut actions = vec![0.0; n * da];
    for t in 0..h {
        for c in 0..n {
            actions[c * da..(c + 1) * da].copy_from_slice(&candidates[(c * h + t) * da..(c * h + t + 1) * da]);
        }
        let a = Tensor::matrix(n, da, actions.clone())?;
        let mut next = dynamics.predict_next(&states, &a)?;
        if next.dims() != (n, ds) {
            return dim_err(format!("dynamics returned {:?} for {n} states of width {ds}", next.dims()));
        }
        for c in 0..n {
            let row = next.row_slice(c);
            if returns[c].is_finite() && row.iter().all(|v| v.is_finite()) {
                let r = reward(states.row_slice(c), a.row_slice(c), row);
                returns[c] = if r.is_finite() { returns[c] + r } else { f64::NEG_INFINITY };
            } else {
                returns[c] = f64::NEG_INFINITY;
            }
        }
        // Keep failed rows finite so they cannot poison batched inference.
        for c in 0..n {
            if !returns[c].is_finite() {
                next.data_mut()[c * ds..(c + 1) * ds].fill(0.0);
            }
        }
        states = next;
    }
    Ok(returns)
}

/// Runs CEM from `state` and returns the final sampling distribution.
pub fn plan<R: Rng + ?Sized>(
    dynamics: &mut dyn BatchDynamics,
    reward: &dyn Fn(&[f64], &[f64], &[f64]) -> f64,
    state: &[f64],
    cfg: &CemConfig,
    rng: &mut R,
) -> Result<Plan> {
    cfg.validate()?;
    let (da, h, n) = (cfg.action_dim(), cfg.horizon, cfg.candidates);
    let mut mean = vec![0.0; h * da];
    let mut std: Vec<f64> = (0..h * da).map(|i| cfg.init_std[i % da]).collect();
    let n_elite = cfg.num_elites();
    let mut elite_returns = Vec::with_capacity(cfg.iterations);
    let mut best_return = f64::NEG_INFINITY;
    let mut candidates = vec![0.0; n * h * da];
    for _ in 0..cfg.iterations {
        for (i, c) in candidates.iter_mut().enumerate() {
            let j = i % (h * da);
            let z: f64 = StandardNormal.sample(rng);
            *c = (mean[j] + std[j] * z).clamp(cfg.action_low[j % da], cfg.action_high[j % da]);
        }
        let returns = evaluate(dynamics, reward, state, &candidates, n, cfg)?;
        let mut order: Vec<usize> = (0..n).filter(|&c| returns[c].is_finite()).collect();
        if order.is_empty() {
            return Err(Error::NonFinite("every CEM candidate diverged".into()));
        }
        order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]).then(a.cmp(&b)));
        let elites = &order[..n_elite.min(order.len())];
        best_return = returns[order[0]];
        elite_returns.push(elites.iter().map(|&e| returns[e]).sum::<f64>() / elites.len() as f64);
        let k = elites.len() as f64;
        for j in 0..h * da {
            let m = elites.iter().map(|&e| candidates[e * h * da + j]).sum::<f64>() / k;
            let v = elites.iter().map(|&e| (candidates[e * h * da + j] - m).powi(2)).sum::<f64>() / k;
            mean[j] = m;
            std[j] = v.sqrt().max(cfg.std_floor);
        }
    }
    let rows = |v: &[f64]| v.chunks(da).map(<[f64]>::to_vec).collect();
    Ok(Plan { mean: rows(&mean), std: rows(&std), best_return, elite_returns })
}

/// Re-plans at every step against the true simulator.
pub struct OracleController {
    pub kind: EnvKind,
    pub cfg: CemConfig,
    dynamics: OracleDynamics,
    rng: StreamRng,
}

impl OracleController {
    pub fn new(kind: EnvKind, setting: ConfounderSetting, cfg: CemConfig, rng: StreamRng) -> Self {
        Self { kind, cfg, dynamics: OracleDynamics::new(kind, setting), rng }
    }
}

impl ActionSource for OracleController {
    fn act(&mut self, obs: &[f64], _history: &[Transition]) -> Result<Vec<f64>> {
        let kind = self.kind;
        let reward = move |s: &[f64], a: &[f64], n: &[f64]| kind.reward(s, a, n);
        let p = plan(&mut self.dynamics, &reward, obs, &self.cfg, &mut self.rng)?;
        Ok(p.first_action().to_vec())
    }
}

/// MPC over the learned world model.
///
/// Each step encodes the live history into a context, picks a head (by
/// recent error once enough history exists, otherwise at random), plans, and
/// returns the first mean action.
pub struct ModelController<'a> {
    pub kind: EnvKind,
    pub model: &'a PredictionParams,
    pub encoder: &'a EncoderParams,
    pub cfg: CemConfig,
    rng: StreamRng,
    /// How often each head was chosen.
    pub head_counts: Vec<u64>,
}

impl<'a> ModelController<'a> {
    pub fn new(kind: EnvKind, model: &'a PredictionParams, encoder: &'a EncoderParams, cfg: CemConfig, rng: StreamRng) -> Self {
        let heads = model.num_heads();
        Self { kind, model, encoder, cfg, rng, head_counts: vec![0; heads] }
    }

    pub fn context(&self, history: &[Transition]) -> Result<Vec<f64>> {
        let ec = &self.encoder.cfg;
        let seg = Segment::from_history(history, ec.h_past, ec.state_dim, ec.action_dim);
        Ok(self.encoder.encode_context(&seg)?.concat())
    }
}

impl ActionSource for ModelController<'_> {
    fn act(&mut self, obs: &[f64], history: &[Transition]) -> Result<Vec<f64>> {
        let context = self.context(history)?;
        let head = if history.len() >= SELECT_WINDOW {
            self.model.select_head(&context, history, &mut self.rng)?
        } else {
            self.rng.random_range(0..self.model.num_heads())
        };
        self.head_counts[head] += 1;
        let sample_rng = self.cfg.stochastic.then(|| {
            let mut r = self.rng.clone();
            r.set_stream(r.get_stream().wrapping_add(1));
            r
        });
        let mut dynamics = LearnedDynamics { model: self.model, context, head, rng: sample_rng };
        let kind = self.kind;
        let reward = move |s: &[f64], a: &[f64], n: &[f64]| kind.reward(s, a, n);
        let p = plan(&mut dynamics, &reward, obs, &self.cfg, &mut self.rng)?;
        Ok(p.first_action().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// `s' = s + a`, one-dimensional.
    struct Integrator;

    impl BatchDynamics for Integrator {
        fn predict_next(&mut self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
            let data = states.data().iter().zip(actions.data()).map(|(s, a)| s + a).collect();
            Tensor::matrix(states.rows(), 1, data)
        }
    }

    fn cfg1(horizon: usize) -> CemConfig {
        CemConfig { horizon, init_std: vec![1.0], action_low: vec![-1.0], action_high: vec![1.0], ..CemConfig::for_env(EnvKind::CartPole) }
    }

    #[test]
    fn quadratic_optimum() {
        let reward = |_: &[f64], a: &[f64], _: &[f64]| -(a[0] - 0.3).powi(2);
        let mut rng = StreamRng::seed_from_u64(0);
        let p = plan(&mut Integrator, &reward, &[0.0], &cfg1(1), &mut rng).unwrap();
        assert!((p.first_action()[0] - 0.3).abs() < 0.05, "{:?}", p.mean);
    }

    #[test]
    fn zero_iterations_keep_the_initial_mean() {
        let reward = |_: &[f64], a: &[f64], _: &[f64]| -a[0].abs();
        let cfg = CemConfig { iterations: 0, ..cfg1(4) };
        let p = plan(&mut Integrator, &reward, &[0.0], &cfg, &mut StreamRng::seed_from_u64(1)).unwrap();
        assert!(p.mean.iter().all(|m| m == &[0.0]));
        assert_eq!(p.best_return, f64::NEG_INFINITY);
    }

    #[test]
    fn identical_candidates_collapse_std_to_the_floor() {
        let reward = |_: &[f64], a: &[f64], _: &[f64]| a[0];
        let cfg = CemConfig { init_std: vec![0.0], iterations: 1, ..cfg1(3) };
        let p = plan(&mut Integrator, &reward, &[0.0], &cfg, &mut StreamRng::seed_from_u64(2)).unwrap();
        assert!(p.std.iter().all(|s| s == &[0.05]));
        assert!(p.mean.iter().all(|m| m == &[0.0]));
    }

    #[test]
    fn plans_respect_bounds_and_are_deterministic() {
        let reward = |s: &[f64], _: &[f64], _: &[f64]| s[0];
        let a = plan(&mut Integrator, &reward, &[0.0], &cfg1(5), &mut StreamRng::seed_from_u64(3)).unwrap();
        let b = plan(&mut Integrator, &reward, &[0.0], &cfg1(5), &mut StreamRng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.mean.iter().all(|m| (-1.0..=1.0).contains(&m[0])));
        assert!(a.first_action()[0] > 0.5);
    }

    #[test]
    fn diverging_candidates_are_excluded() {
        struct Blowup;
        impl BatchDynamics for Blowup {
            fn predict_next(&mut self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
                let data = states.data().iter().zip(actions.data()).map(|(s, a)| if *a > 0.5 { f64::NAN } else { s + a }).collect();
                Tensor::matrix(states.rows(), 1, data)
            }
        }
        let reward = |_: &[f64], a: &[f64], _: &[f64]| a[0];
        let p = plan(&mut Blowup, &reward, &[0.0], &cfg1(1), &mut StreamRng::seed_from_u64(4)).unwrap();
        assert!(p.best_return.is_finite() && p.best_return <= 0.5);
    }

    #[test]
    fn elite_returns_rarely_decrease() {
        let reward = |s: &[f64], a: &[f64], _: &[f64]| -(s[0] - 2.0).powi(2) - 0.1 * a[0] * a[0];
        let (mut ok, mut total) = (0, 0);
        for seed in 0..20 {
            let p = plan(&mut Integrator, &reward, &[0.0], &cfg1(10), &mut StreamRng::seed_from_u64(seed)).unwrap();
            for w in p.elite_returns.windows(2) {
                total += 1;
                ok += usize::from(w[1] >= w[0]);
            }
        }
        assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total}");
    }

    #[test]
    fn config_validation() {
        assert!(CemConfig::for_env(EnvKind::Pendulum).validate().is_ok());
        assert!(CemConfig { elite_fraction: 0.6, ..cfg1(1) }.validate().is_err());
        assert!(CemConfig { candidates: 10, ..cfg1(1) }.validate().is_err());
        assert!(CemConfig { horizon: 0, ..cfg1(1) }.validate().is_err());
    }
}
