//! Context-conditioned PPO: tanh-squashed Gaussian actor, value baseline,
//! GAE and the adaptive-KL surrogate.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ad::{checkpoint, AdamConfig, Activation, Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::norm::Standardizer;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub context_width: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub action_bound: f64,
    pub log_std_init: f64,
}

impl PolicyConfig {
    pub fn new(obs_dim: usize, context_width: usize, action_dim: usize, action_bound: f64) -> Self {
        Self { obs_dim, context_width, action_dim, hidden: 64, action_bound, log_std_init: -0.5 }
    }

    pub fn input_width(&self) -> usize {
        self.obs_dim + self.context_width
    }
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub cfg: PolicyConfig,
    pub store: ParamStore,
    actor: Mlp,
    log_std: usize,
    value: Mlp,
    pub obs_norm: Standardizer,
    /// Current KL penalty coefficient.
    pub kl_coef: f64,
}

/// One action drawn from the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    /// Squashed and scaled to the action bounds.
    pub action: Vec<f64>,
    /// The Gaussian sample before `tanh`.
    pub pre_squash: Vec<f64>,
    /// Log-density of `action` including the change of variables.
    pub log_prob: f64,
    /// Log-density of `pre_squash` under the Gaussian alone.
    pub gaussian_log_prob: f64,
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn gaussian_log_density(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| -0.5 * ((x - m) * (-ls).exp()).powi(2) - ls - 0.5 * (2.0 * PI).ln())
        .sum()
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(cfg: PolicyConfig, rng: &mut R) -> Result<Self> {
        if cfg.obs_dim == 0 || cfg.action_dim == 0 || cfg.hidden == 0 || !(cfg.action_bound > 0.0) {
            return Err(Error::Config(format!("policy dimensions must be positive: {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let w = cfg.input_width();
        let actor = Mlp::register(&mut store, "pi.", &[w, cfg.hidden, cfg.hidden, cfg.action_dim], Activation::Tanh, Activation::Identity, rng)?;
        let log_std = store.add("pi.log_std", Tensor::full(&[1, cfg.action_dim], cfg.log_std_init.clamp(LOG_STD_MIN, LOG_STD_MAX)));
        let value = Mlp::register(&mut store, "v.", &[w, cfg.hidden, cfg.hidden, 1], Activation::Tanh, Activation::Identity, rng)?;
        Ok(Self { cfg, store, actor, log_std, value, obs_norm: Standardizer::identity(cfg.obs_dim), kl_coef: 1.0 })
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn value_net(&self) -> &Mlp {
        &self.value
    }

    pub fn log_std_index(&self) -> usize {
        self.log_std
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.store.get(self.log_std).data().iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    /// `[standardized obs, context]`.
    pub fn input(&self, obs: &[f64], context: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.cfg.obs_dim || context.len() != self.cfg.context_width {
            return dim_err(format!(
                "policy input ({}, {}) for ({}, {})",
                obs.len(),
                context.len(),
                self.cfg.obs_dim,
                self.cfg.context_width
            ));
        }
        let mut x = self.obs_norm.apply(obs);
        x.extend_from_slice(context);
        Ok(x)
    }

    pub fn mean_action(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::matrix(1, input.len(), input.to_vec())?;
        Ok(self.actor.infer(&self.store, &x)?.into_data())
    }

    pub fn value(&self, input: &[f64]) -> Result<f64> {
        let x = Tensor::matrix(1, input.len(), input.to_vec())?;
        Ok(self.value.infer(&self.store, &x)?.item())
    }

    /// Gaussian log-density of `pre_squash` under the current parameters.
    pub fn gaussian_log_prob(&self, input: &[f64], pre_squash: &[f64]) -> Result<f64> {
        Ok(gaussian_log_density(pre_squash, &self.mean_action(input)?, &self.log_std()))
    }

    /// Samples an action (or takes the mean when `deterministic`).
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], context: &[f64], deterministic: bool, rng: &mut R) -> Result<PolicyStep> {
        let input = self.input(obs, context)?;
        self.act_on_input(&input, deterministic, rng)
    }

    pub fn act_on_input<R: Rng + ?Sized>(&self, input: &[f64], deterministic: bool, rng: &mut R) -> Result<PolicyStep> {
        let mean = self.mean_action(input)?;
        let log_std = self.log_std();
        let pre_squash: Vec<f64> = if deterministic {
            mean.clone()
        } else {
            mean.iter()
                .zip(&log_std)
                .map(|(m, ls)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + ls.exp() * z
                })
                .collect()
        };
        let gaussian_log_prob = gaussian_log_density(&pre_squash, &mean, &log_std);
        let b = self.cfg.action_bound;
        let log_prob = gaussian_log_prob - pre_squash.iter().map(|&u| log_one_minus_tanh_sq(u) + b.ln()).sum::<f64>();
        let action = pre_squash.iter().map(|u| b * u.tanh()).collect();
        let step = PolicyStep { action, pre_squash, log_prob, gaussian_log_prob };
        if !step.log_prob.is_finite() || step.action.iter().any(|a: &f64| !a.is_finite()) {
            return Err(Error::NonFinite("policy output".into()));
        }
        Ok(step)
    }

    /// Mean KL(self || other) between the two Gaussians over a set of inputs.
    pub fn kl_to(&self, other: &PolicyParams, inputs: &Tensor) -> Result<f64> {
        let m0 = self.actor.infer(&self.store, inputs)?;
        let m1 = other.actor.infer(&other.store, inputs)?;
        let (ls0, ls1) = (self.log_std(), other.log_std());
        let da = self.cfg.action_dim;
        let mut total = 0.0;
        for r in 0..inputs.rows() {
            for d in 0..da {
                let (a, b) = (m0.row_slice(r)[d], m1.row_slice(r)[d]);
                total += ls1[d] - ls0[d] + ((2.0 * ls0[d]).exp() + (a - b).powi(2)) / (2.0 * (2.0 * ls1[d]).exp()) - 0.5;
            }
        }
        Ok(total / inputs.rows() as f64)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let c = &self.cfg;
        let meta = Tensor::row(vec![
            c.obs_dim as f64,
            c.context_width as f64,
            c.action_dim as f64,
            c.hidden as f64,
            c.action_bound,
            c.log_std_init,
        ]);
        let mut r = vec![("pol.meta".to_string(), meta), ("pol.kl_coef".to_string(), Tensor::scalar(self.kl_coef))];
        r.extend(self.store.to_records("pol."));
        r.extend(self.obs_norm.to_records("pol.obs."));
        r
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self> {
        let m = checkpoint::find(records, "pol.meta")?.data().to_vec();
        if m.len() != 6 {
            return Err(Error::Format("policy metadata has the wrong length".into()));
        }
        let cfg = PolicyConfig {
            obs_dim: m[0] as usize,
            context_width: m[1] as usize,
            action_dim: m[2] as usize,
            hidden: m[3] as usize,
            action_bound: m[4],
            log_std_init: m[5],
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut p = Self::new(cfg, &mut rng)?;
        p.store.load_records("pol.", records)?;
        p.obs_norm = Standardizer::from_records("pol.obs.", records, cfg.obs_dim)?;
        p.kl_coef = checkpoint::find(records, "pol.kl_coef")?.item();
        Ok(p)
    }
}

/// Generalized advantage estimates and value targets.
///
/// `values` carries one extra entry, the bootstrap value of the state after
/// the last reward.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 {
        return dim_err(format!("{} values for {} rewards (need one bootstrap value)", values.len(), rewards.len()));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoConfig {
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub kl_target: f64,
    pub kl_alpha: f64,
    pub beta_high: f64,
    pub beta_low: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            minibatches: 4,
            lr: 5e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            kl_target: 0.01,
            kl_alpha: 2.0,
            beta_high: 1.5,
            beta_low: 1.0 / 1.5,
            gamma: 0.99,
            lambda: 0.95,
            normalize_advantages: true,
        }
    }
}

/// Rollout data for one update, already in policy-input form.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    /// `n x input_width` rows of `[standardized obs, context]`.
    pub inputs: Tensor,
    /// `n x action_dim` pre-squash actions.
    pub pre_squash: Tensor,
    /// Gaussian log-densities under the behaviour policy.
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// KL(old || new) over the whole batch after the update.
    pub kl: f64,
    pub kl_coef_before: f64,
    pub kl_coef_after: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub surrogate: f64,
    pub skipped_minibatches: usize,
    /// Largest |ratio - 1| before the first gradient step.
    pub initial_ratio_deviation: f64,
}

struct MinibatchLoss {
    loss: Var,
    ratio: Var,
    surrogate: Var,
    entropy: Var,
    value_loss: Var,
}

#[allow(clippy::too_many_arguments)]
fn minibatch_loss(
    tape: &mut Tape,
    params: &PolicyParams,
    old: &PolicyParams,
    bound: &crate::ad::Bound,
    inputs: Tensor,
    u: Tensor,
    old_logp: Tensor,
    adv: Tensor,
    ret: Tensor,
    cfg: &PpoConfig,
) -> Result<MinibatchLoss> {
    let da = params.cfg.action_dim;
    let old_mean = old.actor.infer(&old.store, &inputs)?;
    let old_ls = old.log_std();
    let x = tape.constant(inputs);
    let mean = params.actor.forward(tape, bound, x)?;
    let ls = tape.clamp(bound.var(params.log_std), LOG_STD_MIN, LOG_STD_MAX);
    let neg_ls = tape.neg(ls);
    let inv_std = tape.exp(neg_ls);
    let u = tape.constant(u);
    let diff = tape.sub(u, mean)?;
    let z = tape.mul_row(diff, inv_std)?;
    let zsq = tape.square(z);
    let quad = tape.sum_cols(zsq);
    let quad = tape.scale(quad, -0.5);
    let ls_sum = tape.sum_cols(ls);
    let neg_ls_sum = tape.neg(ls_sum);
    let logp = tape.add_bias(quad, neg_ls_sum)?;
    let logp = tape.add_scalar(logp, -0.5 * da as f64 * (2.0 * PI).ln());
    let old_logp = tape.constant(old_logp);
    let log_ratio = tape.sub(logp, old_logp)?;
    let ratio = tape.exp(log_ratio);
    let adv = tape.constant(adv);
    let weighted = tape.mul(ratio, adv)?;
    let surrogate = tape.mean(weighted);

    let old_mean = tape.constant(old_mean);
    let md = tape.sub(old_mean, mean)?;
    let md2 = tape.square(md);
    let rows = tape.value(md2).rows();
    let old_var = Tensor::matrix(rows, da, (0..rows * da).map(|i| (2.0 * old_ls[i % da]).exp()).collect())?;
    let old_var = tape.constant(old_var);
    let num = tape.add(md2, old_var)?;
    let two_ls = tape.scale(ls, -2.0);
    let inv_var = tape.exp(two_ls);
    let frac = tape.mul_row(num, inv_var)?;
    let frac = tape.scale(frac, 0.5);
    let kl_rows = tape.sum_cols(frac);
    let kl_rows = tape.add_bias(kl_rows, ls_sum)?;
    let kl_rows = tape.add_scalar(kl_rows, -old_ls.iter().sum::<f64>() - 0.5 * da as f64);
    let kl = tape.mean(kl_rows);

    let entropy = tape.add_scalar(ls_sum, da as f64 * 0.5 * (2.0 * PI * std::f64::consts::E).ln());
    let entropy = tape.sum(entropy);

    let v = params.value.forward(tape, bound, x)?;
    let ret = tape.constant(ret);
    let verr = tape.sub(v, ret)?;
    let verr = tape.square(verr);
    let value_loss = tape.mean(verr);

    let neg_surr = tape.neg(surrogate);
    let kl_term = tape.scale(kl, params.kl_coef);
    let ent_term = tape.scale(entropy, -cfg.entropy_coef);
    let v_term = tape.scale(value_loss, cfg.value_coef);
    let mut loss = tape.add(neg_surr, kl_term)?;
    loss = tape.add(loss, ent_term)?;
    loss = tape.add(loss, v_term)?;
    Ok(MinibatchLoss { loss, ratio, surrogate, entropy, value_loss })
}

/// The full-batch PPO loss of `params` against the behaviour policy `old`,
/// as minimised by [`ppo_update`] on each minibatch. Advantages are used
/// as given (no normalization).
pub fn ppo_loss(tape: &mut Tape, params: &PolicyParams, old: &PolicyParams, bound: &crate::ad::Bound, batch: &PpoBatch, cfg: &PpoConfig) -> Result<Var> {
    let n = batch.len();
    let all: Vec<usize> = (0..n).collect();
    let parts = minibatch_loss(
        tape,
        params,
        old,
        bound,
        batch.inputs.clone(),
        batch.pre_squash.clone(),
        column(&batch.old_log_probs, &all)?,
        column(&batch.advantages, &all)?,
        column(&batch.returns, &all)?,
        cfg,
    )?;
    Ok(parts.loss)
}

fn pick_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row_slice(r));
    }
    Tensor::matrix(rows.len(), c, data)
}

fn column(values: &[f64], rows: &[usize]) -> Result<Tensor> {
    Tensor::matrix(rows.len(), 1, rows.iter().map(|&r| values[r]).collect())
}

/// Runs the epochs of minibatch updates, then adapts the KL coefficient.
pub fn ppo_update<R: Rng + ?Sized>(params: &mut PolicyParams, batch: &PpoBatch, cfg: &PpoConfig, rng: &mut R) -> Result<UpdateStats> {
    let n = batch.len();
    if n == 0 || batch.advantages.len() != n || batch.returns.len() != n || batch.old_log_probs.len() != n {
        return dim_err(format!("inconsistent PPO batch of {n} rows"));
    }
    if batch.inputs.cols() != params.cfg.input_width() || batch.pre_squash.cols() != params.cfg.action_dim {
        return dim_err("PPO batch width does not match the policy");
    }
    let mut adv = batch.advantages.clone();
    if cfg.normalize_advantages && n > 1 {
        let mean = adv.iter().sum::<f64>() / n as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for a in &mut adv {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
    let old = params.clone();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut stats = UpdateStats { kl_coef_before: params.kl_coef, ..UpdateStats::default() };

    let all: Vec<usize> = (0..n).collect();
    {
        let mut tape = Tape::new();
        let bound = params.store.bind(&mut tape);
        let l = minibatch_loss(
            &mut tape,
            params,
            &old,
            &bound,
            batch.inputs.clone(),
            batch.pre_squash.clone(),
            column(&batch.old_log_probs, &all)?,
            column(&adv, &all)?,
            column(&batch.returns, &all)?,
            cfg,
        )?;
        stats.initial_ratio_deviation = tape.value(l.ratio).data().iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    }

    let mut order = all.clone();
    let per = n.div_ceil(cfg.minibatches.max(1));
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(per) {
            let mut tape = Tape::new();
            let bound = params.store.bind(&mut tape);
            let l = minibatch_loss(
                &mut tape,
                params,
                &old,
                &bound,
                pick_rows(&batch.inputs, chunk)?,
                pick_rows(&batch.pre_squash, chunk)?,
                column(&batch.old_log_probs, chunk)?,
                column(&adv, chunk)?,
                column(&batch.returns, chunk)?,
                cfg,
            )?;
            if !tape.value(l.ratio).is_finite() || !tape.value(l.loss).is_finite() {
                log::warn!("skipping PPO minibatch with non-finite ratio or loss");
                stats.skipped_minibatches += 1;
                continue;
            }
            stats.surrogate = tape.value(l.surrogate).item();
            stats.entropy = tape.value(l.entropy).item();
            stats.value_loss = tape.value(l.value_loss).item();
            let grads = params.store.collect(&tape.backward(l.loss)?, &bound);
            params.store.adam_step(&grads, &adam)?;
            let ls = params.log_std;
            for v in params.store.get_mut(ls).data_mut() {
                *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
    }
    stats.kl = old.kl_to(params, &batch.inputs)?;
    if stats.kl > cfg.beta_high * cfg.kl_target {
        params.kl_coef *= cfg.kl_alpha;
    } else if stats.kl < cfg.beta_low * cfg.kl_target {
        params.kl_coef /= cfg.kl_alpha;
    }
    stats.kl_coef_after = params.kl_coef;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(rng: &mut ChaCha8Rng) -> PolicyParams {
        PolicyParams::new(PolicyConfig::new(3, 4, 1, 2.0), rng).unwrap()
    }

    #[test]
    fn gae_examples() {
        let (a, t) = gae(&[1.0, 0.0], &[0.0, 0.0, 0.0], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![1.0, 0.0]);
        assert_eq!(t, vec![1.0, 0.0]);
        let r = [0.5, -1.0, 2.0];
        let v = [0.1, 0.2, -0.3, 0.4];
        let (a, _) = gae(&r, &v, 0.9, 0.0).unwrap();
        for i in 0..3 {
            assert!((a[i] - (r[i] + 0.9 * v[i + 1] - v[i])).abs() < 1e-12);
        }
        assert!(gae(&r, &v[..3], 0.9, 0.5).is_err());
    }

    #[test]
    fn gae_lambda_one_is_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 50;
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, _) = gae(&r, &v, 0.99, 1.0).unwrap();
        for t in 0..n {
            let mut g = 0.0;
            for k in t..n {
                g += 0.99f64.powi((k - t) as i32) * r[k];
            }
            g += 0.99f64.powi((n - t) as i32) * v[n];
            assert!((a[t] - (g - v[t])).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_action_is_the_squashed_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(&mut rng);
        let obs = [0.2, -0.4, 1.0];
        let ctx = [0.1, 0.0, -0.3, 0.5];
        let a = p.act(&obs, &ctx, true, &mut rng).unwrap();
        let b = p.act(&obs, &ctx, true, &mut rng).unwrap();
        assert_eq!(a, b);
        let mean = p.mean_action(&p.input(&obs, &ctx).unwrap()).unwrap();
        assert_eq!(a.action[0], 2.0 * mean[0].tanh());
    }

    #[test]
    fn sampled_log_prob_is_below_the_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = params(&mut rng);
        let input = p.input(&[0.0; 3], &[0.0; 4]).unwrap();
        let mode = p.act_on_input(&input, true, &mut rng).unwrap().gaussian_log_prob;
        for _ in 0..100 {
            let s = p.act_on_input(&input, false, &mut rng).unwrap();
            assert!(s.log_prob.is_finite());
            assert!(s.gaussian_log_prob <= mode);
        }
    }

    #[test]
    fn narrow_policy_stays_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = PolicyParams::new(PolicyConfig { action_bound: 1.0, ..PolicyConfig::new(3, 4, 1, 1.0) }, &mut rng).unwrap();
        for i in 0..p.store.len() {
            p.store.get_mut(i).data_mut().fill(0.0);
        }
        let ls = p.log_std_index();
        p.store.get_mut(ls).data_mut()[0] = -5.0;
        let input = p.input(&[0.5; 3], &[0.5; 4]).unwrap();
        for _ in 0..2000 {
            assert!(p.act_on_input(&input, false, &mut rng).unwrap().action[0].abs() < 4e-2);
        }
    }

    fn batch(p: &PolicyParams, rng: &mut ChaCha8Rng, n: usize) -> PpoBatch {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut logp = Vec::new();
        for _ in 0..n {
            let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ctx: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = p.input(&obs, &ctx).unwrap();
            let s = p.act_on_input(&x, false, rng).unwrap();
            inputs.extend(x);
            pre.extend(s.pre_squash);
            logp.push(s.gaussian_log_prob);
        }
        let advantages = (0..n).map(|i| pre[i]).collect();
        PpoBatch {
            inputs: Tensor::matrix(n, 7, inputs).unwrap(),
            pre_squash: Tensor::matrix(n, 1, pre).unwrap(),
            old_log_probs: logp,
            advantages,
            returns: vec![1.0; n],
        }
    }

    #[test]
    fn ratios_start_at_one_and_kl_coefficient_adapts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = params(&mut rng);
        let b = batch(&p, &mut rng, 200);
        let cfg = PpoConfig { lr: 1e-2, ..PpoConfig::default() };
        let stats = ppo_update(&mut p, &b, &cfg, &mut rng).unwrap();
        assert!(stats.initial_ratio_deviation < 1e-9);
        assert_eq!(stats.skipped_minibatches, 0);
        assert!(stats.kl > 1.5 * 0.01, "kl {}", stats.kl);
        assert_eq!(stats.kl_coef_after, 2.0 * stats.kl_coef_before);
        let q = p.clone();
        assert!(p.kl_to(&q, &b.inputs).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tiny_steps_halve_the_kl_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = params(&mut rng);
        let b = batch(&p, &mut rng, 64);
        let cfg = PpoConfig { lr: 1e-9, ..PpoConfig::default() };
        let stats = ppo_update(&mut p, &b, &cfg, &mut rng).unwrap();
        assert_eq!(stats.kl_coef_after, 0.5);
    }

    #[test]
    fn surrogate_with_unchanged_parameters_is_the_mean_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = params(&mut rng);
        let b = batch(&p, &mut rng, 16);
        let all: Vec<usize> = (0..16).collect();
        let mut tape = Tape::new();
        let bound = p.store.bind(&mut tape);
        let l = minibatch_loss(
            &mut tape,
            &p,
            &p,
            &bound,
            b.inputs.clone(),
            b.pre_squash.clone(),
            column(&b.old_log_probs, &all).unwrap(),
            column(&b.advantages, &all).unwrap(),
            column(&b.returns, &all).unwrap(),
            &PpoConfig::default(),
        )
        .unwrap();
        let mean_adv = b.advantages.iter().sum::<f64>() / 16.0;
        assert!((tape.value(l.surrogate).item() - mean_adv).abs() < 1e-12);
    }

    #[test]
    fn zero_advantages_leave_only_entropy_and_kl_in_the_actor_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(&mut rng);
        let mut b = batch(&p, &mut rng, 16);
        b.advantages = vec![0.0; 16];
        let all: Vec<usize> = (0..16).collect();
        let mut tape = Tape::new();
        let bound = p.store.bind(&mut tape);
        let l = minibatch_loss(
            &mut tape,
            &p,
            &p,
            &bound,
            b.inputs.clone(),
            b.pre_squash.clone(),
            column(&b.old_log_probs, &all).unwrap(),
            column(&b.advantages, &all).unwrap(),
            column(&b.returns, &all).unwrap(),
            &PpoConfig::default(),
        )
        .unwrap();
        let grads = p.store.collect(&tape.backward(l.loss).unwrap(), &bound);
        // At theta == theta_old the KL gradient vanishes, so only the entropy
        // bonus moves the actor: the mean network is untouched and log-std
        // gets exactly -entropy_coef.
        for (i, name) in p.store.names().iter().enumerate() {
            if name.starts_with("pi.l") && name != "pi.log_std" {
                assert!(grads[i].data().iter().all(|g| g.abs() < 1e-12), "{name}");
            }
        }
        assert!((grads[p.log_std_index()].data()[0] + 0.01).abs() < 1e-12);
    }

    #[test]
    fn value_regression_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = params(&mut rng);
        let n = 64;
        let x: Vec<f64> = (0..n * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::matrix(n, 7, x).unwrap();
        let y: Vec<f64> = (0..n).map(|r| x.row_slice(r)[0] * 0.5 - x.row_slice(r)[4]).collect();
        let mse = |p: &PolicyParams| {
            let v = p.value_net().infer(&p.store, &x).unwrap();
            v.data().iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64
        };
        let initial = mse(&p);
        let adam = AdamConfig::with_lr(1e-2);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let bound = p.store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let v = p.value_net().forward(&mut tape, &bound, xv).unwrap();
            let t = tape.constant(Tensor::matrix(n, 1, y.clone()).unwrap());
            let e = tape.sub(v, t).unwrap();
            let e = tape.square(e);
            let loss = tape.mean(e);
            let grads = p.store.collect(&tape.backward(loss).unwrap(), &bound);
            p.store.adam_step(&grads, &adam).unwrap();
        }
        assert!(mse(&p) < 1e-3 * initial, "{} vs {initial}", mse(&p));
    }

    #[test]
    fn records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = params(&mut rng);
        p.kl_coef = 4.0;
        let back = PolicyParams::from_records(&p.to_records()).unwrap();
        assert_eq!(back.cfg, p.cfg);
        assert_eq!(back.kl_coef, 4.0);
        assert_eq!(back.store.values(), p.store.values());
    }
}
