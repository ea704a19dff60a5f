use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::eval::{check_env, policy_agent, run_episodes, summarize};
use super::{files, load_checkpoint, mean_std, model_based_checkpoint, prepare_out, write_json, CsvLog, ExperimentConfig};
use crate::ad::{checkpoint, Tensor};
use crate::context::EncoderParams;
use crate::envs::{Env, Registry, Split, Transition};
use crate::norm::RunningStats;
use crate::policy::{gae, ppo_update, PolicyParams, PpoBatch};
use crate::replay::Segment;
use crate::rng::Streams;
use crate::{Error, Result};

/// One PPO update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRow {
    pub timesteps: usize,
    /// Mean return of training episodes finished during this rollout.
    pub episode_return: f64,
    pub kl: f64,
    pub kl_coef: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub skipped_minibatches: usize,
}

/// One periodic evaluation on both splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub timesteps: usize,
    pub train_return: f64,
    pub train_return_std: f64,
    pub test_return: f64,
    pub test_return_std: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelFreeRun {
    pub env: String,
    pub ablation: String,
    pub seed: u64,
    pub timesteps: usize,
    pub updates: usize,
    pub final_test_return: f64,
    pub final_train_return: f64,
    pub evaluations: Vec<EvalRow>,
}

fn load_encoder(cfg: &ExperimentConfig, out: &Path, streams: &Streams) -> Result<EncoderParams> {
    if cfg.random_encoder {
        return EncoderParams::new(cfg.encoder_config(), &mut streams.stream("init", 0));
    }
    let records = load_checkpoint(&model_based_checkpoint(cfg, out), "train-mb")?;
    let encoder = EncoderParams::from_records(&records)?;
    check_env(cfg.env, encoder.cfg.state_dim)?;
    let (n, m) = cfg.context_layout();
    if (encoder.cfg.n_heads, encoder.cfg.ctx_dim) != (n, m) {
        return Err(Error::Config(format!(
            "encoder checkpoint has {} heads of width {}, config asks for {n} of width {m}",
            encoder.cfg.n_heads, encoder.cfg.ctx_dim
        )));
    }
    Ok(encoder)
}

/// PPO on a frozen pre-trained context encoder.
///
/// Episodes run for `episode_length` steps on freshly sampled training
/// settings; every `rollout_length` steps the policy is updated once. Both
/// splits are evaluated every `eval_interval` steps with deterministic
/// actions.
pub fn train_model_free(cfg: &ExperimentConfig, out: &Path) -> Result<ModelFreeRun> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed).child("model-free", 0);
    let encoder = load_encoder(cfg, out, &streams)?;
    prepare_out(out, cfg)?;
    let registry = Registry::standard(cfg.env);
    let mut policy = PolicyParams::new(cfg.policy_config(), &mut streams.stream("init", 1))?;
    policy.kl_coef = cfg.kl_coef_init;
    let ppo = cfg.ppo_config();
    let ec = encoder.cfg;
    let mut obs_stats = RunningStats::new(cfg.env.obs_dim());
    let mut act_rng = streams.stream("policy", 0);
    let mut update_rng = streams.stream("update", 0);
    let eval_streams = streams.child("eval", 0);
    let mut updates_log = CsvLog::create(&out.join(files::MODEL_FREE_UPDATES))?;
    let mut eval_log = CsvLog::create(&out.join(files::MODEL_FREE_EVAL))?;

    let mut episode = 0u64;
    let new_episode = |episode: u64| {
        let setting = registry.sample(Split::Train, &mut streams.stream("setting", episode));
        let mut env = Env::new(cfg.env, setting);
        let obs = env.reset(&mut streams.stream("env", episode));
        (env, obs)
    };
    let (mut env, mut obs) = new_episode(episode);
    let mut history: Vec<Transition> = Vec::with_capacity(cfg.episode_length);
    let mut episode_return = 0.0;

    let mut run = ModelFreeRun {
        env: cfg.env.to_string(),
        ablation: cfg.ablation.to_string(),
        seed: cfg.seed,
        timesteps: 0,
        updates: 0,
        final_test_return: f64::NAN,
        final_train_return: f64::NAN,
        evaluations: Vec::new(),
    };
    let mut next_eval = cfg.eval_interval;
    let width = policy.cfg.input_width();
    let da = cfg.env.act_dim();

    while run.timesteps < cfg.timesteps {
        let n = cfg.rollout_length.min(cfg.timesteps - run.timesteps);
        let mut inputs = Vec::with_capacity(n * width);
        let mut pre_squash = Vec::with_capacity(n * da);
        let (mut old_log_probs, mut rewards, mut values, mut ends) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut finished = Vec::new();
        for _ in 0..n {
            let ctx = encoder.encode_context(&Segment::from_history(&history, ec.h_past, ec.state_dim, ec.action_dim))?.concat();
            let input = policy.input(&obs, &ctx)?;
            let step = policy.act_on_input(&input, false, &mut act_rng)?;
            values.push(policy.value(&input)?);
            let (next, reward) = env.step(&step.action)?;
            obs_stats.update(&obs)?;
            inputs.extend_from_slice(&input);
            pre_squash.extend_from_slice(&step.pre_squash);
            old_log_probs.push(step.gaussian_log_prob);
            rewards.push(reward);
            episode_return += reward;
            history.push(Transition { state: obs, action: step.action, reward, next_state: next.clone() });
            obs = next;
            run.timesteps += 1;
            let done = env.step_index() >= cfg.episode_length;
            ends.push(done);
            if done {
                finished.push(episode_return);
                episode += 1;
                (env, obs) = new_episode(episode);
                history.clear();
                episode_return = 0.0;
            }
        }

        // Advantages per episode fragment; a fragment cut by the rollout
        // boundary bootstraps from the value of the state it stopped in.
        let mut advantages = Vec::with_capacity(n);
        let mut returns = Vec::with_capacity(n);
        let mut start = 0;
        for t in 0..n {
            if !ends[t] && t + 1 < n {
                continue;
            }
            let bootstrap = if ends[t] {
                0.0
            } else {
                let ctx = encoder.encode_context(&Segment::from_history(&history, ec.h_past, ec.state_dim, ec.action_dim))?.concat();
                policy.value(&policy.input(&obs, &ctx)?)?
            };
            let mut v = values[start..=t].to_vec();
            v.push(bootstrap);
            let (a, r) = gae(&rewards[start..=t], &v, ppo.gamma, ppo.lambda)?;
            advantages.extend(a);
            returns.extend(r);
            start = t + 1;
        }

        let batch = PpoBatch {
            inputs: Tensor::matrix(n, width, inputs)?,
            pre_squash: Tensor::matrix(n, da, pre_squash)?,
            old_log_probs,
            advantages,
            returns,
        };
        let stats = ppo_update(&mut policy, &batch, &ppo, &mut update_rng)?;
        if stats.skipped_minibatches > 0 {
            warn!("{} minibatches skipped at {} steps", stats.skipped_minibatches, run.timesteps);
        }
        run.updates += 1;
        policy.obs_norm = obs_stats.snapshot();
        updates_log.push(&UpdateRow {
            timesteps: run.timesteps,
            episode_return: mean_std(&finished).0,
            kl: stats.kl,
            kl_coef: stats.kl_coef_after,
            entropy: stats.entropy,
            value_loss: stats.value_loss,
            skipped_minibatches: stats.skipped_minibatches,
        })?;

        while run.timesteps >= next_eval {
            let mut row = EvalRow { timesteps: next_eval, train_return: f64::NAN, train_return_std: f64::NAN, test_return: f64::NAN, test_return_std: f64::NAN };
            if cfg.eval_episodes > 0 {
                for split in [Split::Train, Split::Test] {
                    let rows = run_episodes(cfg.env, &registry, split, cfg.eval_episodes, cfg.episode_length, &eval_streams, &mut |_, _| {
                        Ok(Box::new(policy_agent(&policy, &encoder)))
                    })?;
                    let s = summarize(cfg, split, "policy", rows);
                    match split {
                        Split::Train => (row.train_return, row.train_return_std) = (s.mean_return, s.std_return),
                        Split::Test => (row.test_return, row.test_return_std) = (s.mean_return, s.std_return),
                    }
                }
            }
            info!("{} steps: train {:.1}, test {:.1}", row.timesteps, row.train_return, row.test_return);
            eval_log.push(&row)?;
            run.final_train_return = row.train_return;
            run.final_test_return = row.test_return;
            run.evaluations.push(row);
            next_eval += cfg.eval_interval;
        }
    }

    let mut records = policy.to_records();
    records.extend(encoder.to_records());
    checkpoint::save(out.join(files::MODEL_FREE_CKPT), &records)?;
    write_json(&out.join(files::MODEL_FREE_SUMMARY), &run)?;
    Ok(run)
}
