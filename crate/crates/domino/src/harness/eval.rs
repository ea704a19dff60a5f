use std::path::Path;

use serde::Serialize;

use super::{files, load_checkpoint, mean_std, model_based_checkpoint, write_csv, write_json, EvalAgent, ExperimentConfig};
use crate::context::EncoderParams;
use crate::envs::{random_policy, rollout, ActionSource, ConfounderSetting, EnvKind, Registry, Split, Transition};
use crate::planner::ModelController;
use crate::policy::PolicyParams;
use crate::replay::Segment;
use crate::rng::Streams;
use crate::worldmodel::PredictionParams;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub episode: u64,
    pub setting_id: u64,
    pub episode_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub env: String,
    pub split: String,
    pub agent: String,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    #[serde(skip)]
    pub rows: Vec<EpisodeResult>,
}

/// Runs `episodes` evaluation episodes on freshly sampled `split` settings.
///
/// Settings and initial states depend only on `(split, episode)`, so every
/// agent evaluated from the same `streams` faces the same episodes. `make`
/// builds the agent for one episode.
pub fn run_episodes<'a>(
    kind: EnvKind,
    registry: &Registry,
    split: Split,
    episodes: usize,
    length: usize,
    streams: &Streams,
    make: &mut dyn FnMut(u64, &ConfounderSetting) -> Result<Box<dyn ActionSource + 'a>>,
) -> Result<Vec<EpisodeResult>> {
    let settings = streams.child("setting", split as u64);
    let envs = streams.child("env", split as u64);
    (0..episodes as u64)
        .map(|ep| {
            let setting = registry.sample(split, &mut settings.stream("episode", ep));
            let mut agent = make(ep, &setting)?;
            let traj = rollout(kind, agent.as_mut(), &setting, length, ep, &mut envs.stream("episode", ep))?;
            Ok(EpisodeResult { episode: ep, setting_id: setting.setting_id, episode_return: traj.total_reward() })
        })
        .collect()
}

pub(crate) fn summarize(cfg: &ExperimentConfig, split: Split, agent: &str, rows: Vec<EpisodeResult>) -> EvalSummary {
    let returns: Vec<f64> = rows.iter().map(|r| r.episode_return).collect();
    let (mean_return, std_return) = mean_std(&returns);
    EvalSummary {
        env: cfg.env.to_string(),
        split: split.to_string(),
        agent: agent.to_string(),
        episodes: rows.len(),
        mean_return,
        std_return,
        rows,
    }
}

/// Context-conditioned policy acting deterministically.
pub(crate) fn policy_agent<'a>(policy: &'a PolicyParams, encoder: &'a EncoderParams) -> impl FnMut(&[f64], &[Transition]) -> Result<Vec<f64>> + 'a {
    move |obs, history| {
        let ec = &encoder.cfg;
        let ctx = encoder.encode_context(&Segment::from_history(history, ec.h_past, ec.state_dim, ec.action_dim))?.concat();
        let mut unused = <crate::rng::StreamRng as rand::SeedableRng>::seed_from_u64(0);
        Ok(policy.act(obs, &ctx, true, &mut unused)?.action)
    }
}

/// Evaluates the agent found in `out` (or a random policy) on `cfg.split`
/// and writes per-episode rows plus a summary.
pub fn evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    if cfg.eval_episodes == 0 {
        return Err(Error::Config("eval_episodes = 0 leaves nothing to evaluate".into()));
    }
    let registry = Registry::standard(cfg.env);
    let streams = Streams::new(cfg.seed).child("evaluate", 0);
    let mf_path = out.join(files::MODEL_FREE_CKPT);
    let agent = match cfg.eval_agent {
        EvalAgent::Auto if mf_path.exists() => EvalAgent::Policy,
        EvalAgent::Auto => EvalAgent::Planner,
        a => a,
    };
    let (name, rows) = match agent {
        EvalAgent::Random => {
            let rows = run_episodes(cfg.env, &registry, cfg.split, cfg.eval_episodes, cfg.episode_length, &streams, &mut |ep, _| {
                Ok(Box::new(random_policy(cfg.env, streams.stream("random", ep))))
            })?;
            ("random", rows)
        }
        EvalAgent::Policy => {
            let records = load_checkpoint(&mf_path, "train-mf")?;
            let policy = PolicyParams::from_records(&records)?;
            let encoder = EncoderParams::from_records(&records)?;
            check_env(cfg.env, encoder.cfg.state_dim)?;
            let rows = run_episodes(cfg.env, &registry, cfg.split, cfg.eval_episodes, cfg.episode_length, &streams, &mut |_, _| {
                Ok(Box::new(policy_agent(&policy, &encoder)))
            })?;
            ("policy", rows)
        }
        EvalAgent::Planner | EvalAgent::Auto => {
            let records = load_checkpoint(&model_based_checkpoint(cfg, out), "train-mb")?;
            let encoder = EncoderParams::from_records(&records)?;
            let model = PredictionParams::from_records(&records)?;
            check_env(cfg.env, encoder.cfg.state_dim)?;
            let cem = cfg.cem_config();
            let rows = run_episodes(cfg.env, &registry, cfg.split, cfg.eval_episodes, cfg.episode_length, &streams, &mut |ep, _| {
                Ok(Box::new(ModelController::new(cfg.env, &model, &encoder, cem.clone(), streams.stream("planner", ep))))
            })?;
            ("planner", rows)
        }
    };
    let summary = summarize(cfg, cfg.split, name, rows);
    std::fs::create_dir_all(out)?;
    write_csv(&out.join(files::eval_episodes(cfg.split)), &summary.rows)?;
    write_json(&out.join(files::eval_summary(cfg.split)), &summary)?;
    Ok(summary)
}

pub(crate) fn check_env(env: EnvKind, state_dim: usize) -> Result<()> {
    if env.obs_dim() != state_dim {
        return Err(Error::Config(format!("checkpoint was trained on {state_dim}-dimensional states, {env} has {}", env.obs_dim())));
    }
    Ok(())
}
