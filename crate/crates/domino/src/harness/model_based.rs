use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::eval::{run_episodes, summarize};
use super::{files, mean_std, prepare_out, write_json, CsvLog, ExperimentConfig};
use crate::ad::{checkpoint, AdamConfig, Tape};
use crate::context::{nce_loss, EncoderParams};
use crate::envs::{rollout, Registry, Split, Trajectory};
use crate::norm::RunningStats;
use crate::planner::ModelController;
use crate::replay::{Segment, SettingBuffer};
use crate::rng::{StreamRng, Streams};
use crate::worldmodel::{combined_objective, loss_pre, PredictionParams, SELECT_WINDOW};
use crate::{Error, Result};

/// One line of the model-based metrics CSV. Iteration 0 is the untrained
/// baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub updates: usize,
    pub collect_return: f64,
    pub train_return: f64,
    pub train_return_std: f64,
    pub test_return: f64,
    pub test_return_std: f64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub pre_loss: f64,
    pub nce_objective: f64,
    pub nce_max_sample: f64,
    pub nce_samples: u64,
    pub ceiling_violations: u64,
    pub head_counts: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelBasedRun {
    pub env: String,
    pub ablation: String,
    pub seed: u64,
    pub env_steps: usize,
    pub updates: usize,
    /// Per-sample InfoNCE values above `ln K` across every batch.
    pub ceiling_violations: u64,
    pub nce_samples: u64,
    pub max_nce_sample: f64,
    pub ln_k: f64,
    pub rows: Vec<IterationRow>,
}

/// One-step prediction error on held-out trajectories, in raw state units.
///
/// Every transition after the first `h_past` is predicted from the context
/// of the preceding window, by the head with the lowest error over the
/// preceding [`SELECT_WINDOW`] transitions.
pub fn heldout_mse(encoder: &EncoderParams, model: &PredictionParams, trajectories: &[Trajectory]) -> Result<f64> {
    let ec = &encoder.cfg;
    let start = ec.h_past.max(SELECT_WINDOW);
    let (mut total, mut count) = (0.0, 0usize);
    for traj in trajectories {
        for t in start..traj.len() {
            let history = &traj.transitions[..t];
            let ctx = encoder.encode_context(&Segment::from_history(history, ec.h_past, ec.state_dim, ec.action_dim))?.concat();
            let head = crate::worldmodel::argmin_head(&model.head_errors(&ctx, history)?);
            let tr = &traj.transitions[t];
            let pred = model.predict(&tr.state, &tr.action, &ctx, head)?.next_state(&tr.state);
            total += pred.iter().zip(&tr.next_state).map(|(p, s)| (p - s).powi(2)).sum::<f64>() / ec.state_dim as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(f64::NAN);
    }
    Ok(total / count as f64)
}

fn heldout_set(cfg: &ExperimentConfig, registry: &Registry, streams: &Streams, split: Split) -> Result<Vec<Trajectory>> {
    let s = streams.child("heldout", split as u64);
    (0..cfg.heldout_trajectories as u64)
        .map(|ep| {
            let setting = registry.sample(split, &mut s.stream("setting", ep));
            let mut pol = crate::envs::random_policy(cfg.env, s.stream("action", ep));
            rollout(cfg.env, &mut pol, &setting, cfg.episode_length, ep, &mut s.stream("env", ep))
        })
        .collect()
}

struct Evaluated {
    train: (f64, f64),
    test: (f64, f64),
    train_mse: f64,
    test_mse: f64,
}

fn evaluate_iteration(
    cfg: &ExperimentConfig,
    registry: &Registry,
    streams: &Streams,
    encoder: &EncoderParams,
    model: &PredictionParams,
    heldout: &[Vec<Trajectory>; 2],
) -> Result<Evaluated> {
    let eval_streams = streams.child("eval", 0);
    let mut returns = [(f64::NAN, f64::NAN); 2];
    for (slot, split) in [Split::Train, Split::Test].into_iter().enumerate() {
        if cfg.eval_episodes == 0 {
            continue;
        }
        let cem = cfg.cem_config();
        let rows = run_episodes(cfg.env, registry, split, cfg.eval_episodes, cfg.episode_length, &eval_streams, &mut |ep, _| {
            Ok(Box::new(ModelController::new(cfg.env, model, encoder, cem.clone(), eval_streams.stream("planner", ep))))
        })?;
        let s = summarize(cfg, split, "planner", rows);
        returns[slot] = (s.mean_return, s.std_return);
    }
    Ok(Evaluated {
        train: returns[0],
        test: returns[1],
        train_mse: heldout_mse(encoder, model, &heldout[0])?,
        test_mse: heldout_mse(encoder, model, &heldout[1])?,
    })
}

fn pair_row(state: &[f64], action: &[f64]) -> Vec<f64> {
    state.iter().chain(action).copied().collect()
}

/// Optimizer steps per epoch: one pass over the stored transitions in
/// `h_future`-step windows, batched.
fn steps_per_epoch(cfg: &ExperimentConfig, transitions: usize) -> usize {
    if cfg.steps_per_epoch > 0 {
        return cfg.steps_per_epoch;
    }
    transitions.div_ceil(cfg.h_future * cfg.batch_size).max(1)
}

struct StepStats {
    pre: f64,
    nce: Option<f64>,
    max_sample: f64,
    samples: u64,
    violations: u64,
}

fn train_step(
    cfg: &ExperimentConfig,
    encoder: &mut EncoderParams,
    model: &mut PredictionParams,
    buffer: &SettingBuffer,
    adam: &AdamConfig,
    rng: &mut StreamRng,
) -> Result<StepStats> {
    let negatives = if buffer.num_settings() >= 2 { cfg.negatives } else { 0 };
    let batch = buffer.sample_training(cfg.batch_size, negatives, cfg.h_past, cfg.h_future, rng)?;
    let mut tape = Tape::new();
    let eb = encoder.store.bind(&mut tape);
    let mb = model.store.bind(&mut tape);
    let queries: Vec<&Segment> = batch.queries.iter().collect();
    let heads = encoder.contexts_on_tape(&mut tape, &eb, &queries)?;
    let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let pre = loss_pre(&mut tape, model, &mb, ctx, &batch.futures, cfg.h_future)?;
    let nce = if batch.is_contrastive() { Some(nce_loss(&mut tape, encoder, &eb, &batch, &heads, &cfg.nce_config())?) } else { None };
    let total = combined_objective(&mut tape, pre.loss, nce.as_ref().map(|n| n.loss))?;
    let value = tape.value(total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("model-based objective became {value}")));
    }
    let grads = tape.backward(total)?;
    let ge = encoder.store.collect(&grads, &eb);
    let gm = model.store.collect(&grads, &mb);
    let stats = StepStats {
        pre: tape.value(pre.loss).item(),
        nce: nce.as_ref().map(|n| n.objective()),
        max_sample: nce.as_ref().map_or(f64::NEG_INFINITY, |n| n.max_value),
        samples: nce.as_ref().map_or(0, |n| n.samples),
        violations: nce.as_ref().map_or(0, |n| n.violations),
    };
    drop(tape);
    encoder.store.adam_step(&ge, adam)?;
    model.store.adam_step(&gm, adam)?;
    Ok(stats)
}

/// Alternates CEM data collection with joint encoder/world-model updates.
///
/// Writes the checkpoint, the per-iteration metrics CSV and a summary JSON
/// into `out`.
pub fn train_model_based(cfg: &ExperimentConfig, out: &Path) -> Result<ModelBasedRun> {
    cfg.validate()?;
    prepare_out(out, cfg)?;
    let streams = Streams::new(cfg.seed);
    let registry = Registry::standard(cfg.env);
    let mut encoder = EncoderParams::new(cfg.encoder_config(), &mut streams.stream("init", 0))?;
    let mut model = PredictionParams::new(cfg.prediction_config(), &mut streams.stream("init", 1))?;
    let heldout = [heldout_set(cfg, &registry, &streams, Split::Train)?, heldout_set(cfg, &registry, &streams, Split::Test)?];
    let mut buffer = SettingBuffer::new(cfg.buffer_capacity);
    let (ds, da) = (cfg.env.obs_dim(), cfg.env.act_dim());
    let mut pair_stats = RunningStats::new(ds + da);
    let mut delta_stats = RunningStats::new(ds);
    let adam = AdamConfig::with_lr(cfg.lr_model);
    let mut log = CsvLog::create(&out.join(files::MODEL_BASED_METRICS))?;
    let ln_k = ((cfg.negatives + 1) as f64).ln();

    let mut run = ModelBasedRun {
        env: cfg.env.to_string(),
        ablation: cfg.ablation.to_string(),
        seed: cfg.seed,
        env_steps: 0,
        updates: 0,
        ceiling_violations: 0,
        nce_samples: 0,
        max_nce_sample: f64::NEG_INFINITY,
        ln_k,
        rows: Vec::new(),
    };

    let ev = evaluate_iteration(cfg, &registry, &streams, &encoder, &model, &heldout)?;
    let base = IterationRow {
        iteration: 0,
        env_steps: 0,
        updates: 0,
        collect_return: f64::NAN,
        train_return: ev.train.0,
        train_return_std: ev.train.1,
        test_return: ev.test.0,
        test_return_std: ev.test.1,
        train_mse: ev.train_mse,
        test_mse: ev.test_mse,
        pre_loss: f64::NAN,
        nce_objective: f64::NAN,
        nce_max_sample: f64::NAN,
        nce_samples: 0,
        ceiling_violations: 0,
        head_counts: String::new(),
    };
    log.push(&base)?;
    run.rows.push(base);

    for iteration in 1..=cfg.iterations {
        let mut head_counts = vec![0u64; model.num_heads()];
        let mut collect_returns = Vec::with_capacity(cfg.trajectories_per_iteration);
        for e in 0..cfg.trajectories_per_iteration {
            let ep = ((iteration - 1) * cfg.trajectories_per_iteration + e) as u64;
            let setting = registry.sample(Split::Train, &mut streams.stream("collect.setting", ep));
            let mut ctrl = ModelController::new(cfg.env, &model, &encoder, cfg.cem_config(), streams.stream("planner", ep));
            let traj = rollout(cfg.env, &mut ctrl, &setting, cfg.episode_length, ep, &mut streams.stream("env", ep))?;
            for (c, h) in head_counts.iter_mut().zip(&ctrl.head_counts) {
                *c += h;
            }
            for t in &traj.transitions {
                pair_stats.update(&pair_row(&t.state, &t.action))?;
                let delta: Vec<f64> = t.next_state.iter().zip(&t.state).map(|(n, s)| n - s).collect();
                delta_stats.update(&delta)?;
            }
            collect_returns.push(traj.total_reward());
            run.env_steps += traj.len();
            buffer.insert(traj);
        }
        encoder.input_norm = pair_stats.snapshot();
        model.input_norm = pair_stats.snapshot();
        model.delta_norm = delta_stats.snapshot();

        let steps = cfg.epochs * steps_per_epoch(cfg, buffer.num_transitions());
        let mut sampler = streams.stream("sampler", iteration as u64);
        let (mut pre_sum, mut nce_sum, mut nce_n) = (0.0, 0.0, 0usize);
        let (mut max_sample, mut samples, mut violations) = (f64::NEG_INFINITY, 0u64, 0u64);
        for _ in 0..steps {
            let s = train_step(cfg, &mut encoder, &mut model, &buffer, &adam, &mut sampler)?;
            pre_sum += s.pre;
            if let Some(n) = s.nce {
                nce_sum += n;
                nce_n += 1;
            }
            max_sample = max_sample.max(s.max_sample);
            samples += s.samples;
            violations += s.violations;
        }
        run.updates += steps;
        run.ceiling_violations += violations;
        run.nce_samples += samples;
        run.max_nce_sample = run.max_nce_sample.max(max_sample);

        let ev = evaluate_iteration(cfg, &registry, &streams, &encoder, &model, &heldout)?;
        let row = IterationRow {
            iteration,
            env_steps: run.env_steps,
            updates: run.updates,
            collect_return: mean_std(&collect_returns).0,
            train_return: ev.train.0,
            train_return_std: ev.train.1,
            test_return: ev.test.0,
            test_return_std: ev.test.1,
            train_mse: ev.train_mse,
            test_mse: ev.test_mse,
            pre_loss: if steps > 0 { pre_sum / steps as f64 } else { f64::NAN },
            nce_objective: if nce_n > 0 { nce_sum / nce_n as f64 } else { f64::NAN },
            nce_max_sample: if samples > 0 { max_sample } else { f64::NAN },
            nce_samples: samples,
            ceiling_violations: violations,
            head_counts: head_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
        };
        info!(
            "iteration {iteration}: {} env steps, collect return {:.1}, test mse {:.3e}, pre {:.4}, nce {:.4}",
            row.env_steps, row.collect_return, row.test_mse, row.pre_loss, row.nce_objective
        );
        log.push(&row)?;
        run.rows.push(row);
    }

    let mut records = encoder.to_records();
    records.extend(model.to_records());
    checkpoint::save(out.join(files::MODEL_BASED_CKPT), &records)?;
    write_json(&out.join(files::MODEL_BASED_SUMMARY), &run)?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_length_follows_the_buffer() {
        let cfg = ExperimentConfig::default();
        assert_eq!(steps_per_epoch(&cfg, 2000), 4);
        assert_eq!(steps_per_epoch(&cfg, 20_000), 32);
        assert_eq!(steps_per_epoch(&cfg, 0), 1);
        let fixed = ExperimentConfig { steps_per_epoch: 7, ..cfg };
        assert_eq!(steps_per_epoch(&fixed, 20_000), 7);
    }
}
