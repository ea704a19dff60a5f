use std::fs;

use domino::envs::Split;
use domino::harness::{
    analyze_embeddings, evaluate, export_embeddings, exit_code, files, train_model_based, train_model_free, EvalAgent, ExperimentConfig,
};
use domino::Error;

/// A model-based run small enough for a unit-test budget.
fn tiny() -> ExperimentConfig {
    ExperimentConfig::parse(
        "iterations = 2
         trajectories_per_iteration = 2
         episode_length = 40
         epochs = 2
         batch_size = 16
         negatives = 3
         trunk_width = 16
         traj_width = 8
         wm_hidden = 16
         wm_layers = 2
         cem_candidates = 20
         cem_horizon = 4
         cem_iterations = 2
         heldout_trajectories = 1
         eval_episodes = 1
         timesteps = 400
         rollout_length = 100
         eval_interval = 200
         policy_hidden = 8
         embed_settings = 2
         embed_trajectories = 2",
    )
    .unwrap()
}

#[test]
fn model_based_run_is_deterministic_and_counts_steps() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = train_model_based(&cfg, a.path()).unwrap();
    train_model_based(&cfg, b.path()).unwrap();
    assert_eq!(run.rows.len(), 3);
    assert_eq!(run.env_steps, 2 * 2 * 40);
    assert_eq!(run.ceiling_violations, 0);
    assert!(run.max_nce_sample <= run.ln_k + 1e-9);
    let ma = fs::read(a.path().join(files::MODEL_BASED_METRICS)).unwrap();
    let mb = fs::read(b.path().join(files::MODEL_BASED_METRICS)).unwrap();
    assert_eq!(ma, mb);
    assert!(a.path().join(files::MODEL_BASED_CKPT).exists());
}

#[test]
fn zero_iterations_emit_only_the_baseline() {
    let cfg = ExperimentConfig { iterations: 0, ..tiny() };
    let dir = tempfile::tempdir().unwrap();
    let run = train_model_based(&cfg, dir.path()).unwrap();
    assert_eq!(run.rows.len(), 1);
    assert_eq!(run.rows[0].iteration, 0);
    let text = fs::read_to_string(dir.path().join(files::MODEL_BASED_METRICS)).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn model_free_requires_the_encoder_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let e = train_model_free(&tiny(), dir.path()).unwrap_err();
    assert!(matches!(&e, Error::MissingPrerequisite(m) if m.contains("train-mb")), "{e}");
    assert_eq!(exit_code(&e), 3);
}

#[test]
fn one_rollout_is_one_update() {
    let cfg = ExperimentConfig { random_encoder: true, timesteps: 200, rollout_length: 200, episode_length: 200, eval_interval: 10_000, ..tiny() };
    let dir = tempfile::tempdir().unwrap();
    let run = train_model_free(&cfg, dir.path()).unwrap();
    assert_eq!(run.updates, 1);
    assert!(run.evaluations.is_empty());
}

#[test]
fn full_chain_on_a_tiny_budget() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    train_model_based(&cfg, dir.path()).unwrap();
    let mf = train_model_free(&cfg, dir.path()).unwrap();
    assert_eq!(mf.timesteps, 400);
    assert_eq!(mf.updates, 4);
    assert_eq!(mf.evaluations.len(), 400 / 200);
    let updates = fs::read_to_string(dir.path().join(files::MODEL_FREE_UPDATES)).unwrap();
    assert_eq!(updates.lines().count(), 5);

    let eval = evaluate(&ExperimentConfig { split: Split::Test, ..cfg.clone() }, dir.path()).unwrap();
    assert_eq!(eval.agent, "policy");
    assert_eq!(eval.episodes, 1);
    let again = evaluate(&ExperimentConfig { split: Split::Test, ..cfg.clone() }, dir.path()).unwrap();
    assert_eq!(eval, again);
    let planner = evaluate(&ExperimentConfig { eval_agent: EvalAgent::Planner, ..cfg.clone() }, dir.path()).unwrap();
    assert_eq!(planner.agent, "planner");

    let rows = export_embeddings(&cfg, dir.path()).unwrap();
    // 2 settings x 2 episodes x (40 - 10 + 1) steps x 2 heads.
    assert_eq!(rows.len(), 2 * 2 * 31 * 2);
    let analysis = analyze_embeddings(&rows, dir.path()).unwrap();
    assert_eq!((analysis.settings, analysis.trajectories, analysis.dimension), (2, 4, 20));
    assert!((-1.0..=1.0).contains(&analysis.silhouette));
    assert!(dir.path().join(files::EMBEDDINGS_PCA).exists());
}

#[test]
fn evaluation_with_no_episodes_is_an_error() {
    let cfg = ExperimentConfig { eval_episodes: 0, eval_agent: EvalAgent::Random, ..tiny() };
    let dir = tempfile::tempdir().unwrap();
    let e = evaluate(&cfg, dir.path()).unwrap_err();
    assert_ne!(exit_code(&e), 0);
}

#[test]
fn mino_encoder_is_rejected_by_a_domino_config() {
    let dir = tempfile::tempdir().unwrap();
    let mino = ExperimentConfig { ablation: domino::harness::Ablation::Mino, iterations: 0, ..tiny() };
    train_model_based(&mino, dir.path()).unwrap();
    let e = train_model_free(&tiny(), dir.path()).unwrap_err();
    assert_eq!(exit_code(&e), 2, "{e}");
}

#[test]
fn random_pendulum_returns_fall_in_the_measured_band() {
    for split in [Split::Train, Split::Test] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { eval_agent: EvalAgent::Random, eval_episodes: 20, split, ..ExperimentConfig::default() };
        let s = evaluate(&cfg, dir.path()).unwrap();
        assert_eq!(s.episodes, 20);
        assert!((-1800.0..=-900.0).contains(&s.mean_return), "{split:?}: {}", s.mean_return);
    }
}
