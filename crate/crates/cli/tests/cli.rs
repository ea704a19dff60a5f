use std::fs;
use std::process::Command;

fn domino() -> Command {
    Command::new(env!("CARGO_BIN_EXE_domino"))
}

const TINY: &str = "
iterations = 1
trajectories_per_iteration = 2
episode_length = 30
epochs = 1
batch_size = 8
negatives = 3
trunk_width = 8
traj_width = 8
wm_hidden = 8
wm_layers = 1
cem_candidates = 20
cem_horizon = 3
cem_iterations = 1
heldout_trajectories = 1
eval_episodes = 1
timesteps = 200
rollout_length = 100
eval_interval = 100
policy_hidden = 8
embed_settings = 2
embed_trajectories = 2
mi_seeds = 1
mi_steps = 120
mi_batch = 32
";

#[test]
fn unknown_config_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nbogus = 3\n").unwrap();
    let out = domino().args(["mi-bench", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_checkpoint_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = domino().args(["train-mf", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-mb"));
}

#[test]
fn zero_episode_evaluation_is_not_success() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("eval.cfg");
    fs::write(&cfg, "eval_agent = random\neval_episodes = 0\n").unwrap();
    let out = domino().args(["eval", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn every_subcommand_on_a_tiny_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.path().join("run");
    for cmd in ["train-mb", "train-mf", "eval", "mi-bench", "export-embeddings", "analyze-embeddings"] {
        let out = domino()
            .arg(cmd)
            .arg("--config")
            .arg(&cfg)
            .args(["--seed", "3", "--env", "pendulum", "--split", "test", "--ablation", "domino", "--out"])
            .arg(&run_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["model_based.ckpt", "mb_metrics.csv", "model_free.ckpt", "mf_eval.csv", "eval_test.csv", "mi_results.csv", "embeddings_test.csv", "embeddings_pca.csv"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let config = fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(config.contains("seed = 3"));
}
