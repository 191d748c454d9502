//! End-to-end harness behavior at tiny scale: reproducibility, checkpoint
//! continuation, eval consistency, and the degenerate-run contract.

use std::path::Path;

use rqdia_core::harness::{evaluate, run_training, RunConfig};

fn sac_config(extra: &str) -> RunConfig {
    let text = format!(
        "
[run]
agent = sac
total_env_steps = 160
eval_every = 40
eval_episodes = 2
seed = 11
[env]
kind = point_reach
frame_size = 16
action_repeat = 2
frame_stack = 2
max_episode_steps = 8
[augment]
kind = random_shift
pad = 2
[replay]
capacity = 500
min_fill = 24
[sac]
batch_size = 8
hidden_dim = 8
latent_dim = 6
num_filters = 2
{extra}
"
    );
    RunConfig::from_text(&text).unwrap()
}

fn c51_config(extra: &str) -> RunConfig {
    let text = format!(
        "
[run]
agent = c51
total_env_steps = 160
eval_every = 40
eval_episodes = 2
seed = 13
[env]
kind = catch
frame_size = 16
action_repeat = 2
frame_stack = 2
max_episode_steps = 20
[augment]
kind = intensity
[replay]
capacity = 500
min_fill = 24
[c51]
atoms = 5
v_min = -2
v_max = 2
n_step = 3
batch_size = 8
hidden_dim = 8
conv_channels = 2,2
target_update_period = 16
{extra}
"
    );
    RunConfig::from_text(&text).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn same_config_and_seed_give_bit_identical_metrics() {
    for config in [sac_config(""), c51_config("")] {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = run_training(&config, d1.path(), None).unwrap();
        let s2 = run_training(&config, d2.path(), None).unwrap();
        assert_eq!(s1.updates, s2.updates);
        assert_eq!(read(d1.path(), "metrics.csv"), read(d2.path(), "metrics.csv"));
    }
}

#[test]
fn zero_steps_writes_header_only() {
    let mut config = sac_config("");
    config.run.total_env_steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let summary = run_training(&config, dir.path(), None).unwrap();
    assert_eq!(summary.env_steps, 0);
    let text = read(dir.path(), "metrics.csv");
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("env_step,"));
}

#[test]
fn no_update_before_min_fill_and_one_update_per_step_after() {
    let config = sac_config("");
    let dir = tempfile::tempdir().unwrap();
    let summary = run_training(&config, dir.path(), None).unwrap();
    // min_fill transitions must exist before the first update; exactly one
    // update per env step afterwards. The first update fires at the step
    // whose stored transition completes the fill.
    assert_eq!(summary.env_steps, 160);
    assert_eq!(summary.updates, 160 - 23);
}

#[test]
fn checkpoint_resume_from_step_zero_matches_uninterrupted() {
    for (mut config, name) in [(sac_config(""), "sac"), (c51_config(""), "c51")] {
        config.run.checkpoint_every = 1000; // only the step-0 checkpoint
        let d_full = tempfile::tempdir().unwrap();
        run_training(&config, d_full.path(), None).unwrap();

        let d_resume = tempfile::tempdir().unwrap();
        let ck0 = d_full.path().join("ckpt_00000000.bin");
        assert!(ck0.exists(), "{name}: step-0 checkpoint missing");
        run_training(&config, d_resume.path(), Some(&ck0)).unwrap();

        assert_eq!(
            read(d_full.path(), "metrics.csv"),
            read(d_resume.path(), "metrics.csv"),
            "{name}: resumed run must replay the original row for row"
        );
    }
}

#[test]
fn evaluating_checkpoint_matches_in_training_eval_row() {
    for (mut config, name) in [(sac_config(""), "sac"), (c51_config(""), "c51")] {
        config.run.checkpoint_every = 40; // aligned with eval_every
        let dir = tempfile::tempdir().unwrap();
        run_training(&config, dir.path(), None).unwrap();

        let metrics = read(dir.path(), "metrics.csv");
        for step in [40u64, 80, 120, 160] {
            let row = metrics
                .lines()
                .find(|l| l.starts_with(&format!("{step},eval")))
                .unwrap_or_else(|| panic!("{name}: no eval row at {step}"));
            let logged: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
            let ck = dir.path().join(format!("ckpt_{step:08}.bin"));
            let (mean, returns) = evaluate(&ck, config.run.eval_episodes).unwrap();
            assert_eq!(returns.len(), config.run.eval_episodes);
            assert!(
                (mean - logged).abs() < 1e-7,
                "{name} step {step}: checkpoint eval {mean} vs logged {logged}"
            );
            // evaluating twice is identical
            let (mean2, _) = evaluate(&ck, config.run.eval_episodes).unwrap();
            assert_eq!(mean.to_bits(), mean2.to_bits());
        }
    }
}

#[test]
fn resume_with_wrong_agent_kind_fails() {
    let mut sac = sac_config("");
    sac.run.checkpoint_every = 1000;
    let dir = tempfile::tempdir().unwrap();
    run_training(&sac, dir.path(), None).unwrap();
    let ck = dir.path().join("ckpt_00000000.bin");

    let c51 = c51_config("");
    let dir2 = tempfile::tempdir().unwrap();
    let err = run_training(&c51, dir2.path(), Some(&ck)).unwrap_err();
    let msg = format!("{err}");
    assert!(msg.contains("sac") && msg.contains("c51"), "{msg}");
}

#[test]
fn untrained_catch_eval_returns_are_bounded() {
    let config = c51_config("");
    let mut driver = rqdia_core::harness::run::make_driver(&config).unwrap();
    let returns =
        rqdia_core::harness::run::eval_policy(driver.as_mut(), &config.env, 13, 10).unwrap();
    for r in returns {
        assert!((-1.0..=1.0).contains(&r), "catch return {r} out of bounds");
    }
}

#[test]
fn early_stop_threshold_halts_run() {
    // Any eval of catch returns >= -1, so a threshold of -2 stops at the
    // first eval.
    let mut config = c51_config("");
    config.run.stop_at_eval_return = Some(-2.0);
    let dir = tempfile::tempdir().unwrap();
    let summary = run_training(&config, dir.path(), None).unwrap();
    assert!(summary.stopped_early);
    assert_eq!(summary.env_steps, 40);
}

#[test]
fn rqdia_sac_and_kl_c51_smoke_runs_are_finite() {
    let sac = sac_config("regularizer = rqdia\nrqdia_action_subset = 4\n");
    let dir = tempfile::tempdir().unwrap();
    run_training(&sac, dir.path(), None).unwrap();

    let c51 = c51_config("rqdia_mode = kl\n");
    let dir2 = tempfile::tempdir().unwrap();
    run_training(&c51, dir2.path(), None).unwrap();

    let c51m = c51_config("rqdia_mode = mse\n");
    let dir3 = tempfile::tempdir().unwrap();
    run_training(&c51m, dir3.path(), None).unwrap();

    let drq = sac_config("regularizer = drq_avg\n");
    let dir4 = tempfile::tempdir().unwrap();
    run_training(&drq, dir4.path(), None).unwrap();
}
