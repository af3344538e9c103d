//! End-to-end command-line pipeline checks on a miniature config.
//!
//! The full desk-scale pipeline (the `tiny` preset) is exercised by the
//! core crate's acceptance suite; these tests keep the operator surface
//! honest: artifact layout, idempotency, exit codes, and replay.

use std::path::Path;
use std::process::Command;

fn micro_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("run");
    let text = format!(
        r#"
seed = 11
out_dir = "{}"

[world]
num_rooms = 4
nodes_per_room = 2
object_vocab = ["lamp", "plant"]
d_img = 32
train_worlds = 2
unseen_worlds = 3

[model]
hidden = 32
word_embed = 16
action_embed = 8
l_gen = 8

[train]
lr_nav = 3e-3
wd_nav = 5e-4
lr_spk = 1e-3
dropout = 0.3
batch_pretrain = 4
iters_pretrain = 10
batch_selfplay = 2
iters_selfplay = 2
td_k = 1
lambda_da = 0.1
rl_weight = 0.5
corpus_episodes_per_world = 4
corpus_noise = 0.1

[game]
question_interval = 4
max_actions = 80
max_exchanges = 20
history_cap = 160
context_mode = "full_history"
question_first = false
language_temperature = 0.6

[rmm]
n = 3
rollout_horizon = 5
max_recursive_calls = 0
temperature = 0.6

[eval]
episodes_per_world = 1
eval_seed = 55
"#,
        out.display()
    );
    let path = dir.join("micro.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dialnav"))
}

fn run_ok(config: &Path, args: &[&str]) -> String {
    let out = bin()
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn pipeline_end_to_end_with_artifacts_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let out = dir.path().join("run");

    run_ok(&config, &["gen-worlds"]);
    assert!(out.join("worlds").join("index.json").exists());
    assert!(out.join("config.resolved.toml").exists());
    assert!(out.join("VERSION").exists());

    run_ok(&config, &["gen-corpus"]);
    assert!(out.join("corpus").join("corpus.jsonl").exists());

    run_ok(&config, &["pretrain"]);
    assert!(out.join("ckpt").join("pretrain").join("manifest.json").exists());
    assert!(out.join("logs").join("pretrain.jsonl").exists());

    run_ok(&config, &["selfplay", "--method", "baseline"]);
    run_ok(&config, &["selfplay", "--method", "rmm", "--n", "3"]);
    run_ok(&config, &["selfplay", "--method", "da"]);
    assert!(out.join("logs").join("da_mix.json").exists());

    let text = run_ok(&config, &["eval", "--method", "shortest-path", "--split", "unseen"]);
    assert!(text.contains("shortest_path"), "{text}");
    run_ok(&config, &["eval", "--method", "rmm", "--n", "3", "--split", "unseen", "--mode", "full"]);
    assert!(out.join("reports").join("rmm_n3_unseen.json").exists());

    run_ok(&config, &["analyze", "--method", "rmm_n3", "--split", "unseen"]);
    assert!(out.join("reports").join("analysis_rmm_n3_unseen.json").exists());
    assert!(out.join("reports").join("curve_rmm_n3_unseen.csv").exists());

    // Replay a stored transcript against the same checkpoint.
    let transcript = std::fs::read_dir(out.join("transcripts"))
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("rmm_n3_"))
        .expect("an rmm transcript exists")
        .path();
    let replay = run_ok(&config, &["replay", transcript.to_str().unwrap()]);
    assert!(replay.contains("replay identical"), "{replay}");
}

#[test]
fn identical_runs_produce_identical_reports() {
    let once = || {
        let dir = tempfile::tempdir().unwrap();
        let config = micro_config(dir.path());
        let out = dir.path().join("run");
        for args in [
            vec!["gen-worlds"],
            vec!["gen-corpus"],
            vec!["pretrain"],
            vec!["selfplay", "--method", "baseline"],
            vec!["eval", "--method", "baseline", "--split", "unseen", "--mode", "full"],
        ] {
            run_ok(&config, &args);
        }
        let report = std::fs::read(out.join("reports").join("baseline_unseen.json")).unwrap();
        let ckpt = std::fs::read(out.join("ckpt").join("baseline").join("params.bin")).unwrap();
        (report, ckpt)
    };
    assert_eq!(once(), once());
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());

    // Missing artifact: eval before anything exists.
    let out = bin()
        .args(["--config", config.to_str().unwrap(), "eval", "--method", "baseline", "--split", "seen"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "missing artifact should exit 3");

    // Config error: unknown key.
    let bad = dir.path().join("bad.toml");
    let mut text = std::fs::read_to_string(&config).unwrap();
    text.push_str("\nmystery = 1\n");
    std::fs::write(&bad, text).unwrap();
    let out = bin()
        .args(["--config", bad.to_str().unwrap(), "gen-worlds"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "bad config should exit 2");

    // Unknown method name is a config error too.
    bin()
        .args(["--config", config.to_str().unwrap(), "gen-worlds"])
        .output()
        .unwrap();
    let out = bin()
        .args(["--config", config.to_str().unwrap(), "eval", "--method", "wizard", "--split", "seen"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
