use std::path::Path;
use std::process::Command;

use ofa_cli::{EXIT_CONFIG, EXIT_DATA, EXIT_OK};

const SMALL: &[&str] = &[
    "--set",
    "policy.image_size=16",
    "--set",
    "policy.conv_channels=[4,8]",
    "--set",
    "policy.encoder_hidden=[16]",
    "--set",
    "policy.decoder_hidden=[16]",
    "--set",
    "policy.steps=20",
    "--set",
    "policy.batch_size=4",
    "--set",
    "rollout.max_steps=8",
];

fn ofa(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ofa")).args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn help_documents_every_command() {
    let (code, out, _) = ofa(&["--help"]);
    assert_eq!(code, EXIT_OK);
    for c in ["gen-demos", "train", "eval", "reproduce"] {
        assert!(out.contains(c), "{c} missing from help:\n{out}");
    }
    let (code, out, _) = ofa(&["eval", "--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("--offset") && out.contains("--background"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let (code, _, err) = ofa(&["gen-demos", "--count", "1", "--out", path(&out), "--set", "policy.bogus=1"]);
    assert_eq!(code, EXIT_CONFIG, "{err}");
    let (code, _, _) = ofa(&["gen-demos", "--task", "juggle", "--count", "1", "--out", path(&out)]);
    assert_eq!(code, EXIT_CONFIG);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"x\"\n").unwrap();
    let (code, _, _) = ofa(&["gen-demos", "--config", path(&bad), "--count", "1", "--out", path(&out)]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn missing_data_and_params_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = ofa(&["train", "--data", path(&dir.path().join("none")), "--out", path(&dir.path().join("p"))]);
    assert_eq!(code, EXIT_DATA, "{err}");
    assert!(err.contains("index.toml"), "{err}");
    let (code, _, _) = ofa(&["eval", "--params", path(dir.path()), "--out", path(&dir.path().join("e"))]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn gen_demos_is_byte_reproducible_and_feeds_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let (code, out, err) = ofa(&with_small(&["gen-demos", "--task", "pinch_toy", "--count", "2", "--seed", "11", "--no-frames", "--out", path(d)]));
        assert_eq!(code, EXIT_OK, "{out}{err}");
    }
    let index = std::fs::read_to_string(a.join("index.toml")).unwrap();
    assert!(index.contains("episode_0001") && !index.contains("episode_0002"), "{index}");
    for ep in ["episode_0000", "episode_0001"] {
        for f in ["steps.bin", "approach.bin", "manifest.toml"] {
            assert_eq!(std::fs::read(a.join(ep).join(f)).unwrap(), std::fs::read(b.join(ep).join(f)).unwrap(), "{ep}/{f}");
        }
    }
    let c = dir.path().join("c");
    ofa(&with_small(&["gen-demos", "--task", "pinch_toy", "--count", "2", "--seed", "12", "--no-frames", "--out", path(&c)]));
    assert_ne!(std::fs::read(a.join("episode_0000/steps.bin")).unwrap(), std::fs::read(c.join("episode_0000/steps.bin")).unwrap());

    let params = dir.path().join("params");
    let (code, out, err) = ofa(&with_small(&["train", "--data", path(&a), "--method", "ofa", "--seed", "3", "--out", path(&params)]));
    assert_eq!(code, EXIT_OK, "{out}{err}");
    assert!(params.join("policy_arm0.bin").exists());
    let curve = std::fs::read_to_string(params.join("loss_arm0.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("step,total,mse,kl"));
    let manifest = std::fs::read_to_string(params.join("train.toml")).unwrap();
    assert!(manifest.contains("config_digest") && manifest.contains("seed = 3"), "{manifest}");

    let mut results = Vec::new();
    for name in ["e1", "e2"] {
        let e = dir.path().join(name);
        let (code, out, err) = ofa(&with_small(&[
            "eval", "--params", path(&params), "--task", "pinch_toy", "--episodes", "2", "--offset", "0,-0.05", "--background",
            "textured-1", "--seed", "5", "--out", path(&e),
        ]));
        assert_eq!(code, EXIT_OK, "{out}{err}");
        assert!(out.contains('%'), "{out}");
        assert!(e.join("rollout_0001/result.toml").exists());
        assert!(e.join("rollout_0001/arm_0/steps.bin").exists());
        results.push(std::fs::read(e.join("results.csv")).unwrap());
    }
    assert_eq!(results[0], results[1]);
    let text = String::from_utf8(results[0].clone()).unwrap();
    assert!(text.starts_with("experiment,task,template,method,demos,variant,episode,seed,success,failure_reason,steps\n"), "{text}");
    assert!(text.contains("offset+0.000-0.050/textured-1"), "{text}");
}

#[test]
fn gen_demos_reports_exhaustion_with_a_partial_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    // an unreachable placement rectangle makes every scene unsolvable
    let (code, _, err) = ofa(&[
        "gen-demos", "--task", "grasp_cup", "--count", "2", "--no-frames", "--out", path(&out), "--set", "scene.offset=[3.0,0.0]", "--set",
        "experiment.attempts_per_demo=1",
    ]);
    assert_eq!(code, EXIT_DATA, "{err}");
    assert!(err.contains("0 of 2"), "{err}");
    assert!(out.join("index.toml").exists());
}
