//! Command-level tests: exit codes, artifacts, and the end-to-end pipeline
//! on a tiny dataset.

use std::path::Path;

use asl_cli::{run_main, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["asl"];
    argv.extend_from_slice(args);
    run_main(argv)
}

fn tiny_overrides(out: &Path) -> Vec<String> {
    [
        "synth.videos=4",
        "synth.val_videos=2",
        "synth.frames=32",
        "synth.dim=8",
        "synth.classes=3",
        "synth.instances_per_video=2",
        "model.classes=3",
        "model.source_dims=8",
        "model.proj_dims=16",
        "model.embed_dim=16",
        "model.heads=2",
        "model.depth=1",
        "model.levels=2",
        "model.head_convs=1",
        "train.epochs=2",
        "train.batch=2",
        "decode.score_floor=0.01",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!(
        "data.train_manifest={}",
        out.join("data/train_manifest.txt").display()
    )])
    .chain([format!(
        "data.val_manifest={}",
        out.join("data/val_manifest.txt").display()
    )])
    .collect()
}

fn with_sets(base: &[&str], sets: &[String]) -> Vec<String> {
    let mut v: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    for s in sets {
        v.push("--set".into());
        v.push(s.clone());
    }
    v
}

#[test]
fn full_pipeline_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sets = tiny_overrides(root);

    let synth_args = with_sets(
        &["synth", "--out", root.join("data").to_str().unwrap()],
        &sets,
    );
    let argv: Vec<&str> = synth_args.iter().map(String::as_str).collect();
    assert_eq!(run(&argv), EXIT_OK);
    assert!(root.join("data/train_manifest.txt").is_file());
    assert!(root.join("data/sensitivity_truth.txt").is_file());
    assert!(root.join("data/config.txt").is_file(), "config snapshot");

    let train_args = with_sets(
        &["train-mq", "--out", root.join("run").to_str().unwrap()],
        &sets,
    );
    let argv: Vec<&str> = train_args.iter().map(String::as_str).collect();
    assert_eq!(run(&argv), EXIT_OK);
    let ckpt = root.join("run/checkpoint.aslm");
    assert!(ckpt.is_file());
    assert!(root.join("run/train_log.txt").is_file());
    let log = std::fs::read_to_string(root.join("run/train_log.txt")).unwrap();
    assert!(log.contains("epoch 0"), "per-epoch log lines expected");
    assert!(log.contains("mu_cls"), "sensitivity stats in log");

    let predict_args = with_sets(
        &[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            root.join("pred").to_str().unwrap(),
        ],
        &sets,
    );
    let argv: Vec<&str> = predict_args.iter().map(String::as_str).collect();
    assert_eq!(run(&argv), EXIT_OK);
    let preds = root.join("pred/predictions.txt");
    assert!(preds.is_file());

    let eval_args = with_sets(
        &[
            "eval-mq",
            "--predictions",
            preds.to_str().unwrap(),
            "--out",
            root.join("eval").to_str().unwrap(),
        ],
        &sets,
    );
    let argv: Vec<&str> = eval_args.iter().map(String::as_str).collect();
    assert_eq!(run(&argv), EXIT_OK);
    assert!(root.join("eval/report.txt").is_file());
    let kv = std::fs::read_to_string(root.join("eval/report.kv")).unwrap();
    assert!(kv.contains("average_map = "), "{kv}");
    assert!(root.join("eval/config.txt").is_file());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
    assert_eq!(run(&["synth", "--bogus-flag"]), EXIT_USAGE);
    // Unknown config key.
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&[
            "synth",
            "--set",
            "nope.key=1",
            "--out",
            dir.path().to_str().unwrap()
        ]),
        EXIT_USAGE
    );
    // Missing --out.
    assert_eq!(run(&["synth"]), EXIT_USAGE);
    // Mode mismatch between subcommand and config.
    assert_eq!(
        run(&[
            "train-nlq",
            "--out",
            dir.path().to_str().unwrap(),
            "--set",
            "data.train_manifest=x.txt"
        ]),
        EXIT_USAGE
    );
}

#[test]
fn data_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    // Missing manifest file.
    assert_eq!(
        run(&[
            "train-mq",
            "--out",
            dir.path().to_str().unwrap(),
            "--set",
            "data.train_manifest=/nonexistent/manifest.txt",
        ]),
        EXIT_DATA
    );
    // Corrupt checkpoint.
    let bad = dir.path().join("bad.aslm");
    std::fs::write(&bad, b"garbage").unwrap();
    assert_eq!(
        run(&[
            "predict",
            "--checkpoint",
            bad.to_str().unwrap(),
            "--manifest",
            "/nonexistent/m.txt",
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]),
        EXIT_DATA
    );
}

#[test]
fn ensemble_of_one_checkpoint_matches_single_model_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sets = tiny_overrides(root);

    for (cmd, out) in [("synth", "data"), ("train-mq", "run")] {
        let args = with_sets(&[cmd, "--out", root.join(out).to_str().unwrap()], &sets);
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_eq!(run(&argv), EXIT_OK, "{cmd}");
    }
    let ckpt = root.join("run/checkpoint.aslm");

    let predict_args = with_sets(
        &[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            root.join("single").to_str().unwrap(),
        ],
        &sets,
    );
    let argv: Vec<&str> = predict_args.iter().map(String::as_str).collect();
    assert_eq!(run(&argv), EXIT_OK);

    let ensemble_args = with_sets(
        &[
            "ensemble",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            root.join("ens").to_str().unwrap(),
        ],
        &sets,
    );
    let argv: Vec<&str> = ensemble_args.iter().map(String::as_str).collect();
    assert_eq!(run(&argv), EXIT_OK);

    let single = std::fs::read(root.join("single/predictions.txt")).unwrap();
    let ens = std::fs::read(root.join("ens/predictions.txt")).unwrap();
    assert_eq!(single, ens, "one-model ensemble must match plain predict");
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&["gradcheck", "--out", dir.path().to_str().unwrap()]),
        EXIT_OK
    );
    let text = std::fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(text.contains("end-to-end mq"));
    assert!(text.contains("worst observed"));
}
