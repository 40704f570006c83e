use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_file() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k-images-idx3-ubyte.gz")
}

fn restorenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_restorenet"))
        .args(args)
        .env_remove("RESTORENET_DATA")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pgm(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let (w, h, px) = restorenet::data::decode_pgm(&bytes).unwrap();
    assert_eq!((w, h), (28, 28));
    px
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&restorenet(&[])), 1);
    assert_eq!(code(&restorenet(&["frobnicate"])), 1);
    assert_eq!(code(&restorenet(&["--help"])), 0);
    let out = restorenet(&["--threads", "0", "gradcheck", "dense"]);
    assert_eq!(code(&out), 1);

    let out = restorenet(&["train", "cnn-gru", "--data", s(&data_file())]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("cnn-lstm") && err.contains("cnn-cnn"), "{err}");

    let out = restorenet(&["train", "cnn-lstm", "--hidden-gate", "forget", "--data", s(&data_file())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn corrupt_exports_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("preview");
    ok(restorenet(&["corrupt", "--data", s(&data_file()), "-n", "4", "--out", s(&out)]));
    let names = listing(&out);
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 8);
    assert!(names.contains(&"manifest.json".to_string()));
    for i in 0..4 {
        let px = pgm(&out.join(format!("corrupted-{i:03}.pgm")));
        assert!(px[14 * 28..].iter().all(|&p| p == 0 || p == 255), "lower rows must hold only noise");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["corruption"]["density"], 0.2);
}

#[test]
fn corrupt_at_density_zero_only_blanks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    ok(restorenet(&["corrupt", "--data", s(&data_file()), "-n", "3", "--density", "0", "--out", s(&out)]));
    for i in 0..3 {
        let clean = pgm(&out.join(format!("clean-{i:03}.pgm")));
        let bad = pgm(&out.join(format!("corrupted-{i:03}.pgm")));
        assert_eq!(clean[..14 * 28], bad[..14 * 28]);
        assert!(bad[14 * 28..].iter().all(|&p| p == 0));
    }
}

#[test]
fn corrupt_zero_images_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    ok(restorenet(&["corrupt", "--data", s(&data_file()), "-n", "0", "--out", s(&out)]));
    assert_eq!(listing(&out), vec!["manifest.json"]);
}

#[test]
fn data_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env");
    let status = Command::new(env!("CARGO_BIN_EXE_restorenet"))
        .args(["corrupt", "-n", "1", "--out", s(&out)])
        .env("RESTORENET_DATA", data_file().parent().unwrap())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&status), 0, "{}", stderr(&status));
    assert_eq!(listing(&out).len(), 3);
}

#[test]
fn bad_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.idx");
    let out = restorenet(&["corrupt", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);

    let garbage = dir.path().join("garbage.idx");
    fs::write(&garbage, [0u8, 0, 8, 3, 0, 0, 0, 9, 0, 0, 0, 28, 0, 0, 0, 28, 1, 2, 3]).unwrap();
    let out = restorenet(&["corrupt", "--data", s(&garbage), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("offset"), "{}", stderr(&out));
}

#[test]
fn gradcheck_scopes() {
    let out = ok(restorenet(&["gradcheck", "lstm-cell", "--hidden-gate", "input"]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("lstm-cell") && text.contains("pass"), "{text}");
    ok(restorenet(&["gradcheck", "conv2d", "--seed", "3"]));

    let out = restorenet(&["gradcheck", "attention"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("lstm-cell"));
}

#[test]
fn long_runs_are_accepted_with_a_warning() {
    // The run directory collides with a file, so the command stops right
    // after validation instead of training for days.
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocked");
    fs::write(&blocker, "x").unwrap();
    let out = restorenet(&[
        "train",
        "cnn-lstm",
        "--iterations",
        "500000",
        "--batch",
        "100",
        "--data",
        s(&data_file()),
        "--run-dir",
        s(&blocker),
    ]);
    let err = stderr(&out);
    assert!(err.contains("warning") && err.contains("CPU hours"), "{err}");
    assert_eq!(code(&out), 2, "{err}");
}

fn train_small(run_dir: &Path, extra: &[&str]) -> Output {
    let data = data_file();
    let mut args = vec![
        "train",
        "cnn-cnn",
        "--data",
        s(&data),
        "--iterations",
        "6",
        "--batch",
        "4",
        "--train-images",
        "40",
        "--checkpoint-every",
        "3",
        "--seed",
        "5",
        "--run-dir",
        s(run_dir),
    ];
    args.extend_from_slice(extra);
    ok(restorenet(&args))
}

#[test]
fn train_resume_eval_compare() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    train_small(&full, &[]);
    let names = listing(&full);
    for want in ["checkpoint-0000003.rstf", "checkpoint-0000006.rstf", "final.rstf", "loss.csv", "manifest.json"] {
        assert!(names.contains(&want.to_string()), "{names:?}");
    }
    let log = fs::read_to_string(full.join("loss.csv")).unwrap();
    assert!(log.starts_with("iteration,rmse,l2,total,ms\n"));
    assert_eq!(log.lines().count(), 7);

    // Same flags, same bytes.
    let again = dir.path().join("again");
    train_small(&again, &[]);
    assert_eq!(fs::read(again.join("loss.csv")).unwrap(), log.as_bytes());

    // Resuming halfway reproduces the uninterrupted log.
    let resumed = dir.path().join("resumed");
    ok(restorenet(&["train", "--resume", s(&full.join("checkpoint-0000003.rstf")), "--run-dir", s(&resumed)]));
    assert_eq!(fs::read_to_string(resumed.join("loss.csv")).unwrap(), log);

    // A manifest alone replays the run.
    let replay = dir.path().join("replay");
    ok(restorenet(&["train", "--from-manifest", s(&full.join("manifest.json")), "--run-dir", s(&replay)]));
    assert_eq!(fs::read_to_string(replay.join("loss.csv")).unwrap(), log);

    let ckpt = full.join("final.rstf");
    let data = data_file();
    let held = ["--data", s(&data), "--test-images", "30"];
    let report = |name: &str| {
        let path = dir.path().join(name);
        let mut args = vec!["eval", s(&ckpt), "--out", s(&path)];
        args.extend_from_slice(&held);
        ok(restorenet(&args));
        fs::read(path).unwrap()
    };
    let first = report("a.csv");
    assert_eq!(first, report("b.csv"));
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("model,n_images,seed,rmse_full,rmse_upper,rmse_lower"));

    let cmp = dir.path().join("cmp");
    let mut args = vec!["compare", s(&ckpt), s(&ckpt), "--grid-rows", "3", "--out", s(&cmp)];
    args.extend_from_slice(&held);
    ok(restorenet(&args));
    let table = fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0, "{line}");
        assert_eq!(cols[4], "tie");
    }
    let (w, h, _) = restorenet::data::decode_pgm(&fs::read(cmp.join("grid.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (4 * 28 + 6, 3 * 28 + 4));

    // Report CSVs compare without re-evaluating.
    ok(restorenet(&["compare", s(&dir.path().join("a.csv")), s(&dir.path().join("b.csv"))]));

    // Damaged magic is a format error.
    let broken = dir.path().join("broken.rstf");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&broken, bytes).unwrap();
    let mut args = vec!["eval", s(&broken)];
    args.extend_from_slice(&held);
    let out = restorenet(&args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).to_lowercase().contains("magic"), "{}", stderr(&out));
}

#[test]
fn non_finite_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("nan");
    let out = restorenet(&[
        "train",
        "cnn-cnn",
        "--data",
        s(&data_file()),
        "--iterations",
        "3",
        "--batch",
        "2",
        "--train-images",
        "8",
        "--lr",
        "1e30",
        "--no-clip",
        "--run-dir",
        s(&run),
    ]);
    // A step of 1e30 per weight overflows the weight penalty on the next iteration.
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(run.join("diagnostic.rstf").exists());
}

#[test]
fn compare_rejects_incompatible_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let set = restorenet::data::load_idx(data_file()).unwrap();
    let subset = restorenet::data::MnistSet::from_images(28, 28, (0..100).flat_map(|i| set.raw(i).to_vec()).collect()).unwrap();
    let other_data = dir.path().join("subset.idx");
    fs::write(&other_data, subset.to_idx_bytes()).unwrap();

    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    train_small(&run_a, &[]);
    ok(restorenet(&[
        "train", "cnn-cnn", "--data", s(&other_data), "--iterations", "1", "--batch", "2", "--run-dir", s(&run_b),
    ]));
    let data = data_file();
    let out = restorenet(&[
        "compare",
        s(&run_a.join("final.rstf")),
        s(&run_b.join("final.rstf")),
        "--data",
        s(&data),
        "--test-images",
        "5",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("incompatible"), "{}", stderr(&out));

    // Reports scored on different held-out corruptions do not compare either.
    let report = |seed: &str, name: &str| {
        let path = dir.path().join(name);
        ok(restorenet(&[
            "eval", s(&run_a.join("final.rstf")), "--data", s(&data), "--test-images", "5", "--seed", seed, "--out", s(&path),
        ]));
        path
    };
    let (r1, r2) = (report("1", "r1.csv"), report("2", "r2.csv"));
    assert_ne!(code(&restorenet(&["compare", s(&r1), s(&r2)])), 0);
}
