use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_node-imgnet");

const TINY: &[&str] = &[
    "--synth-count",
    "8",
    "--synth-size",
    "24",
    "--patch-size",
    "16",
    "--patches-per-image",
    "4",
    "--hidden",
    "4",
    "--batch",
    "8",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("NODE_IMGNET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--epochs", "2", "--steps", "2"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

fn write_pgm(path: &Path, w: usize, h: usize) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend((0..w * h).map(|i| ((i * 37) % 256) as u8));
    fs::write(path, bytes).unwrap();
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = train(&out, &[]);
    assert!(res.status.success(), "{}", stderr(&res));
    for file in ["resolved_config.txt", "train_log.csv", "manifest.csv", "checkpoint.nimg"] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,eval_loss,eval_psnr,lr,seconds");
    assert_eq!(lines.len(), 3);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("split,source,variant,y,x,sigma\n"));
    assert!(manifest.lines().any(|l| l.starts_with("eval,")));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    assert!(train(&first, &["--seed", "5"]).status.success());

    let cfg = dir.path().join("replay.cfg");
    let record = fs::read_to_string(first.join("resolved_config.txt")).unwrap();
    assert!(record.contains("seed = 5"));
    fs::write(&cfg, record).unwrap();
    let second = dir.path().join("b");
    let res = run(&["train", "--config", cfg.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));

    let a = fs::read(first.join("checkpoint.nimg")).unwrap();
    let b = fs::read(second.join("checkpoint.nimg")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_data_dir_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_dir");
    let res = run(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("no_such_dir"));
}

#[test]
fn bad_flags_and_config_keys_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--hidden", "lots"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--blind", "30"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--channels", "2"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour = red\n").unwrap();
    let res = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("colour"));
}

#[test]
fn denoise_and_eval_use_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    assert!(train(&run_dir, &[]).status.success());
    let ckpt = run_dir.join("checkpoint.nimg");

    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    write_pgm(&input.join("a.pgm"), 20, 14);
    write_pgm(&input.join("b.pgm"), 9, 11);
    let out = dir.path().join("clean");
    let res = run(&["denoise", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    let a = fs::read(out.join("a.pgm")).unwrap();
    assert!(a.starts_with(b"P5\n20 14\n255\n"));
    assert_eq!(a.len(), b"P5\n20 14\n255\n".len() + 20 * 14);
    assert!(out.join("b.pgm").is_file());

    let csv = dir.path().join("eval.csv");
    let res = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", input.to_str().unwrap(), "--noisy", out.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    let table = fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().next(), Some("image,noisy_psnr,denoised_psnr"));
    assert_eq!(table.lines().count(), 3);
    assert!(stderr(&res).contains("mean over 2 images"));
}

#[test]
fn denoise_rejects_channel_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    assert!(train(&run_dir, &[]).status.success());
    let ppm = dir.path().join("rgb.ppm");
    let mut bytes = b"P6\n4 4\n255\n".to_vec();
    bytes.extend(std::iter::repeat_n(128u8, 48));
    fs::write(&ppm, bytes).unwrap();
    let res = run(&[
        "denoise",
        "--checkpoint",
        run_dir.join("checkpoint.nimg").to_str().unwrap(),
        "--input",
        ppm.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn ablate_writes_one_row_per_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--out", out.to_str().unwrap(), "--epochs", "1", "--max-steps", "2", "--sweep", "0,1,3"];
    args.extend_from_slice(TINY);
    let res = run(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "N,params,seconds_per_100_batches,work_per_batch,eval_psnr");
    let ns: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["0", "1", "3"]);
}
