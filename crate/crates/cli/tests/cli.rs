//! Black-box tests of the `icm` binary: exit codes, error JSON, run-directory
//! discipline, and a real encode/decode roundtrip through files.

use std::path::Path;
use std::process::{Command, Output};

fn icm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icm"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    icm()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

#[test]
fn gen_data_writes_expected_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["gen-data", "--run-name", "a", "--count", "3", "--set", "out_dir=o"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = dir.path().join("o/a/data");
    for i in 0..3 {
        assert!(data.join(format!("img_0000{i}.png")).exists());
        assert!(data.join(format!("mask_0000{i}.pgm")).exists());
    }
    assert!(data.join("presence.json").exists());
    assert!(dir.path().join("o/a/config.json").exists());

    let out2 = run(
        &["gen-data", "--run-name", "b", "--count", "3", "--set", "out_dir=o"],
        dir.path(),
    );
    assert!(out2.status.success());
    let img_a = std::fs::read(data.join("img_00001.png")).unwrap();
    let img_b = std::fs::read(dir.path().join("o/b/data/img_00001.png")).unwrap();
    assert_eq!(img_a, img_b);
}

#[test]
fn run_directories_are_append_only() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--run-name", "same", "--count", "1"];
    assert!(run(&args, dir.path()).status.success());
    let second = run(&args, dir.path());
    assert_eq!(second.status.code(), Some(2));
    let err = String::from_utf8_lossy(&second.stderr);
    assert!(err.contains("\"error\""), "{err}");

    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(run(&forced, dir.path()).status.success());
}

#[test]
fn unknown_config_key_exits_2_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--set", "loss.nonsense=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["code"], 2);
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "eval",
            "--checkpoint",
            "nope.icmc",
            "--recognizer",
            "also-nope.icmc",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "checkpoint");
}

#[test]
fn encode_decode_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    // a data sample to compress
    assert!(run(
        &["gen-data", "--run-name", "d", "--count", "1"],
        dir.path()
    )
    .status
    .success());
    // an untrained rd_image codec checkpoint (epochs=0 skips training)
    let out = run(
        &[
            "train",
            "--run-name",
            "c",
            "--set",
            "loss.variant=rd_image",
            "--set",
            "train.epochs=0",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("runs/c/checkpoint.icmc");
    let img = dir.path().join("runs/d/data/img_00000.png");

    let enc = run(
        &[
            "encode",
            img.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "-o",
            "x.icmb",
        ],
        dir.path(),
    );
    assert!(enc.status.success(), "{}", String::from_utf8_lossy(&enc.stderr));
    let dec = run(
        &[
            "decode",
            "x.icmb",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "-o",
            "rec.png",
        ],
        dir.path(),
    );
    assert!(dec.status.success(), "{}", String::from_utf8_lossy(&dec.stderr));
    assert!(dir.path().join("rec.png").exists());

    // the latent roundtrips exactly: re-encoding the stream's own decode of
    // the latent is byte-identical
    let first = std::fs::read(dir.path().join("x.icmb")).unwrap();
    let enc2 = run(
        &[
            "encode",
            img.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "-o",
            "y.icmb",
        ],
        dir.path(),
    );
    assert!(enc2.status.success());
    let second = std::fs::read(dir.path().join("y.icmb")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn bd_rate_subcommand_recomputes_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "\
curve,point,bpp,quality
task,l1,0.2,0.5
task,l2,0.4,0.7
task,l3,0.8,0.8
task,l4,1.6,0.9
task_aux,l1,0.1,0.5
task_aux,l2,0.2,0.7
task_aux,l3,0.4,0.8
task_aux,l4,0.8,0.9
";
    std::fs::write(dir.path().join("pts.csv"), csv).unwrap();
    let out = run(
        &["bd-rate", "--points", "pts.csv", "-o", "m.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let matrix = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let mut lines = matrix.lines();
    assert_eq!(lines.next().unwrap(), "anchor,task,task_aux");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "task");
    assert_eq!(row[1], "0");
    // uniformly halved bpp at equal quality
    let bd: f64 = row[2].parse().unwrap();
    assert!((bd + 50.0).abs() < 1e-6, "{bd}");
}

#[test]
fn dotted_override_syntax_reaches_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "gen-data",
            "--run-name",
            "ov",
            "--count",
            "1",
            "--data.seed",
            "42",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = std::fs::read_to_string(dir.path().join("runs/ov/config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&cfg).unwrap();
    assert_eq!(v["data"]["seed"], 42);
}
