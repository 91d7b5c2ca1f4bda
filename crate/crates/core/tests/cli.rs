//! End-to-end runs of the `charmask` binary.

use std::path::Path;
use std::process::{Command, Output};

use charmask::harness::metrics::{read_log, METRICS_FILE};
use charmask::harness::viz::Rgb8Image;

fn charmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_charmask"))
        .args(["--sequential"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = charmask(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_viz() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen-data", "--count", "6", "--out", s(&data), "--seed", "3"]);

    let out = ok(&[
        "train", "--corpus", s(&data), "--out", s(&run), "--steps", "2", "--batch", "2", "--eval-every", "1",
        "--eval-samples", "2",
    ]);
    assert!(out.starts_with("step=2 "), "{out}");
    let log = read_log(&run.join(METRICS_FILE)).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(log.iter().all(|r| r.miou.is_some()));
    for f in ["checkpoint.bin", "checkpoint_000000.bin", "checkpoint_000002.bin", "config.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ck = run.join("checkpoint.bin");
    let out = ok(&["eval", "--checkpoint", s(&ck), "--corpus", s(&data)]);
    assert!(out.starts_with("mIoU="), "{out}");
    assert!(out.trim_end().ends_with("samples=6"), "{out}");
    let out = ok(&["eval", "--checkpoint", s(&ck), "--corpus", s(&data), "--held-out", "2"]);
    assert!(out.trim_end().ends_with("samples=2"), "{out}");

    let ppm = tmp.path().join("a.ppm");
    ok(&["viz", "--checkpoint", s(&ck), "--corpus", s(&data), "--index", "1", "--out", s(&ppm)]);
    let img = Rgb8Image::from_ppm(&std::fs::read(&ppm).unwrap()).unwrap();
    assert_eq!(img.height, 32);
    assert_eq!(img.width % 32, 0);
    ok(&["viz", "--checkpoint", s(&ck), "--corpus", s(&data), "--out", s(&ppm), "--masks"]);
}

#[test]
fn train_with_zero_steps_only_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen-data", "--count", "3", "--out", s(&data)]);
    let out = ok(&["train", "--corpus", s(&data), "--out", s(&run), "--steps", "0", "--eval-samples", "2"]);
    assert!(out.starts_with("step=0 total=- mIoU="), "{out}");
    assert_eq!(read_log(&run.join(METRICS_FILE)).unwrap().len(), 1);
}

#[test]
fn ablate_prints_one_row_per_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "4", "--out", s(&data), "--height", "16", "--width", "32", "--n-max", "3", "--max-len", "3"]);
    let out = ok(&[
        "ablate", "--corpus", s(&data), "--preset", "losses", "--steps", "2", "--batch", "2", "--eval-samples", "2",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6, "{out}");
    for label in ["Base", "+L_mask", "+L_attn", "+L_align", "+L_id"] {
        assert!(lines.iter().any(|l| l.contains(label)), "no row for {label}:\n{out}");
    }
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = charmask(&["eval", "--checkpoint", s(&missing), "--corpus", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(charmask(&["train"]).status.code(), Some(2));
}
