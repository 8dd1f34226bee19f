use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speech-inpaint"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
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

const TINY: &str = "preset = toy\nk = 1\nphase1_steps = 4\nphase2_steps = 2\ncheckpoint_every = 2\nbatch_size = 2\ngriffin_lim_iters = 4\n";

#[test]
fn train_eval_inpaint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ckpt");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();

    let msg = ok(&["gen-toy", "--out", s(&data), "--size", "6", "--seed", "3"]);
    assert!(msg.contains("6 utterances"));
    assert!(data.join("toy00000.wav").exists() && data.join("toy00000.txt").exists());

    ok(&["train", "--phase", "1", "--config", s(&cfg), "--data", s(&data), "--ckpt-out", s(&ckpt), "--seed", "1"]);
    for f in ["phase1_step00000002.spkt", "phase1_step00000004.spkt", "latest.spkt"] {
        assert!(ckpt.join(f).exists(), "{f}");
    }
    let p1 = ckpt.join("phase1_step00000004.spkt");
    let p2 = dir.path().join("p2");
    ok(&["train", "--phase", "2", "--config", s(&cfg), "--data", s(&data), "--ckpt-out", s(&p2), "--resume", s(&p1), "--seed", "2"]);
    assert!(p2.join("phase2_step00000002.spkt").exists());

    let report = ok(&["eval", "--ckpt", s(&p2.join("latest.spkt")), "--data", s(&data)]);
    assert!(report.contains("gap_l1") && report.contains("symbol_accuracy"), "{report}");

    let wav = data.join("toy00001.wav");
    let txt = data.join("toy00001.txt");
    let out_a = dir.path().join("a.wav");
    let out_b = dir.path().join("b.wav");
    for out in [&out_a, &out_b] {
        ok(&[
            "inpaint", "--audio", s(&wav), "--text", s(&txt), "--ckpt", s(&p1), "--gap-start-ms", "1000",
            "--gap-len-ms", "800", "--stitch", "--out", s(out),
        ]);
    }
    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());

    // no zero run in the toy audio, so auto detection must fail cleanly
    let out = bin(&["inpaint", "--audio", s(&wav), "--text", s(&txt), "--ckpt", s(&p1), "--out", s(&out_a)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gap"));
}

#[test]
fn config_errors_are_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "preset = toy\n# fine\nlearning_rate = 3\n").unwrap();
    let out = bin(&["train", "--phase", "1", "--config", s(&cfg), "--data", "x", "--ckpt-out", "y"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("learning_rate"), "{err}");
}

#[test]
fn phase2_requires_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = bin(&["train", "--phase", "2", "--config", s(&cfg), "--data", "x", "--ckpt-out", "y"]);
    assert!(!out.status.success());
    assert!(!bin(&["train", "--phase", "3", "--config", s(&cfg), "--data", "x", "--ckpt-out", "y"]).status.success());
}

#[test]
fn grad_check_and_bench_commands() {
    let g = ok(&["grad-check", "--seeds", "1"]);
    assert!(g.contains("MatMul") && g.contains("toy generator loss") && !g.contains("FAIL"), "{g}");
    let b = ok(&["bench-scaling", "--lengths", "240,480", "--runs", "1"]);
    assert!(b.contains("480 -> 960 patches"), "{b}");
}
