//! End-to-end checks of the command-line surface: determinism of synth,
//! metrics formatting, the blind-spot verifier, exit codes, and a small
//! train -> denoise -> distill -> student round trip.

use std::path::Path;
use std::process::{Command, Output};

use dbsn_core::image::{self, Image};
use dbsn_core::selftest::smooth_image;
use dbsn_core::tensor::Tensor;

fn dbsn_bin() -> &'static str {
    env!("CARGO_BIN_EXE_dbsn")
}

fn run(args: &[&str]) -> Output {
    Command::new(dbsn_bin()).args(args).output().expect("spawn dbsn")
}

fn save_gradient_image(path: &Path, seed: u64) {
    let img = smooth_image(seed, 32, "t");
    image::save(path, &img).unwrap();
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("a.pgm");
    save_gradient_image(&input, 5);
    let out1 = dir.path().join("b1.pgm");
    let out2 = dir.path().join("b2.pgm");
    for out in [&out1, &out2] {
        let r = run(&[
            "synth",
            "--nlf",
            "awgn:sigma=25",
            "--in",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
    // And the noise actually changed the image.
    assert_ne!(std::fs::read(&out1).unwrap(), std::fs::read(&input).unwrap());
}

#[test]
fn metrics_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("a.pgm");
    save_gradient_image(&input, 6);
    let r = run(&[
        "metrics",
        "--ref",
        input.to_str().unwrap(),
        "--test",
        input.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("psnr=100.000 ssim=1.0000"), "got: {stdout}");
}

#[test]
fn verify_blindspot_passes_on_default_config() {
    let r = run(&["verify-blindspot"]);
    assert!(r.status.success());
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("blind-spot: PASS"), "got: {stdout}");
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let r = run(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(1));
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&r.stdout),
        String::from_utf8_lossy(&r.stderr)
    );
    assert!(text.to_lowercase().contains("usage"), "got: {text}");
}

#[test]
fn user_errors_exit_one() {
    // Bad NLF spec.
    let r = run(&["synth", "--nlf", "poisson:rate=3", "--in", "x.pgm", "--out", "y.pgm"]);
    assert_eq!(r.status.code(), Some(1));
    // Missing file.
    let r = run(&["metrics", "--ref", "/nonexistent.pgm", "--test", "/nonexistent.pgm"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn commands_do_not_mutate_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("a.pgm");
    save_gradient_image(&input, 8);
    let before = std::fs::read(&input).unwrap();
    let _ = run(&[
        "synth",
        "--nlf",
        "hg:alpha=40,delta=10",
        "--in",
        input.to_str().unwrap(),
        "--out",
        dir.path().join("out.pgm").to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(before, std::fs::read(&input).unwrap());
}

/// Minimal end-to-end pipeline exercising every training subcommand with
/// a tiny configuration.
#[test]
fn pipeline_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let noisy_dir = dir.path().join("noisy");
    let clean_dir = dir.path().join("clean");
    std::fs::create_dir_all(&noisy_dir).unwrap();
    std::fs::create_dir_all(&clean_dir).unwrap();
    // Clean images plus synthesized noisy ones.
    for i in 0..2u64 {
        let clean = smooth_image(40 + i, 32, &format!("c{i}"));
        image::save(&clean_dir.join(format!("c{i}.pgm")), &clean).unwrap();
        let noisy = dbsn_core::noise::synthesize(
            &dbsn_core::noise::NoiseLevelFunction::Awgn { sigma: 25.0 },
            &clean.data,
            90 + i,
        )
        .unwrap();
        image::save(
            &noisy_dir.join(format!("n{i}.pgm")),
            &Image { data: noisy, bit_depth: 8, id: None },
        )
        .unwrap();
    }
    let ckpt = dir.path().join("stage1.ckpt");
    let log = dir.path().join("train.csv");
    let r = run(&[
        "train-stage1",
        "--images",
        noisy_dir.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
        "--base-channels",
        "4",
        "--mdc-per-branch",
        "1",
        "--epochs",
        "2",
        "--patch-size",
        "16",
        "--patches-per-epoch",
        "8",
        "--batch-size",
        "2",
        "--seed",
        "3",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(ckpt.exists());
    let csv = std::fs::read_to_string(&log).unwrap();
    assert!(csv.starts_with("epoch,step,loss,lr,wall_ms"));
    assert!(csv.lines().count() > 4);

    // Stage-1 denoising produces an image of the right size.
    let denoised = dir.path().join("denoised.pgm");
    let nlf_map = dir.path().join("nlf.tnsr");
    let r = run(&[
        "denoise-stage1",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--in",
        noisy_dir.join("n0.pgm").to_str().unwrap(),
        "--out",
        denoised.to_str().unwrap(),
        "--nlf-map",
        nlf_map.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let den = image::load(&denoised).unwrap();
    assert_eq!(den.data.shape(), &[1, 32, 32]);
    let planes = Tensor::read_dump(&mut std::fs::File::open(&nlf_map).unwrap()).unwrap();
    assert_eq!(planes.shape(), &[1, 32, 32]);

    // Distillation pairs on disk.
    let pairs_dir = dir.path().join("pairs");
    let r = run(&[
        "distill-pairs",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--clean",
        clean_dir.to_str().unwrap(),
        "--noisy",
        noisy_dir.to_str().unwrap(),
        "--out",
        pairs_dir.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(pairs_dir.join("p1").join("c0.input.tnsr").exists());
    assert!(pairs_dir.join("p2").join("n1.target.tnsr").exists());

    // Student training and plain denoising.
    let student = dir.path().join("student.ckpt");
    let r = run(&[
        "train-student",
        "--pairs",
        pairs_dir.to_str().unwrap(),
        "--out",
        student.to_str().unwrap(),
        "--depth",
        "3",
        "--channels",
        "6",
        "--epochs",
        "2",
        "--patch-size",
        "16",
        "--patches-per-epoch",
        "8",
        "--batch-size",
        "2",
        "--seed",
        "4",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let out = dir.path().join("student_out.pgm");
    let r = run(&[
        "denoise",
        "--in",
        noisy_dir.join("n0.pgm").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--model",
        student.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(image::load(&out).unwrap().data.shape(), &[1, 32, 32]);

    // Pixel-shuffle pipeline over the stage-1 checkpoint.
    let real_out = dir.path().join("real_out.pgm");
    let r = run(&[
        "denoise",
        "--real",
        "--stage1",
        ckpt.to_str().unwrap(),
        "--in",
        noisy_dir.join("n0.pgm").to_str().unwrap(),
        "--out",
        real_out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(image::load(&real_out).unwrap().data.shape(), &[1, 32, 32]);

    // --real without --stage1 is a user error.
    let r = run(&["denoise", "--real", "--in", "a.pgm", "--out", "b.pgm"]);
    assert_eq!(r.status.code(), Some(1));
}
