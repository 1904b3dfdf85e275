use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gastereo::io::read_pfm;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gastereo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a synthetic pair into `dir` and returns its directory.
fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("scene");
    let mut args = vec!["synth", "--out", s(&out), "--height", "24", "--width", "48"];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn eval_self_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let sc = synth(dir.path(), &["--band", "4"]);
    let gt = sc.join("gt.pfm");
    let o = run(&["eval", s(&gt), s(&gt)]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("#METRIC eval epe=0.000000000"), "{out}");
    assert!(
        out.contains("rate_1=0.000000000 rate_3=0.000000000"),
        "{out}"
    );
}

#[test]
fn sgm_recovers_two_pixel_shift() {
    let dir = tempfile::tempdir().unwrap();
    let sc = synth(dir.path(), &["--band", "0", "--shift", "2"]);
    let out = dir.path().join("d.pfm");
    let o = run(&[
        "match",
        s(&sc.join("left.pgm")),
        s(&sc.join("right.pgm")),
        "--out",
        s(&out),
        "--dmax",
        "8",
        "--method",
        "sgm",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let map = read_pfm(&out).unwrap();
    let border = 8;
    let errs: Vec<f64> = (0..map.height())
        .flat_map(|y| (border..map.width()).map(move |x| (y, x)))
        .map(|(y, x)| (map.get(y, x).unwrap() - 2.0).abs())
        .collect();
    let epe = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(epe < 0.5, "{epe}");
}

#[test]
fn serial_and_parallel_outputs_match() {
    let dir = tempfile::tempdir().unwrap();
    let sc = synth(dir.path(), &["--band", "6"]);
    let (l, r) = (sc.join("left.pgm"), sc.join("right.pgm"));
    for method in ["sgm", "ga", "filter"] {
        let a = dir.path().join(format!("{method}_par.pfm"));
        let b = dir.path().join(format!("{method}_ser.pfm"));
        let base = ["match", s(&l), s(&r), "--dmax", "16", "--method", method];
        let mut pa = base.to_vec();
        pa.extend(["--out", s(&a)]);
        let mut pb = base.to_vec();
        pb.extend(["--out", s(&b), "--serial"]);
        assert_eq!(code(&run(&pa)), 0);
        assert_eq!(code(&run(&pb)), 0);
        assert_eq!(
            std::fs::read(&a).unwrap(),
            std::fs::read(&b).unwrap(),
            "{method}"
        );
    }
}

#[test]
fn corrupted_gradients_fail_gradcheck() {
    let o = run(&["gradcheck", "--seeds", "1", "--inject-fault"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
    let o = run(&["gradcheck", "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["match", "--bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(
        code(&run(&[
            "match", "a.pgm", "b.pgm", "--out", "x.pfm", "--method", "census"
        ])),
        1
    );
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn io_errors_exit_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.pfm");
    let missing = dir.path().join("missing.pgm");
    let o = run(&["match", s(&missing), s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());

    let bad = dir.path().join("bad.pgm");
    std::fs::write(&bad, b"P9\n1 1\n255\n\x00").unwrap();
    let o = run(&["match", s(&bad), s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at byte 0"));
}

#[test]
fn failure_after_matching_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let sc = synth(dir.path(), &["--band", "4"]);
    // ground truth of a different size
    let other = dir.path().join("other");
    assert_eq!(
        code(&run(&[
            "synth",
            "--out",
            s(&other),
            "--height",
            "10",
            "--width",
            "20",
            "--band",
            "2"
        ])),
        0
    );
    let out = dir.path().join("d.pfm");
    let o = run(&[
        "match",
        s(&sc.join("left.pgm")),
        s(&sc.join("right.pgm")),
        "--out",
        s(&out),
        "--dmax",
        "16",
        "--gt",
        s(&other.join("gt.pfm")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(!out.exists());
}

#[test]
fn trained_weights_drive_matching() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    let o = run(&[
        "train",
        "--out",
        s(&w),
        "--height",
        "24",
        "--width",
        "48",
        "--band",
        "4",
        "--steps",
        "5",
        "--sga-layers",
        "1",
        "--lga",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(
        out.lines()
            .filter(|l| l.starts_with("#METRIC train step="))
            .count(),
        5
    );
    assert!(w.exists());

    let sc = synth(dir.path(), &["--band", "4", "--seed", "3"]);
    let d = dir.path().join("d.pfm");
    let (l, r) = (sc.join("left.pgm"), sc.join("right.pgm"));
    let args = [
        "match",
        s(&l),
        s(&r),
        "--out",
        s(&d),
        "--dmax",
        "16",
        "--method",
        "ga",
        "--weights",
        s(&w),
    ];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.exists());

    let mut wrong = args.to_vec();
    wrong.extend(["--sga-layers", "2"]);
    assert_eq!(code(&run(&wrong)), 1);

    assert_eq!(code(&run(&["train", "--out", s(&w), "--steps", "0"])), 1);
}

#[test]
fn bench_prints_flop_table() {
    let o = run(&["bench", "--no-timing"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("#METRIC flops kind=conv3d k=3 c=32 n=1 value=1728"));
    assert!(out.contains("#METRIC ratio c=128 sga=40 conv3d=6912"));
    assert!(out.contains("below_hundredth=true"));
}
