//! The `psrpn` binary: exit codes, golden evaluation output and
//! deterministic proposal files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn psrpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psrpn")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn anchors_audit_exit_codes() {
    let out = psrpn(&["anchors", "--size", "640", "--mode", "window"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("228950"));
    let out = psrpn(&["anchors", "--mode", "grid3"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("102300"));
    assert_eq!(code(&psrpn(&["anchors", "--mode", "grid5"])), 0);
    // Sizes without published numbers have nothing to mismatch.
    assert_eq!(code(&psrpn(&["anchors", "--size", "128"])), 0);
    assert_eq!(code(&psrpn(&["anchors", "--mode", "diagonal"])), 2);
    assert_eq!(code(&psrpn(&["anchors", "--size", "100"])), 2);
}

#[test]
fn params_audit_prints_identities() {
    let out = psrpn(&["params"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for n in ["1180672", "590336", "16770"] {
        assert!(text.contains(n), "{n} missing:\n{text}");
    }
    assert!(!text.contains("MISMATCH"));
    let out = psrpn(&["params", "--variant", "lk-ns", "--ps", "false"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("lk-ns ") && !l.contains(" - ")).count(), 1);
    assert_eq!(code(&psrpn(&["params", "--variant", "huge"])), 2);
}

#[test]
fn gradcheck_filter_and_errors() {
    let out = psrpn(&["gradcheck", "--seeds", "2", "--filter", "sigmoid"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("pass"));
    assert_eq!(code(&psrpn(&["gradcheck", "--filter", "no such case"])), 2);
    assert_eq!(code(&psrpn(&["gradcheck", "--seeds", "0"])), 2);
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "version = 1\nseeed = 3\n").unwrap();
    let out = psrpn(&["--config", s(&cfg), "anchors"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeed"));
    assert_eq!(code(&psrpn(&["--config", "/no/such/file.toml", "anchors"])), 2);
}

#[test]
fn eval_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = psrpn(&[
        "eval",
        "--proposals",
        s(&fixture("eval/proposals")),
        "--annotations",
        s(&fixture("eval/annotations.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["summary.csv", "curves.csv"] {
        let got = std::fs::read_to_string(dir.path().join(f)).unwrap();
        let want = std::fs::read_to_string(fixture("eval/golden").join(f)).unwrap();
        assert_eq!(got, want, "{f}");
    }
    // Hand-derived: the crowd-only proposal consumes budget, the shifted
    // box clears 6 of 10 thresholds and the second image 8 of 10.
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("3,2,0.800000,0.800000,0.800000,0.775000,"));

    let svg = dir.path().join("curves.svg");
    let out = psrpn(&["plot", "--report", s(&dir.path().join("report.json")), "--out", s(&svg)]);
    assert_eq!(code(&out), 0);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn eval_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = |p: &Path| {
        psrpn(&[
            "eval",
            "--proposals",
            s(p),
            "--annotations",
            s(&fixture("eval/annotations.json")),
            "--out",
            s(dir.path()),
        ])
    };
    assert_eq!(code(&out(&dir.path().join("missing"))), 2);
    let props = dir.path().join("props");
    std::fs::create_dir_all(&props).unwrap();
    std::fs::write(props.join("manifest.txt"), "# config x\n99 000099.txt\n").unwrap();
    std::fs::write(props.join("000099.txt"), "0 0 1 1 0.5\n").unwrap();
    assert_eq!(code(&out(&props)), 2);
    std::fs::write(props.join("manifest.txt"), "# config x\n1 000099.txt\n").unwrap();
    std::fs::write(props.join("000099.txt"), "0 0 1 0.5\n").unwrap();
    assert_eq!(code(&out(&props)), 2);
}

#[test]
fn train_propose_eval_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel);
    let out = psrpn(&["synth", "--offset", "500", "--count", "3", "--out", s(&p("data"))]);
    assert_eq!(code(&out), 0);
    let out = psrpn(&["--seed", "3", "train", "--epochs", "1", "--images", "synth:0:6", "--out", s(&p("run"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["run/checkpoint/manifest.toml", "run/epochs.csv", "run/config.toml"] {
        assert!(p(f).exists(), "{f}");
    }
    let config_hash = std::fs::read_to_string(p("run/epochs.csv")).unwrap();
    assert!(config_hash.starts_with("# config "));

    let ckpt = p("run/checkpoint");
    for (images, dst) in [(s(&p("data/annotations.json")).to_string(), "a"), ("synth:500:3".to_string(), "b")] {
        let out = psrpn(&["propose", "--checkpoint", s(&ckpt), "--images", &images, "--out", s(&p(dst))]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    // Files on disk and the generator give the same pixels, so the same bytes.
    for f in ["manifest.txt", "000500.txt", "000501.txt", "000502.txt"] {
        let a = std::fs::read(p("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(p("b").join(f)).unwrap(), "{f}");
        if f != "manifest.txt" {
            let text = String::from_utf8(a).unwrap();
            let scores: Vec<f64> = text.lines().map(|l| l.rsplit(' ').next().unwrap().parse().unwrap()).collect();
            assert!(!scores.is_empty() && scores.windows(2).all(|w| w[0] >= w[1]));
            for l in text.lines() {
                let v: Vec<f64> = l.split(' ').map(|t| t.parse().unwrap()).collect();
                assert!(v[0] >= 0.0 && v[1] >= 0.0 && v[2] <= 128.0 && v[3] <= 128.0 && v[0] < v[2] && v[1] < v[3]);
            }
        }
    }
    let out = psrpn(&["eval", "--proposals", s(&p("a")), "--annotations", "synth:500:3", "--out", s(&p("ev"))]);
    assert_eq!(code(&out), 0);
    let summary = std::fs::read_to_string(p("ev/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("3,3,"));
    assert_eq!(
        code(&psrpn(&["propose", "--checkpoint", s(&p("nope")), "--images", "synth:0:1", "--out", s(&p("c"))])),
        2
    );
    assert_eq!(code(&psrpn(&["propose", "--checkpoint", s(&ckpt), "--images", "synth:x", "--out", s(&p("c"))])), 2);
}
