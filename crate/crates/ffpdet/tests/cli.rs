use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ffpdet::config::GlobalConfig;
use ffpdet::synth::SceneSpec;
use ffpdet::train::TrainConfig;
use ffpdet_core::gradcheck::tiny_config;

fn ffpdet(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffpdet"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("FFPDET_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn analyze_reports_bottleneck_and_rates() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ffpdet(dir.path(), &["analyze"]));
    assert!(out.contains("10496"), "{out}");
    assert!(out.contains("589824"), "{out}");

    let out = stdout(&ffpdet(dir.path(), &["analyze", "--rates", "1,2,5"]));
    assert!(out.contains("L: 1 2 5"), "{out}");
    assert!(out.contains("gridding: no"), "{out}");

    let out = stdout(&ffpdet(dir.path(), &["--machine", "analyze", "--rates", "2,2"]));
    assert!(out.contains("gridding=true"), "{out}");
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = ffpdet(dir.path(), &["analyze", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    fs::write(dir.path().join("bad.toml"), "[head]\ntower_depth = \"four\"\n").unwrap();
    let o = ffpdet(dir.path(), &["--config", "bad.toml", "analyze"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let o = ffpdet(dir.path(), &["analyze", "--rates", "1,0,2"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        ["synth", "--preset", "bogie-key-like", "--width", "64", "--height", "64", "--train", "4", "--test", "2", "--out", out]
    };
    let a = stdout(&ffpdet(dir.path(), &args("a")));
    let b = stdout(&ffpdet(dir.path(), &args("b")));
    assert_eq!(a.replace("/a\n", ""), b.replace("/b\n", ""));
    let (x, y) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert!(x.len() > 6);
    assert!(x == y, "generated trees differ");
}

/// Relative path and contents of every file under `root`, sorted.
fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_train_eval_bench_viz() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let mut cfg = GlobalConfig {
        detector: tiny_config(),
        scene: SceneSpec::bogie_key_like().with_size(96, 64),
        ..GlobalConfig::default()
    };
    cfg.train = TrainConfig {
        batch_size: 2,
        iterations: 3,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    fs::write(w.join("tiny.toml"), cfg.render()).unwrap();
    let with = |args: &[&str]| {
        let mut v = vec!["--config", "tiny.toml"];
        v.extend_from_slice(args);
        ffpdet(w, &v)
    };

    stdout(&with(&["synth", "--train", "6", "--test", "4"]));
    let out = stdout(&with(&["--machine", "train", "--deterministic", "--out", "run"]));
    assert!(out.contains("iterations=3"), "{out}");
    assert!(w.join("run/checkpoint.bin").exists());
    let curve = fs::read_to_string(w.join("run/loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    let e1 = stdout(&with(&["--machine", "eval", "--detections", "d1.txt"]));
    let e2 = stdout(&with(&["--machine", "eval", "--detections", "d2.txt"]));
    assert_eq!(e1, e2);
    assert!(e1.contains("cdr="), "{e1}");
    assert_eq!(fs::read(w.join("d1.txt")).unwrap(), fs::read(w.join("d2.txt")).unwrap());
    stdout(&with(&["eval", "--with-nms"]));

    let b = stdout(&with(&["--machine", "bench", "--warmup", "0", "--repetitions", "1", "--images", "2"]));
    assert!(b.contains("test_mean_s="), "{b}");

    let v = stdout(&with(&["--machine", "viz", "--tap", "fea_post", "--level", "3", "--out", "p3.pgm"]));
    assert!(v.contains("width=12"), "{v}");
    assert!(w.join("p3.pgm").exists());
}
