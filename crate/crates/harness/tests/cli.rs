use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
gaussian_count = 60
views = 2

[synth.camera]
focal = 48.0
width = 48
height = 48

[synth.trajectory]
pose_count = 40
loop_pairs = [[0, 39], [10, 30]]
"#;

fn easlam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_easlam")).args(args).output().expect("spawn easlam")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_render_pgo_and_ate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("synth");
    let o = easlam(&["synth", "--config", p(&cfg), "--seed", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["scene.toml", "cameras.toml", "camera_00.toml", "gt_00.ppm", "truth.tum", "graph.g2o"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }

    let prefix = dir.path().join("view");
    let o = easlam(&[
        "render",
        "--scene",
        p(&out.join("scene.toml")),
        "--camera",
        p(&out.join("camera_00.toml")),
        "--mode",
        "point",
        "--scale",
        "0.5",
        "--out",
        p(&prefix),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let img: easlam_core::image::Image<f64> = easlam_core::image::load_ppm(&dir.path().join("view.ppm")).unwrap();
    assert_eq!((img.width, img.height), (24, 24));

    let optimized = dir.path().join("opt.g2o");
    let report = dir.path().join("pgo.toml");
    let o = easlam(&[
        "pgo",
        "--input",
        p(&out.join("graph.g2o")),
        "--output",
        p(&optimized),
        "--report",
        p(&report),
        "--lambda-smo",
        "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(optimized.is_file() && report.is_file());

    let o = easlam(&["eval-ate", "--estimate", p(&out.join("truth.tum")), "--truth", p(&out.join("truth.tum"))]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let value: f64 = text.split_whitespace().filter_map(|t| t.parse().ok()).next_back().expect("a number");
    assert!(value.abs() < 1e-12, "{text}");
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(easlam(&["synth", "--config", p(&cfg), "--seed", "9", "--out", p(out)]).status.success());
    }
    for name in ["scene.toml", "gt_01.ppm", "graph.g2o", "truth.tum"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn quad_bench_writes_a_table() {
    let o = easlam(&["quad-bench", "--cases", "20", "--grid", "64", "--ks", "4,16"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<_> = text.lines().filter(|l| !l.is_empty()).collect();
    assert!(lines[0].starts_with("k\t"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.g2o");
    let o = easlam(&["pgo", "--input", p(&missing), "--output", p(&dir.path().join("x.g2o"))]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.g2o");
    fs::write(&bad, "VERTEX_SE3:QUAT 0 0 0 0 0 0 0\n").unwrap();
    let o = easlam(&["pgo", "--input", p(&bad), "--output", p(&dir.path().join("x.g2o"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = easlam(&["render", "--scene", "a", "--camera", "b", "--mode", "bogus", "--out", "c"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[synth]\ngaussian_count = 0\n").unwrap();
    let o = easlam(&["synth", "--config", p(&cfg), "--out", p(&dir.path().join("s"))]);
    assert_eq!(o.status.code(), Some(2));
}
