use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdf-autolabel"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_for_the_stage_fixtures() {
    let out = run(&["gradcheck", "--module", "renderer"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("renderer"));
}

#[test]
fn usage_errors_exit_one_and_data_errors_exit_two() {
    let bad_flag = run(&["gen-scenes", "--bogus"]);
    assert_eq!(code(&bad_flag), 1);
    let bad_module = run(&["gradcheck", "--module", "nope"]);
    assert_eq!(code(&bad_module), 1);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = run(&["autolabel", "--scenes", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent.json"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let config = dir.path().join("run.toml");
    std::fs::write(&config, "unknown_key = 3\n").unwrap();
    let out = run(&[
        "gen-scenes",
        "--config",
        s(&config),
        "--out",
        s(&dir.path().join("x.json")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn scene_generation_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for p in [&a, &b] {
        let out = run(&["gen-scenes", "--out", s(p), "--scenes", "2", "--seed", "5"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn autolabel_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes.json");
    let labels = dir.path().join("labels");
    let table = dir.path().join("eval.csv");
    assert_eq!(
        code(&run(&[
            "gen-scenes",
            "--out",
            s(&scenes),
            "--scenes",
            "2",
            "--seed",
            "3"
        ])),
        0
    );
    let out = run(&[
        "autolabel",
        "--scenes",
        s(&scenes),
        "--out",
        s(&labels),
        "--stage",
        "easy",
        "--iterations",
        "5",
        "--jobs",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let records = std::fs::read_to_string(labels.join("records.csv")).unwrap();
    assert!(records.lines().count() >= 2);
    assert!(labels.join("pool.jsonl").exists());

    let out = run(&[
        "eval",
        "--labels",
        s(&labels.join("pool.jsonl")),
        "--ground-truth",
        s(&scenes),
        "--csv",
        s(&table),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    for m in ["bev@0.5", "3d@0.5", "ns@0.5", "ns@1"] {
        assert!(csv.contains(m), "{m} missing from {csv}");
    }
}

#[test]
fn render_writes_three_images() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("fixture");
    let out = run(&["render", "--out-prefix", s(&prefix), "--grid-res", "24"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for ext in ["nocs.ppm", "mask.ppm", "depth.txt"] {
        let p = dir.path().join(format!("fixture.{ext}"));
        assert!(std::fs::metadata(&p).unwrap().len() > 0, "{}", p.display());
    }
    let ppm = std::fs::read(dir.path().join("fixture.nocs.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6"));
}
