use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn facefit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facefit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = facefit(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) {
    let (fa, fb) = (files(a), files(b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a).unwrap(), y.strip_prefix(b).unwrap());
        assert!(
            fs::read(x).unwrap() == fs::read(y).unwrap(),
            "{} differs",
            x.display()
        );
    }
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(facefit(&[]).status.code(), Some(2));
    assert_eq!(facefit(&["fit", "--template"]).status.code(), Some(2));
    assert_eq!(
        facefit(&["synth", "--out", "x", "--resolution", "big"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(facefit(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = facefit(&["masks", "--template", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn bad_config_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[fit]\nstage_one = 3\n").unwrap();
    let out = facefit(&[
        "synth",
        "--out",
        s(&tmp.path().join("o")),
        "--config",
        s(&cfg),
        "--frames",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn masks_are_written_in_range() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&[
        "synth",
        "--out",
        s(&scene),
        "--frames",
        "1",
        "--resolution",
        "32x32",
    ]);
    let out = tmp.path().join("m");
    ok(&[
        "masks",
        "--template",
        s(&scene.join("template")),
        "--out",
        s(&out),
    ]);
    let pngs: Vec<_> = files(&out.join("masks"))
        .into_iter()
        .filter(|p| p.extension().unwrap() == "png")
        .collect();
    assert_eq!(pngs.len(), 56);
    for p in &pngs {
        let img = image::open(p).unwrap().into_luma16();
        assert!(img.pixels().any(|v| v.0[0] > 0));
    }
}

#[test]
fn synth_is_reproducible_and_render_closes_the_loop() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&[
            "synth",
            "--out",
            s(dir),
            "--seed",
            "7",
            "--frames",
            "2",
            "--resolution",
            "48x64",
            "--correction-scale",
            "1",
        ]);
    }
    same_tree(&a, &b);

    let r1 = tmp.path().join("r1");
    let render = |out: &Path| {
        ok(&[
            "render",
            "--template",
            s(&a.join("gt_model")),
            "--params",
            s(&a.join("gt_params.jsonl")),
            "--scene",
            s(&a),
            "--out",
            s(out),
        ])
    };
    render(&r1);
    for n in 0..2 {
        let name = format!("{n:04}.png");
        assert!(
            fs::read(r1.join("frames").join(&name)).unwrap()
                == fs::read(a.join("frames").join(&name)).unwrap()
        );
    }
    let r2 = tmp.path().join("r2");
    render(&r2);
    same_tree(&r1, &r2);
}

#[test]
fn fit_then_eval_track_and_retarget() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&[
        "synth",
        "--out",
        s(&scene),
        "--seed",
        "2",
        "--resolution",
        "112x112",
    ]);
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "[fit]\nstage1_steps = 1500\nmodel_delay = 300\ntrack_steps = 50\n",
    )
    .unwrap();
    let fitted = tmp.path().join("fit");
    let template = scene.join("template");
    ok(&[
        "fit",
        "--template",
        s(&template),
        "--scene",
        s(&scene),
        "--out",
        s(&fitted),
        "--config",
        s(&cfg),
    ]);
    assert!(fitted.join("params.jsonl").exists());
    let trace = fs::read_to_string(fitted.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1501);

    let report = tmp.path().join("eval");
    ok(&[
        "eval",
        "--template",
        s(&fitted),
        "--scene",
        s(&scene),
        "--params",
        s(&fitted.join("params.jsonl")),
        "--out",
        s(&report),
        "--gt",
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("eval.json")).unwrap()).unwrap();
    let mae = json["coefficient_mae"].as_f64().unwrap();
    assert!(mae <= 0.05, "coefficient MAE {mae}");
    assert!(json["total"].as_f64().unwrap() > 0.0);

    let tracked = tmp.path().join("track");
    ok(&[
        "track",
        "--template",
        s(&fitted),
        "--scene",
        s(&scene),
        "--out",
        s(&tracked),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(
        fs::read_to_string(tracked.join("params.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let re = tmp.path().join("retarget");
    ok(&[
        "retarget",
        "--template",
        s(&fitted),
        "--params",
        s(&fitted.join("params.jsonl")),
        "--out",
        s(&re),
        "--transfer-pose",
        "--resolution",
        "64x64",
    ]);
    assert_eq!(files(&re.join("frames")).len(), 4);
    let img = image::open(re.join("frames/0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}
