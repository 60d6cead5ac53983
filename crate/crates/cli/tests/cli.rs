use std::path::Path;
use std::process::{Command, Output};

use roomlayout::model::ModelConfig;
use roomlayout::pipeline::{AugmentToggles, SynthSpec, TrainConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roomlayout"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let spec = SynthSpec {
        rooms: 3,
        test_rooms: 1,
        ..SynthSpec::default()
    };
    let spec_path = dir.join("spec.json");
    write_json(&spec_path, &spec);
    let data = dir.join("data");
    ok(&["synth", "--spec", p(&spec_path), "--out", p(&data), "--seed", "4"]);
    data.join("manifest.json")
}

fn train_config(max_steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        lr,
        batch_size: 4,
        max_steps: Some(max_steps),
        augment: AugmentToggles::none(),
        ..TrainConfig::default()
    }
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let m = read_json(&manifest);
    assert_eq!(m["records"].as_array().unwrap().len(), 6);

    let config = dir.path().join("train.json");
    write_json(&config, &train_config(3, 1e-3));
    let run_dir = dir.path().join("run");
    ok(&[
        "train",
        "--manifest",
        p(&manifest),
        "--config",
        p(&config),
        "--out",
        p(&run_dir),
    ]);
    let ckpt = run_dir.join("final.ckpt");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run_dir.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let entry: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(entry["l_total"].as_f64().unwrap().is_finite());
    }

    let report = dir.path().join("report.json");
    let overlays = dir.path().join("overlays");
    ok(&[
        "eval",
        "--manifest",
        p(&manifest),
        "--ckpt",
        p(&ckpt),
        "--split",
        "test",
        "--report",
        p(&report),
        "--overlay",
        p(&overlays),
    ]);
    let r = read_json(&report);
    assert_eq!(r["n_pano"], 1);
    assert_eq!(r["n_pp"], 1);
    let iou = r["pano"]["iou2d"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));
    assert!(std::fs::read_dir(&overlays).unwrap().count() >= 2);

    // sequential and parallel evaluation write identical reports
    let report_seq = dir.path().join("report_seq.json");
    ok(&[
        "--sequential",
        "eval",
        "--manifest",
        p(&manifest),
        "--ckpt",
        p(&ckpt),
        "--split",
        "test",
        "--report",
        p(&report_seq),
    ]);
    let strip = |mut v: serde_json::Value| {
        v.as_object_mut().unwrap().remove("samples");
        v
    };
    assert_eq!(strip(r), strip(read_json(&report_seq)));
}

#[test]
fn file_eval_scores_identical_boundaries_as_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let m = read_json(&manifest);
    let root = manifest.parent().unwrap();
    for (domain, rec) in [("pano", &m["records"][0]), ("pp", &m["records"][1])] {
        assert_eq!(rec["domain"], domain);
        let ann = root.join(rec["annotation"].as_str().unwrap());
        let report = dir.path().join(format!("{domain}.json"));
        let overlay = dir.path().join(format!("{domain}.png"));
        ok(&[
            "eval",
            "--pred",
            p(&ann),
            "--gt",
            p(&ann),
            "--domain",
            domain,
            "--report",
            p(&report),
            "--overlay",
            p(&overlay),
        ]);
        let r = read_json(&report);
        let scores = r.as_object().unwrap();
        assert!(!scores.is_empty());
        for v in scores.values() {
            assert!((v.as_f64().unwrap() - 1.0).abs() < 1e-9, "{domain}: {r}");
        }
        assert!(overlay.exists());
    }
}

#[test]
fn project_then_shift_levels_the_patch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let m = read_json(&manifest);
    let rec = &m["records"][1];
    let img = manifest.parent().unwrap().join(rec["image"].as_str().unwrap());
    let hfov = rec["hfov_deg"].as_f64().unwrap().to_string();
    let patch = dir.path().join("patch");
    let stdout = ok(&[
        "project",
        "--img",
        p(&img),
        "--hfov",
        &hfov,
        "--pitch",
        "-12",
        "--width",
        "256",
        "--out",
        p(&patch),
    ]);
    assert!(stdout.contains("span [96, 160)"), "{stdout}");
    let sidecar = read_json(&patch.join("patch.json"));
    assert!((sidecar["pitch"].as_f64().unwrap() + 12f64.to_radians()).abs() < 1e-12);
    assert_eq!(sidecar["span"], serde_json::json!([96, 160]));

    let level = dir.path().join("level");
    ok(&["shift", "--in", p(&patch), "--delta-lat", "12deg", "--out", p(&level)]);
    let sidecar = read_json(&level.join("patch.json"));
    assert!(sidecar["pitch"].as_f64().unwrap().abs() < 1e-12);

    let cropped = dir.path().join("cropped");
    ok(&[
        "project",
        "--img",
        p(&img),
        "--hfov",
        &hfov,
        "--width",
        "256",
        "--crop",
        "--out",
        p(&cropped),
    ]);
    assert!(cropped.join("image.png").exists());
}

#[test]
fn flops_reports_branch_ratio() {
    let stdout = ok(&["flops", "--preset", "tiny"]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let ratio = v["ratio"]["backbone"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio < 1.0, "{v}");

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.json");
    write_json(&config, &train_config(1, 1e-3));
    let from_file: serde_json::Value = serde_json::from_str(&ok(&["flops", "--config", p(&config)])).unwrap();
    assert_eq!(from_file["ratio"], v["ratio"]);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let missing = dir.path().join("missing.json");

    // configuration errors
    assert_eq!(code(&run(&["flops", "--config", p(&bad)])), 2);
    assert_eq!(code(&run(&["synth", "--spec", p(&bad), "--out", p(dir.path())])), 2);
    assert_eq!(code(&run(&["shift", "--in", p(dir.path()), "--delta-lat", "ten"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);

    // data errors
    assert_eq!(
        code(&run(&["train", "--manifest", p(&missing), "--out", p(dir.path())])),
        3
    );
    assert_eq!(
        code(&run(&[
            "project",
            "--img",
            p(&missing),
            "--hfov",
            "90",
            "--out",
            p(&dir.path().join("o"))
        ])),
        3
    );

    let manifest = small_dataset(dir.path());
    let rec = &read_json(&manifest)["records"][1];
    let img = manifest.parent().unwrap().join(rec["image"].as_str().unwrap());
    // pitch beyond half the vertical field of view cannot be translated
    let out = run(&[
        "project",
        "--img",
        p(&img),
        "--hfov",
        "90",
        "--pitch",
        "60",
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);

    // a step size that overflows the parameters is a numeric failure
    let config = dir.path().join("huge_lr.json");
    write_json(&config, &train_config(20, 1e300));
    let out = run(&[
        "train",
        "--manifest",
        p(&manifest),
        "--config",
        p(&config),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
