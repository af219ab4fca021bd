use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dam"))
        .args(args)
        .output()
        .expect("dam runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let config = toy_config();
    let mut args = vec!["gen-data", "--config", s(&config), "--out", s(&data)];
    args.extend_from_slice(extra);
    let out = dam(&args);
    assert_eq!(code(&out), 0, "{}", text(&out));
    data
}

fn train(config: &Path, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--config",
        s(config),
        "--data",
        s(data),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    dam(&args)
}

fn log_lines(run: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_fills_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(&dir.path().join("a"), &[]);
    let b = gen(&dir.path().join("b"), &[]);
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(
        manifest,
        fs::read_to_string(b.join("manifest.json")).unwrap()
    );
    let m: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    for (split, count) in [("train", 48), ("val", 8), ("test", 16)] {
        assert_eq!(m[split]["samples"].as_array().unwrap().len(), count);
        assert_eq!(fs::read_dir(a.join(split)).unwrap().count(), 2 * count);
    }
    let first = "train/00000_depth.dat1";
    assert_eq!(
        fs::read(a.join(first)).unwrap(),
        fs::read(b.join(first)).unwrap()
    );
}

#[test]
fn gen_data_prints_mean_depth_and_rejects_bad_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let out = dam(&[
        "gen-data",
        "--config",
        s(&toy_config()),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert!(text(&out).contains("mean depth"));
    let bad = dam(&[
        "gen-data",
        "--config",
        s(&toy_config()),
        "--out",
        s(&dir.path().join("bad")),
        "--set",
        "data.test.distance_mm=[3000.0, 2000.0]",
    ]);
    assert_eq!(code(&bad), 2);
    assert!(text(&bad).contains("distance range"), "{}", text(&bad));
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), &[]);
    let run = dir.path().join("run");
    let out = train(&toy_config(), &data, &run, &["--set", "train.iterations=0"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    assert!(run.join("last/manifest.json").exists());
    assert!(!run.join("best").exists());
    assert!(log_lines(&run).is_empty());
}

#[test]
fn training_lowers_loss_and_resume_continues_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), &[]);
    let run = dir.path().join("run");
    let out = train(
        &toy_config(),
        &data,
        &run,
        &["--set", "train.iterations=500"],
    );
    assert_eq!(code(&out), 0, "{}", text(&out));
    let log = log_lines(&run);
    assert_eq!(log.len(), 500);
    let first = log[0]["loss"].as_f64().unwrap();
    let last = log[499]["loss"].as_f64().unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(run.join("best/manifest.json").exists());

    let resumed = train(
        &toy_config(),
        &data,
        &run,
        &[
            "--set",
            "train.iterations=520",
            "--resume",
            s(&run.join("last")),
        ],
    );
    assert_eq!(code(&resumed), 0, "{}", text(&resumed));
    let log = log_lines(&run);
    assert_eq!(log.len(), 520);
    let iters: Vec<u64> = log.iter().map(|r| r["iter"].as_u64().unwrap()).collect();
    assert_eq!(iters, (0..520).collect::<Vec<_>>());
}

#[test]
fn nan_loss_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), &[]);
    let out = train(
        &toy_config(),
        &data,
        &dir.path().join("run"),
        &["--set", "train.lr=1e30", "--set", "train.momentum=0.0"],
    );
    assert_eq!(code(&out), 3, "{}", text(&out));
}

/// Pixel accuracy recomputed from the reported confusion counts.
fn accuracy_exact(report: &serde_json::Value) -> f64 {
    let rows = report["confusion"].as_array().unwrap();
    let (mut diag, mut total) = (0u64, 0u64);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.as_array().unwrap().iter().enumerate() {
            let v = v.as_u64().unwrap();
            total += v;
            if i == j {
                diag += v;
            }
        }
    }
    diag as f64 / total as f64
}

#[test]
fn memorized_sample_evaluates_near_perfectly_and_emits_pgms() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(
        dir.path(),
        &["--set", "data.train.count=1", "--set", "data.val.count=1"],
    );
    let run = dir.path().join("run");
    let out = train(
        &toy_config(),
        &data,
        &run,
        &[
            "--set",
            "train.iterations=400",
            "--set",
            "train.batch_size=1",
            "--set",
            "train.val_every=400",
        ],
    );
    assert_eq!(code(&out), 0, "{}", text(&out));
    let pgm = dir.path().join("pgm");
    let out = dam(&[
        "eval",
        "--checkpoint",
        s(&run.join("last")),
        "--data",
        s(&data),
        "--split",
        "train",
        "--emit-pgm",
        s(&pgm),
        "--json",
        s(&dir.path().join("report.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let report = text(&out);
    let accuracy: f64 = report
        .lines()
        .find(|l| l.starts_with("pixel_accuracy"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!(accuracy > 0.98, "{report}");
    assert!(report.contains("mean_iou") && report.contains("fw_iou"));
    assert!(!report.contains("precision"));
    assert!(fs::read(pgm.join("00000_pred.pgm"))
        .unwrap()
        .starts_with(b"P5\n"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(
        json["metrics"]["pixel_accuracy"].as_f64().unwrap(),
        accuracy_exact(&json)
    );
    assert_eq!(json["confusion"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), &[]);
    let run = dir.path().join("run");
    assert_eq!(
        code(&train(
            &toy_config(),
            &data,
            &run,
            &["--set", "train.iterations=0"]
        )),
        0
    );

    // a dataset with fewer classes than the network predicts
    let two_class = dir.path().join("two");
    let out = dam(&[
        "gen-data",
        "--config",
        s(&toy_config()),
        "--out",
        s(&two_class),
        "--set",
        "data.shapes=[\"disk\"]",
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let out = dam(&[
        "eval",
        "--checkpoint",
        s(&run.join("last")),
        "--data",
        s(&two_class),
    ]);
    assert_eq!(code(&out), 2);
    assert!(text(&out).contains("classes"), "{}", text(&out));

    // a checkpoint whose manifest claims a different input channel count
    let manifest = run.join("last/manifest.json");
    let edited =
        fs::read_to_string(&manifest)
            .unwrap()
            .replacen("\"channels\": 1", "\"channels\": 2", 1);
    fs::write(&manifest, edited).unwrap();
    let out = dam(&[
        "eval",
        "--checkpoint",
        s(&run.join("last")),
        "--data",
        s(&data),
    ]);
    assert_eq!(code(&out), 2);
    assert!(text(&out).contains("conv0"), "{}", text(&out));
}

#[test]
fn gradcheck_passes_at_two_step_sizes_and_catches_corruption() {
    for eps in ["1e-5", "1e-6"] {
        let out = dam(&["gradcheck", "--eps", eps]);
        assert_eq!(code(&out), 0, "{}", text(&out));
        assert!(text(&out).contains("conv0.weights"));
    }
    let out = dam(&["gradcheck", "--corrupt-backward"]);
    assert_eq!(code(&out), 3, "{}", text(&out));
    assert!(text(&out).contains("FAIL"));
}

#[test]
fn invariance_reports_pass_for_each_ratio() {
    for g in ["1", "2", "3"] {
        let out = dam(&["invariance", "--g", g]);
        assert_eq!(code(&out), 0, "{}", text(&out));
        assert!(text(&out).trim_end().ends_with("PASS"));
    }
    assert_eq!(code(&dam(&["invariance", "--g", "0"])), 2);
}

#[test]
fn bad_thread_setting_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_dam"))
        .args(["invariance", "--g", "2"])
        .env("DAM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
