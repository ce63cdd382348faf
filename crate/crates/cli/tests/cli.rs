use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
steps = 6
batch = 4
shards = 2
warmup_steps = 2
snapshot_every = 3
diag_samples = 2
classes = 3
trace_warmup = 2

[model]
depth = 2
d_model = 16
ffn_dim = 24
heads = 2
head_dim = 8
grid_h = 3
grid_w = 3
text_tokens = 2
channels = 2
"#;

fn mvlab(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvlab"))
        .args(args)
        .env("MVLAB_OUT", root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&mvlab(&["--help"], tmp.path())), 0);
    assert_eq!(code(&mvlab(&["train", "--bogus"], tmp.path())), 1);
    assert_eq!(code(&mvlab(&["frobnicate"], tmp.path())), 1);
    assert_eq!(code(&mvlab(&["train", "--preset", "nope"], tmp.path())), 1);
}

#[test]
fn missing_config_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = mvlab(
        &[
            "train",
            "--config",
            "does/not/exist.toml",
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "steps = 5\nbatchh = 3\n").unwrap();
    let o = mvlab(
        &[
            "train",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("batchh") && err.contains("line 2"), "{err}");
    assert!(!out.exists());
}

#[test]
fn train_report_audit_probe_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let o = mvlab(
        &["train", "--config", &cfg, "--preset", "mvsplit", "--seed", "7"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // Default directory comes from MVLAB_OUT.
    let run = tmp.path().join("mvsplit-s7");
    assert!(run.join("summary.json").exists());
    let resolved = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 7") && resolved.contains("weight_decay"));

    let again = tmp.path().join("again");
    let o = mvlab(
        &[
            "train",
            "--config",
            &cfg,
            "--preset",
            "mvsplit",
            "--seed",
            "7",
            "--out",
            again.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    for f in ["loss.csv", "snapshots.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let run_arg = run.to_str().unwrap();
    assert_eq!(code(&mvlab(&["report", "--run", run_arg], tmp.path())), 0);
    let report_dir = run.join("report");
    let first: Vec<Vec<u8>> = ["report.json", "loss_curve.csv", "depth_heatmap.csv", "gmd_curves.csv"]
        .iter()
        .map(|f| fs::read(report_dir.join(f)).unwrap())
        .collect();
    assert_eq!(code(&mvlab(&["report", "--run", run_arg], tmp.path())), 0);
    let second: Vec<Vec<u8>> = ["report.json", "loss_curve.csv", "depth_heatmap.csv", "gmd_curves.csv"]
        .iter()
        .map(|f| fs::read(report_dir.join(f)).unwrap())
        .collect();
    assert_eq!(first, second);
    let gmd = String::from_utf8(first[3].clone()).unwrap();
    assert!(gmd.starts_with("#schema=mvlab.report.gmd.v1\nstep,writer,ratio_q1"));
    // Snapshots at steps 0, 3, 5, two writers each.
    assert_eq!(gmd.lines().count(), 2 + 3 * 2);

    let ckpt = run.join("checkpoint.bin");
    for batch in ["homogenized", "orthogonalized"] {
        let out = tmp.path().join(batch);
        let mut args = vec![
            "audit",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--batch",
            batch,
            "--samples",
            "2",
            "--out",
            out.to_str().unwrap(),
        ];
        let with_text = batch == "orthogonalized";
        if with_text {
            args.push("--include-text");
        }
        let o = mvlab(&args, tmp.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let settings = fs::read_to_string(out.join("settings.json")).unwrap();
        assert!(
            settings.contains(if with_text { "\"all\"" } else { "\"image\"" }),
            "{settings}"
        );
        assert!(fs::read_to_string(out.join("audit.csv"))
            .unwrap()
            .starts_with("#schema=mvlab.audit.v1\n"));
        assert_eq!(code(&mvlab(&["report", "--run", out.to_str().unwrap()], tmp.path())), 0);
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("report/report.json")).unwrap()).unwrap();
        assert_eq!(report["audit"]["points"], 2 * 2 * 2);
        assert_eq!(report["audit"]["bound_violations"], 0);
        if batch == "orthogonalized" {
            assert!(report["audit"]["max_abs_excess"].as_f64().unwrap() < 1e-10);
        }
    }
    let o = mvlab(
        &["audit", "--checkpoint", run.join("loss.csv").to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);

    let probe_out = tmp.path().join("probe");
    let o = mvlab(
        &[
            "probe",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--groups",
            "24",
            "--draws",
            "2",
            "--layers",
            "0,1",
            "--out",
            probe_out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let probe: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(probe_out.join("probe.json")).unwrap()).unwrap();
    assert_eq!(probe["records"].as_array().unwrap().len(), 2 * 3);
    assert!(probe["records"][0]["untrained_r2"].is_number());
}

#[test]
fn report_flags_unfinished_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let run = tmp.path().join("run");
    assert_eq!(
        code(&mvlab(
            &["train", "--config", &cfg, "--out", run.to_str().unwrap()],
            tmp.path()
        )),
        0
    );
    fs::remove_file(run.join("summary.json")).unwrap();
    let o = mvlab(&["report", "--run", run.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("did not finish"));
}

#[test]
fn preset_sweep_writes_one_dir_per_gain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let out = tmp.path().join("ls");
    let o = mvlab(
        &[
            "train",
            "--config",
            &cfg,
            "--preset",
            "layerscale_sweep",
            "--steps",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let mut dirs: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    assert_eq!(dirs, ["lambda_1e-2", "lambda_1e-3", "lambda_1e-4", "lambda_1e-5"]);
    for d in &dirs {
        assert!(out.join(d).join("summary.json").exists());
    }
}

#[test]
fn nonfinite_run_exits_with_halt_code() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("hot.toml");
    fs::write(&path, format!("lr_target = 1e300\nclip_norm = 1e300\n{TINY}")).unwrap();
    let out = tmp.path().join("hot");
    let o = mvlab(
        &[
            "train",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["halted"], true);
}

#[test]
fn verify_passes_and_catches_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let json = tmp.path().join("verify.json");
    let o = mvlab(&["verify", "--json", json.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("gmd_reconstruction"));
    assert!(json.exists());
    let o = mvlab(&["verify", "--inject-gmd-sign-flip"], tmp.path());
    assert_eq!(code(&o), 2);
    let fails: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(String::from)
        .collect();
    assert_eq!(fails.len(), 1, "{fails:?}");
    assert!(fails[0].starts_with("gmd_reconstruction"));
}
