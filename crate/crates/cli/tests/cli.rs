//! Subcommand behaviour through the public entry point and the binary.

use std::path::PathBuf;
use std::process::Command;

use rectifier_cli::{run, EXIT_CHECK_FAILED, EXIT_DEGENERATE, EXIT_OK, EXIT_USAGE};

fn spec_file(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../specs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn invoke(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["rectifier"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn data_rows(csv: &str) -> Vec<Vec<&str>> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').collect()).collect()
}

fn write_spec(dir: &tempfile::TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn init_report_echoes_config_and_writes_csv() {
    let (code, out, err) = invoke(&["init-report", "--spec", &spec_file("vgg-b.spec"), "--scheme", "he-bwd"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("# command=init-report\n# spec="));
    assert!(out.contains("# scheme=he-bwd\n"));
    assert!(out.contains("# backward_product=1\n"));
    assert!(out.contains("layer_index,layer_kind,fan_in,fan_out,std,gain_fwd,gain_bwd,cum_fwd,cum_bwd\n"));
    assert_eq!(data_rows(&out).len(), 10);
    assert!(err.contains("10 weighted layers"));
}

#[test]
fn xavier_cumulative_forward_gain_halves_per_layer() {
    let (code, out, _) = invoke(&["init-report", "--spec", &spec_file("mlp-14.spec"), "--scheme", "xavier"]);
    assert_eq!(code, EXIT_OK);
    for row in data_rows(&out) {
        let l: i32 = row[0].parse().unwrap();
        let cum: f64 = row[7].parse().unwrap();
        assert!((cum - 0.5f64.powi(l - 1)).abs() < 1e-12, "layer {l}: {cum}");
    }
}

#[test]
fn fixed_scheme_adds_attenuation_line() {
    let (code, out, err) = invoke(&["init-report", "--spec", &spec_file("vgg-b.spec"), "--scheme", "fixed:0.01"]);
    assert_eq!(code, EXIT_OK);
    let recip: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("# attenuation_reciprocal="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((recip / 1.7e4 - 1.0).abs() < 0.05, "{recip}");
    assert!(err.contains("of the he-bwd value"));
}

#[test]
fn act_override_changes_analytic_slope() {
    let (code, out, _) = invoke(&[
        "init-report", "--spec", &spec_file("mlp-14.spec"), "--scheme", "prelu:0.25:fwd", "--act", "prelu:0.25",
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("# activation_slope=0.25\n"));
    for row in data_rows(&out) {
        assert!((row[5].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn probe_reports_empirical_columns() {
    let (code, out, _) = invoke(&[
        "probe", "--spec", &spec_file("mlp-14.spec"), "--scheme", "he-fwd", "--trials", "8", "--batch", "32",
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains(",emp_fwd,emp_bwd,trials\n"));
    assert!(out.contains("# trials=8\n"));
    let rows = data_rows(&out);
    // Hidden layers only: the input layer sees unrectified data and the
    // 10-wide classifier is too narrow for a tight 8-trial estimate.
    for row in &rows[1..rows.len() - 1] {
        let emp: f64 = row[9].parse().unwrap();
        assert!((0.8..=1.25).contains(&emp), "{row:?}");
    }
}

#[test]
fn spec_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let no_loss = write_spec(&dir, "noloss.spec", "input 1x4x4\nfc 3\n");
    for cmd in ["init-report", "probe", "gradcheck"] {
        let (code, _, err) = invoke(&[cmd, "--spec", &no_loss]);
        assert_eq!(code, EXIT_USAGE, "{cmd}: {err}");
        assert!(err.contains("noloss.spec"), "{err}");
    }
    let (code, _, _) = invoke(&["init-report", "--spec", "/nonexistent/x.spec"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = invoke(&["init-report", "--spec", &spec_file("vgg-b.spec"), "--scheme", "kaiming"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = invoke(&["init-report", "--spec", &spec_file("vgg-b.spec"), "--unknown"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = invoke(&["frobnicate"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn train_rejects_missing_or_malformed_data() {
    let spec = spec_file("mlp-14.spec");
    for data in ["idx:/nonexistent/a,/nonexistent/b", "synth:10,5", "mnist", "synth:10,5,63,1"] {
        let (code, _, err) = invoke(&["train", "--spec", &spec, "--data", data]);
        assert_eq!(code, EXIT_USAGE, "{data}: {err}");
    }
    let (code, _, _) = invoke(&["train", "--spec", &spec, "--data", "synth:10,5,64,1", "--momentum", "1.5"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = invoke(&["train", "--spec", &spec, "--data", "synth:10,5,64,1", "--act", "tanh"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn train_writes_records_and_status() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("run.csv");
    let (code, stdout, err) = invoke(&[
        "train", "--spec", &spec_file("mlp-14.spec"), "--data", "synth:10,20,64,6", "--val-data", "synth:10,5,64,6",
        "--epochs", "2", "--act", "prelu 0.25", "--lr-steps", "2:0.001", "--out", &out_path.to_string_lossy(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(stdout.is_empty());
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert!(csv.contains("# act=prelu:0.25\n"));
    assert!(csv.contains("# lr_steps=2:0.001\n"));
    assert!(csv.contains("# status=completed\n"));
    assert!(csv.contains("# slope_fraction_above_one="));
    let header = csv.lines().find(|l| l.starts_with("epoch,")).unwrap();
    assert!(header.starts_with("epoch,split,loss,top1,grad_norm_l1,"));
    assert!(header.ends_with("slope_absmax_l13,stall_verdict"));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 6, "train+val rows for epochs 0..=2");
    assert!(rows.iter().all(|r| r.len() == header.split(',').count()));
    assert_eq!(rows[1][1], "val");
}

#[test]
fn degenerate_runs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut deep = String::from("input 8x1x1\n");
    for _ in 0..12 {
        deep += "fc 16\nact relu\n";
    }
    deep += "fc 2\nsoftmax 2\n";
    let spec = write_spec(&dir, "deep.spec", &deep);
    let (code, out, _) = invoke(&["train", "--spec", &spec, "--scheme", "fixed:0.01", "--data", "synth:2,64,8,3", "--epochs", "3"]);
    assert_eq!(code, EXIT_DEGENERATE);
    assert!(out.contains("# status=stalled\n"), "{out}");
    assert!(out.contains(",diminishing\n"));

    let (code, out, _) = invoke(&["train", "--spec", &spec, "--data", "synth:2,64,8,3", "--epochs", "3", "--lr", "10000"]);
    assert_eq!(code, EXIT_DEGENERATE);
    assert!(out.contains("# status=diverged\n"), "{out}");
}

#[test]
fn gradcheck_exit_codes() {
    let spec = spec_file("gradcheck-small.spec");
    let (code, out, err) = invoke(&["gradcheck", "--spec", &spec]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("layer,layer_kind,tensor,count,max_rel_error,worst_index,passed\n"));
    assert!(data_rows(&out).iter().all(|r| r[6] == "true"));
    let (code, out, err) = invoke(&["gradcheck", "--spec", &spec, "--corrupt-slope-grads"]);
    assert_eq!(code, EXIT_CHECK_FAILED);
    assert!(err.contains("FAIL"));
    let failing: Vec<_> = data_rows(&out).into_iter().filter(|r| r[6] == "false").collect();
    assert!(!failing.is_empty() && failing.iter().all(|r| r[2] == "slopes"));
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_rectifier");
    let ok = Command::new(bin)
        .args(["init-report", "--spec", &spec_file("vgg-b.spec"), "--scheme", "he-bwd"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("# scheme=he-bwd"));
    let bad = Command::new(bin).args(["probe"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(EXIT_USAGE));
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&help.stdout).contains("gradcheck"));
}
