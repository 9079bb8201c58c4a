use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lipsam::experiments::synthetic_instance;
use lipsam::wav::{read_wav, write_wav};

fn lipsam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipsam"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn selfcheck_passes_and_reports_injected_faults() {
    let dir = tempfile::tempdir().unwrap();
    let ok = lipsam(dir.path(), &["selfcheck"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS counterexample_bias quotient at 1e-3 = 1001.000000"));

    let bad = lipsam(dir.path(), &["selfcheck", "--inject-fault", "window"]);
    assert_eq!(code(&bad), 2);
    assert!(stdout(&bad).contains("FAIL stft_round_trip"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none(), "selfcheck writes nothing");
}

#[test]
fn validate_bounds_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["validate-bounds", "--restarts", "2", "--max-iterations", "3", "--scales", "1,4"];
    let out = lipsam(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read(dir.path().join("bounds.csv")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "trial_id,architecture,constraint,scale,empirical_B,theoretical_bound,terminated_early,wall_time"
    );
    assert_eq!(lines.count(), 8 * 2 * 2);
    assert!(text.contains(",LipsAM-SE,spectral,1.0,"));
    assert!(text.lines().any(|l| l.starts_with("0,LipsAM-RE,spectral,4.0,") && l.contains(",5.0,")));
    let summary = fs::read_to_string(dir.path().join("bounds_summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("LipsAM-SE,spectral,1.0,") && l.contains("1.4142135623730951") && l.ends_with("pass")));

    let again = lipsam(dir.path(), &args);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(dir.path().join("bounds.csv")).unwrap(), first);
}

#[test]
fn train_certify_and_dereverb_with_a_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = lipsam(
        dir.path(),
        &["train", "--arch", "re", "--lipschitz", "spectral", "--epochs", "1", "--items", "4", "--channel-width", "4"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar = dir.path().join("denoiser.json");
    let meta = fs::read_to_string(&sidecar).unwrap();
    assert!(meta.contains("\"LipsAM-RE\"") && meta.contains("\"certified_width\": 32"));
    let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,train_loss,val_loss");
    assert_eq!(log.lines().count(), 3);

    let model = sidecar.to_str().unwrap();
    let cert = lipsam(dir.path(), &["certify", "--denoiser", model, "--restarts", "2", "--max-iterations", "2"]);
    assert_eq!(code(&cert), 0, "{}", String::from_utf8_lossy(&cert.stderr));
    let csv = fs::read_to_string(dir.path().join("certify.csv")).unwrap();
    assert!(csv.starts_with("trial_id,architecture,scale,empirical_B,theoretical_bound,terminated_early,wall_time\n"));
    assert!(csv.lines().nth(1).unwrap().contains(",LipsAM-RE,1.0,"));
    assert!(csv.lines().nth(1).unwrap().contains(",2.0,"));

    let der = lipsam(dir.path(), &["dereverb", "--denoiser", model, "--iters", "5", "--lambda", "0.1"]);
    assert_eq!(code(&der), 0, "{}", String::from_utf8_lossy(&der.stderr));
    assert_eq!(read_wav(&dir.path().join("dereverb.wav")).unwrap().len(), 4096);
}

#[test]
fn dereverb_on_files_writes_audio_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let inst = synthetic_instance(5).unwrap();
    let (y, h, x) = (dir.path().join("y.wav"), dir.path().join("h.wav"), dir.path().join("x.wav"));
    write_wav(&y, &inst.observed).unwrap();
    write_wav(&h, &inst.rir).unwrap();
    write_wav(&x, &inst.clean).unwrap();
    let args = [
        "dereverb",
        "--input",
        y.to_str().unwrap(),
        "--rir",
        h.to_str().unwrap(),
        "--reference",
        x.to_str().unwrap(),
        "--iters",
        "30",
        "--trace",
        "t.csv",
        "--out",
        "x_hat.wav",
    ];
    let out = lipsam(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iteration,delta_x,si_snr");
    assert_eq!(trace.lines().count(), 31);
    assert!(stdout(&out).contains("SI-SNR observation"));
    assert_eq!(read_wav(&dir.path().join("x_hat.wav")).unwrap().len(), inst.observed.len());
}

#[test]
fn sweep_marks_one_best_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = lipsam(dir.path(), &["sweep-lambda", "--grid", "1e-2:1:3log", "--iters", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",true")).count(), 1);
    assert!(rows.iter().all(|r| r.contains(",completed,")));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epochs": 1, "unknown_key": 3}}"#).unwrap();
    assert_eq!(code(&lipsam(dir.path(), &["--config", cfg.to_str().unwrap(), "selfcheck"])), 1);
    assert_eq!(code(&lipsam(dir.path(), &["sweep-lambda", "--grid", "1:2:3"])), 1);
    assert_eq!(code(&lipsam(dir.path(), &["dereverb", "--input", "only.wav"])), 1);
    assert_eq!(code(&lipsam(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&lipsam(dir.path(), &["certify", "--denoiser", "missing.json"])), 1);
}

#[test]
fn config_file_values_apply_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 2, "sweep_lambda": {"grid": "1e-2:1:2log", "iters": 5, "out": "from_config.csv"}}"#).unwrap();
    let out = lipsam(dir.path(), &["--config", cfg.to_str().unwrap(), "sweep-lambda", "--iters", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("from_config.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
