use std::path::Path;
use std::process::{Command, Output};

use panogen_core::raster::{rgbe, Image};

fn panogen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panogen"))
        .current_dir(dir)
        .env_remove("T2L_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_hdr(dir: &Path, name: &str, img: &Image) {
    rgbe::write(img, &dir.join(name)).unwrap();
}

/// Values that RGBE stores exactly, so the metrics below are exact.
fn fixture_pair(dir: &Path, offset: f64) {
    let gt = Image::from_fn(4, 8, |i, j| [0.5 + 0.5 * ((i + j) % 2) as f64, 1.0, 2.0]);
    let pred = gt.map(|v| v + offset);
    write_hdr(dir, "gt.hdr", &gt);
    write_hdr(dir, "pred.hdr", &pred);
    std::fs::write(dir.join("pairs.txt"), "# pred gt\npred.hdr gt.hdr\n").unwrap();
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn eval_itmo_identical_images_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path(), 0.0);
    let o = panogen(dir.path(), &["eval-itmo", "--manifest", "pairs.txt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("MAE 0.000000 RMSE 0.000000"), "{}", stdout(&o));
    assert!(dir.path().join("pairs.scores.manifest.toml").exists());
}

#[test]
fn eval_itmo_constant_offset_scores_half() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path(), 0.5);
    let o = panogen(dir.path(), &["eval-itmo", "--manifest", "pairs.txt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("MAE 0.500000 RMSE 0.500000"), "{}", stdout(&o));
    let scores = std::fs::read_to_string(dir.path().join("pairs.scores")).unwrap();
    assert!(scores.starts_with("mae 0.5\nrmse 0.5\n"), "{scores}");
}

#[test]
fn missing_checkpoints_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = panogen(dir.path(), &["generate", "--text", "a sunny sky"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("prepare-data"), "{err}");

    let o = panogen(dir.path(), &["upscale", "--input", "x.png"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-sritmo"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[sritmo]\nwidth = 4\n").unwrap();
    let o = panogen(dir.path(), &["--config", "bad.toml", "train-sritmo"]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_panogen"))
        .current_dir(dir.path())
        .env("T2L_SEED", "not-a-number")
        .arg("train-sritmo")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_eval_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.txt"), "only-one-field\n").unwrap();
    let o = panogen(dir.path(), &["eval-itmo", "--manifest", "m.txt"]);
    assert_eq!(o.status.code(), Some(4));
}
