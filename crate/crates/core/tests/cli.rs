use std::path::Path;
use std::process::{Command, Output};

fn ctsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("ctsim runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn single_image_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ctsim(d, &["--out", ".", "--seed", "4", "phantom", "--n-pixels", "64"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&ctsim(d, &["--out", ".", "project", "--input", "phantom.json"])), 0);
    let out = ctsim(d, &["--out", ".", "degrade", "--input", "sinogram.ctsino", "--mode", "angle", "--factor", "4"]);
    assert_eq!(code(&out), 0);
    let sino = ctsim::container::read_sinogram(&d.join("degraded.ctsino")).unwrap();
    assert_eq!(sino.geometry.n_views, 246);
    let out = ctsim(d, &["--out", ".", "recon", "--input", "degraded.ctsino", "--n-pixels", "64"]);
    assert_eq!(code(&out), 0);
    let img = ctsim::container::read_image(&d.join("image.ctimg")).unwrap();
    assert_eq!(img.n_pixels, 64);
    assert!(img.provenance.iter().any(|t| t == "limit-angle(k=4)"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"seeds": []}"#).unwrap();
    let out = ctsim(d, &["--config", "bad.json", "--out", "o", "gen-dataset"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));
    std::fs::write(d.join("s.json"), "not json").unwrap();
    assert_eq!(code(&ctsim(d, &["--config", "s.json", "gen-dataset"])), 2);
    let out = ctsim(d, &["--out", ".", "degrade", "--input", "x", "--mode", "current", "--factor", "3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_containers_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("junk.ctsino"), b"CTSINO01garbage").unwrap();
    assert_eq!(code(&ctsim(d, &["--out", ".", "recon", "--input", "junk.ctsino"])), 3);
    std::fs::write(d.join("wrong.ctsino"), b"CTIMGG01\0\0\0\0").unwrap();
    assert_eq!(code(&ctsim(d, &["--out", ".", "recon", "--input", "wrong.ctsino"])), 3);
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctsim(dir.path(), &["--out", ".", "recon", "--input", "absent.ctsino"]);
    assert_eq!(code(&out), 1);
    let out = ctsim(dir.path(), &["--out", "empty", "report"]);
    assert_ne!(code(&out), 0);
}
