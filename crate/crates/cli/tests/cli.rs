use std::path::Path;
use std::process::{Command, Output};

use ect_core::forward::load_sinogram;
use ect_core::recon::Layer;

fn ect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ect")).args(args).output().expect("binary runs")
}

fn small_args(dir: &Path) -> Vec<String> {
    ["n=10", "angles=18", "weight_dx=0.1", "weight_dz=0.1", "weight_margin=2", "weight_z_max=6"]
        .iter()
        .map(|kv| format!("--set={kv}"))
        .chain([format!("--set=output_dir={}", dir.display())])
        .collect()
}

fn run_with(sub: &str, dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub.to_string()];
    args.extend(small_args(dir));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ect(&refs)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn pipeline_writes_layers_and_reports_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let first = run_with("pipeline", tmp.path(), &[]);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    for k in 1..=4 {
        assert!(tmp.path().join(format!("layer_k{k}.ectl")).is_file());
        assert!(tmp.path().join(format!("layer_k{k}.pgm")).is_file());
    }
    assert!(tmp.path().join("manifest.json").is_file());
    assert!(!stdout(&first).contains("cached"));

    let second = run_with("pipeline", tmp.path(), &[]);
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(stdout(&second).matches("cached").count(), 5, "{}", stdout(&second));
}

#[test]
fn stages_run_one_at_a_time() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["weights", "phantom", "forward", "recon", "render"] {
        let out = run_with(sub, tmp.path(), &[]);
        assert_eq!(out.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).starts_with(sub), "{sub}: {}", stdout(&out));
    }
    assert!(tmp.path().join("sinogram.ects").is_file());
    assert!(tmp.path().join("phantom.ectv").is_file());
}

#[test]
fn full_scale_settings_reach_file_headers() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = format!("--set=output_dir={}", tmp.path().display());
    let out = ect(&["pipeline", "--set=n=27", "--set=angles=180", "--set=pitch_mm=2.5", &dir]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let set = load_sinogram::<f64>(tmp.path().join("sinogram.ects")).unwrap();
    assert_eq!(set.geometry.n, 27);
    assert_eq!(set.geometry.angles, 180);
    assert_eq!(set.geometry.pitch, 2.5);
    assert_eq!(set.geometry.electrodes(), 55);
    let layer = Layer::<f64>::load(tmp.path().join("layer_k1.ectl")).unwrap();
    assert_eq!(layer.size, 109);
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nangles = 90\nn = 12\n").unwrap();
    let path = cfg.to_str().unwrap();
    let out = ect(&["config", "--config", path, "--set", "angles=30", "--set", "angles=45"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("\nangles = 45\n"), "{text}");
    assert!(text.contains("\nn = 12\n"));
}

#[test]
fn config_errors_exit_2() {
    assert_eq!(ect(&["pipeline", "--set", "bogus=1"]).status.code(), Some(2));
    assert_eq!(ect(&["pipeline", "--set", "angles=-3"]).status.code(), Some(2));
    assert_eq!(ect(&["pipeline", "--config", "/nonexistent/ect.cfg"]).status.code(), Some(2));
    assert_eq!(ect(&["pipeline", "--set", "phantom=/nonexistent/p.txt"]).status.code(), Some(2));
    assert_eq!(ect(&["render", "--mapping", "log"]).status.code(), Some(2));
    assert_eq!(ect(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn stage_failures_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_with("recon", tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage recon"));

    let bad = tmp.path().join("bad.ectl");
    std::fs::write(&bad, b"ECTL\x01\x00").unwrap();
    let pgm = tmp.path().join("bad.pgm");
    let out = ect(&["render", "--input", bad.to_str().unwrap(), "--output", pgm.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!pgm.exists());
}

#[test]
fn render_single_layer_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("l.ectl");
    Layer { gap: 1, size: 2, pitch: 1.0f64, values: vec![0.0, 1.0, 1.0, 0.0] }.save(&input).unwrap();
    let output = tmp.path().join("l.pgm");
    let out = ect(&[
        "render",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--mapping",
        "minmax",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut want = b"P5\n# mapping=minmax\n2 2\n65535\n".to_vec();
    want.extend_from_slice(&[0, 0, 0xff, 0xff, 0xff, 0xff, 0, 0]);
    assert_eq!(std::fs::read(&output).unwrap(), want);

    Layer { gap: 1, size: 2, pitch: 1.0f64, values: vec![0.0; 4] }.save(&input).unwrap();
    let out = ect(&[
        "render",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--mapping",
        "symmetric",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let bytes = std::fs::read(&output).unwrap();
    assert!(bytes[bytes.len() - 8..].chunks(2).all(|c| c == [0x80, 0x00]));
}
