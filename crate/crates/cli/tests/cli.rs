use std::path::Path;
use std::process::{Command, Output};

fn dsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsim"))
        .args(args)
        .output()
        .expect("dsim runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

const SCENE: &str =
    "plane 1000 20\nobject box\nv -100 -100 900\nv 100 -100 900\nv 0 100 900\nf 1 2 3\n";

fn write_scene(dir: &Path) -> String {
    let p = dir.join("plane.scene");
    std::fs::write(&p, SCENE).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn render_writes_outputs_identically_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path());
    let mut runs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("run{threads}"));
        let o = dsim(&[
            "render",
            "--preset",
            "kinect_v1",
            "--scene",
            &scene,
            "--size",
            "48x32",
            "--seed",
            "4",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(out);
    }
    for f in [
        "capture.pfm",
        "depth.pfm",
        "depth16.png",
        "gt_depth.pfm",
        "shadow.pfm",
        "config.toml",
    ] {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        let b = std::fs::read(runs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between thread counts");
    }
    let depth = dsim_core::io::read_pfm(runs[0].join("depth.pfm")).unwrap();
    assert_eq!((depth.width, depth.height), (48, 32));
}

#[test]
fn noise_study_writes_one_cell_per_distance_and_tilt() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ns");
    let o = dsim(&[
        "noise-study",
        "--preset",
        "kinect_v1",
        "--z",
        "1000,2000,3000,4000",
        "--alpha",
        "0,40,70",
        "--samples",
        "1",
        "--size",
        "48x32",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("noise_study.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("z_mm,alpha_deg,r_bin_px,std_err_mm,n_pixels")
    );
    let mut cells: Vec<(String, String)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    cells.dedup();
    assert_eq!(cells.len(), 12);
}

#[test]
fn gradcheck_passes_at_size_8() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsim(&[
        "gradcheck",
        "--preset",
        "kinect_v1",
        "--size",
        "8",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("shadow_bias"));
    assert!(dir.path().join("gradcheck.csv").exists());
}

#[test]
fn failed_checks_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsim(&[
        "gradcheck",
        "--size",
        "8",
        "--tolerance",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "numerical");
}

#[test]
fn usage_errors_exit_with_code_1() {
    for args in [
        vec!["no-such-command"],
        vec!["render"],
        vec!["--preset", "nope", "gradcheck"],
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut a = args.clone();
        let out = dir.path().to_str().unwrap().to_string();
        a.extend(["--out", &out]);
        let o = dsim(&a);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let e = stderr_json(&o);
        assert!(e["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[test]
fn missing_scene_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsim(&[
        "render",
        "--scene",
        "missing.scene",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_json(&o)["message"]
        .as_str()
        .unwrap()
        .contains("missing.scene"));
}

#[test]
fn match_identical_images_gives_zero_disparity() {
    let dir = tempfile::tempdir().unwrap();
    let img = dsim_core::Image::from_fn(40, 24, |x, y| {
        (((x * 7 + y * 13) % 11) + (x * y) % 5) as f64
    });
    let p = dir.path().join("img.pfm");
    dsim_core::io::write_pfm(&p, &img).unwrap();
    let o = dsim(&[
        "match",
        "--left",
        p.to_str().unwrap(),
        "--right",
        p.to_str().unwrap(),
        "--max-disparity",
        "6",
        "--block",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = dsim_core::io::read_pfm(dir.path().join("disparity.pfm")).unwrap();
    let v = dsim_core::io::read_pfm(dir.path().join("valid.pfm")).unwrap();
    let valid: Vec<f64> = d
        .data
        .iter()
        .zip(&v.data)
        .filter(|(_, &m)| m > 0.5)
        .map(|(&x, _)| x)
        .collect();
    assert!(valid.len() > 100);
    assert!(valid.iter().all(|x| x.abs() < 0.5));
}

#[test]
fn calibrate_writes_trace_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsim(&[
        "calibrate",
        "--iterations",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(dir.path().join("calibration_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,loss,shadow_bias,noise_std\n"));
    assert_eq!(trace.lines().count(), 4);
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fitted.json")).unwrap())
            .unwrap();
    assert!(fit["parameters"]["shadow_bias"].is_f64());
    let cfg = dsim_core::SensorConfig::load(dir.path().join("fitted_config.toml")).unwrap();
    assert_eq!(
        cfg.shadow_bias,
        fit["parameters"]["shadow_bias"].as_f64().unwrap()
    );
}

#[test]
fn toy_optimizations_write_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dsim(&["optimize-pose", "--iterations", "2", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pose = std::fs::read_to_string(dir.path().join("pose_trace.csv")).unwrap();
    assert!(pose.starts_with("iteration,alpha_deg,loss\n"));
    let o = dsim(&["optimize-pattern", "--iterations", "2", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(dir.path().join("pattern_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    let p = dsim_core::PatternImage::load(dir.path().join("pattern.png")).unwrap();
    assert_eq!(p.num_channels(), 3);
}

#[test]
fn calibrate_accepts_rendered_references() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path());
    let cfg_path = dir.path().join("small.toml");
    let cfg = dsim_core::preset("kinect_v1").unwrap().with_size(128, 32);
    std::fs::write(&cfg_path, cfg.to_toml_string()).unwrap();
    let cfg_arg = cfg_path.to_str().unwrap();
    let scan = dir.path().join("scan");
    let o = dsim(&[
        "--config",
        cfg_arg,
        "render",
        "--scene",
        &scene,
        "--out",
        scan.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reference = format!("{scene}={}", scan.join("depth16.png").display());
    let fit = dir.path().join("fit");
    let o = dsim(&[
        "--config",
        cfg_arg,
        "calibrate",
        "--reference",
        &reference,
        "--init",
        "shadow_bias=2",
        "--iterations",
        "1",
        "--out",
        fit.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(fit.join("calibration_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,loss,shadow_bias\n0,"));
}
