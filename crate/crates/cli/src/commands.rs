//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::Args;
use dsim_core::harness::{
    self, GradcheckOptions, NoiseStudyGrid, PairOptions, DOT_DENSITY, PATTERN_LEVEL,
};
use dsim_core::io::{read_depth16, read_gray, read_pfm, write_csv, write_depth16, write_pfm};
use dsim_core::noise::derive_seed;
use dsim_core::optim::{
    self, CalibrationOptions, CalibrationResult, PatternOptions, PoseOptions, ReferenceScan,
};
use dsim_core::sim::scene_range;
use dsim_core::{
    Error, Image, Mask, ParamId, ParameterSet, PatternImage, Result, Scene, SensorConfig,
    SimOptions, Simulation,
};
use serde::Serialize;

use crate::{Failure, Global};

type Outcome = std::result::Result<(), Failure>;

/// Frame size `WxH`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size(usize, usize);

impl std::str::FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
        let p = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad size component '{v}'"))
        };
        match (p(w)?, p(h)?) {
            (0, _) | (_, 0) => Err("size must be positive".into()),
            (w, h) => Ok(Size(w, h)),
        }
    }
}

fn resized(cfg: &SensorConfig, size: Option<Size>) -> SensorConfig {
    match size {
        Some(Size(w, h)) => cfg.with_size(w, h),
        None => cfg.clone(),
    }
}

fn pattern_for(cfg: &SensorConfig, path: Option<&Path>, seed: u64) -> Result<PatternImage> {
    match path {
        Some(p) => PatternImage::load(p),
        None => harness::sensor_pattern(cfg, DOT_DENSITY, seed),
    }
}

fn write_pattern(out: &Path, pattern: &PatternImage) -> Result<()> {
    pattern.save(out.join("pattern.png"))?;
    for (c, ch) in pattern.channels.iter().enumerate() {
        write_pfm(out.join(format!("pattern_c{c}.pfm")), ch)?;
    }
    Ok(())
}

fn csv_writer(path: PathBuf) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Scene description file.
    #[arg(long)]
    scene: PathBuf,
    /// Pattern image (PNG or PNM); a seeded speckle pattern by default.
    #[arg(long)]
    pattern: Option<PathBuf>,
    /// Override the frame size, e.g. 320x240.
    #[arg(long)]
    size: Option<Size>,
}

pub fn render(g: &Global, cfg: &SensorConfig, a: &RenderArgs) -> Outcome {
    let cfg = resized(cfg, a.size);
    let scene = Scene::load(&a.scene)?;
    let pattern = pattern_for(&cfg, a.pattern.as_deref(), g.seed)?;
    let params = ParameterSet::new(&cfg, &scene, pattern);
    let opts = SimOptions {
        noise_seed: derive_seed(g.seed, 1),
        ..SimOptions::default()
    };
    let sim = Simulation::record(&scene, &cfg, &params, &opts)?;
    let channels = sim.observed_channels();
    let mut capture = Image::new(cfg.width, cfg.height);
    for ch in &channels {
        for (o, v) in capture.data.iter_mut().zip(&ch.data) {
            *o += v / channels.len() as f64;
        }
    }
    write_pfm(g.out.join("capture.pfm"), &capture)?;
    if channels.len() > 1 {
        for (c, ch) in channels.iter().enumerate() {
            write_pfm(g.out.join(format!("capture_c{c}.pfm")), ch)?;
        }
    }
    let mut depth = sim.depth_image();
    for (z, &ok) in depth.data.iter_mut().zip(&sim.valid.data) {
        if !ok {
            *z = 0.0;
        }
    }
    write_pfm(g.out.join("depth.pfm"), &depth)?;
    write_depth16(g.out.join("depth16.png"), &depth, &sim.valid)?;
    write_pfm(g.out.join("gt_depth.pfm"), &sim.gt_depth())?;
    write_pfm(g.out.join("shadow.pfm"), &sim.shadow_map())?;
    println!(
        "rendered {}x{}: {} of {} pixels valid, disparities [{}, {}]",
        cfg.width,
        cfg.height,
        sim.valid.count(),
        cfg.width * cfg.height,
        sim.range.min,
        sim.range.max
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Left image (PFM, PNG or PNM).
    #[arg(long)]
    left: PathBuf,
    /// Right image; `left(x)` matches `right(x - d)`.
    #[arg(long)]
    right: PathBuf,
    /// Largest disparity searched.
    #[arg(long, default_value_t = 64)]
    max_disparity: i64,
    /// Matching window side; the configured block size by default.
    #[arg(long)]
    block: Option<usize>,
}

pub fn match_images(g: &Global, cfg: &SensorConfig, a: &MatchArgs) -> Outcome {
    let left = read_gray(&a.left)?;
    let right = read_gray(&a.right)?;
    let mut opts = PairOptions::from_config(cfg, a.max_disparity);
    if let Some(b) = a.block {
        opts.block = b;
    }
    let d = harness::match_pair(&left, &right, &opts)?;
    write_pfm(g.out.join("disparity.pfm"), &d.disparity)?;
    write_pfm(g.out.join("score.pfm"), &d.best_score)?;
    write_pfm(g.out.join("valid.pfm"), &mask_image(&d.valid))?;
    println!(
        "matched {}x{}: {} pixels valid",
        left.width,
        left.height,
        d.valid.count()
    );
    Ok(())
}

fn mask_image(m: &Mask) -> Image {
    Image {
        width: m.width,
        height: m.height,
        data: m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    }
}

#[derive(Debug, Args)]
pub struct NoiseStudyArgs {
    /// Plane distances, mm.
    #[arg(long, value_delimiter = ',', default_values_t = [1000.0, 2000.0, 3000.0, 4000.0])]
    z: Vec<f64>,
    /// Plane tilts, degrees.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 40.0, 70.0])]
    alpha: Vec<f64>,
    /// Noise draws per cell.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Capture noise std; the configured value by default.
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    size: Option<Size>,
}

pub fn noise_study(g: &Global, cfg: &SensorConfig, a: &NoiseStudyArgs) -> Outcome {
    let mut cfg = resized(cfg, a.size);
    if let Some(s) = a.noise_std {
        cfg.noise_std = s;
    }
    let grid = NoiseStudyGrid {
        z: a.z.clone(),
        alpha_deg: a.alpha.clone(),
        samples: a.samples,
    };
    let pattern = harness::sensor_pattern(&cfg, DOT_DENSITY, g.seed)?;
    let rows = harness::noise_study(&cfg, &pattern, &grid, g.seed)?;
    let path = g.out.join("noise_study.csv");
    write_csv(&path, &rows)?;
    for &z in &grid.z {
        for &alpha in &grid.alpha_deg {
            match harness::cell_error(&rows, z, alpha) {
                Some(e) => println!("z {z} mm, alpha {alpha} deg: {e:.3} mm"),
                None => println!("z {z} mm, alpha {alpha} deg: no valid pixels"),
            }
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Reference scan as `SCENE=DEPTH`, depth in a PFM or 16-bit PNG (mm).
    /// Without references, fits the built-in self-calibration experiment.
    #[arg(long = "reference", value_name = "SCENE=DEPTH")]
    references: Vec<String>,
    /// Start values of the fitted parameters, e.g. `shadow_bias=1,noise_std=0.001`.
    #[arg(long, value_delimiter = ',')]
    init: Vec<String>,
    /// Pattern of the scanning device; a seeded speckle pattern by default.
    #[arg(long)]
    pattern: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Learning rate for every fitted parameter.
    #[arg(long)]
    lr: Option<f64>,
}

fn parse_init(items: &[String]) -> Result<Vec<(ParamId, f64)>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected NAME=VALUE, got '{s}'")))?;
            let id: ParamId = k.trim().parse()?;
            if !id.is_scalar() {
                return Err(Error::Config(format!(
                    "'{id}' cannot be set from the command line"
                )));
            }
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value in '{s}'")))?;
            Ok((id, v))
        })
        .collect()
}

fn load_scan(cfg: &SensorConfig, arg: &str, seed: u64) -> Result<ReferenceScan> {
    let (scene, depth) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected SCENE=DEPTH, got '{arg}'")))?;
    let scene = Scene::load(scene)?;
    let is_pfm = Path::new(depth)
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    let (depth, valid) = if is_pfm {
        let d = read_pfm(depth)?;
        let valid = Mask {
            width: d.width,
            height: d.height,
            data: d.data.iter().map(|&z| z.is_finite() && z > 0.0).collect(),
        };
        (d, valid)
    } else {
        read_depth16(depth)?
    };
    if (depth.width, depth.height) != (cfg.width, cfg.height) {
        return Err(Error::Input(format!(
            "scan is {}x{} but the sensor is {}x{}",
            depth.width, depth.height, cfg.width, cfg.height
        )));
    }
    let bounds = depth
        .data
        .iter()
        .zip(&valid.data)
        .filter(|(_, &ok)| ok)
        .fold(None, |acc: Option<(f64, f64)>, (&z, _)| match acc {
            Some((lo, hi)) => Some((lo.min(z), hi.max(z))),
            None => Some((z, z)),
        });
    Ok(ReferenceScan {
        range: scene_range(cfg, bounds)?,
        scene,
        depth,
        valid,
        noise_seed: seed,
    })
}

pub fn calibrate(g: &Global, cfg: &SensorConfig, a: &CalibrateArgs) -> Outcome {
    let init_values = parse_init(&a.init)?;
    let device = cfg;
    let (cfg, scans, mut init, mut options) = if a.references.is_empty() {
        let setup = harness::calibration_experiment(cfg, g.seed)?;
        (setup.cfg, setup.scans, setup.init, setup.options)
    } else {
        if init_values.is_empty() {
            return Err(
                Error::Config("--init must name at least one parameter to fit".into()).into(),
            );
        }
        let scans = a
            .references
            .iter()
            .enumerate()
            .map(|(i, s)| load_scan(cfg, s, derive_seed(g.seed, 100 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let pattern = pattern_for(cfg, a.pattern.as_deref(), g.seed)?;
        let init = ParameterSet::new(cfg, &scans[0].scene, pattern);
        (cfg.clone(), scans, init, CalibrationOptions::default())
    };
    if !init_values.is_empty() {
        let ids: Vec<ParamId> = init_values.iter().map(|p| p.0).collect();
        init = init.with_flags(&ids);
        for &(id, v) in &init_values {
            init.set_values(id, &[v])?;
        }
        options.lr.retain(|(id, _)| ids.contains(id));
    }
    if let Some(n) = a.iterations {
        options.iterations = n;
    }
    if let Some(lr) = a.lr {
        options.adam.lr = lr;
        options.lr.clear();
    }
    let result = optim::calibrate(&cfg, &scans, init, &options)?;
    write_calibration(&g.out, device, &result)?;
    for (id, v) in fitted_values(&result) {
        println!("{id} = {v}");
    }
    println!("best loss {}", result.best_loss);
    match result.diverged {
        Some(why) => Err(Failure::Check(format!("calibration diverged: {why}"))),
        None => Ok(()),
    }
}

fn fitted_values(r: &CalibrationResult) -> Vec<(ParamId, f64)> {
    r.params
        .flags
        .iter()
        .filter(|id| id.is_scalar())
        .map(|&id| {
            (
                id,
                r.params.values(id).expect("flagged parameters exist")[0],
            )
        })
        .collect()
}

/// Writes the trace, the fitted values and `device` updated with them.
fn write_calibration(out: &Path, device: &SensorConfig, r: &CalibrationResult) -> Result<()> {
    let mut w = csv_writer(out.join("calibration_trace.csv"))?;
    let names: Vec<&str> = r
        .trace
        .first()
        .map(|t| t.values.iter().map(|v| v.0.name()).collect())
        .unwrap_or_default();
    let header = ["iteration", "loss"]
        .into_iter()
        .chain(names.iter().copied());
    w.write_record(header).map_err(csv_err)?;
    for row in &r.trace {
        let mut rec = vec![row.iteration.to_string(), row.loss.to_string()];
        rec.extend(row.values.iter().map(|v| v.1.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    let fitted: serde_json::Map<String, serde_json::Value> = fitted_values(r)
        .into_iter()
        .map(|(id, v)| (id.name().to_string(), v.into()))
        .collect();
    let summary = serde_json::json!({
        "parameters": fitted,
        "best_loss": r.best_loss,
        "iterations": r.trace.len().saturating_sub(1),
        "diverged": r.diverged,
    });
    std::fs::write(out.join("fitted.json"), format!("{summary:#}\n"))?;
    std::fs::write(
        out.join("fitted_config.toml"),
        r.params.apply(device).to_toml_string(),
    )?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct PoseArgs {
    /// Initial plane tilt, degrees.
    #[arg(long, default_value_t = 40.0)]
    alpha: f64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// Learning rate on the tilt, radians per step.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
}

#[derive(Serialize)]
struct PoseRecord {
    iteration: usize,
    alpha_deg: f64,
    loss: f64,
}

pub fn optimize_pose(g: &Global, cfg: &SensorConfig, a: &PoseArgs) -> Outcome {
    let (cfg, scene, pattern) = harness::pose_experiment(cfg, a.alpha, g.seed)?;
    let opts = PoseOptions {
        iterations: a.iterations,
        lr: a.lr,
        noise_seed: derive_seed(g.seed, 1),
        ..PoseOptions::default()
    };
    let trace = optim::optimize_scene_pose(&scene, &cfg, &pattern, &opts)?;
    let rows: Vec<PoseRecord> = trace
        .iter()
        .map(|r| PoseRecord {
            iteration: r.iteration,
            alpha_deg: r.alpha_deg,
            loss: r.loss,
        })
        .collect();
    write_csv(g.out.join("pose_trace.csv"), &rows)?;
    if let Some(last) = trace.last() {
        println!(
            "alpha {:.3} deg after {} iterations, loss {}",
            last.alpha_deg, last.iteration, last.loss
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PatternArgs {
    /// Initial dot level of each channel.
    #[arg(long, default_value_t = PATTERN_LEVEL)]
    level: f64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Upper bound of pattern values.
    #[arg(long, default_value_t = 1.0)]
    v_max: f64,
}

pub fn optimize_pattern(g: &Global, cfg: &SensorConfig, a: &PatternArgs) -> Outcome {
    let (cfg, scene, pattern) = harness::pattern_experiment(cfg, a.level, g.seed)?;
    let opts = PatternOptions {
        iterations: a.iterations,
        lr: a.lr,
        v_max: a.v_max,
        noise_seed: derive_seed(g.seed, 1),
        ..PatternOptions::default()
    };
    let result = optim::optimize_pattern(&scene, &cfg, &pattern, &opts)?;
    let mut w = csv_writer(g.out.join("pattern_trace.csv"))?;
    let nc = pattern.num_channels();
    let header = ["iteration".to_string(), "loss".to_string()]
        .into_iter()
        .chain((0..nc).map(|c| format!("energy_c{c}")));
    w.write_record(header).map_err(csv_err)?;
    for row in &result.trace {
        let mut rec = vec![row.iteration.to_string(), row.loss.to_string()];
        rec.extend(row.energy.iter().map(|e| e.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    write_pattern(&g.out, &result.pattern)?;
    let shares = optim::energy_fractions(&result.pattern);
    let shares: Vec<String> = shares.iter().map(|s| format!("{s:.4}")).collect();
    println!("channel energy shares: {}", shares.join(" "));
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Square frame side, px.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

pub fn gradcheck(g: &Global, cfg: &SensorConfig, a: &GradcheckArgs) -> Outcome {
    let opts = GradcheckOptions {
        size: a.size,
        seed: g.seed,
        ..GradcheckOptions::default()
    };
    let rows = harness::gradcheck(cfg, &opts)?;
    write_csv(g.out.join("gradcheck.csv"), &rows)?;
    let mut failed = 0;
    for r in &rows {
        let ok = r.rel_err < a.tolerance;
        failed += usize::from(!ok);
        println!(
            "{:<24} {:>5} ad {:>14.6e} fd {:>14.6e} rel {:>10.3e} {}",
            r.param,
            r.index,
            r.ad,
            r.fd,
            r.rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    println!("{} checks, worst relative error {worst:.3e}", rows.len());
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} gradient checks exceed {}",
            rows.len(),
            a.tolerance
        )));
    }
    Ok(())
}
