//! Calibration and the two toy optimizations.

use crate::config::{DisparityRange, SensorConfig};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::noise::{derive_seed, PostProcess};
use crate::params::{GradientVector, ParamId, ParameterSet};
use crate::pattern::PatternImage;
use crate::scene::Scene;
use crate::sim::{Frozen, SimOptions, Simulation};

use super::adam::{Adam, AdamConfig};
use super::loss::{record_loss, LossSpec};

/// A depth scan of a known scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScan {
    pub scene: Scene,
    pub depth: Image,
    pub valid: Mask,
    pub range: DisparityRange,
    /// Noise key used when simulating this scan.
    pub noise_seed: u64,
}

/// Simulate scans of `scenes` under `truth`, one noise key per scene.
pub fn simulate_scans(
    scenes: &[Scene],
    cfg: &SensorConfig,
    truth: &ParameterSet,
    seeds: &[u64],
    postprocess: &PostProcess,
) -> Result<Vec<ReferenceScan>> {
    if scenes.len() != seeds.len() {
        return Err(Error::Contract("one noise seed per scene required".into()));
    }
    scenes
        .iter()
        .zip(seeds)
        .map(|(scene, &seed)| {
            let opts = SimOptions {
                noise_seed: seed,
                postprocess: postprocess.clone(),
                frozen: None,
                ..SimOptions::default()
            };
            let sim = Simulation::record(scene, cfg, truth, &opts)?;
            Ok(ReferenceScan {
                scene: scene.clone(),
                depth: sim.depth_image(),
                valid: sim.valid.clone(),
                range: sim.range,
                noise_seed: seed,
            })
        })
        .collect()
}

/// One optimizer iteration: the loss at the parameters it was evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    /// Scalar flagged parameters.
    pub values: Vec<(ParamId, f64)>,
}

fn scalar_values(p: &ParameterSet) -> Vec<(ParamId, f64)> {
    p.flags
        .iter()
        .filter(|id| id.is_scalar())
        .map(|&id| (id, p.values(id).expect("flagged parameters exist")[0]))
        .collect()
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub iterations: usize,
    pub loss: LossSpec,
    pub adam: AdamConfig,
    pub lr: Vec<(ParamId, f64)>,
    pub postprocess: PostProcess,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            iterations: 100,
            loss: LossSpec::huber_sobel(),
            adam: AdamConfig::default(),
            lr: Vec::new(),
            postprocess: PostProcess::None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    /// Parameters with the lowest loss seen.
    pub params: ParameterSet,
    pub best_loss: f64,
    pub trace: Vec<TraceRow>,
    /// Set when the run stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Mean loss over scans and its gradient.
pub fn scan_loss(
    cfg: &SensorConfig,
    scans: &[ReferenceScan],
    params: &ParameterSet,
    loss: &LossSpec,
    postprocess: &PostProcess,
) -> Result<(f64, GradientVector)> {
    if scans.is_empty() {
        return Err(Error::Contract(
            "calibration needs at least one reference scan".into(),
        ));
    }
    let mut total = 0.0;
    let mut grads = GradientVector::default();
    let w = 1.0 / scans.len() as f64;
    for scan in scans {
        let opts = SimOptions {
            noise_seed: scan.noise_seed,
            postprocess: postprocess.clone(),
            frozen: Some(Frozen {
                range: scan.range,
                valid: None,
            }),
            ..SimOptions::default()
        };
        let mut sim = Simulation::record(&scan.scene, cfg, params, &opts)?;
        let mask = sim.valid.and(&scan.valid);
        let l = record_loss(&mut sim.tape, sim.depth, &scan.depth, &mask, loss)?;
        total += w * sim.tape.scalar_value(l);
        grads.add_scaled(&sim.gradients(l)?, w);
    }
    Ok((total, grads))
}

/// Keep parameters in their admissible sets after an update.
fn project(p: &mut ParameterSet) {
    p.noise_std = p.noise_std.max(0.0);
    p.temperature = p.temperature.max(1e-6);
    p.shadow_steepness = p.shadow_steepness.max(1e-6);
    p.emitter_intensity = p.emitter_intensity.max(0.0);
}

/// Fit the flagged parameters of `init` to the scans with Adam.
pub fn calibrate(
    cfg: &SensorConfig,
    scans: &[ReferenceScan],
    init: ParameterSet,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let mut adam = Adam::new(opts.adam);
    for &(id, lr) in &opts.lr {
        adam = adam.with_lr(id, lr);
    }
    let mut params = init;
    let mut best = (f64::INFINITY, params.clone());
    let mut trace = Vec::with_capacity(opts.iterations + 1);
    for it in 0..=opts.iterations {
        let (loss, grads) = match scan_loss(cfg, scans, &params, &opts.loss, &opts.postprocess) {
            Ok(v) => v,
            Err(e @ Error::Numerical(_)) => return Ok(diverged(best, trace, e.to_string())),
            Err(e) => return Err(e),
        };
        trace.push(TraceRow {
            iteration: it,
            loss,
            values: scalar_values(&params),
        });
        if !loss.is_finite() || !grads.is_finite() {
            return Ok(diverged(
                best,
                trace,
                format!("non-finite loss or gradient at iteration {it}"),
            ));
        }
        if loss < best.0 {
            best = (loss, params.clone());
        }
        if it == opts.iterations {
            break;
        }
        adam.step(&mut params, &grads)?;
        project(&mut params);
    }
    Ok(CalibrationResult {
        params: best.1,
        best_loss: best.0,
        trace,
        diverged: None,
    })
}

fn diverged(best: (f64, ParameterSet), trace: Vec<TraceRow>, why: String) -> CalibrationResult {
    CalibrationResult {
        params: best.1,
        best_loss: best.0,
        trace,
        diverged: Some(why),
    }
}

#[derive(Debug, Clone)]
pub struct PoseOptions {
    pub iterations: usize,
    /// Learning rate on the tilt in radians.
    pub lr: f64,
    pub loss: LossSpec,
    pub noise_seed: u64,
}

impl Default for PoseOptions {
    fn default() -> Self {
        PoseOptions {
            iterations: 500,
            lr: 0.01,
            loss: LossSpec::l1(),
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRow {
    pub iteration: usize,
    pub alpha_deg: f64,
    pub loss: f64,
}

/// Rotate the scene plane so that the simulated depth matches the noiseless
/// depth of a sensor-parallel plane at the same distance.
pub fn optimize_scene_pose(
    scene: &Scene,
    cfg: &SensorConfig,
    pattern: &PatternImage,
    opts: &PoseOptions,
) -> Result<Vec<PoseRow>> {
    let plane = scene
        .plane
        .ok_or_else(|| Error::Input("pose optimization needs a scene plane".into()))?;
    let base = cfg.clone();
    let mut params =
        ParameterSet::new(&base, scene, pattern.clone()).with_flags(&[ParamId::PlaneAlpha]);
    let target = Image::filled(cfg.width, cfg.height, plane.z);
    let mut adam = Adam::new(AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    });
    let mut trace = Vec::with_capacity(opts.iterations + 1);
    for it in 0..=opts.iterations {
        let sim_opts = SimOptions {
            noise_seed: opts.noise_seed,
            ..SimOptions::default()
        };
        let mut sim = Simulation::record(scene, &base, &params, &sim_opts)?;
        if sim.capture.hit_mask.count() != cfg.width * cfg.height {
            return Err(Error::Numerical(format!(
                "plane no longer covers the frame at iteration {it}; pose gradients are invalid"
            )));
        }
        let l = record_loss(&mut sim.tape, sim.depth, &target, &sim.valid, &opts.loss)?;
        let alpha = params.plane.expect("scene has a plane").1;
        let loss = sim.tape.scalar_value(l);
        trace.push(PoseRow {
            iteration: it,
            alpha_deg: alpha.to_degrees(),
            loss,
        });
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {it}"
            )));
        }
        if it == opts.iterations {
            break;
        }
        let g = sim.gradients(l)?;
        adam.step(&mut params, &g)?;
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct PatternOptions {
    pub iterations: usize,
    pub lr: f64,
    /// Upper clamp of pattern values.
    pub v_max: f64,
    pub loss: LossSpec,
    pub noise_seed: u64,
    /// Draw a fresh noise field every iteration instead of reusing one.
    pub resample_noise: bool,
    /// Treat the reference lookup table as fixed within each step.
    pub detach_references: bool,
}

impl Default for PatternOptions {
    fn default() -> Self {
        PatternOptions {
            iterations: 500,
            lr: 0.01,
            v_max: 1.0,
            loss: LossSpec::l1(),
            noise_seed: 0,
            resample_noise: true,
            detach_references: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternRow {
    pub iteration: usize,
    pub loss: f64,
    /// Share of total pattern energy per channel.
    pub energy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PatternResult {
    pub trace: Vec<PatternRow>,
    pub pattern: PatternImage,
}

pub fn energy_fractions(p: &PatternImage) -> Vec<f64> {
    let e: Vec<f64> = (0..p.num_channels()).map(|c| p.energy(c)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect()
}

/// Optimize the pattern values against the noiseless depth of the scene,
/// clamping to `[0, v_max]` after every step.
pub fn optimize_pattern(
    scene: &Scene,
    cfg: &SensorConfig,
    pattern: &PatternImage,
    opts: &PatternOptions,
) -> Result<PatternResult> {
    if !(opts.v_max > 0.0) {
        return Err(Error::Config("v_max must be positive".into()));
    }
    let mut params = ParameterSet::new(cfg, scene, pattern.clone()).with_flags(&[ParamId::Pattern]);
    let mut adam = Adam::new(AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    });
    let mut trace = Vec::with_capacity(opts.iterations + 1);
    let mut target: Option<(Image, Mask)> = None;
    for it in 0..=opts.iterations {
        let sim_opts = SimOptions {
            noise_seed: if opts.resample_noise {
                derive_seed(opts.noise_seed, it as u64)
            } else {
                opts.noise_seed
            },
            detach_references: opts.detach_references,
            ..SimOptions::default()
        };
        let mut sim = Simulation::record(scene, cfg, &params, &sim_opts)?;
        let (gt, hit) =
            target.get_or_insert_with(|| (sim.gt_depth(), sim.capture.hit_mask.clone()));
        let mask = sim.valid.and(hit);
        let l = record_loss(&mut sim.tape, sim.depth, gt, &mask, &opts.loss)?;
        let loss = sim.tape.scalar_value(l);
        trace.push(PatternRow {
            iteration: it,
            loss,
            energy: energy_fractions(&params.pattern),
        });
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {it}"
            )));
        }
        if it == opts.iterations {
            break;
        }
        let g = sim.gradients(l)?;
        adam.step(&mut params, &g)?;
        for ch in params.pattern.channels.iter_mut() {
            ch.data
                .iter_mut()
                .for_each(|v| *v = v.clamp(0.0, opts.v_max));
        }
    }
    Ok(PatternResult {
        trace,
        pattern: params.pattern,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::scene::Plane;

    fn small() -> SensorConfig {
        Preset::KinectV1.config().with_size(32, 24)
    }

    #[test]
    fn zero_iterations_return_initial_parameters() {
        let cfg = small();
        let scene = Scene::with_plane(Plane::frontal(1000.0));
        let pattern = PatternImage::random_dots(160, 24, 0.3, 2);
        let truth = ParameterSet::new(&cfg, &scene, pattern);
        let scans = simulate_scans(&[scene], &cfg, &truth, &[1], &PostProcess::None).unwrap();
        let mut init = truth.clone().with_flags(&[ParamId::ShadowBias]);
        init.shadow_bias = 1.0;
        let opts = CalibrationOptions {
            iterations: 0,
            ..Default::default()
        };
        let r = calibrate(&cfg, &scans, init.clone(), &opts).unwrap();
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.params, init);
    }

    #[test]
    fn calibration_from_truth_never_worsens() {
        let cfg = small();
        let scene = Scene::with_plane(Plane::tilted(1000.0, 20.0));
        let pattern = PatternImage::random_dots(160, 24, 0.3, 3);
        let mut truth = ParameterSet::new(&cfg, &scene, pattern)
            .with_flags(&[ParamId::ShadowBias, ParamId::NoiseStd]);
        truth.noise_std = 0.02;
        let scans = simulate_scans(&[scene], &cfg, &truth, &[7], &PostProcess::None).unwrap();
        let opts = CalibrationOptions {
            iterations: 3,
            ..Default::default()
        };
        let r = calibrate(&cfg, &scans, truth.clone(), &opts).unwrap();
        assert_eq!(r.trace[0].loss, 0.0);
        assert_eq!(r.best_loss, 0.0);
        assert_eq!(r.params, truth);
    }

    fn tilt_gradient(cfg: &SensorConfig, pattern: &PatternImage, alpha_deg: f64) -> f64 {
        let scene = Scene::with_plane(Plane::tilted(1000.0, alpha_deg));
        let params =
            ParameterSet::new(cfg, &scene, pattern.clone()).with_flags(&[ParamId::PlaneAlpha]);
        let mut sim = Simulation::record(&scene, cfg, &params, &SimOptions::default()).unwrap();
        let target = Image::filled(cfg.width, cfg.height, 1000.0);
        let l = record_loss(
            &mut sim.tape,
            sim.depth,
            &target,
            &sim.valid,
            &LossSpec::l1(),
        )
        .unwrap();
        sim.gradients(l)
            .unwrap()
            .scalar(ParamId::PlaneAlpha)
            .unwrap()
    }

    #[test]
    fn frontal_pose_is_stationary() {
        let cfg = Preset::KinectV1.config().with_size(48, 48);
        let pattern = PatternImage::random_dots(320, 48, 0.3, 4);
        let g0 = tilt_gradient(&cfg, &pattern, 0.0);
        let g20 = tilt_gradient(&cfg, &pattern, 20.0);
        assert!(g20 > 0.0 && g0.abs() < 0.05 * g20, "{g0} vs {g20}");
        let scene = Scene::with_plane(Plane::frontal(1000.0));
        let opts = PoseOptions {
            iterations: 5,
            ..Default::default()
        };
        let trace = optimize_scene_pose(&scene, &cfg, &pattern, &opts).unwrap();
        assert!(trace.iter().all(|r| r.alpha_deg.abs() < 3.0));
    }

    #[test]
    fn grayscale_pattern_optimization_runs() {
        let cfg = small();
        let scene = Scene::with_plane(Plane::tilted(1000.0, 15.0));
        let pattern = PatternImage::random_dots(160, 24, 0.3, 5);
        let opts = PatternOptions {
            iterations: 2,
            ..Default::default()
        };
        let r = optimize_pattern(&scene, &cfg, &pattern, &opts).unwrap();
        assert_eq!(r.trace.len(), 3);
        assert_eq!(r.trace[0].energy, vec![1.0]);
        assert!(r.pattern.channels[0]
            .data
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn unseen_channels_keep_their_energy() {
        let cfg = small();
        let mut plane = Plane::tilted(1000.0, 15.0);
        plane.albedo = [1.0, 0.0, 0.0];
        let scene = Scene::with_plane(plane);
        let pattern = PatternImage::random_color_dots(160, 24, 0.3, 0.2, 6);
        let opts = PatternOptions {
            iterations: 3,
            ..Default::default()
        };
        let r = optimize_pattern(&scene, &cfg, &pattern, &opts).unwrap();
        for c in 1..3 {
            assert!(r.pattern.energy(c) <= pattern.energy(c) + 1e-12);
        }
        assert!(r.pattern.energy(0) > pattern.energy(0));
    }
}
