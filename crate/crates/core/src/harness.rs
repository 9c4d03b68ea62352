//! Experiment drivers: noise study, pair matching, gradient check and the
//! scenes used by the optimization experiments.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::central_difference;
use crate::config::{disparity_range, DisparityRange, SensorConfig};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::noise::{apply_capture_noise, derive_seed, ConvPostProcessor, NoiseParams, PostProcess};
use crate::optim::{
    record_loss, simulate_scans, CalibrationOptions, LossKind, LossSpec, ReferenceScan,
};
use crate::params::{ParamId, ParameterSet};
use crate::pattern::PatternImage;
use crate::render::{render_capture, render_reference_patterns, sum_vars};
use crate::scene::{Object, Plane, Scene};
use crate::sim::{scene_range, SimOptions, Simulation};
use crate::stereo::{match_disparity, DisparityMap, MatchParams};

/// Speckle pattern large enough for every disparity of the sensor range:
/// the emitter principal point sits at the raster center.
pub fn sensor_pattern(cfg: &SensorConfig, density: f64, seed: u64) -> Result<PatternImage> {
    let full = disparity_range(cfg, None)?;
    let w = cfg.width + 2 * full.max as usize + 4;
    Ok(PatternImage::random_dots(w, cfg.height + 4, density, seed))
}

/// Default speckle density of generated patterns.
pub const DOT_DENSITY: f64 = 0.3;
/// Initial per-channel dot level of the pattern experiment.
pub const PATTERN_LEVEL: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStudyGrid {
    /// Plane distances, mm.
    pub z: Vec<f64>,
    /// Plane tilts, degrees.
    pub alpha_deg: Vec<f64>,
    /// Noise draws per cell.
    pub samples: usize,
}

impl NoiseStudyGrid {
    pub fn validate(&self, cfg: &SensorConfig) -> Result<()> {
        if self.z.is_empty() || self.alpha_deg.is_empty() || self.samples == 0 {
            return Err(Error::Config(
                "noise study needs distances, tilts and samples >= 1".into(),
            ));
        }
        if let Some(z) = self
            .z
            .iter()
            .find(|z| !(**z >= cfg.z_min && **z <= cfg.z_max))
        {
            return Err(Error::Config(format!(
                "distance {z} mm is outside [{}, {}]",
                cfg.z_min, cfg.z_max
            )));
        }
        if let Some(a) = self.alpha_deg.iter().find(|a| !(a.abs() < 90.0)) {
            return Err(Error::Config(format!("tilt {a} deg must satisfy |a| < 90")));
        }
        Ok(())
    }
}

/// Number of radial bins between the principal point and the half-diagonal.
pub const RADIAL_BINS: usize = 16;

/// One `(z, alpha, r)` cell of the noise study. `std_err_mm` is empty when
/// the bin holds no valid pixel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseRow {
    pub z_mm: f64,
    pub alpha_deg: f64,
    /// Bin center, px.
    pub r_bin_px: f64,
    pub std_err_mm: Option<f64>,
    pub n_pixels: usize,
}

/// Radial bin of every pixel, by distance to the principal point.
pub fn radial_bins(cfg: &SensorConfig) -> (Vec<usize>, f64) {
    let (cx, cy) = cfg.principal_point();
    let half_diag = (cfg.width as f64).hypot(cfg.height as f64) / 2.0;
    let step = half_diag / RADIAL_BINS as f64;
    let bins = (0..cfg.height)
        .flat_map(|y| (0..cfg.width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let r = (x as f64 - cx).hypot(y as f64 - cy);
            ((r / step) as usize).min(RADIAL_BINS - 1)
        })
        .collect();
    (bins, step)
}

/// Analytic depth of a plane at every pixel center.
pub fn plane_depth(cfg: &SensorConfig, plane: &Plane) -> Image {
    let (cx, cy) = cfg.principal_point();
    let f = cfg.focal_length;
    Image::from_fn(cfg.width, cfg.height, |x, y| {
        plane
            .depth_along((x as f64 - cx) / f, (y as f64 - cy) / f)
            .unwrap_or(f64::NAN)
    })
}

/// Render, add noise and match one plane; returns depth and validity per
/// sample. References are cached per disparity range.
fn plane_scans(
    cfg: &SensorConfig,
    pattern: &PatternImage,
    plane: Plane,
    seeds: &[u64],
    refs: &mut BTreeMap<i64, Vec<Vec<Image>>>,
) -> Result<Vec<(Image, Mask)>> {
    let capture = render_capture(&Scene::with_plane(plane), cfg, pattern)?;
    let hits: Vec<f64> = capture
        .gt_depth
        .data
        .iter()
        .zip(&capture.hit_mask.data)
        .filter(|(_, &h)| h)
        .map(|(z, _)| *z)
        .collect();
    if hits.is_empty() {
        return Ok(Vec::new());
    }
    let lo = hits.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = hits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = scene_range(cfg, Some((lo, hi)))?;
    if let std::collections::btree_map::Entry::Vacant(e) = refs.entry(range.min) {
        e.insert(render_reference_patterns(cfg, pattern, range.min)?);
    }
    let r = &refs[&range.min];
    let mp = MatchParams::new(cfg, range);
    seeds
        .iter()
        .map(|&seed| {
            let noisy = apply_capture_noise(
                &capture.channels,
                &NoiseParams::new(cfg.noise_mean, cfg.noise_std, seed)?,
            );
            let disp = match match_disparity(&noisy, r, &mp) {
                Ok(d) => d,
                // Range too wide for this crop: nothing valid.
                Err(Error::Config(_)) => {
                    return Ok((
                        Image::new(cfg.width, cfg.height),
                        Mask::new(cfg.width, cfg.height, false),
                    ))
                }
                Err(e) => return Err(e),
            };
            let depth = Image::from_vec(
                cfg.width,
                cfg.height,
                disp.disparity
                    .data
                    .iter()
                    .map(|&d| cfg.depth_from_disparity(d))
                    .collect(),
            )?;
            Ok((depth, disp.valid.and(&capture.hit_mask)))
        })
        .collect()
}

/// Median simulated depth of frontal planes at `z_lo, z_lo + dz, ..,
/// z_hi`, without capture noise. Planes with no valid pixel are skipped.
pub fn depth_staircase(
    cfg: &SensorConfig,
    pattern: &PatternImage,
    z_lo: f64,
    z_hi: f64,
    dz: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(dz > 0.0) || !(z_hi >= z_lo) {
        return Err(Error::Config(
            "staircase needs dz > 0 and z_hi >= z_lo".into(),
        ));
    }
    let mut c = cfg.clone();
    c.noise_std = 0.0;
    c.noise_mean = 0.0;
    let mut refs = BTreeMap::new();
    let n = ((z_hi - z_lo) / dz).round() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let z = z_lo + i as f64 * dz;
        let (depth, valid) =
            plane_scans(&c, pattern, Plane::frontal(z), &[0], &mut refs)?.remove(0);
        let mut v: Vec<f64> = depth
            .data
            .iter()
            .zip(&valid.data)
            .filter(|(_, &m)| m)
            .map(|(d, _)| *d)
            .collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        out.push((z, v[v.len() / 2]));
    }
    Ok(out)
}

/// Output levels where a depth staircase dwells: runs of consecutive
/// samples whose output rises slower than the true depth. Each run is
/// reported by its median output.
pub fn dwell_levels(curve: &[(f64, f64)]) -> Vec<f64> {
    let mut levels = Vec::new();
    let mut run: Vec<f64> = Vec::new();
    let mut flush = |run: &mut Vec<f64>| {
        if run.len() >= 2 {
            run.sort_by(f64::total_cmp);
            levels.push(run[run.len() / 2]);
        }
        run.clear();
    };
    for w in curve.windows(2) {
        let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
        if slope < 1.0 {
            if run.is_empty() {
                run.push(w[0].1);
            }
            run.push(w[1].1);
        } else {
            flush(&mut run);
        }
    }
    flush(&mut run);
    levels
}

/// Mean spacing of the levels on either side of the level nearest `z`.
pub fn local_step(levels: &[f64], z: f64) -> Option<f64> {
    let i = (0..levels.len())
        .min_by(|&a, &b| (levels[a] - z).abs().total_cmp(&(levels[b] - z).abs()))?;
    let mut gaps = Vec::new();
    if i > 0 {
        gaps.push(levels[i] - levels[i - 1]);
    }
    if i + 1 < levels.len() {
        gaps.push(levels[i + 1] - levels[i]);
    }
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Standard depth error (RMS over samples and pixels of a radial bin) of a
/// plane at every `(z, alpha)` of the grid. Rows are ordered by z, alpha, r.
pub fn noise_study(
    cfg: &SensorConfig,
    pattern: &PatternImage,
    grid: &NoiseStudyGrid,
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    cfg.validate_optics()?;
    grid.validate(cfg)?;
    let (bins, step) = radial_bins(cfg);
    let mut refs = BTreeMap::new();
    let mut rows = Vec::new();
    let mut cell = 0u64;
    for &z in &grid.z {
        for &alpha in &grid.alpha_deg {
            let plane = Plane::tilted(z, alpha);
            let truth = plane_depth(cfg, &plane);
            let seeds: Vec<u64> = (0..grid.samples as u64)
                .map(|s| derive_seed(seed, cell * grid.samples as u64 + s))
                .collect();
            cell += 1;
            let mut sq = [0.0; RADIAL_BINS];
            let mut n = [0usize; RADIAL_BINS];
            for (depth, valid) in plane_scans(cfg, pattern, plane, &seeds, &mut refs)? {
                for i in 0..depth.data.len() {
                    if valid.data[i] && truth.data[i].is_finite() {
                        let e = depth.data[i] - truth.data[i];
                        sq[bins[i]] += e * e;
                        n[bins[i]] += 1;
                    }
                }
            }
            for b in 0..RADIAL_BINS {
                rows.push(NoiseRow {
                    z_mm: z,
                    alpha_deg: alpha,
                    r_bin_px: (b as f64 + 0.5) * step,
                    std_err_mm: (n[b] > 0).then(|| (sq[b] / n[b] as f64).sqrt()),
                    n_pixels: n[b],
                });
            }
        }
    }
    Ok(rows)
}

/// Pooled standard error of one `(z, alpha)` cell.
pub fn cell_error(rows: &[NoiseRow], z: f64, alpha: f64) -> Option<f64> {
    let (sq, n) = rows
        .iter()
        .filter(|r| r.z_mm == z && r.alpha_deg == alpha)
        .filter_map(|r| {
            r.std_err_mm
                .map(|e| (e * e * r.n_pixels as f64, r.n_pixels))
        })
        .fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    (n > 0).then(|| (sq / n as f64).sqrt())
}

/// Settings for matching a generic rectified pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOptions {
    pub block: usize,
    pub max_disparity: i64,
    pub beta: f64,
    pub min_score: f64,
}

impl PairOptions {
    pub fn from_config(cfg: &SensorConfig, max_disparity: i64) -> Self {
        PairOptions {
            block: cfg.block_size,
            max_disparity,
            beta: cfg.softargmax_temperature,
            min_score: cfg.min_score,
        }
    }
}

/// Soft disparity of `left` against `right` over `[0, max_disparity]`, where
/// `left(x)` corresponds to `right(x - d)`.
pub fn match_pair(left: &Image, right: &Image, opts: &PairOptions) -> Result<DisparityMap> {
    if !left.same_shape(right) {
        return Err(Error::Input(format!(
            "pair sizes differ: {}x{} vs {}x{}",
            left.width, left.height, right.width, right.height
        )));
    }
    let p = MatchParams {
        block: opts.block,
        n_sub: 1,
        beta: opts.beta,
        min_score: opts.min_score,
        range: DisparityRange::new(0, opts.max_disparity)?,
    };
    match_disparity(std::slice::from_ref(left), &[vec![right.clone()]], &p)
}

/// Gradient-check settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Square image side, px.
    pub size: usize,
    pub z: f64,
    pub alpha_deg: f64,
    pub noise_std: f64,
    /// Sampled conv weights and pattern pixels.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            size: 16,
            z: 1000.0,
            alpha_deg: 20.0,
            noise_std: 0.02,
            samples: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub param: String,
    pub index: usize,
    pub ad: f64,
    pub fd: f64,
    pub rel_err: f64,
}

/// Gradients at or below this magnitude count as zero when comparing.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// `|ad - fd| / max(|ad|, |fd|, GRADCHECK_FLOOR)`.
pub fn gradcheck_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(GRADCHECK_FLOOR)
}

/// Sensor used by the gradient check: the preset cropped to `size`, with the
/// block shrunk so that small crops keep valid pixels.
pub fn gradcheck_config(cfg: &SensorConfig, size: usize) -> SensorConfig {
    let mut c = cfg.with_size(size, size);
    let fit = ((size / 3).max(3) - 1) | 1;
    c.block_size = c.block_size.min(fit.max(3));
    c.disparity_margin = c.disparity_margin.min(1);
    c
}

/// Compare tape gradients of a Huber depth loss with central differences
/// for every parameter kind, on a plane seen through a random conv2 stage.
/// Discrete choices (search range, validity) are frozen at the base point.
pub fn gradcheck(cfg: &SensorConfig, opts: &GradcheckOptions) -> Result<Vec<GradcheckRow>> {
    let cfg = gradcheck_config(cfg, opts.size);
    cfg.validate_optics()?;
    let scene = Scene::with_plane(Plane::tilted(opts.z, opts.alpha_deg));
    let pattern = sensor_pattern(&cfg, DOT_DENSITY, opts.seed)?;
    let mut base = ParameterSet::new(&cfg, &scene, pattern).with_flags(&ParamId::ALL);
    base.noise_std = opts.noise_std;
    base.conv = Some(ConvPostProcessor::random(derive_seed(opts.seed, 1), 0.05));
    let noise_seed = derive_seed(opts.seed, 2);
    let spec = LossSpec::single(LossKind::Huber(crate::optim::loss::DEFAULT_HUBER));
    let post = PostProcess::Conv2(None);

    let first = Simulation::record(
        &scene,
        &cfg,
        &base,
        &SimOptions {
            noise_seed,
            postprocess: post.clone(),
            frozen: None,
            ..SimOptions::default()
        },
    )?;
    let target = first.gt_depth();
    let frozen = first.frozen();
    if frozen.valid.as_ref().map_or(0, Mask::count) == 0 {
        return Err(Error::Config(format!(
            "no valid pixel at size {}",
            opts.size
        )));
    }
    let sim_opts = SimOptions {
        noise_seed,
        postprocess: post,
        frozen: Some(frozen.clone()),
        ..SimOptions::default()
    };
    let mask = frozen.valid.clone().expect("frozen mask");
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut sim = Simulation::record(&scene, &cfg, p, &sim_opts)?;
        let l = record_loss(&mut sim.tape, sim.depth, &target, &mask, &spec)?;
        Ok(sim.tape.scalar_value(l))
    };
    let mut sim = Simulation::record(&scene, &cfg, &base, &sim_opts)?;
    let l = record_loss(&mut sim.tape, sim.depth, &target, &mask, &spec)?;
    let grads = sim.gradients(l)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 3));
    let mut picks: Vec<(ParamId, usize, f64)> = Vec::new();
    for id in [
        ParamId::ShadowBias,
        ParamId::NoiseMean,
        ParamId::NoiseStd,
        ParamId::Temperature,
        ParamId::EmitterIntensity,
        ParamId::ShadowSteepness,
        ParamId::PlaneZ,
        ParamId::PlaneAlpha,
    ] {
        let v = base.values(id)?[0];
        let h = match id {
            // Bilinear pattern taps are only piecewise smooth in the pose.
            ParamId::PlaneZ => 1e-8 * v.abs(),
            ParamId::PlaneAlpha => 1e-7,
            // The loss is flat in the offset; only rounding matters.
            ParamId::NoiseMean => 1e-2,
            _ => 1e-4 * v.abs().max(1.0),
        };
        picks.push((id, 0, h));
    }
    let n_conv = base.values(ParamId::ConvWeights)?.len();
    let mut conv_idx: Vec<usize> = (0..n_conv).collect();
    conv_idx.shuffle(&mut rng);
    picks.extend(
        conv_idx
            .into_iter()
            .take(opts.samples)
            .map(|i| (ParamId::ConvWeights, i, 1e-6)),
    );
    let g_pat = grads.get(ParamId::Pattern).expect("pattern flagged");
    let mut pat_idx: Vec<usize> = (0..g_pat.len()).filter(|&i| g_pat[i] != 0.0).collect();
    pat_idx.shuffle(&mut rng);
    picks.extend(
        pat_idx
            .into_iter()
            .take(opts.samples)
            .map(|i| (ParamId::Pattern, i, 1e-3)),
    );

    picks
        .into_iter()
        .map(|(id, i, h)| {
            let ad = grads.get(id).expect("flagged")[i];
            let values = base.values(id)?;
            let fd = central_difference(
                |x| {
                    let mut p = base.clone();
                    let mut v = values.clone();
                    v[i] = x;
                    p.set_values(id, &v)?;
                    eval(&p)
                },
                values[i],
                h,
            )?;
            Ok(GradcheckRow {
                param: id.name().to_string(),
                index: i,
                ad,
                fd,
                rel_err: gradcheck_error(ad, fd),
            })
        })
        .collect()
}

/// Pattern pixels that reach the capture or a reference of `scene`: those
/// with a nonzero derivative of the summed luminance.
pub fn projector_footprint(
    cfg: &SensorConfig,
    scene: &Scene,
    pattern: &PatternImage,
) -> Result<Mask> {
    let probe = PatternImage::uniform(pattern.width, pattern.height, 1, 1.0);
    let params = ParameterSet::new(cfg, scene, probe).with_flags(&[ParamId::Pattern]);
    let mut sim = Simulation::record(scene, cfg, &params, &SimOptions::default())?;
    let mut parts = sim.capture.channels.clone();
    parts.extend(sim.references.iter().copied());
    let tape = &mut sim.tape;
    let sums: Vec<_> = parts.into_iter().map(|v| tape.sum(v)).collect();
    let total = sum_vars(tape, &sums);
    let g = sim.gradients(total)?;
    Ok(Mask {
        width: pattern.width,
        height: pattern.height,
        data: g
            .get(ParamId::Pattern)
            .expect("flagged")
            .iter()
            .map(|&v| v != 0.0)
            .collect(),
    })
}

/// Sensor, tilted plane and pattern of the pose-recovery experiment.
pub fn pose_experiment(
    cfg: &SensorConfig,
    alpha_deg: f64,
    seed: u64,
) -> Result<(SensorConfig, Scene, PatternImage)> {
    let c = cfg.with_size(64, 64);
    let pattern = sensor_pattern(&c, DOT_DENSITY, seed)?;
    Ok((
        c,
        Scene::with_plane(Plane::tilted(1000.0, alpha_deg)),
        pattern,
    ))
}

/// Sensor, red-only plane and a balanced RGB pattern of the pattern
/// experiment. The pattern is zero outside the projector footprint, so its
/// channel energies are the energies the sensor actually uses.
pub fn pattern_experiment(
    cfg: &SensorConfig,
    level: f64,
    seed: u64,
) -> Result<(SensorConfig, Scene, PatternImage)> {
    let c = cfg.with_size(64, 64);
    let mut plane = Plane::tilted(1000.0, 20.0);
    plane.albedo = [1.0, 0.0, 0.0];
    let scene = Scene::with_plane(plane);
    let probe = sensor_pattern(&c, DOT_DENSITY, seed)?;
    let foot = projector_footprint(&c, &scene, &probe)?;
    let mut pattern =
        PatternImage::random_color_dots(probe.width, probe.height, DOT_DENSITY, level, seed);
    for ch in pattern.channels.iter_mut() {
        for (v, &m) in ch.data.iter_mut().zip(&foot.data) {
            if !m {
                *v = 0.0;
            }
        }
    }
    Ok((c, scene, pattern))
}

/// Frontal backdrop at `z` with vertical stripes `stripe_mm` wide standing
/// `steps[i]` mm in front of it, one stripe every `2 * stripe_mm`. Each
/// stripe edge casts a thin shadow whose depth gap is a few mm, where the
/// shadow test is sensitive to its bias.
pub fn comb_scene(z: f64, steps: &[f64], stripe_mm: f64) -> Scene {
    let mut scene = Scene::with_plane(Plane::frontal(z));
    let half = 0.5 * z;
    let n = (2.0 * half / (2.0 * stripe_mm)).ceil() as usize;
    for i in 0..n {
        let x0 = -half + 2.0 * stripe_mm * i as f64;
        let dz = steps[i % steps.len()];
        scene.objects.push(Object::rectangle(
            format!("stripe{i}"),
            x0,
            -half,
            x0 + stripe_mm,
            half,
            z - dz,
            [1.0; 3],
        ));
    }
    scene
}

/// Reference scenes of the calibration experiment.
pub fn calibration_scenes() -> Vec<Scene> {
    vec![
        comb_scene(550.0, &[3.0, 5.0, 7.0], 6.0),
        comb_scene(650.0, &[4.0, 6.0, 8.0], 7.0),
    ]
}

/// Inputs of the self-calibration experiment.
#[derive(Debug, Clone)]
pub struct CalibrationSetup {
    pub cfg: SensorConfig,
    pub truth: ParameterSet,
    pub scans: Vec<ReferenceScan>,
    /// Flagged start point.
    pub init: ParameterSet,
    pub options: CalibrationOptions,
}

/// Scans of [`calibration_scenes`] simulated with `(xi, sigma) = (5, 0.02)`
/// on a 96x96 crop, and a start point at `(1, 0.001)`. Noise keys are
/// shared between the scans and the fit.
pub fn calibration_experiment(cfg: &SensorConfig, seed: u64) -> Result<CalibrationSetup> {
    let c = cfg.with_size(96, 96);
    let scenes = calibration_scenes();
    let pattern = sensor_pattern(&c, DOT_DENSITY, seed)?;
    let mut truth = ParameterSet::new(&c, &scenes[0], pattern);
    truth.shadow_bias = 5.0;
    truth.noise_std = 0.02;
    let seeds: Vec<u64> = (0..scenes.len() as u64)
        .map(|i| derive_seed(seed, 100 + i))
        .collect();
    let scans = simulate_scans(&scenes, &c, &truth, &seeds, &PostProcess::None)?;
    let mut init = truth
        .clone()
        .with_flags(&[ParamId::ShadowBias, ParamId::NoiseStd]);
    init.shadow_bias = 1.0;
    init.noise_std = 0.001;
    let options = CalibrationOptions {
        iterations: 200,
        lr: vec![(ParamId::ShadowBias, 0.05), (ParamId::NoiseStd, 0.001)],
        ..CalibrationOptions::default()
    };
    Ok(CalibrationSetup {
        cfg: c,
        truth,
        scans,
        init,
        options,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn identical_pair_has_zero_disparity() {
        let img = Image::from_fn(40, 24, |x, y| {
            ((x * 7 + y * 13) % 11) as f64 + ((x * y) % 5) as f64
        });
        let opts = PairOptions {
            block: 5,
            max_disparity: 6,
            beta: 50.0,
            min_score: 0.3,
        };
        let d = match_pair(&img, &img, &opts).unwrap();
        let mut n = 0;
        for i in 0..d.disparity.data.len() {
            if d.valid.data[i] {
                assert!(d.disparity.data[i].abs() < 0.5);
                n += 1;
            }
        }
        assert!(n > 100);
    }

    #[test]
    fn shifted_pair_recovers_shift() {
        let pat = PatternImage::random_dots(80, 30, 0.4, 3);
        let right = pat.channels[0].clone();
        let left = right.shifted_right(10);
        let opts = PairOptions {
            block: 7,
            max_disparity: 16,
            beta: 50.0,
            min_score: 0.3,
        };
        let d = match_pair(&left, &right, &opts).unwrap();
        let vals: Vec<f64> = (0..d.valid.data.len())
            .filter(|&i| d.valid.data[i])
            .map(|i| d.disparity.data[i])
            .collect();
        assert!(vals.len() > 500);
        assert!(vals.iter().all(|v| (v - 10.0).abs() <= 0.5));
    }

    #[test]
    fn flat_pair_is_invalid() {
        let img = Image::filled(30, 20, 0.5);
        let opts = PairOptions {
            block: 5,
            max_disparity: 4,
            beta: 50.0,
            min_score: 0.3,
        };
        assert_eq!(match_pair(&img, &img, &opts).unwrap().valid.count(), 0);
    }

    #[test]
    fn mismatched_pair_is_an_input_error() {
        let opts = PairOptions {
            block: 5,
            max_disparity: 4,
            beta: 50.0,
            min_score: 0.3,
        };
        let r = match_pair(&Image::new(10, 10), &Image::new(11, 10), &opts);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn grid_validation() {
        let cfg = Preset::KinectV1.config();
        let ok = NoiseStudyGrid {
            z: vec![1000.0],
            alpha_deg: vec![0.0],
            samples: 1,
        };
        assert!(ok.validate(&cfg).is_ok());
        for bad in [
            NoiseStudyGrid {
                z: vec![100.0],
                ..ok.clone()
            },
            NoiseStudyGrid {
                alpha_deg: vec![90.0],
                ..ok.clone()
            },
            NoiseStudyGrid {
                samples: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate(&cfg).is_err());
        }
    }

    #[test]
    fn noiseless_quantization_bound() {
        let mut cfg = Preset::KinectV1.config().with_size(48, 32);
        cfg.noise_std = 0.0;
        cfg.subpixel_levels = 4;
        let pattern = sensor_pattern(&cfg, DOT_DENSITY, 1).unwrap();
        // Exactly on a label depth.
        let z = cfg.depth_constant() / 43.0;
        let grid = NoiseStudyGrid {
            z: vec![z],
            alpha_deg: vec![0.0],
            samples: 1,
        };
        let rows = noise_study(&cfg, &pattern, &grid, 0).unwrap();
        assert_eq!(rows.len(), RADIAL_BINS);
        let bound = z * z / (2.0 * cfg.depth_constant() * cfg.subpixel_levels as f64);
        let e = cell_error(&rows, z, 0.0).unwrap();
        assert!(e <= bound, "{e} > {bound}");
    }

    #[test]
    fn radial_bins_cover_the_image() {
        let cfg = Preset::KinectV1.config().with_size(40, 30);
        let (bins, step) = radial_bins(&cfg);
        assert_eq!(bins.len(), 1200);
        assert_eq!(*bins.iter().max().unwrap(), RADIAL_BINS - 1);
        assert!((step * RADIAL_BINS as f64 - 25.0).abs() < 1e-12);
    }

    #[test]
    fn footprint_is_a_proper_subset() {
        let cfg = Preset::KinectV1.config().with_size(24, 24);
        let scene = Scene::with_plane(Plane::frontal(1000.0));
        let pattern = sensor_pattern(&cfg, DOT_DENSITY, 1).unwrap();
        let m = projector_footprint(&cfg, &scene, &pattern).unwrap();
        let n = m.count();
        assert!(n > 24 * 24 && n < pattern.width * pattern.height, "{n}");
    }

    #[test]
    fn small_gradcheck_passes() {
        let cfg = Preset::KinectV1.config();
        let opts = GradcheckOptions {
            size: 10,
            samples: 4,
            ..Default::default()
        };
        let rows = gradcheck(&cfg, &opts).unwrap();
        assert_eq!(rows.len(), 16);
        for r in rows {
            assert!(r.rel_err < 1e-4, "{r:?}");
        }
    }
}
