//! Emitter -> scene -> camera light path.
//!
//! One primary ray per sub-pixel sample (s x s box supersampling), Lambertian
//! reflectance, the emitter as the only light source. The shading of every
//! ray is recorded on a [`Tape`] so that the capture is differentiable with
//! respect to the emitter intensity, shadow bias and steepness, the pattern
//! raster and the pose `(z, alpha)` of the analytic plane.

pub mod bvh;
pub mod ops;

use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::config::SensorConfig;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::pattern::PatternImage;
use crate::scene::{dot, sub, Plane, Scene, Vec3};

use self::bvh::Bvh;
use self::ops::{bilinear_sample, group_reduce, select};

/// Rendered capture plus ground-truth buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureImage {
    /// Captured intensity, one raster per pattern channel.
    pub channels: Vec<Image>,
    /// Z-buffer depth in mm, 0 where nothing was hit.
    pub gt_depth: Image,
    /// Mean shadow factor of the hit samples, in [0, 1].
    pub shadow_map: Image,
    pub hit_mask: Mask,
}

impl CaptureImage {
    /// Channel sum, the monochrome signal the camera integrates.
    pub fn luminance(&self) -> Image {
        let mut out = self.channels[0].clone();
        for c in &self.channels[1..] {
            out.data.iter_mut().zip(&c.data).for_each(|(a, b)| *a += b);
        }
        out
    }
}

/// 3x4 projection from camera space to emitter image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitterProjection {
    pub matrix: [[f64; 4]; 3],
}

impl EmitterProjection {
    /// Emitter sharing the camera focal length, centered on a raster of
    /// `width x height`, offset by the baseline along x.
    pub fn new(cfg: &SensorConfig, width: usize, height: usize) -> Self {
        let f = cfg.focal_length;
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        EmitterProjection {
            matrix: [
                [f, 0.0, cx, -f * cfg.baseline],
                [0.0, f, cy, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.matrix[0][2], self.matrix[1][2])
    }
}

/// Emitter image coordinates `(x_e, y_e, z_e)` of a camera-space point, or
/// `None` when the point is not in front of the emitter.
pub fn project_to_emitter(v: Vec3, m: &EmitterProjection) -> Option<(f64, f64, f64)> {
    let h = [v[0], v[1], v[2], 1.0];
    let row = |r: usize| (0..4).map(|k| m.matrix[r][k] * h[k]).sum::<f64>();
    let (u, w, z) = (row(0), row(1), row(2));
    (z > 0.0).then(|| (u / z, w / z, z))
}

/// What a primary ray hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Miss,
    Plane,
    Triangle(usize),
}

/// Per-ray hit record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub surface: Surface,
    /// Camera depth of the hit (ray direction has unit z).
    pub depth: f64,
    pub point: Vec3,
    /// Unit normal facing the camera.
    pub normal: Vec3,
    pub albedo: Vec3,
    /// Emitter-axis depth of the first surface on the emitter -> point ray,
    /// when that surface is not the point itself.
    pub occluder_depth: Option<f64>,
}

impl RayHit {
    fn miss() -> Self {
        RayHit {
            surface: Surface::Miss,
            depth: 0.0,
            point: [0.0; 3],
            normal: [0.0; 3],
            albedo: [0.0; 3],
            occluder_depth: None,
        }
    }

    pub fn is_hit(&self) -> bool {
        self.surface != Surface::Miss
    }
}

/// Closest-hit queries against the plane and the triangle meshes.
pub struct Tracer {
    plane: Option<Plane>,
    bvh: Bvh,
}

impl Tracer {
    pub fn new(scene: &Scene) -> Self {
        Tracer {
            plane: scene.plane,
            bvh: Bvh::new(scene.triangles()),
        }
    }

    /// `(t, surface)` of the closest hit with `t < t_max`; the plane wins ties.
    pub fn closest(&self, origin: Vec3, dir: Vec3, t_max: f64) -> Option<(f64, Surface)> {
        let plane = self
            .plane
            .and_then(|p| p.intersect(origin, dir))
            .filter(|&t| t < t_max)
            .map(|t| (t, Surface::Plane));
        let tri = self
            .bvh
            .closest_hit(origin, dir, t_max)
            .map(|(t, i)| (t, Surface::Triangle(i)));
        match (plane, tri) {
            (Some(p), Some(t)) => Some(if t.0 < p.0 { t } else { p }),
            (p, t) => p.or(t),
        }
    }

    /// Emitter-axis depth of an occluder between the emitter and `point`.
    pub fn occluder_depth(&self, point: Vec3, baseline: f64) -> Option<f64> {
        let e = [baseline, 0.0, 0.0];
        let dir = sub(point, e);
        self.closest(e, dir, 1.0 - 1e-7)
            .map(|(t, _)| e[2] + t * dir[2])
    }

    pub fn trace(&self, dir: Vec3, baseline: f64) -> RayHit {
        let Some((t, surface)) = self.closest([0.0; 3], dir, f64::INFINITY) else {
            return RayHit::miss();
        };
        let point = [t * dir[0], t * dir[1], t * dir[2]];
        let (mut normal, albedo) = match surface {
            Surface::Plane => {
                let p = self.plane.expect("plane hit without plane");
                (p.normal(), p.albedo)
            }
            Surface::Triangle(i) => {
                let tri = &self.bvh.triangles()[i];
                (tri.normal(), tri.albedo)
            }
            Surface::Miss => unreachable!(),
        };
        if dot(normal, dir) > 0.0 {
            normal = normal.map(|v| -v);
        }
        RayHit {
            surface,
            depth: point[2],
            point,
            normal,
            albedo,
            occluder_depth: self.occluder_depth(point, baseline),
        }
    }
}

/// Sub-pixel ray directions `(dx, dy, 1)`, pixel-major.
pub fn ray_directions(cfg: &SensorConfig) -> Vec<(f64, f64)> {
    let s = cfg.supersampling;
    let (cx, cy) = cfg.principal_point();
    let f = cfg.focal_length;
    let mut dirs = Vec::with_capacity(cfg.width * cfg.height * s * s);
    for py in 0..cfg.height {
        for px in 0..cfg.width {
            for b in 0..s {
                for a in 0..s {
                    let x = px as f64 + (a as f64 + 0.5) / s as f64 - 0.5;
                    let y = py as f64 + (b as f64 + 0.5) / s as f64 - 0.5;
                    dirs.push(((x - cx) / f, (y - cy) / f));
                }
            }
        }
    }
    dirs
}

/// Closest intersection for every sub-pixel ray, pixel-major.
pub fn trace_primary(scene: &Scene, cfg: &SensorConfig) -> Vec<RayHit> {
    let tracer = Tracer::new(scene);
    ray_directions(cfg)
        .par_iter()
        .map(|&(dx, dy)| tracer.trace([dx, dy, 1.0], cfg.baseline))
        .collect()
}

/// Soft shadow test `1 - sigmoid(k * (z_e - z_occ - bias))`; an unoccluded
/// point has `z_occ = z_e`.
pub fn soft_shadow(gap: f64, bias: f64, steepness: f64) -> f64 {
    1.0 - sigmoid(steepness * (gap - bias))
}

/// Shadow factor of a hit point under the configured bias and steepness.
pub fn shadow_factor(point: Vec3, scene: &Scene, cfg: &SensorConfig) -> f64 {
    let tracer = Tracer::new(scene);
    let gap = tracer
        .occluder_depth(point, cfg.baseline)
        .map_or(0.0, |z_occ| point[2] - z_occ);
    soft_shadow(gap, cfg.shadow_bias, cfg.shadow_steepness)
}

/// Tape handles for the parameters that enter shading.
#[derive(Debug, Clone)]
pub struct ShadingVars {
    pub emitter_intensity: Var,
    pub shadow_bias: Var,
    pub shadow_steepness: Var,
    /// Plane depth (mm) and tilt (radians) when the scene has a plane.
    pub plane_pose: Option<(Var, Var)>,
    /// One raster per pattern channel.
    pub pattern: Vec<Var>,
    pub pattern_width: usize,
    pub pattern_height: usize,
}

impl ShadingVars {
    /// Constant leaves taken from the configuration.
    pub fn constants(
        tape: &mut Tape,
        cfg: &SensorConfig,
        scene: &Scene,
        pattern: &PatternImage,
    ) -> Self {
        ShadingVars {
            emitter_intensity: tape.scalar(cfg.emitter_intensity),
            shadow_bias: tape.scalar(cfg.shadow_bias),
            shadow_steepness: tape.scalar(cfg.shadow_steepness),
            plane_pose: scene
                .plane
                .map(|p| (tape.scalar(p.z), tape.scalar(p.alpha_deg.to_radians()))),
            pattern: pattern
                .channels
                .iter()
                .map(|c| tape.constant(c.data.clone()))
                .collect(),
            pattern_width: pattern.width,
            pattern_height: pattern.height,
        }
    }
}

/// Tape nodes of a rendered capture.
#[derive(Debug, Clone)]
pub struct CaptureNodes {
    pub channels: Vec<Var>,
    pub gt_depth: Var,
    pub shadow: Var,
    pub hit_mask: Mask,
    /// Min and max ground-truth depth over hit pixels.
    pub depth_bounds: Option<(f64, f64)>,
}

/// Record the capture of `scene` on `tape`. Discrete choices (which surface
/// each ray hits, which rays are shadowed) come from the scene as given;
/// the plane pose in `vars` only moves the hit points continuously.
pub fn record_capture(
    tape: &mut Tape,
    scene: &Scene,
    cfg: &SensorConfig,
    vars: &ShadingVars,
) -> Result<CaptureNodes> {
    cfg.validate_optics()?;
    scene.validate()?;
    if vars.pattern.is_empty() {
        return Err(Error::Contract("pattern has no channels".into()));
    }
    let hits = trace_primary(scene, cfg);
    let dirs = ray_directions(cfg);
    let rays = hits.len();
    let samples = cfg.supersampling * cfg.supersampling;
    let pixels = cfg.width * cfg.height;

    let is_plane: Arc<Vec<bool>> =
        Arc::new(hits.iter().map(|h| h.surface == Surface::Plane).collect());
    let hit: Vec<bool> = hits.iter().map(RayHit::is_hit).collect();
    let dirx = tape.constant(dirs.iter().map(|d| d.0).collect());
    let diry = tape.constant(dirs.iter().map(|d| d.1).collect());
    // Depth of non-plane rays; misses get a harmless placeholder.
    let t_fixed = tape.constant(
        hits.iter()
            .map(|h| if h.is_hit() { h.depth } else { 1.0 })
            .collect(),
    );
    let n_fixed: Vec<Var> = (0..3)
        .map(|k| tape.constant(hits.iter().map(|h| h.normal[k]).collect()))
        .collect();

    let any_plane = is_plane.iter().any(|&b| b);
    let (t, normal) = match (vars.plane_pose, any_plane) {
        (Some((z, alpha)), true) => {
            let ca = tape.cos(alpha);
            let sa = tape.sin(alpha);
            let sa_dy = tape.mul(sa, diry);
            let den_plane = tape.sub(ca, sa_dy);
            let one = tape.scalar(1.0);
            let den = select(tape, is_plane.clone(), den_plane, one);
            let num = tape.mul(z, ca);
            let t_plane = tape.div(num, den);
            let t = select(tape, is_plane.clone(), t_plane, t_fixed);
            // Plane normal (0, -sin a, cos a) flipped to face the camera.
            let zero = tape.scalar(0.0);
            let neg_ca = tape.neg(ca);
            let nx = select(tape, is_plane.clone(), zero, n_fixed[0]);
            let ny = select(tape, is_plane.clone(), sa, n_fixed[1]);
            let nz = select(tape, is_plane.clone(), neg_ca, n_fixed[2]);
            (t, [nx, ny, nz])
        }
        _ => (t_fixed, [n_fixed[0], n_fixed[1], n_fixed[2]]),
    };

    let f = cfg.focal_length;
    let b = cfg.baseline;
    let (cxe, cye) =
        EmitterProjection::new(cfg, vars.pattern_width, vars.pattern_height).principal_point();
    // x_e = f * (V_x - b) / V_z + c_x with V = t * (dx, dy, 1).
    let xe_base = tape.constant(dirs.iter().map(|d| f * d.0 + cxe).collect());
    let inv_t = tape.recip(t);
    let shift = tape.affine(inv_t, f * b, 0.0);
    let xe = tape.sub(xe_base, shift);
    let ye = tape.constant(dirs.iter().map(|d| f * d.1 + cye).collect());

    // Lambertian cosine toward the emitter.
    let vx = tape.mul(t, dirx);
    let vy = tape.mul(t, diry);
    let wx = tape.affine(vx, -1.0, b);
    let wy = tape.neg(vy);
    let wz = tape.neg(t);
    let d1 = tape.mul(normal[0], wx);
    let d2 = tape.mul(normal[1], wy);
    let d3 = tape.mul(normal[2], wz);
    let d12 = tape.add(d1, d2);
    let ndotw = tape.add(d12, d3);
    let wx2 = tape.square(wx);
    let wy2 = tape.square(wy);
    let wz2 = tape.square(wz);
    let s12 = tape.add(wx2, wy2);
    let s123 = tape.add(s12, wz2);
    let wlen = tape.sqrt(s123);
    let cos_raw = tape.div(ndotw, wlen);
    let cosine = tape.relu(cos_raw);

    // Soft shadow: s = sigmoid(k * (bias - gap)).
    let occluded = tape.constant(
        hits.iter()
            .map(|h| if h.occluder_depth.is_some() { 1.0 } else { 0.0 })
            .collect(),
    );
    let z_occ = tape.constant(
        hits.iter()
            .map(|h| h.occluder_depth.unwrap_or(0.0))
            .collect(),
    );
    let gap_raw = tape.sub(t, z_occ);
    let gap = tape.mul(occluded, gap_raw);
    let margin = tape.sub(vars.shadow_bias, gap);
    let scaled = tape.mul(vars.shadow_steepness, margin);
    let shadow = tape.sigmoid(scaled);

    // eta = eta_c * s / z_e^2, with z_e = V_z = t.
    let t2 = tape.square(t);
    let eta_s = tape.mul(vars.emitter_intensity, shadow);
    let eta = tape.div(eta_s, t2);
    let radiance = tape.mul(eta, cosine);

    let nch = vars.pattern.len();
    let mut channels = Vec::with_capacity(nch);
    let box_weights = Arc::new(vec![1.0 / samples as f64; rays]);
    for (c, &pat) in vars.pattern.iter().enumerate() {
        let albedo = |h: &RayHit| {
            if !h.is_hit() {
                0.0
            } else if nch == 1 {
                (h.albedo[0] + h.albedo[1] + h.albedo[2]) / 3.0
            } else {
                h.albedo[c]
            }
        };
        let gamma = bilinear_sample(tape, pat, vars.pattern_width, vars.pattern_height, xe, ye);
        let a = tape.constant(hits.iter().map(albedo).collect());
        let lit = tape.mul(gamma, radiance);
        let mut ray_c = tape.mul(a, lit);
        if cfg.ambient != 0.0 {
            let amb = tape.constant(hits.iter().map(|h| albedo(h) * cfg.ambient).collect());
            ray_c = tape.add(ray_c, amb);
        }
        channels.push(group_reduce(tape, ray_c, samples, box_weights.clone()));
    }

    // Averages over the hit samples of each pixel.
    let mut hit_weights = vec![0.0; rays];
    let mut pixel_hit = vec![false; pixels];
    for p in 0..pixels {
        let span = &hit[p * samples..(p + 1) * samples];
        let count = span.iter().filter(|&&h| h).count();
        if count > 0 {
            pixel_hit[p] = true;
            for (j, &h) in span.iter().enumerate() {
                if h {
                    hit_weights[p * samples + j] = 1.0 / count as f64;
                }
            }
        }
    }
    let hit_weights = Arc::new(hit_weights);
    let gt_depth = group_reduce(tape, t, samples, hit_weights.clone());
    let shadow_map = group_reduce(tape, shadow, samples, hit_weights);

    let depth_bounds = tape
        .value(gt_depth)
        .iter()
        .zip(&pixel_hit)
        .filter(|(_, &h)| h)
        .fold(None, |acc: Option<(f64, f64)>, (&z, _)| {
            Some(acc.map_or((z, z), |(lo, hi)| (lo.min(z), hi.max(z))))
        });

    Ok(CaptureNodes {
        channels,
        gt_depth,
        shadow: shadow_map,
        hit_mask: Mask {
            width: cfg.width,
            height: cfg.height,
            data: pixel_hit,
        },
        depth_bounds,
    })
}

/// Render the capture of a scene with the configuration's shading parameters.
pub fn render_capture(
    scene: &Scene,
    cfg: &SensorConfig,
    pattern: &PatternImage,
) -> Result<CaptureImage> {
    let mut tape = Tape::new();
    let vars = ShadingVars::constants(&mut tape, cfg, scene, pattern);
    let nodes = record_capture(&mut tape, scene, cfg, &vars)?;
    let img = |v: Var| Image {
        width: cfg.width,
        height: cfg.height,
        data: tape.value(v).to_vec(),
    };
    Ok(CaptureImage {
        channels: nodes.channels.iter().map(|&v| img(v)).collect(),
        gt_depth: img(nodes.gt_depth),
        shadow_map: img(nodes.shadow),
        hit_mask: nodes.hit_mask,
    })
}

/// Depth of the flat white surface used for reference `index` of `levels`.
pub fn reference_depth(cfg: &SensorConfig, d_min: i64, index: usize, levels: usize) -> f64 {
    cfg.depth_constant() / (d_min as f64 + index as f64 / levels as f64)
}

/// Record the reference lookup table: captures of a frontal white plane at
/// disparity `d_min + i / n_sub`, channels stacked as planes. Only the
/// pattern is taken from `pattern_vars`; shading uses the configuration values.
pub fn record_references(
    tape: &mut Tape,
    cfg: &SensorConfig,
    pattern_vars: &[Var],
    pattern_width: usize,
    pattern_height: usize,
    d_min: i64,
) -> Result<Vec<Var>> {
    if d_min < 1 {
        return Err(Error::Config(format!(
            "reference disparity {d_min} must be >= 1"
        )));
    }
    let n = cfg.subpixel_levels;
    (0..n)
        .map(|i| {
            let scene = Scene::with_plane(Plane::frontal(reference_depth(cfg, d_min, i, n)));
            let vars = ShadingVars {
                emitter_intensity: tape.scalar(cfg.emitter_intensity),
                shadow_bias: tape.scalar(cfg.shadow_bias),
                shadow_steepness: tape.scalar(cfg.shadow_steepness),
                plane_pose: None,
                pattern: pattern_vars.to_vec(),
                pattern_width,
                pattern_height,
            };
            let nodes = record_capture(tape, &scene, cfg, &vars)?;
            Ok(stack_channels(tape, &nodes.channels))
        })
        .collect()
}

/// Channel rasters as one planar var.
pub fn stack_channels(tape: &mut Tape, channels: &[Var]) -> Var {
    if channels.len() == 1 {
        channels[0]
    } else {
        crate::noise::concat(tape, channels.to_vec())
    }
}

pub(crate) fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    acc
}

/// Reference pattern rasters `I_o,0 .. I_o,n_sub-1`, one image per channel.
pub fn render_reference_patterns(
    cfg: &SensorConfig,
    pattern: &PatternImage,
    d_min: i64,
) -> Result<Vec<Vec<Image>>> {
    let mut tape = Tape::new();
    let pats: Vec<Var> = pattern
        .channels
        .iter()
        .map(|c| tape.constant(c.data.clone()))
        .collect();
    let refs = record_references(&mut tape, cfg, &pats, pattern.width, pattern.height, d_min)?;
    let plane = cfg.width * cfg.height;
    Ok(refs
        .into_iter()
        .map(|v| {
            tape.value(v)
                .chunks(plane)
                .map(|c| Image {
                    width: cfg.width,
                    height: cfg.height,
                    data: c.to_vec(),
                })
                .collect()
        })
        .collect())
}
