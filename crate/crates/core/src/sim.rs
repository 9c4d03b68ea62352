//! End-to-end simulation `Z = G(params)` recorded on a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::config::{disparity_range, DisparityRange, SensorConfig};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::noise::{record_capture_noise, record_postprocess, ConvVars, PostProcess};
use crate::params::{GradientVector, ParamId, ParameterSet};
use crate::render::{record_capture, record_references, stack_channels, CaptureNodes, ShadingVars};
use crate::scene::Scene;
use crate::stereo::{record_match, MatchNodes};

/// Discrete choices held fixed across evaluations, e.g. for finite
/// differences: the disparity search range and the validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub range: DisparityRange,
    pub valid: Option<Mask>,
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Key of the capture noise field.
    pub noise_seed: u64,
    pub postprocess: PostProcess,
    pub frozen: Option<Frozen>,
    /// Render the reference lookup table from a constant copy of the
    /// pattern, so that pattern gradients flow through the capture only.
    pub detach_references: bool,
}

/// Search range for a scene: its depth bounds widened by the configured
/// margin, clamped to the sensor range.
pub fn scene_range(cfg: &SensorConfig, depth_bounds: Option<(f64, f64)>) -> Result<DisparityRange> {
    let outer = disparity_range(cfg, None)?;
    let Some((lo, hi)) = depth_bounds else {
        return Err(Error::Input("no surface visible to the camera".into()));
    };
    let lo = lo.clamp(cfg.z_min, cfg.z_max);
    let hi = hi.clamp(cfg.z_min, cfg.z_max);
    Ok(disparity_range(cfg, Some((lo, hi)))?.expand_within(cfg.disparity_margin, outer))
}

/// A recorded simulation.
pub struct Simulation {
    pub tape: Tape,
    pub width: usize,
    pub height: usize,
    pub vars: BTreeMap<ParamId, Vec<Var>>,
    pub capture: CaptureNodes,
    /// Noisy capture fed to the matcher, channels stacked as planes.
    pub observed: Var,
    pub references: Vec<Var>,
    pub matched: MatchNodes,
    /// Post-processed depth, mm.
    pub depth: Var,
    /// Pixels with a surface hit and a confident match.
    pub valid: Mask,
    pub range: DisparityRange,
}

impl Simulation {
    /// Record the pipeline. `cfg` supplies the optics and the nominal
    /// shading constants of the reference lookup table; `params` supplies
    /// everything that may be optimized.
    pub fn record(
        scene: &Scene,
        cfg: &SensorConfig,
        params: &ParameterSet,
        opts: &SimOptions,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let mut vars: BTreeMap<ParamId, Vec<Var>> = BTreeMap::new();
        let mut leaf = |tape: &mut Tape, id: ParamId, v: Vec<f64>| {
            let var = tape.leaf(v, params.is_flagged(id));
            vars.entry(id).or_default().push(var);
            var
        };
        let emitter = leaf(
            &mut tape,
            ParamId::EmitterIntensity,
            vec![params.emitter_intensity],
        );
        let bias = leaf(&mut tape, ParamId::ShadowBias, vec![params.shadow_bias]);
        let steep = leaf(
            &mut tape,
            ParamId::ShadowSteepness,
            vec![params.shadow_steepness],
        );
        let mean = leaf(&mut tape, ParamId::NoiseMean, vec![params.noise_mean]);
        let std = leaf(&mut tape, ParamId::NoiseStd, vec![params.noise_std]);
        let beta = leaf(&mut tape, ParamId::Temperature, vec![params.temperature]);
        let plane_pose = params.plane.map(|(z, a)| {
            let zv = leaf(&mut tape, ParamId::PlaneZ, vec![z]);
            let av = leaf(&mut tape, ParamId::PlaneAlpha, vec![a]);
            (zv, av)
        });
        let pattern: Vec<Var> = params
            .pattern
            .channels
            .iter()
            .map(|c| leaf(&mut tape, ParamId::Pattern, c.data.clone()))
            .collect();
        let net = match (&opts.postprocess, &params.conv) {
            (PostProcess::Conv2(_), Some(w)) => {
                let cv = ConvVars::leaves(&mut tape, w, params.is_flagged(ParamId::ConvWeights));
                vars.insert(ParamId::ConvWeights, vec![cv.w1, cv.b1, cv.w2, cv.b2]);
                Some(cv)
            }
            _ => None,
        };

        let posed = params.posed_scene(scene);
        let shading = ShadingVars {
            emitter_intensity: emitter,
            shadow_bias: bias,
            shadow_steepness: steep,
            plane_pose,
            pattern: pattern.clone(),
            pattern_width: params.pattern.width,
            pattern_height: params.pattern.height,
        };
        let capture = record_capture(&mut tape, &posed, cfg, &shading)?;
        let stacked = stack_channels(&mut tape, &capture.channels);
        let observed = record_capture_noise(&mut tape, stacked, mean, std, opts.noise_seed);

        let range = match &opts.frozen {
            Some(f) => f.range,
            None => scene_range(cfg, capture.depth_bounds)?,
        };
        let ref_pattern: Vec<Var> = if opts.detach_references {
            params
                .pattern
                .channels
                .iter()
                .map(|c| tape.constant(c.data.clone()))
                .collect()
        } else {
            pattern.clone()
        };
        let references = record_references(
            &mut tape,
            cfg,
            &ref_pattern,
            params.pattern.width,
            params.pattern.height,
            range.min,
        )?;
        let frozen_valid = opts.frozen.as_ref().and_then(|f| f.valid.as_ref());
        let matched = record_match(
            &mut tape,
            observed,
            &references,
            cfg.width,
            cfg.height,
            cfg,
            range,
            beta,
            frozen_valid,
        )?;
        let depth = record_postprocess(
            &mut tape,
            &opts.postprocess,
            matched.depth,
            capture.gt_depth,
            capture.shadow,
            cfg.width,
            cfg.height,
            net,
        )?;
        let valid = matched.valid.and(&capture.hit_mask);
        Ok(Simulation {
            tape,
            width: cfg.width,
            height: cfg.height,
            vars,
            capture,
            observed,
            references,
            matched,
            depth,
            valid,
            range,
        })
    }

    fn image(&self, v: Var) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.tape.value(v).to_vec(),
        }
    }

    pub fn depth_image(&self) -> Image {
        self.image(self.depth)
    }

    pub fn disparity_image(&self) -> Image {
        self.image(self.matched.disparity)
    }

    pub fn gt_depth(&self) -> Image {
        self.image(self.capture.gt_depth)
    }

    pub fn shadow_map(&self) -> Image {
        self.image(self.capture.shadow)
    }

    /// Noisy capture, one image per channel.
    pub fn observed_channels(&self) -> Vec<Image> {
        self.tape
            .value(self.observed)
            .chunks(self.width * self.height)
            .map(|c| Image {
                width: self.width,
                height: self.height,
                data: c.to_vec(),
            })
            .collect()
    }

    /// Discrete choices of this run, for reuse in later evaluations.
    pub fn frozen(&self) -> Frozen {
        Frozen {
            range: self.range,
            valid: Some(self.valid.clone()),
        }
    }

    /// Adjoints of `loss` for every flagged parameter.
    pub fn gradients(&self, loss: Var) -> Result<GradientVector> {
        let adj = self.tape.backward(loss)?;
        let mut out = GradientVector::default();
        for (id, vars) in &self.vars {
            if !self.tape.requires_grad(vars[0]) {
                continue;
            }
            let mut g = Vec::new();
            for &v in vars {
                match adj.get(v) {
                    Some(a) => g.extend_from_slice(a),
                    None => g.extend(std::iter::repeat_n(0.0, self.tape.value(v).len())),
                }
            }
            out.entries.insert(*id, g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::pattern::PatternImage;
    use crate::scene::Plane;

    #[test]
    fn frontal_plane_depth_is_close() {
        let cfg = Preset::KinectV1.config().with_size(48, 32);
        let z = 1000.0;
        let scene = Scene::with_plane(Plane::frontal(z));
        let params = ParameterSet::new(&cfg, &scene, PatternImage::random_dots(200, 32, 0.3, 1));
        let sim = Simulation::record(&scene, &cfg, &params, &SimOptions::default()).unwrap();
        let d = sim.depth_image();
        let vals: Vec<f64> = d
            .data
            .iter()
            .zip(&sim.valid.data)
            .filter(|(_, &v)| v)
            .map(|(z, _)| *z)
            .collect();
        assert!(!vals.is_empty());
        let step = z * z / cfg.depth_constant();
        for v in vals {
            assert!((v - z).abs() < step, "{v}");
        }
    }

    #[test]
    fn empty_scene_is_an_input_error() {
        let cfg = Preset::KinectV1.config().with_size(32, 32);
        let params = ParameterSet::new(
            &cfg,
            &Scene::empty(),
            PatternImage::random_dots(200, 32, 0.3, 1),
        );
        let r = Simulation::record(&Scene::empty(), &cfg, &params, &SimOptions::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
