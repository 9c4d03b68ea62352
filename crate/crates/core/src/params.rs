//! The optimizable parameter set and its gradients.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::config::SensorConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::ConvPostProcessor;
use crate::pattern::PatternImage;
use crate::scene::{Plane, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    ShadowBias,
    NoiseMean,
    NoiseStd,
    Temperature,
    EmitterIntensity,
    ShadowSteepness,
    /// Plane distance, mm.
    PlaneZ,
    /// Plane tilt, radians.
    PlaneAlpha,
    /// All pattern channels, channel-major.
    Pattern,
    /// Post-processing weights in file order.
    ConvWeights,
}

impl ParamId {
    pub const ALL: [ParamId; 10] = [
        ParamId::ShadowBias,
        ParamId::NoiseMean,
        ParamId::NoiseStd,
        ParamId::Temperature,
        ParamId::EmitterIntensity,
        ParamId::ShadowSteepness,
        ParamId::PlaneZ,
        ParamId::PlaneAlpha,
        ParamId::Pattern,
        ParamId::ConvWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::ShadowBias => "shadow_bias",
            ParamId::NoiseMean => "noise_mean",
            ParamId::NoiseStd => "noise_std",
            ParamId::Temperature => "softargmax_temperature",
            ParamId::EmitterIntensity => "emitter_intensity",
            ParamId::ShadowSteepness => "shadow_steepness",
            ParamId::PlaneZ => "plane_z",
            ParamId::PlaneAlpha => "plane_alpha",
            ParamId::Pattern => "pattern",
            ParamId::ConvWeights => "conv_weights",
        }
    }

    pub fn is_scalar(self) -> bool {
        !matches!(self, ParamId::Pattern | ParamId::ConvWeights)
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamId::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{s}'")))
    }
}

/// Values of every simulation parameter plus the subset flagged for
/// differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub shadow_bias: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub temperature: f64,
    pub emitter_intensity: f64,
    pub shadow_steepness: f64,
    /// `(z, alpha_rad)` of the scene plane, if any.
    pub plane: Option<(f64, f64)>,
    pub pattern: PatternImage,
    pub conv: Option<ConvPostProcessor>,
    pub flags: BTreeSet<ParamId>,
}

impl ParameterSet {
    pub fn new(cfg: &SensorConfig, scene: &Scene, pattern: PatternImage) -> Self {
        ParameterSet {
            shadow_bias: cfg.shadow_bias,
            noise_mean: cfg.noise_mean,
            noise_std: cfg.noise_std,
            temperature: cfg.softargmax_temperature,
            emitter_intensity: cfg.emitter_intensity,
            shadow_steepness: cfg.shadow_steepness,
            plane: scene.plane.map(|p| (p.z, p.alpha_deg.to_radians())),
            pattern,
            conv: None,
            flags: BTreeSet::new(),
        }
    }

    pub fn with_flags(mut self, ids: &[ParamId]) -> Self {
        self.flags = ids.iter().copied().collect();
        self
    }

    pub fn is_flagged(&self, id: ParamId) -> bool {
        self.flags.contains(&id)
    }

    /// Whether `id` exists for this scene and post-processing setup.
    pub fn has(&self, id: ParamId) -> bool {
        match id {
            ParamId::PlaneZ | ParamId::PlaneAlpha => self.plane.is_some(),
            ParamId::ConvWeights => self.conv.is_some(),
            _ => true,
        }
    }

    pub fn values(&self, id: ParamId) -> Result<Vec<f64>> {
        let missing = || Error::Contract(format!("parameter {id} is not present"));
        Ok(match id {
            ParamId::ShadowBias => vec![self.shadow_bias],
            ParamId::NoiseMean => vec![self.noise_mean],
            ParamId::NoiseStd => vec![self.noise_std],
            ParamId::Temperature => vec![self.temperature],
            ParamId::EmitterIntensity => vec![self.emitter_intensity],
            ParamId::ShadowSteepness => vec![self.shadow_steepness],
            ParamId::PlaneZ => vec![self.plane.ok_or_else(missing)?.0],
            ParamId::PlaneAlpha => vec![self.plane.ok_or_else(missing)?.1],
            ParamId::Pattern => self
                .pattern
                .channels
                .iter()
                .flat_map(|c| c.data.iter().copied())
                .collect(),
            ParamId::ConvWeights => self.conv.as_ref().ok_or_else(missing)?.flatten(),
        })
    }

    pub fn set_values(&mut self, id: ParamId, v: &[f64]) -> Result<()> {
        let expected = self.values(id)?.len();
        if v.len() != expected {
            return Err(Error::Contract(format!(
                "{id}: expected {expected} values, got {}",
                v.len()
            )));
        }
        match id {
            ParamId::ShadowBias => self.shadow_bias = v[0],
            ParamId::NoiseMean => self.noise_mean = v[0],
            ParamId::NoiseStd => self.noise_std = v[0],
            ParamId::Temperature => self.temperature = v[0],
            ParamId::EmitterIntensity => self.emitter_intensity = v[0],
            ParamId::ShadowSteepness => self.shadow_steepness = v[0],
            ParamId::PlaneZ => self.plane.as_mut().expect("checked above").0 = v[0],
            ParamId::PlaneAlpha => self.plane.as_mut().expect("checked above").1 = v[0],
            ParamId::Pattern => {
                let n = self.pattern.width * self.pattern.height;
                for (c, ch) in self.pattern.channels.iter_mut().enumerate() {
                    ch.data.copy_from_slice(&v[c * n..(c + 1) * n]);
                }
            }
            ParamId::ConvWeights => self.conv = Some(ConvPostProcessor::from_flat(v)?),
        }
        Ok(())
    }

    /// Sensor configuration carrying these scalar values.
    pub fn apply(&self, cfg: &SensorConfig) -> SensorConfig {
        SensorConfig {
            shadow_bias: self.shadow_bias,
            noise_mean: self.noise_mean,
            noise_std: self.noise_std,
            softargmax_temperature: self.temperature,
            emitter_intensity: self.emitter_intensity,
            shadow_steepness: self.shadow_steepness,
            ..cfg.clone()
        }
    }

    /// Scene with the plane moved to this pose.
    pub fn posed_scene(&self, scene: &Scene) -> Scene {
        let mut s = scene.clone();
        if let (Some(p), Some((z, a))) = (s.plane.as_mut(), self.plane) {
            *p = Plane {
                z,
                alpha_deg: a.to_degrees(),
                albedo: p.albedo,
            };
        }
        s
    }

    pub fn pattern_image(&self, channel: usize) -> &Image {
        &self.pattern.channels[channel]
    }
}

/// One adjoint per flagged parameter, shaped like the parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientVector {
    pub entries: BTreeMap<ParamId, Vec<f64>>,
}

impl GradientVector {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries.get(&id).map(|v| &v[..])
    }

    pub fn scalar(&self, id: ParamId) -> Option<f64> {
        self.get(id).map(|v| v[0])
    }

    /// `self += s * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &GradientVector, s: f64) {
        for (id, g) in &other.entries {
            let e = self
                .entries
                .entry(*id)
                .or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in e.iter_mut().zip(g) {
                *a += s * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .values()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn every_parameter_round_trips() {
        let cfg = Preset::KinectV1.config();
        let scene = Scene::with_plane(Plane::tilted(1000.0, 30.0));
        let mut p = ParameterSet::new(&cfg, &scene, PatternImage::random_dots(8, 4, 0.5, 1));
        p.conv = Some(ConvPostProcessor::random(1, 0.1));
        for id in ParamId::ALL {
            let mut v = p.values(id).unwrap();
            v.iter_mut().for_each(|x| *x += 0.5);
            p.set_values(id, &v).unwrap();
            assert_eq!(p.values(id).unwrap(), v, "{id}");
            assert_eq!(id.name().parse::<ParamId>().unwrap(), id);
        }
        assert!((p.plane.unwrap().1 - (30f64.to_radians() + 0.5)).abs() < 1e-12);
        assert!(p.set_values(ParamId::ShadowBias, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn applies_to_config_and_scene() {
        let cfg = Preset::KinectV1.config();
        let scene = Scene::with_plane(Plane::frontal(1000.0));
        let mut p = ParameterSet::new(&cfg, &scene, PatternImage::uniform(4, 4, 1, 1.0));
        p.shadow_bias = 2.0;
        p.plane = Some((1500.0, 0.1));
        assert_eq!(p.apply(&cfg).shadow_bias, 2.0);
        let s = p.posed_scene(&scene);
        assert_eq!(s.plane.unwrap().z, 1500.0);
        assert!((s.plane.unwrap().alpha_deg - 0.1f64.to_degrees()).abs() < 1e-12);
    }

    #[test]
    fn missing_parameters() {
        let cfg = Preset::KinectV1.config();
        let p = ParameterSet::new(&cfg, &Scene::empty(), PatternImage::uniform(4, 4, 1, 1.0));
        assert!(!p.has(ParamId::PlaneZ));
        assert!(p.values(ParamId::ConvWeights).is_err());
    }
}
