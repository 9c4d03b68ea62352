//! Sensor description, presets and disparity bookkeeping.
//!
//! Units are millimeters for distances and pixels for image quantities.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static description of a structured-light device.
///
/// Camera and emitter share the focal length and image size; the emitter
/// focal center sits at `(baseline, 0, 0)` in camera coordinates, so
/// epipolar lines are horizontal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal_length: f64,
    /// Distance between camera and emitter centers, mm.
    pub baseline: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Matching window side, odd.
    pub block_size: usize,
    pub emitter_intensity: f64,
    /// Shadow bias, mm.
    pub shadow_bias: f64,
    pub softargmax_temperature: f64,
    pub subpixel_levels: usize,
    pub noise_mean: f64,
    pub noise_std: f64,
    /// Steepness of the soft shadow test, 1/mm.
    pub shadow_steepness: f64,
    /// Rays per pixel side (s x s box supersampling).
    #[serde(default = "default_supersampling")]
    pub supersampling: usize,
    /// Constant ambient radiance, zero for an emitter-only scene.
    #[serde(default)]
    pub ambient: f64,
    /// Pixels whose best matching score is below this are reported invalid.
    #[serde(default = "default_min_score")]
    pub min_score: f64,
    /// Extra disparity labels searched on each side of scene-derived bounds.
    #[serde(default = "default_disparity_margin")]
    pub disparity_margin: usize,
}

fn default_supersampling() -> usize {
    2
}

fn default_min_score() -> f64 {
    0.3
}

fn default_disparity_margin() -> usize {
    2
}

/// Built-in device parameter tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    KinectV1,
    MatterportPro2,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::KinectV1, Preset::MatterportPro2];

    pub fn name(self) -> &'static str {
        match self {
            Preset::KinectV1 => "kinect_v1",
            Preset::MatterportPro2 => "matterport_pro2",
        }
    }

    pub fn config(self) -> SensorConfig {
        match self {
            Preset::KinectV1 => SensorConfig {
                width: 640,
                height: 480,
                focal_length: 572.41,
                baseline: 75.0,
                z_min: 400.0,
                z_max: 4000.0,
                block_size: 9,
                emitter_intensity: 1.5e6,
                shadow_bias: 5.0,
                softargmax_temperature: 15.0,
                subpixel_levels: 2,
                noise_mean: 0.0,
                noise_std: 0.0,
                shadow_steepness: 1.0,
                supersampling: default_supersampling(),
                ambient: 0.0,
                min_score: default_min_score(),
                disparity_margin: default_disparity_margin(),
            },
            Preset::MatterportPro2 => SensorConfig {
                width: 1280,
                height: 1024,
                focal_length: 1075.43,
                baseline: 75.0,
                z_min: 400.0,
                z_max: 8000.0,
                block_size: 11,
                emitter_intensity: 1.5e12,
                shadow_bias: 1.0,
                softargmax_temperature: 25.0,
                subpixel_levels: 4,
                noise_mean: 0.0,
                noise_std: 0.0,
                shadow_steepness: 1.0,
                supersampling: default_supersampling(),
                ambient: 0.0,
                min_score: default_min_score(),
                disparity_margin: default_disparity_margin(),
            },
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Look up a preset by name.
pub fn preset(name: &str) -> Result<SensorConfig> {
    Ok(name.parse::<Preset>()?.config())
}

/// Round half away from zero, as used for disparity bounds.
fn round_disparity(v: f64) -> i64 {
    v.round() as i64
}

impl SensorConfig {
    /// `f * b`, the depth-disparity constant (mm * px).
    pub fn depth_constant(&self) -> f64 {
        self.focal_length * self.baseline
    }

    pub fn half_block(&self) -> usize {
        self.block_size / 2
    }

    /// Camera principal point, pixel centers at integer coordinates.
    pub fn principal_point(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn depth_from_disparity(&self, d: f64) -> f64 {
        self.depth_constant() / d
    }

    pub fn disparity_from_depth(&self, z: f64) -> f64 {
        self.depth_constant() / z
    }

    /// Full check, including that the sensor's whole disparity range fits
    /// inside the image width.
    pub fn validate(&self) -> Result<()> {
        self.validate_optics()?;
        let d_max = round_disparity(self.depth_constant() / self.z_min);
        if d_max >= self.width as i64 {
            return Err(Error::Config(format!(
                "d_max = {d_max} must be below the image width"
            )));
        }
        Ok(())
    }

    /// Checks that do not depend on the image width; enough for rendering
    /// crops and for matching over a scene-narrowed disparity range.
    pub fn validate_optics(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.width == 0 || self.height == 0 {
            return fail("image dimensions must be positive".into());
        }
        for (name, v) in [
            ("focal_length", self.focal_length),
            ("baseline", self.baseline),
            ("z_min", self.z_min),
            ("z_max", self.z_max),
            ("emitter_intensity", self.emitter_intensity),
            ("shadow_bias", self.shadow_bias),
            ("softargmax_temperature", self.softargmax_temperature),
            ("noise_mean", self.noise_mean),
            ("noise_std", self.noise_std),
            ("shadow_steepness", self.shadow_steepness),
            ("ambient", self.ambient),
            ("min_score", self.min_score),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        if self.focal_length <= 0.0 || self.baseline < 0.0 {
            return fail("focal length must be positive and baseline non-negative".into());
        }
        if self.z_min <= 0.0 || self.z_max <= self.z_min {
            return fail(format!(
                "invalid range [{}, {}]: need 0 < z_min < z_max",
                self.z_min, self.z_max
            ));
        }
        if self.block_size < 3 || self.block_size.is_multiple_of(2) {
            return fail(format!(
                "block size {} must be odd and >= 3",
                self.block_size
            ));
        }
        if self.softargmax_temperature <= 0.0 {
            return fail("softargmax temperature must be positive".into());
        }
        if self.subpixel_levels == 0 {
            return fail("subpixel_levels must be >= 1".into());
        }
        if self.noise_std < 0.0 {
            return fail("noise_std must be non-negative".into());
        }
        if self.shadow_steepness <= 0.0 {
            return fail("shadow_steepness must be positive".into());
        }
        if self.supersampling == 0 {
            return fail("supersampling must be >= 1".into());
        }
        let d_min = round_disparity(self.depth_constant() / self.z_max);
        if d_min < 1 {
            return fail(format!("d_min = {d_min} must be >= 1"));
        }
        Ok(())
    }

    /// Parse a TOML key-value configuration.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SensorConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("sensor config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&crate::error::read_text(path.as_ref())?)
    }

    /// Same device with a smaller (or larger) frame and the same focal length.
    pub fn with_size(&self, width: usize, height: usize) -> Self {
        SensorConfig {
            width,
            height,
            ..self.clone()
        }
    }
}

/// Integer disparity search bounds `[d_min, d_max]`, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisparityRange {
    pub min: i64,
    pub max: i64,
}

impl DisparityRange {
    pub fn new(min: i64, max: i64) -> Result<Self> {
        if min > max {
            return Err(Error::Config(format!(
                "empty disparity range [{min}, {max}]"
            )));
        }
        Ok(DisparityRange { min, max })
    }

    /// Number of integer shifts.
    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grow by `margin` on both sides, clamped to `outer`.
    pub fn expand_within(&self, margin: usize, outer: DisparityRange) -> DisparityRange {
        let m = margin as i64;
        DisparityRange {
            min: (self.min - m).max(outer.min).min(self.min),
            max: (self.max + m).min(outer.max).max(self.max),
        }
    }
}

/// Disparity bounds from the sensor range, optionally narrowed by the
/// scene's depth bounds `(z_lower, z_upper)`.
pub fn disparity_range(cfg: &SensorConfig, z_bounds: Option<(f64, f64)>) -> Result<DisparityRange> {
    let (z_lo, z_hi) = match z_bounds {
        None => (cfg.z_min, cfg.z_max),
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || lo > hi {
                return Err(Error::Config(format!(
                    "invalid scene depth bounds [{lo}, {hi}]"
                )));
            }
            (lo, hi)
        }
    };
    DisparityRange::new(
        round_disparity(cfg.depth_constant() / z_hi),
        round_disparity(cfg.depth_constant() / z_lo),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kinect_table() {
        let c = preset("kinect_v1").unwrap();
        assert_eq!(c.focal_length, 572.41);
        assert_eq!(c.baseline, 75.0);
        assert_eq!((c.z_min, c.z_max), (400.0, 4000.0));
        assert_eq!(c.block_size, 9);
        assert_eq!(c.shadow_bias, 5.0);
        assert_eq!(c.softargmax_temperature, 15.0);
        assert_eq!(c.subpixel_levels, 2);
        assert_eq!(c.emitter_intensity, 1.5e6);
        c.validate().unwrap();
    }

    #[test]
    fn matterport_table() {
        let c = preset("matterport_pro2").unwrap();
        assert_eq!(c.focal_length, 1075.43);
        assert_eq!(c.baseline, 75.0);
        assert_eq!((c.z_min, c.z_max), (400.0, 8000.0));
        assert_eq!(c.block_size, 11);
        assert_eq!(c.shadow_bias, 1.0);
        assert_eq!(c.softargmax_temperature, 25.0);
        assert_eq!(c.subpixel_levels, 4);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(preset("kinect_v9"), Err(Error::Config(_))));
    }

    #[test]
    fn kinect_disparity_range() {
        let c = Preset::KinectV1.config();
        assert_eq!(
            disparity_range(&c, None).unwrap(),
            DisparityRange { min: 11, max: 107 }
        );
        assert_eq!(
            disparity_range(&c, Some((900.0, 1100.0))).unwrap(),
            DisparityRange { min: 39, max: 48 }
        );
        let z = c.depth_constant() / 40.0;
        assert_eq!(
            disparity_range(&c, Some((z, z))).unwrap(),
            DisparityRange { min: 40, max: 40 }
        );
    }

    #[test]
    fn bad_bounds_rejected() {
        let c = Preset::KinectV1.config();
        assert!(disparity_range(&c, Some((1100.0, 900.0))).is_err());
    }

    #[test]
    fn invariants_checked() {
        let mut c = Preset::KinectV1.config();
        c.block_size = 8;
        assert!(c.validate().is_err());
        let mut c = Preset::KinectV1.config();
        c.width = 100;
        assert!(c.validate().is_err());
        let mut c = Preset::KinectV1.config();
        c.z_max = 300.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn presets_round_trip() {
        for p in Preset::ALL {
            let cfg = p.config();
            let text = cfg.to_toml_string();
            let back = SensorConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(
                back.emitter_intensity.to_bits(),
                cfg.emitter_intensity.to_bits()
            );
            assert_eq!(back.focal_length.to_bits(), cfg.focal_length.to_bits());
        }
    }

    proptest! {
        #[test]
        fn range_is_antitone(lo in 400.0f64..4000.0, span in 0.0f64..2000.0, grow_lo in 0.0f64..300.0, grow_hi in 0.0f64..3000.0) {
            let c = Preset::KinectV1.config();
            let hi = lo + span;
            let inner = disparity_range(&c, Some((lo, hi))).unwrap();
            let outer = disparity_range(&c, Some(((lo - grow_lo).max(1.0), hi + grow_hi))).unwrap();
            prop_assert!(outer.min <= inner.min && outer.max >= inner.max);
        }
    }
}
