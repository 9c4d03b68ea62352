//! Differentiable simulation of structured-light depth sensors.
//!
//! The pipeline renders a scene lit by the emitter's pattern, adds sensor
//! noise, block-matches the capture against pre-rendered reference patterns
//! and converts the soft disparity to depth. Every step is recorded on a
//! reverse-mode tape, so depth losses can be differentiated with respect to
//! the sensor, scene and pattern parameters.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod error;
pub mod harness;
pub mod image;
pub mod io;
pub mod noise;
pub mod optim;
pub mod params;
pub mod pattern;
pub mod render;
pub mod scene;
pub mod sim;
pub mod stereo;

pub use autodiff::{Tape, Var};
pub use config::{disparity_range, preset, DisparityRange, Preset, SensorConfig};
pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use noise::{ConvPostProcessor, PostProcess};
pub use params::{GradientVector, ParamId, ParameterSet};
pub use pattern::PatternImage;
pub use render::CaptureImage;
pub use scene::{Object, Plane, Pose, Scene};
pub use sim::{Frozen, SimOptions, Simulation};
pub use stereo::{CostVolume, DepthMap, DisparityMap};
