//! The emitter's structured-light pattern.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// Pattern intensities, one raster per channel. Sampling is bilinear with
/// zero outside the raster.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternImage {
    pub width: usize,
    pub height: usize,
    pub channels: Vec<Image>,
}

impl PatternImage {
    pub fn new(channels: Vec<Image>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Input("pattern needs at least one channel".into()))?;
        if channels.len() != 1 && channels.len() != 3 {
            return Err(Error::Input(format!(
                "pattern must have 1 or 3 channels, got {}",
                channels.len()
            )));
        }
        let (w, h) = (first.width, first.height);
        for c in &channels {
            if c.width != w || c.height != h {
                return Err(Error::Input("pattern channels differ in size".into()));
            }
            if c.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Input(
                    "pattern values must be finite and non-negative".into(),
                ));
            }
        }
        Ok(PatternImage {
            width: w,
            height: h,
            channels,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Pseudo-random binary dot pattern, identical in every channel.
    pub fn random_dots(width: usize, height: usize, density: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::from_fn(width, height, |_, _| 0.0);
        let mut img = img;
        for v in img.data.iter_mut() {
            *v = if rng.gen::<f64>() < density { 1.0 } else { 0.0 };
        }
        PatternImage {
            width,
            height,
            channels: vec![img],
        }
    }

    /// Three independent dot patterns at the same density and level.
    pub fn random_color_dots(
        width: usize,
        height: usize,
        density: f64,
        level: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = (0..3)
            .map(|_| {
                let mut img = Image::new(width, height);
                for v in img.data.iter_mut() {
                    *v = if rng.gen::<f64>() < density {
                        level
                    } else {
                        0.0
                    };
                }
                img
            })
            .collect();
        PatternImage {
            width,
            height,
            channels,
        }
    }

    pub fn uniform(width: usize, height: usize, channels: usize, v: f64) -> Self {
        PatternImage {
            width,
            height,
            channels: (0..channels)
                .map(|_| Image::filled(width, height, v))
                .collect(),
        }
    }

    /// Bilinear sample of one channel; zero outside the raster, blending
    /// linearly toward zero across the last pixel.
    pub fn sample(&self, channel: usize, x: f64, y: f64) -> f64 {
        bilinear(&self.channels[channel], x, y)
    }

    /// Sum of all values of a channel.
    pub fn energy(&self, channel: usize) -> f64 {
        self.channels[channel].data.iter().sum()
    }

    /// Load an 8-bit grayscale or RGB portable pixmap (or PNG); values scaled to [0, 1].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref()).map_err(|e| {
            Error::Input(format!(
                "cannot read pattern {}: {e}",
                path.as_ref().display()
            ))
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let channels = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                vec![Image::from_vec(
                    w,
                    h,
                    g.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
                )?]
            }
            _ => {
                let rgb = img.to_rgb8();
                (0..3)
                    .map(|c| {
                        Image::from_vec(w, h, rgb.pixels().map(|p| p.0[c] as f64 / 255.0).collect())
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        PatternImage::new(channels)
    }
}

impl PatternImage {
    /// Save as an 8-bit grayscale or RGB PNG, clamping values to [0, 1].
    /// Patterns with two or more than three channels are rejected.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let n = self.width * self.height;
        let res = match self.channels.len() {
            1 => {
                let buf: Vec<u8> = self.channels[0].data.iter().map(|&v| q(v)).collect();
                image::GrayImage::from_raw(w, h, buf)
                    .expect("sized")
                    .save(path.as_ref())
            }
            3 => {
                let buf: Vec<u8> = (0..n)
                    .flat_map(|i| (0..3).map(move |c| (c, i)))
                    .map(|(c, i)| q(self.channels[c].data[i]))
                    .collect();
                image::RgbImage::from_raw(w, h, buf)
                    .expect("sized")
                    .save(path.as_ref())
            }
            c => {
                return Err(Error::Input(format!(
                    "cannot save a {c}-channel pattern as an image"
                )))
            }
        };
        res.map_err(|e| Error::Io(std::io::Error::other(e)))
    }
}

/// Bilinear interpolation with implicit zero padding.
pub fn bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as i64, y0 as i64);
    let at = |xx: i64, yy: i64| -> f64 {
        if xx < 0 || yy < 0 || xx >= img.width as i64 || yy >= img.height as i64 {
            0.0
        } else {
            img.data[yy as usize * img.width + xx as usize]
        }
    };
    let top = at(xi, yi) * (1.0 - fx) + at(xi + 1, yi) * fx;
    let bottom = at(xi, yi + 1) * (1.0 - fx) + at(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}
