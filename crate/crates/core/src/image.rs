use crate::error::{Error, Result};

/// Single-channel `f64` raster, row-major, pixel centers at integer
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Image {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Contract(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rows `[y0, y1)` as a new image.
    pub fn rows(&self, y0: usize, y1: usize) -> Image {
        Image {
            width: self.width,
            height: y1 - y0,
            data: self.data[y0 * self.width..y1 * self.width].to_vec(),
        }
    }

    /// Shift content right by an integer amount, filling with zeros.
    pub fn shifted_right(&self, k: usize) -> Image {
        Image::from_fn(self.width, self.height, |x, y| {
            if x >= k {
                self.get(x - k, y)
            } else {
                0.0
            }
        })
    }
}

/// Per-pixel validity flags, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, v: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }
}
