//! Capture noise and depth post-processing.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;

/// Additive Gaussian capture noise `eps * std + mean`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

impl NoiseParams {
    pub fn new(mean: f64, std: f64, seed: u64) -> Result<Self> {
        if !(std >= 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(Error::Config(format!(
                "invalid noise parameters mean={mean} std={std}"
            )));
        }
        Ok(NoiseParams { mean, std, seed })
    }
}

/// Standard normal draw keyed by `(seed, index)`.
pub fn keyed_normal(seed: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    StandardNormal.sample(&mut rng)
}

/// `len` keyed standard normal draws.
pub fn normal_field(seed: u64, len: usize) -> Vec<f64> {
    (0..len as u64)
        .into_par_iter()
        .map(|i| keyed_normal(seed, i))
        .collect()
}

/// Seed of an independent stream derived from `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `ic + eps * std + mean` on a multi-channel capture. The noise field runs
/// over the channel planes in order, as in the recorded pipeline.
pub fn apply_capture_noise(ic: &[Image], p: &NoiseParams) -> Vec<Image> {
    if p.std == 0.0 && p.mean == 0.0 {
        return ic.to_vec();
    }
    let plane = ic.first().map_or(0, |c| c.data.len());
    let eps = normal_field(p.seed, plane * ic.len());
    ic.iter()
        .zip(eps.chunks(plane.max(1)))
        .map(|(c, e)| Image {
            width: c.width,
            height: c.height,
            data: c
                .data
                .iter()
                .zip(e)
                .map(|(v, e)| v + e * p.std + p.mean)
                .collect(),
        })
        .collect()
}

/// Record `ic + eps * std + mean` with `eps` a tape constant.
pub fn record_capture_noise(tape: &mut Tape, ic: Var, mean: Var, std: Var, seed: u64) -> Var {
    let eps = tape.constant(normal_field(seed, tape.value(ic).len()));
    let scaled = tape.mul(eps, std);
    let shifted = tape.add(scaled, mean);
    tape.add(ic, shifted)
}

/// Zero-padded "same" 2D convolution (cross-correlation).
/// Inputs: `[x (c_in, H, W), weight (c_out, c_in, k, k), bias (c_out)]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub width: usize,
    pub height: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    fn taps(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let r = (self.kernel / 2) as i64;
        let k = self.kernel;
        (0..k * k).filter_map(move |t| {
            let (ky, kx) = (t / k, t % k);
            let xx = x as i64 + kx as i64 - r;
            let yy = y as i64 + ky as i64 - r;
            (xx >= 0 && yy >= 0 && xx < self.width as i64 && yy < self.height as i64).then_some((
                t,
                xx as usize,
                yy as usize,
            ))
        })
    }
}

impl CustomOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (hw, kk) = (self.width * self.height, self.kernel * self.kernel);
        (0..self.c_out)
            .into_par_iter()
            .flat_map_iter(|o| {
                (0..hw).map(move |p| {
                    let (px, py) = (p % self.width, p / self.width);
                    let mut acc = b[o];
                    for c in 0..self.c_in {
                        let wo = (o * self.c_in + c) * kk;
                        for (t, xx, yy) in self.taps(px, py) {
                            acc += w[wo + t] * x[c * hw + yy * self.width + xx];
                        }
                    }
                    acc
                })
            })
            .collect()
    }

    fn backward(
        &self,
        inputs: &[&[f64]],
        _out: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (hw, kk) = (self.width * self.height, self.kernel * self.kernel);
        let gx = needs[0].then(|| {
            (0..self.c_in)
                .into_par_iter()
                .flat_map_iter(|c| {
                    (0..hw).map(move |q| {
                        let (qx, qy) = (q % self.width, q / self.width);
                        let mut acc = 0.0;
                        // Output at q + offset(t) reads q through the mirrored tap.
                        for (t, px, py) in self.taps(qx, qy) {
                            let tf = kk - 1 - t;
                            for o in 0..self.c_out {
                                acc += w[(o * self.c_in + c) * kk + tf]
                                    * grad[o * hw + py * self.width + px];
                            }
                        }
                        acc
                    })
                })
                .collect()
        });
        let gw = needs[1].then(|| {
            (0..self.c_out * self.c_in)
                .into_par_iter()
                .flat_map_iter(|oc| {
                    let (o, c) = (oc / self.c_in, oc % self.c_in);
                    let mut acc = vec![0.0; kk];
                    for p in 0..hw {
                        let g = grad[o * hw + p];
                        if g == 0.0 {
                            continue;
                        }
                        let (px, py) = (p % self.width, p / self.width);
                        for (t, xx, yy) in self.taps(px, py) {
                            acc[t] += g * x[c * hw + yy * self.width + xx];
                        }
                    }
                    acc
                })
                .collect()
        });
        let gb = needs[2].then(|| {
            (0..self.c_out)
                .map(|o| grad[o * hw..(o + 1) * hw].iter().sum())
                .collect()
        });
        vec![gx, gw, gb]
    }
}

pub fn conv2d(tape: &mut Tape, op: Conv2d, x: Var, weight: Var, bias: Var) -> Var {
    tape.custom(Arc::new(op), vec![x, weight, bias])
}

pub const CONV_CHANNELS: usize = 32;
pub const CONV_KERNEL: usize = 5;
pub const CONV_INPUTS: usize = 3;

/// Residual depth refinement `Z + conv1x1(relu(conv5x5([Z, gt, shadow])))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPostProcessor {
    /// `(32, 3, 5, 5)`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `(1, 32)`.
    pub w2: Vec<f64>,
    pub b2: f64,
}

const MAGIC: &[u8; 4] = b"DSCW";

impl ConvPostProcessor {
    pub fn zeros() -> Self {
        ConvPostProcessor {
            w1: vec![0.0; CONV_CHANNELS * CONV_INPUTS * CONV_KERNEL * CONV_KERNEL],
            b1: vec![0.0; CONV_CHANNELS],
            w2: vec![0.0; CONV_CHANNELS],
            b2: 0.0,
        }
    }

    /// Small random weights, keyed by `seed`.
    pub fn random(seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros();
        let mut i = 0u64;
        for v in p.w1.iter_mut().chain(&mut p.b1).chain(&mut p.w2) {
            *v = scale * keyed_normal(seed, i);
            i += 1;
        }
        p.b2 = scale * keyed_normal(seed, i);
        p
    }

    pub fn num_parameters(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// All weights in file order: w1, b1, w2, b2.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_parameters());
        v.extend(&self.w1);
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        let z = Self::zeros();
        if v.len() != z.num_parameters() {
            return Err(Error::Input(format!(
                "expected {} weights, got {}",
                z.num_parameters(),
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite weight".into()));
        }
        let (a, rest) = v.split_at(z.w1.len());
        let (b, rest) = rest.split_at(z.b1.len());
        let (c, d) = rest.split_at(z.w2.len());
        Ok(ConvPostProcessor {
            w1: a.to_vec(),
            b1: b.to_vec(),
            w2: c.to_vec(),
            b2: d[0],
        })
    }

    /// Binary layout, little endian: `"DSCW"`, u32 version (1), u32 layer
    /// count (2), then per layer u32 `c_out c_in k_h k_w`, then all weights
    /// as f64 in the order w1, b1, w2, b2.
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(1)?;
        out.write_u32::<LittleEndian>(2)?;
        for dims in [
            [CONV_CHANNELS, CONV_INPUTS, CONV_KERNEL, CONV_KERNEL],
            [1, CONV_CHANNELS, 1, 1],
        ] {
            for d in dims {
                out.write_u32::<LittleEndian>(d as u32)?;
            }
        }
        for v in self.flatten() {
            out.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Input("not a weight file".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        let layers = input.read_u32::<LittleEndian>()?;
        if version != 1 || layers != 2 {
            return Err(Error::Input(format!(
                "unsupported weight file version {version} with {layers} layers"
            )));
        }
        let expected = [
            [CONV_CHANNELS, CONV_INPUTS, CONV_KERNEL, CONV_KERNEL],
            [1, CONV_CHANNELS, 1, 1],
        ];
        for dims in expected {
            for d in dims {
                if input.read_u32::<LittleEndian>()? as usize != d {
                    return Err(Error::Input("unexpected layer shape".into()));
                }
            }
        }
        let n = Self::zeros().num_parameters();
        let mut v = vec![0.0; n];
        input.read_f64_into::<LittleEndian>(&mut v)?;
        Self::from_flat(&v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Tape handles of the network weights.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ConvVars {
    pub fn leaves(tape: &mut Tape, net: &ConvPostProcessor, differentiable: bool) -> Self {
        ConvVars {
            w1: tape.leaf(net.w1.clone(), differentiable),
            b1: tape.leaf(net.b1.clone(), differentiable),
            w2: tape.leaf(net.w2.clone(), differentiable),
            b2: tape.leaf(vec![net.b2], differentiable),
        }
    }
}

/// Depth post-processing choice.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PostProcess {
    #[default]
    None,
    /// Additive reparameterized noise `eps * std` on depth (mm).
    Gaussian {
        std: f64,
        seed: u64,
    },
    Conv2(Option<ConvPostProcessor>),
}

/// Record the network on the stacked `[z, gt, shadow]` input.
pub fn record_conv2(
    tape: &mut Tape,
    z: Var,
    gt: Var,
    shadow: Var,
    width: usize,
    height: usize,
    net: ConvVars,
) -> Var {
    let x = concat(tape, vec![z, gt, shadow]);
    let l1 = Conv2d {
        width,
        height,
        c_in: CONV_INPUTS,
        c_out: CONV_CHANNELS,
        kernel: CONV_KERNEL,
    };
    let hidden = conv2d(tape, l1, x, net.w1, net.b1);
    let act = tape.relu(hidden);
    let l2 = Conv2d {
        width,
        height,
        c_in: CONV_CHANNELS,
        c_out: 1,
        kernel: 1,
    };
    let corr = conv2d(tape, l2, act, net.w2, net.b2);
    tape.add(z, corr)
}

/// Record post-processing of depth `z`.
#[allow(clippy::too_many_arguments)]
pub fn record_postprocess(
    tape: &mut Tape,
    mode: &PostProcess,
    z: Var,
    gt: Var,
    shadow: Var,
    width: usize,
    height: usize,
    net: Option<ConvVars>,
) -> Result<Var> {
    match mode {
        PostProcess::None => Ok(z),
        PostProcess::Gaussian { std, seed } => {
            let eps = normal_field(*seed, width * height);
            let noise = tape.constant(eps.iter().map(|e| e * std).collect());
            Ok(tape.add(z, noise))
        }
        PostProcess::Conv2(w) => {
            let vars = match (net, w) {
                (Some(v), _) => v,
                (None, Some(w)) => ConvVars::leaves(tape, w, false),
                (None, None) => {
                    return Err(Error::Config("conv2 post-processing needs weights".into()))
                }
            };
            Ok(record_conv2(tape, z, gt, shadow, width, height, vars))
        }
    }
}

/// Post-process a depth map outside of any optimization.
pub fn postprocess_depth(
    z: &Image,
    gt: &Image,
    shadow: &Image,
    mode: &PostProcess,
) -> Result<Image> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.data.clone());
    let gv = tape.constant(gt.data.clone());
    let sv = tape.constant(shadow.data.clone());
    let out = record_postprocess(&mut tape, mode, zv, gv, sv, z.width, z.height, None)?;
    Image::from_vec(z.width, z.height, tape.value(out).to_vec())
}

/// Concatenation of all inputs.
struct Concat;

impl CustomOp for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64> {
        inputs.concat()
    }

    fn backward(
        &self,
        inputs: &[&[f64]],
        _out: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut o = 0;
        inputs
            .iter()
            .zip(needs)
            .map(|(x, &n)| {
                let g = n.then(|| grad[o..o + x.len()].to_vec());
                o += x.len();
                g
            })
            .collect()
    }
}

pub fn concat(tape: &mut Tape, parts: Vec<Var>) -> Var {
    tape.custom(Arc::new(Concat), parts)
}
