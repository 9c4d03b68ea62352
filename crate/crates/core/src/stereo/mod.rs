//! Soft block matching between a capture and its reference lookup table.
//!
//! Label `k` of the interlaced volume compares the capture block at `x` with
//! reference `k % n_sub` at `x - k / n_sub`, which corresponds to disparity
//! `d_min + k / n_sub`. Disparities are reduced with a softargmax over the
//! whole label axis.
//!
//! Captures and references are given as one image per channel; blocks of
//! all channels are matched jointly.

pub mod cost;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, WriteBytesExt};
use rayon::prelude::*;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::config::{DisparityRange, SensorConfig};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub use cost::Layout;

/// Matching scores over the label axis, `(y, x, k)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<f64>,
    pub scores: Vec<f64>,
    /// Pixels whose block and whole disparity window are inside the image.
    pub valid: Mask,
}

impl CostVolume {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let n = self.labels.len();
        let o = (y * self.width + x) * n;
        &self.scores[o..o + n]
    }

    /// Raw little-endian f64 dump: header `width height labels` as u64,
    /// the labels, then the scores in `(y, x, k)` order.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in [self.width, self.height, self.labels.len()] {
            out.write_u64::<LittleEndian>(v as u64)?;
        }
        for &v in self.labels.iter().chain(&self.scores) {
            out.write_f64::<LittleEndian>(v)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub disparity: Image,
    /// Highest matching score per pixel.
    pub best_score: Image,
    pub valid: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Image,
    pub valid: Mask,
}

impl DepthMap {
    pub fn from_disparity(disp: &DisparityMap, depth_constant: f64) -> Self {
        DepthMap {
            depth: Image {
                width: disp.disparity.width,
                height: disp.disparity.height,
                data: disp
                    .disparity
                    .data
                    .iter()
                    .map(|&d| depth_constant / d)
                    .collect(),
            },
            valid: disp.valid.clone(),
        }
    }
}

/// Label values `d_min + k / n_sub`.
pub fn labels(range: DisparityRange, n_sub: usize) -> Vec<f64> {
    (0..range.len() * n_sub)
        .map(|k| range.min as f64 + k as f64 / n_sub as f64)
        .collect()
}

fn layout(
    width: usize,
    height: usize,
    channels: usize,
    block: usize,
    range: DisparityRange,
    n_sub: usize,
) -> Result<Layout> {
    let lay = Layout {
        width,
        height,
        channels,
        block,
        n_sub,
        n_shift: range.len(),
    };
    if !lay.has_valid() {
        return Err(Error::Config(format!(
            "disparity range [{}, {}] with block {block} leaves no valid pixel in a {width}x{height} image",
            range.min, range.max
        )));
    }
    Ok(lay)
}

fn check_inputs(ic: &[Image], refs: &[Vec<Image>], n_sub: usize) -> Result<()> {
    if ic.is_empty() {
        return Err(Error::Contract("capture has no channels".into()));
    }
    if refs.len() != n_sub {
        return Err(Error::Contract(format!(
            "expected {n_sub} references, got {}",
            refs.len()
        )));
    }
    if ic.iter().any(|c| !c.same_shape(&ic[0])) {
        return Err(Error::Contract("capture channels differ in shape".into()));
    }
    if refs
        .iter()
        .any(|r| r.len() != ic.len() || r.iter().any(|c| !c.same_shape(&ic[0])))
    {
        return Err(Error::Contract(
            "references and capture differ in shape".into(),
        ));
    }
    Ok(())
}

/// Channel planes laid end to end.
fn planar(chs: &[Image]) -> Vec<f64> {
    chs.iter().flat_map(|c| c.data.iter().copied()).collect()
}

fn planar_refs(refs: &[Vec<Image>]) -> Vec<Vec<f64>> {
    refs.iter().map(|r| planar(r)).collect()
}

fn geometric_mask(lay: &Layout) -> Mask {
    let mut m = Mask::new(lay.width, lay.height, false);
    for y in 0..lay.height {
        for x in 0..lay.width {
            m.data[y * lay.width + x] = lay.valid(x, y);
        }
    }
    m
}

/// ZNCC cost volume between `ic` and the interlaced references.
pub fn cost_volume(
    ic: &[Image],
    refs: &[Vec<Image>],
    block: usize,
    range: DisparityRange,
    n_sub: usize,
) -> Result<CostVolume> {
    check_inputs(ic, refs, n_sub)?;
    let (width, height) = (ic[0].width, ic[0].height);
    let lay = layout(width, height, ic.len(), block, range, n_sub)?;
    let flat = planar_refs(refs);
    let r: Vec<&[f64]> = flat.iter().map(|r| &r[..]).collect();
    Ok(CostVolume {
        width,
        height,
        labels: labels(range, n_sub),
        scores: cost::scores(&lay, &planar(ic), &r),
        valid: geometric_mask(&lay),
    })
}

/// Softargmax over one label axis, with max subtraction.
pub fn softargmax(scores: &[f64], labels: &[f64], beta: f64) -> f64 {
    let m = scores
        .iter()
        .fold(f64::NEG_INFINITY, |a, &c| a.max(beta * c));
    let mut num = 0.0;
    let mut den = 0.0;
    for (&c, &l) in scores.iter().zip(labels) {
        let e = (beta * c - m).exp();
        num += e * l;
        den += e;
    }
    num / den
}

/// Probability map `softmax(beta * C)` of one pixel.
pub fn probabilities(scores: &[f64], beta: f64) -> Vec<f64> {
    let m = scores
        .iter()
        .fold(f64::NEG_INFINITY, |a, &c| a.max(beta * c));
    let e: Vec<f64> = scores.iter().map(|&c| (beta * c - m).exp()).collect();
    let den: f64 = e.iter().sum();
    e.into_iter().map(|v| v / den).collect()
}

fn best(scores: &[f64]) -> f64 {
    scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Softargmax disparity of every pixel; valid where the geometry allows and
/// the best score reaches `min_score`.
pub fn soft_disparity(cv: &CostVolume, beta: f64, min_score: f64) -> DisparityMap {
    let (w, h) = (cv.width, cv.height);
    let mut disparity = Image::new(w, h);
    let mut best_score = Image::new(w, h);
    let mut valid = cv.valid.clone();
    for p in 0..w * h {
        let s = &cv.scores[p * cv.labels.len()..(p + 1) * cv.labels.len()];
        disparity.data[p] = softargmax(s, &cv.labels, beta);
        best_score.data[p] = best(s);
        valid.data[p] &= best_score.data[p] >= min_score;
    }
    DisparityMap {
        disparity,
        best_score,
        valid,
    }
}

/// Everything a match needs besides the images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub block: usize,
    pub n_sub: usize,
    pub beta: f64,
    pub min_score: f64,
    pub range: DisparityRange,
}

impl MatchParams {
    pub fn new(cfg: &SensorConfig, range: DisparityRange) -> Self {
        MatchParams {
            block: cfg.block_size,
            n_sub: cfg.subpixel_levels,
            beta: cfg.softargmax_temperature,
            min_score: cfg.min_score,
            range,
        }
    }
}

/// Disparity map computed row by row without storing the whole volume.
pub fn match_disparity(ic: &[Image], refs: &[Vec<Image>], p: &MatchParams) -> Result<DisparityMap> {
    check_inputs(ic, refs, p.n_sub)?;
    let (w, h) = (ic[0].width, ic[0].height);
    let lay = layout(w, h, ic.len(), p.block, p.range, p.n_sub)?;
    let labels = labels(p.range, p.n_sub);
    let flat = planar_refs(refs);
    let r: Vec<&[f64]> = flat.iter().map(|r| &r[..]).collect();
    let icf = planar(ic);
    let nl = labels.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..lay.height)
        .into_par_iter()
        .map(|y| {
            let sc = cost::row_scores(&lay, &icf, &r, y);
            (0..lay.width)
                .map(|x| {
                    let s = &sc[x * nl..(x + 1) * nl];
                    (softargmax(s, &labels, p.beta), best(s))
                })
                .unzip()
        })
        .collect();
    let mut disparity = Image::new(w, h);
    let mut best_score = Image::new(w, h);
    let mut valid = geometric_mask(&lay);
    for (y, (d, b)) in rows.into_iter().enumerate() {
        disparity.data[y * w..(y + 1) * w].copy_from_slice(&d);
        best_score.data[y * w..(y + 1) * w].copy_from_slice(&b);
    }
    for (v, &b) in valid.data.iter_mut().zip(&best_score.data) {
        *v &= b >= p.min_score;
    }
    Ok(DisparityMap {
        disparity,
        best_score,
        valid,
    })
}

/// Depth map of a capture against its references.
pub fn block_match(
    ic: &[Image],
    refs: &[Vec<Image>],
    cfg: &SensorConfig,
    range: DisparityRange,
) -> Result<DepthMap> {
    let disp = match_disparity(ic, refs, &MatchParams::new(cfg, range))?;
    Ok(DepthMap::from_disparity(&disp, cfg.depth_constant()))
}

/// Block matching on `m` horizontal strips, each padded by `block` rows of
/// overlap, stitched back in strip order. Identical to [`block_match`].
pub fn strip_split_match(
    ic: &[Image],
    refs: &[Vec<Image>],
    cfg: &SensorConfig,
    range: DisparityRange,
    m: usize,
) -> Result<DepthMap> {
    check_inputs(ic, refs, cfg.subpixel_levels)?;
    let (width, height) = (ic[0].width, ic[0].height);
    let w = cfg.block_size;
    if m == 0 || m > height / (2 * w) {
        return Err(Error::Config(format!(
            "{m} strips do not fit {} rows with block {w} (need 1 <= m <= {})",
            height,
            height / (2 * w)
        )));
    }
    let bounds: Vec<(usize, usize)> = (0..m)
        .map(|j| (j * height / m, (j + 1) * height / m))
        .collect();
    let parts: Vec<DepthMap> = bounds
        .par_iter()
        .map(|&(a, b)| {
            let lo = a.saturating_sub(w);
            let hi = (b + w).min(height);
            let crop =
                |chs: &[Image]| -> Vec<Image> { chs.iter().map(|c| c.rows(lo, hi)).collect() };
            let sub_refs: Vec<Vec<Image>> = refs.iter().map(|r| crop(r)).collect();
            let dm = block_match(&crop(ic), &sub_refs, cfg, range)?;
            Ok(DepthMap {
                depth: dm.depth.rows(a - lo, b - lo),
                valid: Mask {
                    width,
                    height: b - a,
                    data: dm.valid.data[(a - lo) * width..(b - lo) * width].to_vec(),
                },
            })
        })
        .collect::<Result<_>>()?;
    let mut depth = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for p in parts {
        depth.extend(p.depth.data);
        valid.extend(p.valid.data);
    }
    Ok(DepthMap {
        depth: Image {
            width,
            height,
            data: depth,
        },
        valid: Mask {
            width,
            height,
            data: valid,
        },
    })
}

/// Tape op: inputs `[capture, ref_0, .., ref_{n-1}]` (planar channels),
/// output the volume.
pub struct ZnccVolume {
    pub layout: Layout,
}

impl CustomOp for ZnccVolume {
    fn name(&self) -> &'static str {
        "zncc_volume"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64> {
        cost::scores(&self.layout, inputs[0], &inputs[1..])
    }

    fn backward(
        &self,
        inputs: &[&[f64]],
        _out: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs.iter().any(|&n| n) {
            return vec![None; inputs.len()];
        }
        let (gc, go) = cost::scores_backward(&self.layout, inputs[0], &inputs[1..], grad);
        std::iter::once(gc)
            .chain(go)
            .zip(needs)
            .map(|(g, &n)| n.then_some(g))
            .collect()
    }
}

/// Tape op: inputs `[volume, beta]`, output one disparity per pixel.
pub struct SoftArgmax {
    pub labels: Arc<Vec<f64>>,
}

impl CustomOp for SoftArgmax {
    fn name(&self) -> &'static str {
        "softargmax"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64> {
        let beta = inputs[1][0];
        inputs[0]
            .par_chunks(self.labels.len())
            .map(|s| softargmax(s, &self.labels, beta))
            .collect()
    }

    fn backward(
        &self,
        inputs: &[&[f64]],
        out: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (vol, beta) = (inputs[0], inputs[1][0]);
        let n = self.labels.len();
        let per_pixel: Vec<(Vec<f64>, f64)> = vol
            .par_chunks(n)
            .zip(out.par_iter().zip(grad.par_iter()))
            .map(|(s, (&d, &g))| {
                let p = probabilities(s, beta);
                let mut gs = vec![0.0; n];
                let mut gb = 0.0;
                if g != 0.0 {
                    for k in 0..n {
                        let t = p[k] * (self.labels[k] - d);
                        gs[k] = g * beta * t;
                        gb += g * s[k] * t;
                    }
                }
                (gs, gb)
            })
            .collect();
        let g_vol = needs[0].then(|| {
            per_pixel
                .iter()
                .flat_map(|(gs, _)| gs.iter().copied())
                .collect()
        });
        let g_beta = needs[1].then(|| vec![per_pixel.iter().map(|(_, gb)| gb).sum()]);
        vec![g_vol, g_beta]
    }
}

/// Tape nodes of a recorded match.
#[derive(Debug, Clone)]
pub struct MatchNodes {
    pub volume: Var,
    pub disparity: Var,
    pub depth: Var,
    pub valid: Mask,
}

/// Record cost volume, softargmax and depth conversion. `capture` and
/// `refs` hold planar channels. `frozen_valid` replaces the score-based
/// validity mask (the geometric mask still applies).
#[allow(clippy::too_many_arguments)]
pub fn record_match(
    tape: &mut Tape,
    capture: Var,
    refs: &[Var],
    width: usize,
    height: usize,
    cfg: &SensorConfig,
    range: DisparityRange,
    beta: Var,
    frozen_valid: Option<&Mask>,
) -> Result<MatchNodes> {
    if refs.len() != cfg.subpixel_levels {
        return Err(Error::Contract(format!(
            "expected {} references, got {}",
            cfg.subpixel_levels,
            refs.len()
        )));
    }
    let plane = width * height;
    let n = tape.value(capture).len();
    if plane == 0 || !n.is_multiple_of(plane) || refs.iter().any(|&r| tape.value(r).len() != n) {
        return Err(Error::Contract(
            "capture and references differ in shape".into(),
        ));
    }
    let lay = layout(
        width,
        height,
        n / plane,
        cfg.block_size,
        range,
        cfg.subpixel_levels,
    )?;
    let labels = Arc::new(labels(range, cfg.subpixel_levels));
    let mut inputs = vec![capture];
    inputs.extend_from_slice(refs);
    let volume = tape.custom(Arc::new(ZnccVolume { layout: lay }), inputs);
    let disparity = tape.custom(
        Arc::new(SoftArgmax {
            labels: labels.clone(),
        }),
        vec![volume, beta],
    );
    let inv = tape.recip(disparity);
    let depth = tape.affine(inv, cfg.depth_constant(), 0.0);
    let mut valid = geometric_mask(&lay);
    match frozen_valid {
        Some(m) => valid = valid.and(m),
        None => {
            let vol = tape.value(volume);
            let nl = labels.len();
            for (p, v) in valid.data.iter_mut().enumerate() {
                *v &= best(&vol[p * nl..(p + 1) * nl]) >= cfg.min_score;
            }
        }
    }
    Ok(MatchNodes {
        volume,
        disparity,
        depth,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng.gen::<f64>()).collect();
        Image::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn softargmax_examples() {
        assert!((softargmax(&[0.0, 10.0, 0.0], &[0.0, 1.0, 2.0], 1.0) - 1.0).abs() < 1e-4);
        let ninf = f64::NEG_INFINITY;
        assert_eq!(
            softargmax(&[3.0, 3.0, ninf, ninf], &[0.0, 1.0, 2.0, 3.0], 2.0),
            0.5
        );
        let d = softargmax(&[0.1, 0.5, 0.4], &[0.0, 1.0, 2.0], 1e4);
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn self_match_scores_one() {
        let img = Image::from_fn(24, 12, |x, y| {
            ((x * 7 + y * 13) % 11) as f64 + 0.1 * (x * y) as f64
        });
        let cv = cost_volume(
            std::slice::from_ref(&img),
            &[vec![img.clone()]],
            3,
            DisparityRange::new(0, 0).unwrap(),
            1,
        )
        .unwrap();
        for y in 0..12 {
            for x in 0..24 {
                if cv.valid.get(x, y) {
                    assert!((cv.at(x, y)[0] - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn integer_shift_scores_one() {
        let mut io = texture(40, 12, 3);
        io.data.iter_mut().for_each(|v| *v *= 10.0);
        let k = 4;
        let ic = io.shifted_right(k);
        let cv = cost_volume(&[ic], &[vec![io]], 5, DisparityRange::new(0, 6).unwrap(), 1).unwrap();
        let mut n = 0;
        for y in 0..12 {
            for x in 0..40 {
                if cv.valid.get(x, y) {
                    assert!((cv.at(x, y)[k] - 1.0).abs() < 1e-6);
                    n += 1;
                }
            }
        }
        assert!(n > 0);
    }

    #[test]
    fn range_wider_than_image_is_rejected() {
        let img = texture(10, 10, 1);
        let err = cost_volume(
            std::slice::from_ref(&img),
            &[vec![img.clone()]],
            3,
            DisparityRange::new(0, 9).unwrap(),
            1,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn reference_count_mismatch() {
        let img = texture(20, 10, 1);
        let mut cfg = Preset::KinectV1.config().with_size(20, 10);
        cfg.block_size = 3;
        let r = block_match(
            std::slice::from_ref(&img),
            &[vec![img.clone()]],
            &cfg,
            DisparityRange::new(1, 2).unwrap(),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn depth_of_kinect_d_max() {
        let cfg = Preset::KinectV1.config();
        assert!((cfg.depth_from_disparity(107.0) - 401.22).abs() < 0.01);
    }

    #[test]
    fn entropy_decreases_with_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ent = |b: f64| -> f64 {
                probabilities(&s, b)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum()
            };
            let mut prev = ent(0.1);
            for b in [0.5, 1.0, 5.0, 15.0, 50.0] {
                let e = ent(b);
                assert!(e <= prev + 1e-12);
                prev = e;
            }
        }
    }

    #[test]
    fn strips_equal_single_pass() {
        let io = texture(64, 48, 5);
        let ic = io.shifted_right(6);
        let mut cfg = Preset::KinectV1.config().with_size(64, 48);
        cfg.block_size = 5;
        cfg.subpixel_levels = 1;
        let range = DisparityRange::new(3, 9).unwrap();
        let ic = [ic];
        let refs = [vec![io.shifted_right(3)]];
        let one = block_match(&ic, &refs, &cfg, range).unwrap();
        for m in 1..=4 {
            let s = strip_split_match(&ic, &refs, &cfg, range, m).unwrap();
            assert_eq!(s, one);
        }
        assert!(strip_split_match(&ic, &refs, &cfg, range, 5).is_err());
        assert!(strip_split_match(&ic, &refs, &cfg, range, 0).is_err());
    }

    #[test]
    fn softargmax_gradient_wrt_beta() {
        let labels = Arc::new(vec![0.0, 1.0, 2.0, 3.0]);
        let vol = vec![0.1, 0.9, 0.3, -0.2, 0.5, 0.4, 0.45, 0.0];
        let f = |b: f64| -> f64 { vol.chunks(4).map(|s| softargmax(s, &labels, b)).sum() };
        let mut tape = Tape::new();
        let v = tape.constant(vol.clone());
        let beta = tape.param_scalar(3.0);
        let d = tape.custom(
            Arc::new(SoftArgmax {
                labels: labels.clone(),
            }),
            vec![v, beta],
        );
        let loss = tape.sum(d);
        let g = tape.backward(loss).unwrap().scalar(beta);
        let h = 1e-5;
        let fd = (f(3.0 + h) - f(3.0 - h)) / (2.0 * h);
        assert!((g - fd).abs() < 1e-8);
    }
}
