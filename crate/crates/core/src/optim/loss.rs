//! Depth losses over jointly valid pixels.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::noise::{conv2d, Conv2d};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    L1,
    /// Huber with threshold in mm.
    Huber(f64),
    /// L1 between Sobel responses (x and y) of both depth maps.
    SobelGradient,
}

/// Weighted sum of loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub terms: Vec<(LossKind, f64)>,
}

pub const DEFAULT_HUBER: f64 = 10.0;

impl LossSpec {
    pub fn single(kind: LossKind) -> Self {
        LossSpec {
            terms: vec![(kind, 1.0)],
        }
    }

    pub fn l1() -> Self {
        Self::single(LossKind::L1)
    }

    /// Huber (10 mm) plus Sobel gradient, both with weight 1.
    pub fn huber_sobel() -> Self {
        LossSpec {
            terms: vec![
                (LossKind::Huber(DEFAULT_HUBER), 1.0),
                (LossKind::SobelGradient, 1.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .terms
            .iter()
            .any(|(k, w)| !(*w >= 0.0) || matches!(k, LossKind::Huber(t) if !(*t > 0.0)))
        {
            return Err(Error::Config(
                "loss weights must be >= 0 and Huber thresholds > 0".into(),
            ));
        }
        if !self.terms.iter().any(|(_, w)| *w > 0.0) {
            return Err(Error::Config(
                "loss needs at least one positive weight".into(),
            ));
        }
        Ok(())
    }
}

/// Mask of pixels whose 3x3 neighbourhood is entirely inside `mask`.
pub fn erode(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut out = Mask::new(w, h, false);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            out.data[y * w + x] =
                (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| mask.get(xx, yy)));
        }
    }
    out
}

fn masked_weights(mask: &Mask) -> Result<Vec<f64>> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::Contract(
            "no jointly valid pixel for the loss".into(),
        ));
    }
    Ok(mask
        .data
        .iter()
        .map(|&m| if m { 1.0 / n as f64 } else { 0.0 })
        .collect())
}

const SOBEL: [f64; 18] = [
    -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, //
    -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
];

/// Record the loss between `z` and a constant target over `mask`.
pub fn record_loss(
    tape: &mut Tape,
    z: Var,
    target: &Image,
    mask: &Mask,
    spec: &LossSpec,
) -> Result<Var> {
    spec.validate()?;
    if tape.value(z).len() != target.data.len() || !mask_fits(mask, target) {
        return Err(Error::Contract("loss inputs differ in shape".into()));
    }
    let t = tape.constant(target.data.clone());
    let r = tape.sub(z, t);
    let mut total: Option<Var> = None;
    for &(kind, weight) in &spec.terms {
        if weight == 0.0 {
            continue;
        }
        let term = match kind {
            LossKind::L1 => {
                let w = tape.constant(masked_weights(mask)?);
                let a = tape.abs(r);
                let m = tape.mul(w, a);
                tape.sum(m)
            }
            LossKind::Huber(tau) => {
                let w = tape.constant(masked_weights(mask)?);
                let a = tape.huber(r, tau);
                let m = tape.mul(w, a);
                tape.sum(m)
            }
            LossKind::SobelGradient => {
                let inner = erode(mask);
                let w1 = masked_weights(&inner)?;
                let mut w2 = w1.clone();
                w2.extend_from_slice(&w1);
                let w = tape.constant(w2);
                let k = tape.constant(SOBEL.to_vec());
                let b = tape.constant(vec![0.0, 0.0]);
                let op = Conv2d {
                    width: target.width,
                    height: target.height,
                    c_in: 1,
                    c_out: 2,
                    kernel: 3,
                };
                let g = conv2d(tape, op, r, k, b);
                let a = tape.abs(g);
                let m = tape.mul(w, a);
                tape.sum(m)
            }
        };
        let scaled = tape.affine(term, weight, 0.0);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled),
            None => scaled,
        });
    }
    Ok(total.expect("validated: at least one positive weight"))
}

fn mask_fits(mask: &Mask, img: &Image) -> bool {
    mask.width == img.width && mask.height == img.height
}

/// Loss value between two depth maps.
pub fn loss(z_sim: &Image, z_ref: &Image, mask: &Mask, spec: &LossSpec) -> Result<f64> {
    if !z_sim.same_shape(z_ref) {
        return Err(Error::Contract("loss inputs differ in shape".into()));
    }
    let mut tape = Tape::new();
    let z = tape.constant(z_sim.data.clone());
    let l = record_loss(&mut tape, z, z_ref, mask, spec)?;
    Ok(tape.scalar_value(l))
}
