//! Tape operations used by the renderer.

use std::sync::Arc;

use crate::autodiff::{CustomOp, Tape, Var};

/// Bilinear lookup into a `width x height` raster at per-element
/// coordinates. Inputs: `[raster, xs, ys]`. Zero outside the raster.
pub struct BilinearSample {
    pub width: usize,
    pub height: usize,
}

struct Corners {
    idx: [Option<usize>; 4],
    fx: f64,
    fy: f64,
}

impl BilinearSample {
    fn corners(&self, x: f64, y: f64) -> Corners {
        let x0 = x.floor();
        let y0 = y.floor();
        let (xi, yi) = (x0 as i64, y0 as i64);
        let at = |xx: i64, yy: i64| {
            (xx >= 0 && yy >= 0 && xx < self.width as i64 && yy < self.height as i64)
                .then(|| yy as usize * self.width + xx as usize)
        };
        Corners {
            idx: [
                at(xi, yi),
                at(xi + 1, yi),
                at(xi, yi + 1),
                at(xi + 1, yi + 1),
            ],
            fx: x - x0,
            fy: y - y0,
        }
    }
}

impl CustomOp for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64> {
        let (img, xs, ys) = (inputs[0], inputs[1], inputs[2]);
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| {
                let c = self.corners(x, y);
                let v = |k: usize| c.idx[k].map_or(0.0, |i| img[i]);
                let top = v(0) * (1.0 - c.fx) + v(1) * c.fx;
                let bottom = v(2) * (1.0 - c.fx) + v(3) * c.fx;
                top * (1.0 - c.fy) + bottom * c.fy
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
        let (img, xs, ys) = (inputs[0], inputs[1], inputs[2]);
        let mut g_img = needs[0].then(|| vec![0.0; img.len()]);
        let mut g_x = needs[1].then(|| vec![0.0; xs.len()]);
        let mut g_y = needs[2].then(|| vec![0.0; ys.len()]);
        for k in 0..xs.len() {
            let g = grad[k];
            if g == 0.0 {
                continue;
            }
            let c = self.corners(xs[k], ys[k]);
            let w = [
                (1.0 - c.fx) * (1.0 - c.fy),
                c.fx * (1.0 - c.fy),
                (1.0 - c.fx) * c.fy,
                c.fx * c.fy,
            ];
            if let Some(gi) = g_img.as_mut() {
                for (slot, wk) in c.idx.iter().zip(w) {
                    if let Some(i) = slot {
                        gi[*i] += g * wk;
                    }
                }
            }
            let v = |q: usize| c.idx[q].map_or(0.0, |i| img[i]);
            if let Some(gx) = g_x.as_mut() {
                gx[k] = g * ((1.0 - c.fy) * (v(1) - v(0)) + c.fy * (v(3) - v(2)));
            }
            if let Some(gy) = g_y.as_mut() {
                gy[k] = g * ((1.0 - c.fx) * (v(2) - v(0)) + c.fx * (v(3) - v(1)));
            }
        }
        vec![g_img, g_x, g_y]
    }
}

/// Weighted sum over consecutive groups: `out[i] = sum_j w[i*g + j] * x[i*g + j]`.
pub struct GroupReduce {
    pub group: usize,
    pub weights: Arc<Vec<f64>>,
}

impl CustomOp for GroupReduce {
    fn name(&self) -> &'static str {
        "group_reduce"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64> {
        inputs[0]
            .chunks(self.group)
            .zip(self.weights.chunks(self.group))
            .map(|(x, w)| x.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn backward(
        &self,
        _inputs: &[&[f64]],
        _out: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let g = self
            .weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * grad[j / self.group])
            .collect();
        vec![Some(g)]
    }
}

/// `mask ? a : b` elementwise; either operand may be a broadcast scalar.
pub struct Select {
    pub mask: Arc<Vec<bool>>,
}

impl CustomOp for Select {
    fn name(&self) -> &'static str {
        "select"
    }

    fn forward(&self, inputs: &[&[f64]]) -> Vec<f64> {
        let (a, b) = (inputs[0], inputs[1]);
        let at = |v: &[f64], k: usize| if v.len() == 1 { v[0] } else { v[k] };
        self.mask
            .iter()
            .enumerate()
            .map(|(k, &m)| if m { at(a, k) } else { at(b, k) })
            .collect()
    }

    fn backward(
        &self,
        inputs: &[&[f64]],
        _out: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let route = |v: &[f64], take: bool| {
            let mut g = vec![0.0; v.len()];
            for (k, &m) in self.mask.iter().enumerate() {
                if m == take {
                    if v.len() == 1 {
                        g[0] += grad[k];
                    } else {
                        g[k] += grad[k];
                    }
                }
            }
            g
        };
        vec![
            needs[0].then(|| route(inputs[0], true)),
            needs[1].then(|| route(inputs[1], false)),
        ]
    }
}

pub fn select(tape: &mut Tape, mask: Arc<Vec<bool>>, a: Var, b: Var) -> Var {
    tape.custom(Arc::new(Select { mask }), vec![a, b])
}

pub fn group_reduce(tape: &mut Tape, x: Var, group: usize, weights: Arc<Vec<f64>>) -> Var {
    tape.custom(Arc::new(GroupReduce { group, weights }), vec![x])
}

pub fn bilinear_sample(
    tape: &mut Tape,
    raster: Var,
    width: usize,
    height: usize,
    xs: Var,
    ys: Var,
) -> Var {
    tape.custom(
        Arc::new(BilinearSample { width, height }),
        vec![raster, xs, ys],
    )
}
