//! ZNCC cost volume kernels.
//!
//! Window sums are taken directly (vertical column sums, then a horizontal
//! window), one output row at a time. A row only reads the `w` input rows
//! around it, so any row partition of the image produces bitwise the same
//! scores.
//!
//! Multi-channel images are planar (`channel, row, column`); a block is the
//! stacked `channels x w x w` vector.

use rayon::prelude::*;

/// Added under the square root of the variance product.
pub const ZNCC_EPS: f64 = 1e-6;
/// Blocks with `var <= VAR_FLOOR * mean^2` score 0.
pub const VAR_FLOOR: f64 = 1e-12;

/// Shape of a matching problem: `n_sub` references, `n_shift` integer shifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub block: usize,
    pub n_sub: usize,
    pub n_shift: usize,
}

impl Layout {
    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    /// Number of samples in one block.
    fn samples(&self) -> f64 {
        (self.channels * self.block * self.block) as f64
    }

    pub fn half(&self) -> usize {
        self.block / 2
    }

    pub fn labels(&self) -> usize {
        self.n_sub * self.n_shift
    }

    /// Reference index and shift of label `k`.
    pub fn split(&self, k: usize) -> (usize, usize) {
        (k % self.n_sub, k / self.n_sub)
    }

    /// First and one-past-last valid column.
    pub fn cols(&self) -> (usize, usize) {
        let h = self.half();
        (h + self.n_shift - 1, self.width.saturating_sub(h))
    }

    pub fn row_valid(&self, y: usize) -> bool {
        let h = self.half();
        y >= h && y + h < self.height
    }

    pub fn valid(&self, x: usize, y: usize) -> bool {
        let (x0, x1) = self.cols();
        self.row_valid(y) && x >= x0 && x < x1
    }

    /// Whether any pixel is valid.
    pub fn has_valid(&self) -> bool {
        let (x0, x1) = self.cols();
        x0 < x1 && self.height >= self.block
    }
}

/// Window sums of one (pixel, label) pair.
#[derive(Debug, Clone, Copy)]
struct Moments {
    sc: f64,
    scc: f64,
    so: f64,
    soo: f64,
    sco: f64,
}

struct Stats {
    cov: f64,
    vc: f64,
    vo: f64,
    floored: bool,
}

fn stats(m: &Moments, n: f64) -> Stats {
    let mc = m.sc / n;
    let mo = m.so / n;
    let cov = m.sco / n - mc * mo;
    let vc = m.scc / n - mc * mc;
    let vo = m.soo / n - mo * mo;
    let floored = vc <= VAR_FLOOR * mc * mc || vo <= VAR_FLOOR * mo * mo;
    Stats {
        cov,
        vc,
        vo,
        floored,
    }
}

fn score(m: &Moments, n: f64) -> f64 {
    let s = stats(m, n);
    if s.floored {
        0.0
    } else {
        s.cov / (s.vc * s.vo + ZNCC_EPS).sqrt()
    }
}

/// Gradient of the score with respect to `(sc, scc, so, soo, sco)`.
fn score_grad(m: &Moments, n: f64, g: f64) -> [f64; 5] {
    let s = stats(m, n);
    if s.floored || g == 0.0 {
        return [0.0; 5];
    }
    let d = (s.vc * s.vo + ZNCC_EPS).sqrt();
    let gcov = g / d;
    let gd = -g * s.cov / (d * d);
    let gvc = gd * s.vo / (2.0 * d);
    let gvo = gd * s.vc / (2.0 * d);
    let n2 = n * n;
    [
        -gcov * m.so / n2 - 2.0 * gvc * m.sc / n2,
        gvc / n,
        -gcov * m.sc / n2 - 2.0 * gvo * m.so / n2,
        gvo / n,
        gcov / n,
    ]
}

/// Horizontal window sums of `col` centered on every column in `[x0, x1)`.
fn window(col: &[f64], h: usize, x0: usize, x1: usize, out: &mut [f64]) {
    for x in x0..x1 {
        let mut acc = 0.0;
        for v in &col[x - h..=x + h] {
            acc += v;
        }
        out[x] = acc;
    }
}

/// Sums of `f(index)` over the `w` rows centered on `y` and all channels,
/// for every column.
fn column_sums(lay: &Layout, y: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let h = lay.half();
    let (w, plane) = (lay.width, lay.plane());
    (0..w)
        .map(|x| {
            let mut acc = 0.0;
            for c in 0..lay.channels {
                for r in y - h..=y + h {
                    acc += f(c * plane + r * w + x);
                }
            }
            acc
        })
        .collect()
}

/// Per-row moments for all valid pixels and labels.
struct RowMoments {
    sc: Vec<f64>,
    scc: Vec<f64>,
    /// Per reference, window sums at every column.
    so: Vec<Vec<f64>>,
    soo: Vec<Vec<f64>>,
    /// `x * labels + k`.
    sco: Vec<f64>,
}

impl RowMoments {
    fn at(&self, lay: &Layout, x: usize, k: usize) -> Moments {
        let (i, s) = lay.split(k);
        Moments {
            sc: self.sc[x],
            scc: self.scc[x],
            so: self.so[i][x - s],
            soo: self.soo[i][x - s],
            sco: self.sco[x * lay.labels() + k],
        }
    }
}

fn row_moments(lay: &Layout, ic: &[f64], refs: &[&[f64]], y: usize) -> RowMoments {
    let w = lay.width;
    let h = lay.half();
    let (x0, x1) = lay.cols();
    let nl = lay.labels();
    let mut sc = vec![0.0; w];
    let mut scc = vec![0.0; w];
    window(&column_sums(lay, y, |p| ic[p]), h, x0, x1, &mut sc);
    window(&column_sums(lay, y, |p| ic[p] * ic[p]), h, x0, x1, &mut scc);
    let mut so = Vec::with_capacity(lay.n_sub);
    let mut soo = Vec::with_capacity(lay.n_sub);
    for io in refs {
        let mut a = vec![0.0; w];
        let mut b = vec![0.0; w];
        window(&column_sums(lay, y, |p| io[p]), h, h, w - h, &mut a);
        window(&column_sums(lay, y, |p| io[p] * io[p]), h, h, w - h, &mut b);
        so.push(a);
        soo.push(b);
    }
    let mut sco = vec![0.0; w * nl];
    let mut buf = vec![0.0; w];
    for k in 0..nl {
        let (i, s) = lay.split(k);
        let io = refs[i];
        let col = column_sums(lay, y, |p| if p % w < s { 0.0 } else { ic[p] * io[p - s] });
        window(&col, h, x0, x1, &mut buf);
        for x in x0..x1 {
            sco[x * nl + k] = buf[x];
        }
    }
    RowMoments {
        sc,
        scc,
        so,
        soo,
        sco,
    }
}

/// Scores of row `y`, `x * labels + k`; zero on invalid pixels.
pub fn row_scores(lay: &Layout, ic: &[f64], refs: &[&[f64]], y: usize) -> Vec<f64> {
    let nl = lay.labels();
    let mut out = vec![0.0; lay.width * nl];
    if !lay.row_valid(y) || !lay.has_valid() {
        return out;
    }
    let m = row_moments(lay, ic, refs, y);
    let n = lay.samples();
    let (x0, x1) = lay.cols();
    for x in x0..x1 {
        for k in 0..nl {
            out[x * nl + k] = score(&m.at(lay, x, k), n);
        }
    }
    out
}

/// Full volume in `(y, x, k)` order.
pub fn scores(lay: &Layout, ic: &[f64], refs: &[&[f64]]) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = (0..lay.height)
        .into_par_iter()
        .map(|y| row_scores(lay, ic, refs, y))
        .collect();
    rows.concat()
}

/// Adjoint fields of the window sums at each valid pixel.
struct Coefficients {
    /// Per pixel: summed over labels, `d/d sc` and `2 d/d scc`.
    a: Vec<f64>,
    b: Vec<f64>,
    /// Per pixel and label: `d/d sco`, `d/d so`, `d/d soo`.
    e: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

fn coefficients(lay: &Layout, ic: &[f64], refs: &[&[f64]], grad: &[f64]) -> Coefficients {
    let (w, nl) = (lay.width, lay.labels());
    let n = lay.samples();
    let (x0, x1) = lay.cols();
    type Row = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let rows: Vec<Row> = (0..lay.height)
        .into_par_iter()
        .map(|y| {
            let mut a = vec![0.0; w];
            let mut b = vec![0.0; w];
            let mut e = vec![0.0; w * nl];
            let mut f = vec![0.0; w * nl];
            let mut g = vec![0.0; w * nl];
            if lay.row_valid(y) && lay.has_valid() {
                let gy = &grad[y * w * nl..(y + 1) * w * nl];
                if gy.iter().any(|&v| v != 0.0) {
                    let m = row_moments(lay, ic, refs, y);
                    for x in x0..x1 {
                        for k in 0..nl {
                            let c = score_grad(&m.at(lay, x, k), n, gy[x * nl + k]);
                            a[x] += c[0];
                            b[x] += 2.0 * c[1];
                            f[x * nl + k] = c[2];
                            g[x * nl + k] = c[3];
                            e[x * nl + k] = c[4];
                        }
                    }
                }
            }
            (a, b, e, f, g)
        })
        .collect();
    let mut out = Coefficients {
        a: Vec::with_capacity(w * lay.height),
        b: Vec::with_capacity(w * lay.height),
        e: Vec::with_capacity(w * lay.height * nl),
        f: Vec::with_capacity(w * lay.height * nl),
        g: Vec::with_capacity(w * lay.height * nl),
    };
    for (a, b, e, f, g) in rows {
        out.a.extend(a);
        out.b.extend(b);
        out.e.extend(e);
        out.f.extend(f);
        out.g.extend(g);
    }
    out
}

/// Sum of `field(p)` over the window centered on every column of row `y`,
/// where `field` is a per-pixel array with `stride` entries per pixel.
fn box_gather(
    lay: &Layout,
    field: &[f64],
    stride: usize,
    offset: usize,
    y: usize,
    out: &mut [f64],
) {
    let (w, hgt) = (lay.width, lay.height);
    let h = lay.half();
    let r0 = y.saturating_sub(h);
    let r1 = (y + h + 1).min(hgt);
    let col: Vec<f64> = (0..w)
        .map(|x| {
            let mut acc = 0.0;
            for r in r0..r1 {
                acc += field[(r * w + x) * stride + offset];
            }
            acc
        })
        .collect();
    for x in 0..w {
        let lo = x.saturating_sub(h);
        let hi = (x + h + 1).min(w);
        let mut acc = 0.0;
        for v in &col[lo..hi] {
            acc += v;
        }
        out[x] = acc;
    }
}

/// Backward pass: gradients with respect to the capture and each reference.
pub fn scores_backward(
    lay: &Layout,
    ic: &[f64],
    refs: &[&[f64]],
    grad: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (w, nl, nc, plane) = (lay.width, lay.labels(), lay.channels, lay.plane());
    let co = coefficients(lay, ic, refs, grad);
    // Per row: `[channel][x]` for the capture, `[ref][channel][x]` for the references.
    type Row = (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>);
    let rows: Vec<Row> = (0..lay.height)
        .into_par_iter()
        .map(|y| {
            let mut gc = vec![vec![0.0; w]; nc];
            let mut go = vec![vec![vec![0.0; w]; nc]; lay.n_sub];
            let mut box_a = vec![0.0; w];
            let mut box_b = vec![0.0; w];
            box_gather(lay, &co.a, 1, 0, y, &mut box_a);
            box_gather(lay, &co.b, 1, 0, y, &mut box_b);
            let at = |img: &[f64], c: usize, x: usize| img[c * plane + y * w + x];
            for (c, gcc) in gc.iter_mut().enumerate() {
                for x in 0..w {
                    gcc[x] = box_a[x] + at(ic, c, x) * box_b[x];
                }
            }
            let mut be = vec![0.0; w];
            let mut bf = vec![0.0; w];
            let mut bg = vec![0.0; w];
            for k in 0..nl {
                let (i, s) = lay.split(k);
                box_gather(lay, &co.e, nl, k, y, &mut be);
                box_gather(lay, &co.f, nl, k, y, &mut bf);
                box_gather(lay, &co.g, nl, k, y, &mut bg);
                let io = refs[i];
                for c in 0..nc {
                    for q in s..w {
                        gc[c][q] += at(io, c, q - s) * be[q];
                    }
                    for r in 0..w - s.min(w) {
                        let q = r + s;
                        go[i][c][r] += bf[q] + 2.0 * at(io, c, r) * bg[q] + at(ic, c, q) * be[q];
                    }
                }
            }
            (gc, go)
        })
        .collect();
    let mut g_ic = vec![0.0; nc * plane];
    let mut g_refs = vec![vec![0.0; nc * plane]; lay.n_sub];
    for (y, (gc, go)) in rows.into_iter().enumerate() {
        for (c, row) in gc.into_iter().enumerate() {
            g_ic[c * plane + y * w..c * plane + (y + 1) * w].copy_from_slice(&row);
        }
        for (dst, src) in g_refs.iter_mut().zip(go) {
            for (c, row) in src.into_iter().enumerate() {
                dst[c * plane + y * w..c * plane + (y + 1) * w].copy_from_slice(&row);
            }
        }
    }
    (g_ic, g_refs)
}
