//! Axis-aligned bounding volume hierarchy over triangles.

use crate::scene::{cross, dot, sub, Triangle, Vec3};

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        }
    }

    fn grow(&mut self, p: Vec3) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    fn hit(&self, origin: Vec3, inv_dir: Vec3, t_max: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let a = (self.min[k] - origin[k]) * inv_dir[k];
            let b = (self.max[k] - origin[k]) * inv_dir[k];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            // NaN from 0 * inf compares false and leaves the slab open.
            if lo > t0 {
                t0 = lo;
            }
            if hi < t1 {
                t1 = hi;
            }
            if t0 > t1 * (1.0 + 1e-12) + 1e-12 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        bounds: Aabb,
        start: usize,
        len: usize,
    },
    Inner {
        bounds: Aabb,
        left: usize,
        right: usize,
    },
}

/// Closest-hit query structure. Hits are reported with the original
/// triangle index; equal distances resolve to the lowest index.
#[derive(Debug, Clone)]
pub struct Bvh {
    triangles: Vec<Triangle>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

/// Möller–Trumbore ray/triangle test, two-sided. Returns the ray parameter.
pub fn intersect_triangle(tri: &Triangle, origin: Vec3, dir: Vec3) -> Option<f64> {
    let e1 = sub(tri.v[1], tri.v[0]);
    let e2 = sub(tri.v[2], tri.v[0]);
    let p = cross(dir, e2);
    let det = dot(e1, p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = sub(origin, tri.v[0]);
    let u = dot(s, p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(s, e1);
    let v = dot(dir, q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(e2, q) * inv;
    (t > 1e-9).then_some(t)
}

impl Bvh {
    pub fn new(triangles: Vec<Triangle>) -> Self {
        let mut bvh = Bvh {
            order: (0..triangles.len()).collect(),
            triangles,
            nodes: Vec::new(),
        };
        if !bvh.triangles.is_empty() {
            let n = bvh.triangles.len();
            bvh.build(0, n);
        }
        bvh
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    fn centroid(&self, i: usize) -> Vec3 {
        let v = &self.triangles[i].v;
        [
            (v[0][0] + v[1][0] + v[2][0]) / 3.0,
            (v[0][1] + v[1][1] + v[2][1]) / 3.0,
            (v[0][2] + v[1][2] + v[2][2]) / 3.0,
        ]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &i in &self.order[start..end] {
            for v in self.triangles[i].v {
                bounds.grow(v);
            }
            cbounds.grow(self.centroid(i));
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                bounds,
                start,
                len: end - start,
            });
            return id;
        }
        let extent = sub(cbounds.max, cbounds.min);
        let axis = (0..3)
            .max_by(|&a, &b| extent[a].total_cmp(&extent[b]))
            .unwrap_or(0);
        let mut idx = self.order[start..end].to_vec();
        idx.sort_by(|&a, &b| {
            self.centroid(a)[axis]
                .total_cmp(&self.centroid(b)[axis])
                .then(a.cmp(&b))
        });
        self.order[start..end].copy_from_slice(&idx);
        let mid = start + (end - start) / 2;
        self.nodes.push(Node::Leaf {
            bounds,
            start: 0,
            len: 0,
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Inner {
            bounds,
            left,
            right,
        };
        id
    }

    /// Closest hit with `t < t_max`: `(t, triangle index)`.
    pub fn closest_hit(&self, origin: Vec3, dir: Vec3, t_max: f64) -> Option<(f64, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<(f64, usize)> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let limit = best.map_or(t_max, |b| b.0);
            match &self.nodes[n] {
                Node::Leaf { bounds, start, len } => {
                    if !bounds.hit(origin, inv, limit) {
                        continue;
                    }
                    for &i in &self.order[*start..*start + *len] {
                        if let Some(t) = intersect_triangle(&self.triangles[i], origin, dir) {
                            let better = match best {
                                None => t < t_max,
                                Some((bt, bi)) => t < bt || (t == bt && i < bi),
                            };
                            if better {
                                best = Some((t, i));
                            }
                        }
                    }
                }
                Node::Inner {
                    bounds,
                    left,
                    right,
                } => {
                    if bounds.hit(origin, inv, limit) {
                        stack.push(*right);
                        stack.push(*left);
                    }
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(tris: &[Triangle], o: Vec3, d: Vec3) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, t) in tris.iter().enumerate() {
            if let Some(h) = intersect_triangle(t, o, d) {
                if best.is_none_or(|b| h < b.0) {
                    best = Some((h, i));
                }
            }
        }
        best
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tris: Vec<Triangle> = (0..200)
            .map(|_| {
                let c = [
                    rng.gen_range(-200.0..200.0),
                    rng.gen_range(-200.0..200.0),
                    rng.gen_range(500.0..1500.0),
                ];
                let v = [0, 1, 2].map(|_| {
                    [
                        c[0] + rng.gen_range(-40.0..40.0),
                        c[1] + rng.gen_range(-40.0..40.0),
                        c[2] + rng.gen_range(-40.0..40.0),
                    ]
                });
                Triangle {
                    v,
                    albedo: [1.0; 3],
                }
            })
            .collect();
        let bvh = Bvh::new(tris.clone());
        for _ in 0..500 {
            let d = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0];
            let a = bvh.closest_hit([0.0; 3], d, f64::INFINITY);
            let b = brute(&tris, [0.0; 3], d);
            assert_eq!(a.map(|h| h.1), b.map(|h| h.1));
        }
    }

    #[test]
    fn empty_bvh_misses() {
        assert!(Bvh::new(Vec::new())
            .closest_hit([0.0; 3], [0.0, 0.0, 1.0], 1e9)
            .is_none());
    }
}
