//! Scene description: an optional analytic plane plus triangle meshes.
//!
//! Text format, one statement per line, `#` starts a comment:
//!
//! ```text
//! plane <z_mm> <alpha_deg> [<r> <g> <b>]
//! object <name> [<r> <g> <b>]
//! pose <tx> <ty> <tz> <rx_deg> <ry_deg> <rz_deg>
//! v <x> <y> <z>
//! f <i> <j> <k>
//! ```
//!
//! `v`, `f` and `pose` lines apply to the most recent `object`. Face indices
//! are 1-based and local to the object.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Plane through `(0, 0, z)` spanned by `(1, 0, 0)` and
/// `(0, cos a, sin a)`: a frontal plane at `a = 0`, tilted about the x axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub z: f64,
    pub alpha_deg: f64,
    pub albedo: Vec3,
}

impl Plane {
    pub fn frontal(z: f64) -> Self {
        Plane {
            z,
            alpha_deg: 0.0,
            albedo: [1.0; 3],
        }
    }

    pub fn tilted(z: f64, alpha_deg: f64) -> Self {
        Plane {
            z,
            alpha_deg,
            albedo: [1.0; 3],
        }
    }

    pub fn normal(&self) -> Vec3 {
        let a = self.alpha_deg.to_radians();
        [0.0, -a.sin(), a.cos()]
    }

    /// Ray parameter for `origin + t * dir`, if the hit is in front.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let n = self.normal();
        let denom = dot(n, dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = dot(n, sub([0.0, 0.0, self.z], origin)) / denom;
        (t > 1e-9).then_some(t)
    }

    /// Depth (z-buffer) of the plane along the camera ray with direction `(dx, dy, 1)`.
    pub fn depth_along(&self, dx: f64, dy: f64) -> Option<f64> {
        self.intersect([0.0; 3], [dx, dy, 1.0])
    }
}

/// Rigid transform: rotation about the object's vertex centroid (x, then y,
/// then z, degrees) followed by translation (mm).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub translation: Vec3,
    pub rotation_deg: Vec3,
}

impl Pose {
    fn rotate(&self, p: Vec3) -> Vec3 {
        let [rx, ry, rz] = self.rotation_deg.map(f64::to_radians);
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let p = [p[0], cx * p[1] - sx * p[2], sx * p[1] + cx * p[2]];
        let p = [cy * p[0] + sy * p[2], p[1], -sy * p[0] + cy * p[2]];
        [cz * p[0] - sz * p[1], sz * p[0] + cz * p[1], p[2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub name: String,
    pub albedo: Vec3,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub pose: Pose,
}

impl Object {
    pub fn new(name: impl Into<String>, albedo: Vec3) -> Self {
        Object {
            name: name.into(),
            albedo,
            vertices: Vec::new(),
            faces: Vec::new(),
            pose: Pose::default(),
        }
    }

    /// Axis-aligned rectangle at constant depth `z`, as two triangles.
    pub fn rectangle(
        name: impl Into<String>,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        z: f64,
        albedo: Vec3,
    ) -> Self {
        let mut o = Object::new(name, albedo);
        o.vertices = vec![[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]];
        o.faces = vec![[0, 1, 2], [0, 2, 3]];
        o
    }

    fn world_vertices(&self) -> Vec<Vec3> {
        if self.pose == Pose::default() {
            return self.vertices.clone();
        }
        let n = self.vertices.len().max(1) as f64;
        let c = scale(
            self.vertices.iter().fold([0.0; 3], |a, v| add(a, *v)),
            1.0 / n,
        );
        self.vertices
            .iter()
            .map(|v| add(add(self.pose.rotate(sub(*v, c)), c), self.pose.translation))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v: [Vec3; 3],
    pub albedo: Vec3,
}

impl Triangle {
    pub fn normal(&self) -> Vec3 {
        let n = cross(sub(self.v[1], self.v[0]), sub(self.v[2], self.v[0]));
        scale(n, 1.0 / norm(n))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub plane: Option<Plane>,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn empty() -> Self {
        Scene::default()
    }

    pub fn with_plane(plane: Plane) -> Self {
        Scene {
            plane: Some(plane),
            objects: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.plane {
            if !p.z.is_finite() || !p.alpha_deg.is_finite() || p.alpha_deg.abs() >= 90.0 {
                return Err(Error::Input(format!(
                    "degenerate plane z={} alpha={}",
                    p.z, p.alpha_deg
                )));
            }
            check_albedo(p.albedo)?;
        }
        for o in &self.objects {
            check_albedo(o.albedo)?;
            if o.vertices.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!(
                    "object `{}` has non-finite vertices",
                    o.name
                )));
            }
            for f in &o.faces {
                if f.iter().any(|&i| i >= o.vertices.len()) {
                    return Err(Error::Input(format!(
                        "object `{}` face index out of range",
                        o.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// World-space triangles, in file order. Degenerate faces are dropped.
    pub fn triangles(&self) -> Vec<Triangle> {
        let mut out = Vec::new();
        for o in &self.objects {
            let verts = o.world_vertices();
            for f in &o.faces {
                let v = [verts[f[0]], verts[f[1]], verts[f[2]]];
                if norm(cross(sub(v[1], v[0]), sub(v[2], v[0]))) > 0.0 {
                    out.push(Triangle {
                        v,
                        albedo: o.albedo,
                    });
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Scene> {
        let mut scene = Scene::empty();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad =
                |msg: &str| Error::Input(format!("scene line {}: {msg}: `{raw}`", lineno + 1));
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let rest: Vec<&str> = parts.collect();
            let nums = |xs: &[&str]| -> Result<Vec<f64>> {
                xs.iter()
                    .map(|s| s.parse::<f64>().map_err(|_| bad("expected a number")))
                    .collect()
            };
            match key {
                "plane" => {
                    let v = nums(&rest)?;
                    let albedo = match v.len() {
                        2 => [1.0; 3],
                        5 => [v[2], v[3], v[4]],
                        _ => return Err(bad("plane takes z, alpha and an optional albedo")),
                    };
                    scene.plane = Some(Plane {
                        z: v[0],
                        alpha_deg: v[1],
                        albedo,
                    });
                }
                "object" => {
                    let name = rest.first().ok_or_else(|| bad("object needs a name"))?;
                    let v = nums(&rest[1..])?;
                    let albedo = match v.len() {
                        0 => [1.0; 3],
                        3 => [v[0], v[1], v[2]],
                        _ => return Err(bad("object albedo takes three values")),
                    };
                    scene.objects.push(Object::new(*name, albedo));
                }
                "pose" | "v" | "f" => {
                    let obj = scene
                        .objects
                        .last_mut()
                        .ok_or_else(|| bad("no object declared"))?;
                    match key {
                        "pose" => {
                            let v = nums(&rest)?;
                            if v.len() != 6 {
                                return Err(bad("pose takes six values"));
                            }
                            obj.pose = Pose {
                                translation: [v[0], v[1], v[2]],
                                rotation_deg: [v[3], v[4], v[5]],
                            };
                        }
                        "v" => {
                            let v = nums(&rest)?;
                            if v.len() != 3 {
                                return Err(bad("vertex takes three values"));
                            }
                            obj.vertices.push([v[0], v[1], v[2]]);
                        }
                        _ => {
                            if rest.len() != 3 {
                                return Err(bad("face takes three indices"));
                            }
                            let mut f = [0usize; 3];
                            for (slot, s) in f.iter_mut().zip(&rest) {
                                let i: usize = s.parse().map_err(|_| bad("expected an index"))?;
                                if i == 0 {
                                    return Err(bad("face indices are 1-based"));
                                }
                                *slot = i - 1;
                            }
                            obj.faces.push(f);
                        }
                    }
                }
                _ => return Err(bad("unknown statement")),
            }
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scene> {
        Scene::parse(&crate::error::read_text(path.as_ref())?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.plane {
            let [r, g, b] = p.albedo;
            let _ = writeln!(s, "plane {} {} {} {} {}", p.z, p.alpha_deg, r, g, b);
        }
        for o in &self.objects {
            let [r, g, b] = o.albedo;
            let _ = writeln!(s, "object {} {} {} {}", o.name, r, g, b);
            if o.pose != Pose::default() {
                let [tx, ty, tz] = o.pose.translation;
                let [rx, ry, rz] = o.pose.rotation_deg;
                let _ = writeln!(s, "pose {tx} {ty} {tz} {rx} {ry} {rz}");
            }
            for v in &o.vertices {
                let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
            }
            for f in &o.faces {
                let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
            }
        }
        s
    }
}

fn check_albedo(a: Vec3) -> Result<()> {
    if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input(format!("albedo {a:?} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "# demo\nplane 1000 10 1 0 0\nobject box 0.5 0.5 0.5\npose 1 2 3 0 0 90\nv 0 0 900\nv 10 0 900\nv 0 10 900\nf 1 2 3\n";
        let s = Scene::parse(text).unwrap();
        assert_eq!(s.plane.unwrap().albedo, [1.0, 0.0, 0.0]);
        assert_eq!(s.objects[0].faces, vec![[0, 1, 2]]);
        assert_eq!(Scene::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn parse_errors() {
        assert!(Scene::parse("v 0 0 0").is_err());
        assert!(Scene::parse("plane 1000").is_err());
        assert!(Scene::parse("plane 1000 95").is_err());
        assert!(Scene::parse("object a\nv 0 0 0\nf 1 2 3").is_err());
        assert!(Scene::parse("object a 2 0 0").is_err());
        assert!(Scene::parse("sphere 1").is_err());
    }

    #[test]
    fn frontal_plane_depth() {
        let p = Plane::frontal(1000.0);
        assert_eq!(p.depth_along(0.3, -0.2), Some(1000.0));
    }

    #[test]
    fn tilted_plane_contains_span() {
        let p = Plane::tilted(800.0, 30.0);
        let a = 30f64.to_radians();
        let point = [5.0, 40.0 * a.cos(), 800.0 + 40.0 * a.sin()];
        assert!(dot(p.normal(), sub(point, [0.0, 0.0, 800.0])).abs() < 1e-12);
    }

    #[test]
    fn pose_rotates_about_centroid() {
        let mut o = Object::rectangle("r", -1.0, -1.0, 1.0, 1.0, 10.0, [1.0; 3]);
        o.pose.rotation_deg = [0.0, 0.0, 90.0];
        o.pose.translation = [0.0, 0.0, 5.0];
        let w = o.world_vertices();
        assert!((w[0][0] - 1.0).abs() < 1e-12 && (w[0][1] + 1.0).abs() < 1e-12);
        assert!((w[0][2] - 15.0).abs() < 1e-12);
    }
}
