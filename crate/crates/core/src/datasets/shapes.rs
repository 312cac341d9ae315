//! Analytic surface samplers. Every shape is sampled area-uniformly in its
//! canonical frame (z up) and reports exact outward unit normals.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{cross, norm, sub, unit, Point3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Ellipsoid,
    Box,
    Cylinder,
    Cone,
    Torus,
    Capsule,
    Pyramid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Ellipsoid,
        ShapeKind::Box,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Capsule,
        ShapeKind::Pyramid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Capsule => "capsule",
            ShapeKind::Pyramid => "pyramid",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Names of the shape parameters drawn from a [`ShapeClass`]'s ranges.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ShapeKind::Sphere => &[],
            ShapeKind::Ellipsoid => &["axis_y", "axis_z"],
            ShapeKind::Box => &["half_y", "half_z"],
            ShapeKind::Cylinder => &["half_height"],
            ShapeKind::Cone => &["height"],
            ShapeKind::Torus => &["tube_ratio"],
            ShapeKind::Capsule => &["half_length"],
            ShapeKind::Pyramid => &["height"],
        }
    }

    /// Whether `p -> -p` maps the surface onto itself.
    pub fn centrally_symmetric(self) -> bool {
        !matches!(self, ShapeKind::Cone | ShapeKind::Pyramid)
    }
}

/// A shape family plus the ranges its parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub kind: ShapeKind,
    pub ranges: Vec<(f64, f64)>,
}

impl ShapeClass {
    pub fn new(kind: ShapeKind, ranges: &[(f64, f64)]) -> Self {
        assert_eq!(ranges.len(), kind.param_names().len(), "{kind:?} parameter count");
        Self {
            kind,
            ranges: ranges.to_vec(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Shape {
        let params = self
            .ranges
            .iter()
            .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        Shape {
            kind: self.kind,
            params,
        }
    }
}

/// A concrete shape instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub params: Vec<f64>,
}

fn unit_sphere(rng: &mut impl Rng) -> Point3 {
    loop {
        let v: Point3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        if norm(v) > 1e-9 {
            return unit(v);
        }
    }
}

fn pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn triangle(rng: &mut impl Rng, a: Point3, b: Point3, c: Point3) -> Point3 {
    let (r1, r2): (f64, f64) = (rng.random(), rng.random());
    let s = r1.sqrt();
    let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
    [
        wa * a[0] + wb * b[0] + wc * c[0],
        wa * a[1] + wb * b[1] + wc * c[1],
        wa * a[2] + wb * b[2] + wc * c[2],
    ]
}

impl Shape {
    /// One area-uniform surface sample and its outward unit normal.
    pub fn sample(&self, rng: &mut impl Rng) -> (Point3, Point3) {
        let p = &self.params;
        match self.kind {
            ShapeKind::Sphere => {
                let u = unit_sphere(rng);
                (u, u)
            }
            ShapeKind::Ellipsoid => {
                let (a, b, c) = (1.0, p[0], p[1]);
                let wmax = (b * c).max(a * c).max(a * b);
                loop {
                    let u = unit_sphere(rng);
                    let w = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2))
                        .sqrt();
                    if rng.random_range(0.0..wmax) < w {
                        let q = [a * u[0], b * u[1], c * u[2]];
                        let n = unit([q[0] / (a * a), q[1] / (b * b), q[2] / (c * c)]);
                        return (q, n);
                    }
                }
            }
            ShapeKind::Box => {
                let h = [1.0, p[0], p[1]];
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let axis = pick(rng, &areas);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut q = [0.0; 3];
                for d in 0..3 {
                    q[d] = if d == axis {
                        sign * h[d]
                    } else {
                        rng.random_range(-h[d]..=h[d])
                    };
                }
                let mut n = [0.0; 3];
                n[axis] = sign;
                (q, n)
            }
            ShapeKind::Cylinder => {
                let (r, hh) = (1.0, p[0]);
                let side = 2.0 * PI * r * 2.0 * hh;
                let cap = PI * r * r;
                match pick(rng, &[side, cap, cap]) {
                    0 => {
                        let t = rng.random_range(0.0..2.0 * PI);
                        let z = rng.random_range(-hh..=hh);
                        ([r * t.cos(), r * t.sin(), z], [t.cos(), t.sin(), 0.0])
                    }
                    face => {
                        let z = if face == 1 { hh } else { -hh };
                        let (x, y) = disk(rng, r);
                        ([x, y, z], [0.0, 0.0, z.signum()])
                    }
                }
            }
            ShapeKind::Cone => {
                let (r, h) = (1.0, p[0]);
                let slant = (r * r + h * h).sqrt();
                match pick(rng, &[PI * r * slant, PI * r * r]) {
                    0 => {
                        let t = rng.random_range(0.0..2.0 * PI);
                        let f = rng.random::<f64>().sqrt();
                        let q = [r * f * t.cos(), r * f * t.sin(), h / 2.0 - h * f];
                        let n = [h * t.cos() / slant, h * t.sin() / slant, r / slant];
                        (q, n)
                    }
                    _ => {
                        let (x, y) = disk(rng, r);
                        ([x, y, -h / 2.0], [0.0, 0.0, -1.0])
                    }
                }
            }
            ShapeKind::Torus => {
                let (big, small) = (1.0, p[0]);
                loop {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let phi = rng.random_range(0.0..2.0 * PI);
                    let w = big + small * phi.cos();
                    if rng.random_range(0.0..big + small) < w {
                        let q = [w * theta.cos(), w * theta.sin(), small * phi.sin()];
                        let n = [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()];
                        return (q, n);
                    }
                }
            }
            ShapeKind::Capsule => {
                let (r, hl) = (1.0, p[0]);
                let side = 2.0 * PI * r * 2.0 * hl;
                let caps = 4.0 * PI * r * r;
                match pick(rng, &[side, caps]) {
                    0 => {
                        let t = rng.random_range(0.0..2.0 * PI);
                        let z = rng.random_range(-hl..=hl);
                        ([r * t.cos(), r * t.sin(), z], [t.cos(), t.sin(), 0.0])
                    }
                    _ => {
                        let u = unit_sphere(rng);
                        let cz = if u[2] >= 0.0 { hl } else { -hl };
                        ([r * u[0], r * u[1], cz + r * u[2]], u)
                    }
                }
            }
            ShapeKind::Pyramid => {
                let (s, h) = (1.0, p[0]);
                let apex = [0.0, 0.0, h / 2.0];
                let base = [
                    [s, s, -h / 2.0],
                    [-s, s, -h / 2.0],
                    [-s, -s, -h / 2.0],
                    [s, -s, -h / 2.0],
                ];
                let side_area = s * (s * s + h * h).sqrt();
                let face = pick(rng, &[side_area, side_area, side_area, side_area, 4.0 * s * s]);
                if face == 4 {
                    let q = [rng.random_range(-s..=s), rng.random_range(-s..=s), -h / 2.0];
                    return (q, [0.0, 0.0, -1.0]);
                }
                let (a, b) = (base[face], base[(face + 1) % 4]);
                let q = triangle(rng, apex, a, b);
                let mut n = unit(cross(sub(a, apex), sub(b, apex)));
                // outward: away from the pyramid's interior
                let centroid = [(a[0] + b[0]) / 3.0, (a[1] + b[1]) / 3.0, 0.0];
                if n[0] * centroid[0] + n[1] * centroid[1] < 0.0 {
                    n = [-n[0], -n[1], -n[2]];
                }
                (q, n)
            }
        }
    }
}

fn disk(rng: &mut impl Rng, r: f64) -> (f64, f64) {
    let rad = r * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..2.0 * PI);
    (rad * t.cos(), rad * t.sin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dot;
    use crate::seed::rng;

    fn class(kind: ShapeKind) -> Shape {
        let params = match kind {
            ShapeKind::Sphere => vec![],
            ShapeKind::Ellipsoid | ShapeKind::Box => vec![0.7, 0.4],
            _ => vec![0.8],
        };
        Shape { kind, params }
    }

    #[test]
    fn normals_are_unit_and_outward() {
        let mut r = rng(1);
        for kind in ShapeKind::ALL {
            let shape = class(kind);
            for _ in 0..500 {
                let (p, n) = shape.sample(&mut r);
                assert!((norm(n) - 1.0).abs() < 1e-12, "{kind:?}");
                // stepping along the normal moves away from the shape's
                // interior reference point (origin for all but the torus)
                if kind != ShapeKind::Torus {
                    let c = if kind == ShapeKind::Capsule {
                        [0.0, 0.0, p[2].clamp(-0.8, 0.8)]
                    } else {
                        [0.0; 3]
                    };
                    assert!(dot(sub(p, c), n) > -1e-12, "{kind:?} {p:?} {n:?}");
                }
            }
        }
    }

    #[test]
    fn implicit_surfaces_hold() {
        let mut r = rng(2);
        let ell = Shape {
            kind: ShapeKind::Ellipsoid,
            params: vec![0.5, 0.3],
        };
        let torus = Shape {
            kind: ShapeKind::Torus,
            params: vec![0.3],
        };
        for _ in 0..200 {
            let (p, _) = ell.sample(&mut r);
            let f = p[0] * p[0] + (p[1] / 0.5).powi(2) + (p[2] / 0.3).powi(2);
            assert!((f - 1.0).abs() < 1e-9);
            let (q, _) = torus.sample(&mut r);
            let rho = (q[0] * q[0] + q[1] * q[1]).sqrt();
            assert!(((rho - 1.0).powi(2) + q[2] * q[2] - 0.09).abs() < 1e-9);
        }
    }
}
