//! Analytic SDF primitives and their compositions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{v3, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// A signed distance function built from primitives.
///
/// Sphere, (rounded) box, capsule and capped cylinder are exact Euclidean
/// distances. Unions, subtractions and polynomial smooth unions keep the
/// 1-Lipschitz property but are only distance bounds away from the surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        rounding: f64,
    },
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
    },
    Cylinder {
        center: [f64; 3],
        axis: Axis,
        radius: f64,
        half_length: f64,
    },
    Union {
        children: Vec<Shape>,
    },
    SmoothUnion {
        a: Box<Shape>,
        b: Box<Shape>,
        k: f64,
    },
    Subtract {
        base: Box<Shape>,
        cut: Box<Shape>,
    },
}

impl Shape {
    pub fn sphere(radius: f64) -> Self {
        Shape::Sphere {
            center: [0.0; 3],
            radius,
        }
    }

    pub fn cuboid(half_extents: [f64; 3]) -> Self {
        Shape::Box {
            center: [0.0; 3],
            half_extents,
            rounding: 0.0,
        }
    }

    pub fn eval<S: Scalar>(&self, p: [S; 3]) -> S {
        match self {
            Shape::Sphere { center, radius } => v3::norm(v3::sub_f(p, *center)) - *radius,
            Shape::Box {
                center,
                half_extents,
                rounding,
            } => {
                let d = v3::sub_f(p, *center);
                let q: [S; 3] = std::array::from_fn(|i| d[i].abs() - (half_extents[i] - rounding));
                let outside = S::norm(&q.map(|c| c.max_f(0.0)));
                let inside = q[0].max(q[1]).max(q[2]).min_f(0.0);
                outside + inside - *rounding
            }
            Shape::Capsule { a, b, radius } => {
                let pa = v3::sub_f(p, *a);
                let ba = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let bb = ba[0] * ba[0] + ba[1] * ba[1] + ba[2] * ba[2];
                let h = (v3::dot_f(pa, ba) / bb).clamp_f(0.0, 1.0);
                let closest = [pa[0] - h * ba[0], pa[1] - h * ba[1], pa[2] - h * ba[2]];
                v3::norm(closest) - *radius
            }
            Shape::Cylinder {
                center,
                axis,
                radius,
                half_length,
            } => {
                let d = v3::sub_f(p, *center);
                let ai = axis.index();
                let (u, w) = ((ai + 1) % 3, (ai + 2) % 3);
                let radial = S::norm(&[d[u], d[w]]) - *radius;
                let along = d[ai].abs() - *half_length;
                let outside = S::norm(&[radial.max_f(0.0), along.max_f(0.0)]);
                radial.max(along).min_f(0.0) + outside
            }
            Shape::Union { children } => {
                let mut it = children.iter();
                let first = it.next().expect("union without children").eval(p);
                it.fold(first, |acc, c| acc.min(c.eval(p)))
            }
            Shape::SmoothUnion { a, b, k } => {
                let da = a.eval(p);
                let db = b.eval(p);
                let h = ((db - da) * (0.5 / k) + 0.5).clamp_f(0.0, 1.0);
                // mix(db, da, h) - k·h·(1-h)
                db + (da - db) * h - h * (-h + 1.0) * *k
            }
            Shape::Subtract { base, cut } => base.eval(p).max(-cut.eval(p)),
        }
    }

    /// Conservative axis-aligned bounds of the zero level set.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Shape::Sphere { center, radius } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Shape::Box {
                center, half_extents, ..
            } => (
                std::array::from_fn(|i| center[i] - half_extents[i]),
                std::array::from_fn(|i| center[i] + half_extents[i]),
            ),
            Shape::Capsule { a, b, radius } => (
                std::array::from_fn(|i| a[i].min(b[i]) - radius),
                std::array::from_fn(|i| a[i].max(b[i]) + radius),
            ),
            Shape::Cylinder {
                center,
                axis,
                radius,
                half_length,
            } => {
                let ai = axis.index();
                let ext: [f64; 3] = std::array::from_fn(|i| if i == ai { *half_length } else { *radius });
                (
                    std::array::from_fn(|i| center[i] - ext[i]),
                    std::array::from_fn(|i| center[i] + ext[i]),
                )
            }
            Shape::Union { children } => children
                .iter()
                .map(Shape::bounds)
                .reduce(merge_bounds)
                .expect("union without children"),
            Shape::SmoothUnion { a, b, k } => {
                let (lo, hi) = merge_bounds(a.bounds(), b.bounds());
                (lo.map(|v| v - k / 4.0), hi.map(|v| v + k / 4.0))
            }
            Shape::Subtract { base, .. } => base.bounds(),
        }
    }

    /// `x ↦ k·x + offset` applied to the geometry; the result is again an
    /// SDF of the transformed shape.
    pub fn transformed(&self, k: f64, offset: [f64; 3]) -> Shape {
        let tp = |p: &[f64; 3]| -> [f64; 3] { std::array::from_fn(|i| p[i] * k + offset[i]) };
        match self {
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: tp(center),
                radius: radius * k,
            },
            Shape::Box {
                center,
                half_extents,
                rounding,
            } => Shape::Box {
                center: tp(center),
                half_extents: half_extents.map(|h| h * k),
                rounding: rounding * k,
            },
            Shape::Capsule { a, b, radius } => Shape::Capsule {
                a: tp(a),
                b: tp(b),
                radius: radius * k,
            },
            Shape::Cylinder {
                center,
                axis,
                radius,
                half_length,
            } => Shape::Cylinder {
                center: tp(center),
                axis: *axis,
                radius: radius * k,
                half_length: half_length * k,
            },
            Shape::Union { children } => Shape::Union {
                children: children.iter().map(|c| c.transformed(k, offset)).collect(),
            },
            Shape::SmoothUnion { a, b, k: blend } => Shape::SmoothUnion {
                a: Box::new(a.transformed(k, offset)),
                b: Box::new(b.transformed(k, offset)),
                k: blend * k,
            },
            Shape::Subtract { base, cut } => Shape::Subtract {
                base: Box::new(base.transformed(k, offset)),
                cut: Box::new(cut.transformed(k, offset)),
            },
        }
    }

    /// Centers the bounds at the origin and scales so the bounding box fits
    /// in a ball of the given diameter.
    pub fn normalized(&self, diameter: f64) -> Shape {
        let (lo, hi) = self.bounds();
        let center: [f64; 3] = std::array::from_fn(|i| 0.5 * (lo[i] + hi[i]));
        let half_diag = (0..3).map(|i| (0.5 * (hi[i] - lo[i])).powi(2)).sum::<f64>().sqrt();
        let k = 0.5 * diameter / half_diag;
        self.transformed(k, center.map(|c| -c * k))
    }
}

fn merge_bounds(a: ([f64; 3], [f64; 3]), b: ([f64; 3], [f64; 3])) -> ([f64; 3], [f64; 3]) {
    (
        std::array::from_fn(|i| a.0[i].min(b.0[i])),
        std::array::from_fn(|i| a.1[i].max(b.1[i])),
    )
}

/// Body/cabin/wheel dimensions of a car-like basis shape, in meters.
#[derive(Clone, Debug)]
pub struct CarProfile {
    pub name: &'static str,
    pub length: f64,
    pub width: f64,
    pub body_height: f64,
    pub clearance: f64,
    pub cabin_length: f64,
    pub cabin_height: f64,
    /// Longitudinal offset of the cabin center (positive = forward).
    pub cabin_offset: f64,
    pub wheel_radius: f64,
    pub wheelbase: f64,
}

impl CarProfile {
    pub fn defaults() -> Vec<CarProfile> {
        let p = |name,
                 length,
                 width,
                 body_height,
                 clearance,
                 cabin_length,
                 cabin_height,
                 cabin_offset,
                 wheel_radius,
                 wheelbase| CarProfile {
            name,
            length,
            width,
            body_height,
            clearance,
            cabin_length,
            cabin_height,
            cabin_offset,
            wheel_radius,
            wheelbase,
        };
        vec![
            p("sedan", 4.6, 1.80, 0.75, 0.30, 2.4, 0.50, -0.15, 0.33, 2.7),
            p("hatchback", 4.0, 1.75, 0.75, 0.30, 2.2, 0.55, -0.50, 0.32, 2.5),
            p("suv", 4.7, 1.90, 0.95, 0.40, 2.9, 0.65, -0.30, 0.38, 2.8),
            p("van", 4.9, 1.95, 1.25, 0.35, 3.5, 0.60, -0.50, 0.35, 3.0),
            p("coupe", 4.4, 1.90, 0.55, 0.22, 1.9, 0.45, -0.20, 0.32, 2.6),
            p("pickup", 5.3, 1.95, 0.95, 0.45, 1.9, 0.70, 0.50, 0.40, 3.2),
        ]
    }

    /// Body ⊕ cabin (smooth union) minus wheel wells, plus wheels; y points
    /// down and the ground is at y = 0 before normalization.
    pub fn to_shape(&self) -> Shape {
        let body_top = -(self.clearance + self.body_height);
        let body = Shape::Box {
            center: [0.0, -(self.clearance + 0.5 * self.body_height), 0.0],
            half_extents: [0.5 * self.length, 0.5 * self.body_height, 0.5 * self.width],
            rounding: 0.08,
        };
        let cabin = Shape::Box {
            center: [self.cabin_offset, body_top - 0.5 * self.cabin_height + 0.05, 0.0],
            half_extents: [
                0.5 * self.cabin_length,
                0.5 * self.cabin_height + 0.05,
                0.5 * self.width - 0.08,
            ],
            rounding: 0.12,
        };
        let axle = |x: f64, radius: f64, half_length: f64| Shape::Cylinder {
            center: [x, -self.wheel_radius, 0.0],
            axis: Axis::Z,
            radius,
            half_length,
        };
        let xf = 0.5 * self.wheelbase;
        let wells = Shape::Union {
            children: vec![
                axle(xf, self.wheel_radius * 1.15, self.width),
                axle(-xf, self.wheel_radius * 1.15, self.width),
            ],
        };
        let shell = Shape::Subtract {
            base: Box::new(Shape::SmoothUnion {
                a: Box::new(body),
                b: Box::new(cabin),
                k: 0.15,
            }),
            cut: Box::new(wells),
        };
        let wheel_half = 0.5 * self.width - 0.1;
        Shape::Union {
            children: vec![
                shell,
                axle(xf, self.wheel_radius, wheel_half),
                axle(-xf, self.wheel_radius, wheel_half),
            ],
        }
    }
}
