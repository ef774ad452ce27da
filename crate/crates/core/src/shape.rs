//! Analytic shape descriptions on the unit box `[0,1]^2`.
//!
//! Every shape is the sublevel set `{F < 0}` of a level function whose
//! gradient is available in closed form; boundary normals and Neumann
//! projections of test fields are taken from it rather than from the raster.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

const CENTER: [f64; 2] = [0.5, 0.5];

/// Pacman outer radius, notch depth and notch width parameter.
const PACMAN_R0: f64 = 0.4;
const PACMAN_DEPTH: f64 = 0.25;
const PACMAN_WIDTH: f64 = 0.6;

const ANNULUS_INNER: f64 = 0.18;
const ANNULUS_OUTER: f64 = 0.42;

const DUMBBELL_RADIUS: f64 = 0.18;
const DUMBBELL_OFFSET: f64 = 0.22;
const DUMBBELL_BAR: f64 = 0.06;

const BLEND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// The full unit box.
    Square,
    /// Disc centered in the box.
    Disc { radius: f64 },
    /// Three-quarter annulus with rounded corners; the inner arc is concave.
    AnnulusSector,
    /// Disc with a smooth notch cut toward the center along +x.
    Pacman,
    /// Two discs joined by a narrow bar, smoothly blended.
    Dumbbell,
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disc { .. } => "disc",
            Shape::AnnulusSector => "annulus_sector",
            Shape::Pacman => "pacman",
            Shape::Dumbbell => "dumbbell",
        }
    }

    pub fn is_convex(&self) -> bool {
        matches!(self, Shape::Square | Shape::Disc { .. })
    }

    /// Level function value and gradient at `p`.
    pub fn level(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let dx = p[0] - CENTER[0];
        let dy = p[1] - CENTER[1];
        match *self {
            Shape::Square => {
                if dx.abs() >= dy.abs() {
                    (dx.abs() - 0.5, [dx.signum(), 0.0])
                } else {
                    (dy.abs() - 0.5, [0.0, dy.signum()])
                }
            }
            Shape::Disc { radius } => disc_level(dx, dy, radius),
            Shape::Pacman => {
                let r = dx.hypot(dy);
                let theta = dy.atan2(dx);
                let bump = (-(1.0 - theta.cos()) / PACMAN_WIDTH).exp();
                let radius = PACMAN_R0 - PACMAN_DEPTH * bump;
                let dradius = PACMAN_DEPTH * bump * theta.sin() / PACMAN_WIDTH;
                if r < 1e-14 {
                    return (-radius, [1.0, 0.0]);
                }
                let er = [dx / r, dy / r];
                let et = [-dy / r, dx / r];
                let k = dradius / r;
                (r - radius, [er[0] - k * et[0], er[1] - k * et[1]])
            }
            Shape::AnnulusSector => {
                let r = dx.hypot(dy);
                let er = if r < 1e-14 { [1.0, 0.0] } else { [dx / r, dy / r] };
                let ring = if r - ANNULUS_OUTER >= ANNULUS_INNER - r {
                    (r - ANNULUS_OUTER, er)
                } else {
                    (ANNULUS_INNER - r, [-er[0], -er[1]])
                };
                // Excluded quadrant is {dx > 0, dy < 0}.
                let wedge = if dx <= -dy { (dx, [1.0, 0.0]) } else { (-dy, [0.0, -1.0]) };
                smooth_max(ring, wedge, BLEND)
            }
            Shape::Dumbbell => {
                let left = disc_level(dx + DUMBBELL_OFFSET, dy, DUMBBELL_RADIUS);
                let right = disc_level(dx - DUMBBELL_OFFSET, dy, DUMBBELL_RADIUS);
                let bar_y = (dy.abs() - DUMBBELL_BAR, [0.0, dy.signum()]);
                let bar_x = (dx.abs() - DUMBBELL_OFFSET, [dx.signum(), 0.0]);
                let bar = if bar_y.0 >= bar_x.0 { bar_y } else { bar_x };
                smooth_min(smooth_min(left, right, BLEND), bar, BLEND)
            }
        }
    }

    /// Analytic perimeter where it is known in closed form.
    pub fn perimeter(&self) -> Option<f64> {
        match *self {
            Shape::Square => Some(4.0),
            Shape::Disc { radius } => Some(2.0 * PI * radius),
            _ => None,
        }
    }

    /// Analytic area where it is known in closed form.
    pub fn area(&self) -> Option<f64> {
        match *self {
            Shape::Square => Some(1.0),
            Shape::Disc { radius } => Some(PI * radius * radius),
            _ => None,
        }
    }
}

fn disc_level(dx: f64, dy: f64, radius: f64) -> (f64, [f64; 2]) {
    let r = dx.hypot(dy);
    if r < 1e-14 {
        return (-radius, [1.0, 0.0]);
    }
    (r - radius, [dx / r, dy / r])
}

/// C^2 polynomial smooth minimum with blending width `k`.
fn smooth_min(a: (f64, [f64; 2]), b: (f64, [f64; 2]), k: f64) -> (f64, [f64; 2]) {
    let gap = (a.0 - b.0).abs();
    let t = ((k - gap) / k).max(0.0);
    let (lo, hi) = if a.0 <= b.0 { (a, b) } else { (b, a) };
    let value = lo.0 - t * t * t * k / 6.0;
    let w = 0.5 * t * t;
    let grad = [
        (1.0 - w) * lo.1[0] + w * hi.1[0],
        (1.0 - w) * lo.1[1] + w * hi.1[1],
    ];
    (value, grad)
}

fn smooth_max(a: (f64, [f64; 2]), b: (f64, [f64; 2]), k: f64) -> (f64, [f64; 2]) {
    let neg = |v: (f64, [f64; 2])| (-v.0, [-v.1[0], -v.1[1]]);
    neg(smooth_min(neg(a), neg(b), k))
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Disc { radius } if (*radius - 0.4).abs() > 0.0 => {
                write!(f, "disc:radius={radius}")
            }
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    /// Parses `square`, `disc`, `disc:radius=0.3`, `annulus_sector`, `pacman`, `dumbbell`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = match s.split_once(':') {
            Some((n, p)) => (n.trim(), Some(p.trim())),
            None => (s.trim(), None),
        };
        let shape = match name {
            "square" => Shape::Square,
            "disc" => {
                let mut radius = 0.4;
                if let Some(p) = params {
                    for kv in p.split(',') {
                        match kv.split_once('=') {
                            Some(("radius", v)) => {
                                radius = v.trim().parse().map_err(|_| {
                                    Error::InvalidShape(format!("bad radius '{v}'"))
                                })?
                            }
                            _ => return Err(Error::InvalidShape(format!("unknown parameter '{kv}'"))),
                        }
                    }
                }
                if !(radius > 0.0 && radius < 0.5) {
                    return Err(Error::InvalidShape(format!(
                        "disc radius {radius} must lie in (0, 0.5)"
                    )));
                }
                return Ok(Shape::Disc { radius });
            }
            "annulus_sector" => Shape::AnnulusSector,
            "pacman" => Shape::Pacman,
            "dumbbell" => Shape::Dumbbell,
            other => return Err(Error::InvalidShape(format!("unknown shape '{other}'"))),
        };
        if params.is_some() {
            return Err(Error::InvalidShape(format!("shape '{name}' takes no parameters")));
        }
        Ok(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(shape: Shape, p: [f64; 2]) -> [f64; 2] {
        let e = 1e-6;
        let f = |q: [f64; 2]| shape.level(q).0;
        [
            (f([p[0] + e, p[1]]) - f([p[0] - e, p[1]])) / (2.0 * e),
            (f([p[0], p[1] + e]) - f([p[0], p[1] - e])) / (2.0 * e),
        ]
    }

    #[test]
    fn level_gradients_match_finite_differences() {
        let shapes = [
            Shape::Disc { radius: 0.4 },
            Shape::Pacman,
            Shape::AnnulusSector,
            Shape::Dumbbell,
        ];
        let points = [[0.31, 0.62], [0.83, 0.47], [0.6, 0.52], [0.2, 0.3], [0.74, 0.29]];
        for shape in shapes {
            for p in points {
                let g = shape.level(p).1;
                let fd = fd_grad(shape, p);
                for a in 0..2 {
                    assert!((g[a] - fd[a]).abs() < 1e-5, "{shape} at {p:?}: {g:?} vs {fd:?}");
                }
            }
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("pacman".parse::<Shape>().unwrap(), Shape::Pacman);
        assert_eq!(
            "disc:radius=0.3".parse::<Shape>().unwrap(),
            Shape::Disc { radius: 0.3 }
        );
        assert!("hexagon".parse::<Shape>().is_err());
        assert!("disc:radius=0.7".parse::<Shape>().is_err());
    }

    #[test]
    fn pacman_notch_is_inside_out() {
        // The notch bottom sits at radius 0.15 along +x.
        assert!(Shape::Pacman.level([0.5 + 0.14, 0.5]).0 < 0.0);
        assert!(Shape::Pacman.level([0.5 + 0.16, 0.5]).0 > 0.0);
        assert!(Shape::Pacman.level([0.5 - 0.39, 0.5]).0 < 0.0);
    }
}
