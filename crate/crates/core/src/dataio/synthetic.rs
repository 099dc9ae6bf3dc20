//! Seeded labeled shapes assembled from analytic surfaces.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::cloud::{normalization, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    /// Two separate spheres.
    Barbell,
    /// Cylindrical body with a wing plate and a tail plate.
    WingedCross,
    /// Cylinder wall closed by two disks.
    CappedCylinder,
    /// Box with a torus lying on its top face.
    TorusOnBox,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Barbell,
        Family::WingedCross,
        Family::CappedCylinder,
        Family::TorusOnBox,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Barbell => "barbell",
            Family::WingedCross => "winged-cross",
            Family::CappedCylinder => "capped-cylinder",
            Family::TorusOnBox => "torus-on-box",
        }
    }

    /// Category index stored on generated clouds.
    pub fn index(self) -> usize {
        Family::ALL.iter().position(|&f| f == self).unwrap()
    }

    pub fn part_count(self) -> usize {
        match self {
            Family::WingedCross => 3,
            _ => 2,
        }
    }

    /// Per-part sample counts summing to `n`.
    pub fn default_counts(self, n: usize) -> Vec<usize> {
        let weights: &[usize] = match self {
            Family::Barbell => &[1, 1],
            Family::WingedCross => &[4, 3, 1],
            Family::CappedCylinder => &[5, 3],
            Family::TorusOnBox => &[1, 1],
        };
        let total: usize = weights.iter().sum();
        let mut counts: Vec<usize> = weights.iter().map(|w| n * w / total).collect();
        counts[0] += n - counts.iter().sum::<usize>();
        counts
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s || (s == "two-sphere-barbell" && *f == Family::Barbell))
            .ok_or_else(|| Error::config(format!("unknown shape family `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub family: Family,
    pub n_points: usize,
    pub part_counts: Vec<usize>,
    pub jitter: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(family: Family, n_points: usize, seed: u64) -> Self {
        Self {
            family,
            n_points,
            part_counts: family.default_counts(n_points),
            jitter: 0.005,
            seed,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.part_counts.len() != self.family.part_count() {
            return Err(Error::config(format!(
                "{} has {} parts, got {} sample counts",
                self.family.as_str(),
                self.family.part_count(),
                self.part_counts.len()
            )));
        }
        if self.part_counts.iter().sum::<usize>() != self.n_points {
            return Err(Error::config(format!(
                "sample counts {:?} do not sum to {}",
                self.part_counts, self.n_points
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("jitter must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Analytic surface patch. `axis` selects the coordinate axis a shape is
/// aligned with.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Open cylinder wall.
    Tube {
        center: [f64; 3],
        axis: usize,
        radius: f64,
        half_length: f64,
    },
    Disk {
        center: [f64; 3],
        axis: usize,
        radius: f64,
    },
    /// Axis-aligned rectangle normal to `axis`, with half extents along the
    /// two remaining axes in increasing order.
    Plate {
        center: [f64; 3],
        axis: usize,
        half: [f64; 2],
    },
    BoxSurface {
        center: [f64; 3],
        half: [f64; 3],
    },
    Torus {
        center: [f64; 3],
        axis: usize,
        major: f64,
        minor: f64,
    },
}

fn others(axis: usize) -> (usize, usize) {
    ((axis + 1) % 3, (axis + 2) % 3)
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl Primitive {
    /// Distance from `p` to the surface.
    pub fn residual(&self, p: &[f64; 3]) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (norm(&sub(p, &center)) - radius).abs(),
            Primitive::Tube {
                center,
                axis,
                radius,
                half_length,
            } => {
                let d = sub(p, &center);
                let (u, v) = others(axis);
                let radial = (d[u] * d[u] + d[v] * d[v]).sqrt() - radius;
                let along = (d[axis].abs() - half_length).max(0.0);
                (radial * radial + along * along).sqrt()
            }
            Primitive::Disk {
                center,
                axis,
                radius,
            } => {
                let d = sub(p, &center);
                let (u, v) = others(axis);
                let out = ((d[u] * d[u] + d[v] * d[v]).sqrt() - radius).max(0.0);
                (d[axis] * d[axis] + out * out).sqrt()
            }
            Primitive::Plate { center, axis, half } => {
                let d = sub(p, &center);
                let (a, b) = sorted_others(axis);
                let ea = (d[a].abs() - half[0]).max(0.0);
                let eb = (d[b].abs() - half[1]).max(0.0);
                (d[axis] * d[axis] + ea * ea + eb * eb).sqrt()
            }
            Primitive::BoxSurface { center, half } => {
                let d = sub(p, &center);
                let q = [0, 1, 2].map(|k| d[k].abs() - half[k]);
                let outside = norm(&q.map(|v| v.max(0.0)));
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                (outside + inside).abs()
            }
            Primitive::Torus {
                center,
                axis,
                major,
                minor,
            } => {
                let d = sub(p, &center);
                let (u, v) = others(axis);
                let ring = (d[u] * d[u] + d[v] * d[v]).sqrt() - major;
                ((ring * ring + d[axis] * d[axis]).sqrt() - minor).abs()
            }
        }
    }

    /// The same surface after `p -> (p - shift) * scale`.
    pub fn transformed(&self, shift: &[f64; 3], scale: f64) -> Primitive {
        let t = |c: &[f64; 3]| [0, 1, 2].map(|k| (c[k] - shift[k]) * scale);
        match *self {
            Primitive::Sphere { center, radius } => Primitive::Sphere {
                center: t(&center),
                radius: radius * scale,
            },
            Primitive::Tube {
                center,
                axis,
                radius,
                half_length,
            } => Primitive::Tube {
                center: t(&center),
                axis,
                radius: radius * scale,
                half_length: half_length * scale,
            },
            Primitive::Disk {
                center,
                axis,
                radius,
            } => Primitive::Disk {
                center: t(&center),
                axis,
                radius: radius * scale,
            },
            Primitive::Plate { center, axis, half } => Primitive::Plate {
                center: t(&center),
                axis,
                half: half.map(|h| h * scale),
            },
            Primitive::BoxSurface { center, half } => Primitive::BoxSurface {
                center: t(&center),
                half: half.map(|h| h * scale),
            },
            Primitive::Torus {
                center,
                axis,
                major,
                minor,
            } => Primitive::Torus {
                center: t(&center),
                axis,
                major: major * scale,
                minor: minor * scale,
            },
        }
    }

    fn area(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Tube {
                radius,
                half_length,
                ..
            } => 4.0 * PI * radius * half_length,
            Primitive::Disk { radius, .. } => PI * radius * radius,
            Primitive::Plate { half, .. } => 4.0 * half[0] * half[1],
            Primitive::BoxSurface { half, .. } => {
                8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2])
            }
            Primitive::Torus { major, minor, .. } => 4.0 * PI * PI * major * minor,
        }
    }

    /// A uniform draw over the surface area.
    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        match *self {
            Primitive::Sphere { center, radius } => {
                let g: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
                let n = norm(&g).max(f64::MIN_POSITIVE);
                [0, 1, 2].map(|k| center[k] + radius * g[k] / n)
            }
            Primitive::Tube {
                center,
                axis,
                radius,
                half_length,
            } => {
                let (u, v) = others(axis);
                let t = rng.random_range(0.0..2.0 * PI);
                let mut p = center;
                p[u] += radius * t.cos();
                p[v] += radius * t.sin();
                p[axis] += rng.random_range(-half_length..=half_length);
                p
            }
            Primitive::Disk {
                center,
                axis,
                radius,
            } => {
                let (u, v) = others(axis);
                let (r, t) = (
                    radius * rng.random::<f64>().sqrt(),
                    rng.random_range(0.0..2.0 * PI),
                );
                let mut p = center;
                p[u] += r * t.cos();
                p[v] += r * t.sin();
                p
            }
            Primitive::Plate { center, axis, half } => {
                let (a, b) = sorted_others(axis);
                let mut p = center;
                p[a] += rng.random_range(-half[0]..=half[0]);
                p[b] += rng.random_range(-half[1]..=half[1]);
                p
            }
            Primitive::BoxSurface { center, half } => {
                let faces = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let mut pick = rng.random_range(0.0..faces.iter().sum::<f64>());
                let mut axis = 2;
                for (k, &f) in faces.iter().enumerate() {
                    if pick < f {
                        axis = k;
                        break;
                    }
                    pick -= f;
                }
                let mut p = center;
                for k in 0..3 {
                    p[k] += if k == axis {
                        if rng.random::<bool>() {
                            half[k]
                        } else {
                            -half[k]
                        }
                    } else {
                        rng.random_range(-half[k]..=half[k])
                    };
                }
                p
            }
            Primitive::Torus {
                center,
                axis,
                major,
                minor,
            } => {
                let (u, v) = others(axis);
                // tube angle by rejection against the local area element
                let tube = loop {
                    let t = rng.random_range(0.0..2.0 * PI);
                    if rng.random::<f64>() * (major + minor) <= major + minor * t.cos() {
                        break t;
                    }
                };
                let ring = rng.random_range(0.0..2.0 * PI);
                let r = major + minor * tube.cos();
                let mut p = center;
                p[u] += r * ring.cos();
                p[v] += r * ring.sin();
                p[axis] += minor * tube.sin();
                p
            }
        }
    }
}

fn sorted_others(axis: usize) -> (usize, usize) {
    let (a, b) = others(axis);
    (a.min(b), a.max(b))
}

/// A generated cloud with the surfaces of each part, expressed in the
/// normalized frame of the cloud.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub cloud: PointCloud,
    /// Surfaces of part `k`; a point of part `k` lies on one of them.
    pub parts: Vec<Vec<Primitive>>,
}

fn family_parts(family: Family, rng: &mut impl Rng) -> Vec<Vec<Primitive>> {
    match family {
        Family::Barbell => {
            let (r0, r1) = (rng.random_range(0.3..0.5), rng.random_range(0.3..0.5));
            let gap = rng.random_range(0.15..0.5);
            let half = (r0 + r1 + gap) / 2.0;
            vec![
                vec![Primitive::Sphere {
                    center: [-half, 0.0, 0.0],
                    radius: r0,
                }],
                vec![Primitive::Sphere {
                    center: [half, 0.0, 0.0],
                    radius: r1,
                }],
            ]
        }
        Family::WingedCross => {
            let body = rng.random_range(0.8..1.0);
            let radius = rng.random_range(0.1..0.16);
            let span = rng.random_range(0.6..0.9);
            let chord = rng.random_range(0.12..0.2);
            let wing_x = rng.random_range(-0.1..0.2);
            vec![
                vec![Primitive::Tube {
                    center: [0.0; 3],
                    axis: 0,
                    radius,
                    half_length: body,
                }],
                vec![Primitive::Plate {
                    center: [wing_x, 0.0, 0.0],
                    axis: 1,
                    half: [chord, span],
                }],
                vec![Primitive::Plate {
                    center: [-body + 0.1, 0.0, 0.0],
                    axis: 1,
                    half: [0.08, span * 0.35],
                }],
            ]
        }
        Family::CappedCylinder => {
            let radius = rng.random_range(0.3..0.5);
            let half_length = rng.random_range(0.5..0.9);
            vec![
                vec![Primitive::Tube {
                    center: [0.0; 3],
                    axis: 2,
                    radius,
                    half_length,
                }],
                vec![
                    Primitive::Disk {
                        center: [0.0, 0.0, half_length],
                        axis: 2,
                        radius,
                    },
                    Primitive::Disk {
                        center: [0.0, 0.0, -half_length],
                        axis: 2,
                        radius,
                    },
                ],
            ]
        }
        Family::TorusOnBox => {
            let half = [
                rng.random_range(0.5..0.7),
                rng.random_range(0.15..0.3),
                rng.random_range(0.5..0.7),
            ];
            let minor = rng.random_range(0.07..0.14);
            let major = rng.random_range(0.25..0.45);
            vec![
                vec![Primitive::BoxSurface {
                    center: [0.0; 3],
                    half,
                }],
                vec![Primitive::Torus {
                    center: [0.0, half[1] + minor, 0.0],
                    axis: 1,
                    major,
                    minor,
                }],
            ]
        }
    }
}

/// Samples a labeled, normalized cloud of `spec.family`.
pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let parts = family_parts(spec.family, &mut rng);
    let noise = Normal::new(0.0, spec.jitter).map_err(|e| Error::config(e.to_string()))?;
    let mut points = Vec::with_capacity(spec.n_points);
    let mut labels = Vec::with_capacity(spec.n_points);
    for (label, (surfaces, &count)) in parts.iter().zip(&spec.part_counts).enumerate() {
        let areas: Vec<f64> = surfaces.iter().map(Primitive::area).collect();
        let total: f64 = areas.iter().sum();
        for _ in 0..count {
            let mut pick = rng.random_range(0.0..total);
            let mut surface = &surfaces[surfaces.len() - 1];
            for (s, &a) in surfaces.iter().zip(&areas) {
                if pick < a {
                    surface = s;
                    break;
                }
                pick -= a;
            }
            let p = surface.sample(&mut rng);
            points.push(if spec.jitter > 0.0 {
                p.map(|c| c + noise.sample(&mut rng))
            } else {
                p
            });
            labels.push(label);
        }
    }
    let raw = PointCloud::with_labels(points, labels)?.with_category(spec.family.index());
    let (shift, radius) = normalization(&raw)?;
    let scale = 1.0 / radius;
    let cloud = PointCloud {
        points: raw
            .points
            .iter()
            .map(|p| [0, 1, 2].map(|k| (p[k] - shift[k]) / radius))
            .collect(),
        ..raw
    };
    let parts = parts
        .iter()
        .map(|s| s.iter().map(|p| p.transformed(&shift, scale)).collect())
        .collect();
    Ok(Synthetic { cloud, parts })
}

/// `per_family` shapes of each family, seeded from `seed`, ordered family by
/// family.
pub fn generate_dataset(
    families: &[Family],
    per_family: usize,
    n_points: usize,
    jitter: f64,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    let mut out = Vec::with_capacity(families.len() * per_family);
    for &family in families {
        for i in 0..per_family {
            let stream = (family.index() as u64) << 32 | i as u64;
            let spec = SyntheticSpec::new(family, n_points, super::derive_seed(seed, stream))
                .with_jitter(jitter);
            out.push(generate(&spec)?.cloud);
        }
    }
    Ok(out)
}
