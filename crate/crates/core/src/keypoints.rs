//! Virtual keypoint generation and soft-argmax heatmap decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Point2, Point3, Vec3};

pub type KeypointSet2D = Vec<Point2>;
pub type KeypointSet3D = Vec<Point3>;

/// How virtual keypoints are laid out around the virtual frame origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeypointDistribution {
    /// Vertices of a regular polyhedron with unit circumradius.
    Regular,
    /// Uniform on a sphere.
    RSphere { radius: f64 },
    /// Uniform in the cube `[-e, e]³`.
    RVolume { half_extent: f64 },
}

impl KeypointDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KeypointDistribution::Regular => Ok(()),
            KeypointDistribution::RSphere { radius } if radius > 0.0 && radius.is_finite() => {
                Ok(())
            }
            KeypointDistribution::RSphere { .. } => Err(invalid("radius", "must be positive")),
            KeypointDistribution::RVolume { half_extent }
                if half_extent > 0.0 && half_extent.is_finite() =>
            {
                Ok(())
            }
            KeypointDistribution::RVolume { .. } => Err(invalid("half_extent", "must be positive")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KeypointDistribution::Regular => "regular",
            KeypointDistribution::RSphere { .. } => "r-sphere",
            KeypointDistribution::RVolume { .. } => "r-volume",
        }
    }
}

/// Unit-circumradius vertices of the regular polyhedron with `n` vertices.
pub fn regular_polyhedron(n: usize) -> Result<KeypointSet3D> {
    let raw: Vec<[f64; 3]> = match n {
        4 => vec![
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ],
        6 => vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ],
        8 => {
            let mut v = Vec::with_capacity(8);
            for x in [-1.0, 1.0] {
                for y in [-1.0, 1.0] {
                    for z in [-1.0, 1.0] {
                        v.push([x, y, z]);
                    }
                }
            }
            v
        }
        12 => {
            let phi = (1.0 + 5f64.sqrt()) / 2.0;
            let mut v = Vec::with_capacity(12);
            for a in [-1.0, 1.0] {
                for b in [-phi, phi] {
                    v.push([0.0, a, b]);
                    v.push([a, b, 0.0]);
                    v.push([b, 0.0, a]);
                }
            }
            v
        }
        _ => return Err(Error::UnsupportedCount(n)),
    };
    Ok(raw
        .into_iter()
        .map(|p| Point3::from(Vec3::from(p).normalize()))
        .collect())
}

pub fn generate_virtual_keypoints(
    n: usize,
    d: KeypointDistribution,
    seed: u64,
) -> Result<KeypointSet3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_virtual_keypoints_with(n, d, &mut rng)
}

/// Same as [`generate_virtual_keypoints`] but draws from a caller-owned stream.
/// `Regular` consumes nothing from the stream.
pub fn generate_virtual_keypoints_with<R: Rng + ?Sized>(
    n: usize,
    d: KeypointDistribution,
    rng: &mut R,
) -> Result<KeypointSet3D> {
    d.validate()?;
    match d {
        KeypointDistribution::Regular => regular_polyhedron(n),
        KeypointDistribution::RSphere { radius } => {
            check_random_count(n)?;
            Ok((0..n)
                .map(|_| loop {
                    let g = Vec3::new(
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    );
                    let norm = g.norm();
                    if norm > 1e-9 {
                        break Point3::from(g * (radius / norm));
                    }
                })
                .collect())
        }
        KeypointDistribution::RVolume { half_extent } => {
            check_random_count(n)?;
            Ok((0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-half_extent..=half_extent),
                        rng.random_range(-half_extent..=half_extent),
                        rng.random_range(-half_extent..=half_extent),
                    )
                })
                .collect())
        }
    }
}

fn check_random_count(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: n });
    }
    Ok(())
}

/// Non-negative `height × width` grid stored row-major; `(u, v) = (column, row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidHeatmap("empty grid"));
        }
        if values.len() != height * width {
            return Err(Error::InvalidHeatmap(
                "value count does not match dimensions",
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidHeatmap(
                "entries must be finite and non-negative",
            ));
        }
        Ok(Heatmap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Probability-weighted centroid of the normalized grid.
pub fn soft_argmax(h: &Heatmap) -> Result<Point2> {
    let total: f64 = h.values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllZero);
    }
    let (mut u, mut v) = (0.0, 0.0);
    for row in 0..h.height {
        for col in 0..h.width {
            let p = h.get(row, col) / total;
            u += col as f64 * p;
            v += row as f64 * p;
        }
    }
    Ok(Point2::new(u, v))
}

/// Unnormalized isotropic Gaussian sampled at integer pixel positions.
pub fn gaussian_heatmap(
    center: &Point2,
    sigma: f64,
    height: usize,
    width: usize,
) -> Result<Heatmap> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", "must be positive"));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut values = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let du = col as f64 - center.x;
            let dv = row as f64 - center.y;
            values.push((-(du * du + dv * dv) * inv).exp());
        }
    }
    Heatmap::new(height, width, values)
}
