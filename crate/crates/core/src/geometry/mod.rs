//! k-NN search and per-point normal estimation from local plane fits.
//!
//! Each point's neighborhood plane `z = alpha*x + beta*y + gamma` is fit by
//! least squares; the normal is `V = [alpha, beta, 1]` normalized (the
//! convention followed here keeps the z component positive, which is the
//! discriminative part for ground separation). A `corrected_sign` option
//! yields the geometric surface normal `[-alpha, -beta, 1]` instead; the z
//! component is identical under both.

mod kdtree;

pub use kdtree::{build_kdtree, KdTree};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::lidar_io::{Point, PointCloud};
use crate::parallel;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("cloud has no points")]
    EmptyCloud,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("plane fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate neighborhood (vertical or collinear)")]
    Degenerate,
}

/// Unit surface normal. `nz` is always positive by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal {
    pub nx: f64,
    pub ny: f64,
    pub nz: f64,
}

impl Normal {
    /// Straight-up normal, used as the fallback for degenerate fits.
    pub const UP: Normal = Normal {
        nx: 0.0,
        ny: 0.0,
        nz: 1.0,
    };

    pub fn norm(&self) -> f64 {
        (self.nx * self.nx + self.ny * self.ny + self.nz * self.nz).sqrt()
    }
}

/// Coefficients of the least-squares plane `z = alpha*x + beta*y + gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

const DEGENERATE_COND: f64 = 1e12;
const DEGENERATE_DET: f64 = 1e-12;

/// Fits `z = alpha*x + beta*y + gamma` to `neighbors` by solving the 3x3
/// normal equations. Coordinates are mean-centered before solving; a
/// condition estimate above 1e12 or a vanishing determinant signals
/// [`GeometryError::Degenerate`].
pub fn plane_fit(neighbors: &[Point]) -> Result<PlaneCoeffs, GeometryError> {
    let n = neighbors.len();
    if n < 3 {
        return Err(GeometryError::TooFewPoints(n));
    }
    let nf = n as f64;
    let (mut mx, mut my, mut mz) = (0.0, 0.0, 0.0);
    for p in neighbors {
        mx += p.x;
        my += p.y;
        mz += p.z;
    }
    mx /= nf;
    my /= nf;
    mz /= nf;

    // Normal equations on centered coordinates: design rows are [xc, yc, 1].
    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in neighbors {
        let xc = p.x - mx;
        let yc = p.y - my;
        let zc = p.z - mz;
        sxx += xc * xc;
        sxy += xc * yc;
        syy += yc * yc;
        sxz += xc * zc;
        syz += yc * zc;
    }
    // The constant column decouples after centering, so the system reduces
    // to 2x2 in (alpha, beta) with the intercept handled separately. Keep
    // the full 3x3 for the condition estimate, as built.
    let m = Matrix3::new(sxx, sxy, 0.0, sxy, syy, 0.0, 0.0, 0.0, nf);
    let eig = m.symmetric_eigenvalues();
    let max_ev = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_ev = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let det = m.determinant();
    if min_ev <= 0.0 || max_ev / min_ev > DEGENERATE_COND || det.abs() < DEGENERATE_DET {
        return Err(GeometryError::Degenerate);
    }
    let rhs = Vector3::new(sxz, syz, 0.0);
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or(GeometryError::Degenerate)?;
    let alpha = sol[0];
    let beta = sol[1];
    let gamma = mz - alpha * mx - beta * my;
    Ok(PlaneCoeffs { alpha, beta, gamma })
}

/// Normal-estimation settings. `k` defaults to 30 neighbors (the query point
/// itself counts as one of them). `corrected_sign` switches from the
/// as-printed `[alpha, beta, 1]` direction to the geometric surface normal
/// `[-alpha, -beta, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct NormalConfig {
    pub k: usize,
    pub corrected_sign: bool,
}

impl Default for NormalConfig {
    fn default() -> Self {
        Self {
            k: 30,
            corrected_sign: false,
        }
    }
}

/// Per-point normals plus the number of degenerate fits that fell back to
/// the up-vector.
#[derive(Debug, Clone)]
pub struct NormalEstimate {
    pub normals: Vec<Normal>,
    pub degenerate_fallbacks: usize,
}

/// Estimates a unit normal for every point from its k-neighborhood plane.
/// Degenerate neighborhoods (vertical walls, collinear samples) fall back to
/// `(0, 0, 1)` and are counted.
pub fn estimate_normals(
    cloud: &PointCloud,
    cfg: &NormalConfig,
) -> Result<NormalEstimate, GeometryError> {
    estimate_normals_impl(cloud, cfg, false)
}

/// Sequential twin of [`estimate_normals`]; same results, no thread pool.
pub fn estimate_normals_seq(
    cloud: &PointCloud,
    cfg: &NormalConfig,
) -> Result<NormalEstimate, GeometryError> {
    estimate_normals_impl(cloud, cfg, true)
}

fn estimate_normals_impl(
    cloud: &PointCloud,
    cfg: &NormalConfig,
    force_seq: bool,
) -> Result<NormalEstimate, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    if cfg.k < 3 {
        return Err(GeometryError::InvalidParam(format!(
            "k must be at least 3, got {}",
            cfg.k
        )));
    }
    let tree = build_kdtree(cloud)?;
    let one_point = |i: usize| -> (Normal, bool) {
        let p = &cloud.points[i];
        let idxs = tree.knn(p, cfg.k).expect("k validated above");
        let neigh: Vec<Point> = idxs.iter().map(|&j| cloud.points[j]).collect();
        match plane_fit(&neigh) {
            Ok(c) => (normal_from_plane(&c, cfg.corrected_sign), false),
            Err(_) => (Normal::UP, true),
        }
    };
    let results = if force_seq {
        parallel::map_indexed_seq(cloud.len(), one_point)
    } else {
        parallel::map_indexed(cloud.len(), one_point)
    };
    let degenerate_fallbacks = results.iter().filter(|(_, d)| *d).count();
    Ok(NormalEstimate {
        normals: results.into_iter().map(|(n, _)| n).collect(),
        degenerate_fallbacks,
    })
}

fn normal_from_plane(c: &PlaneCoeffs, corrected: bool) -> Normal {
    let (vx, vy) = if corrected {
        (-c.alpha, -c.beta)
    } else {
        (c.alpha, c.beta)
    };
    let len = (vx * vx + vy * vy + 1.0).sqrt();
    Normal {
        nx: vx / len,
        ny: vy / len,
        nz: 1.0 / len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn plane_points(alpha: f64, beta: f64, gamma: f64, n: usize) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let x = (i % 7) as f64 * 0.37 - 1.0;
                let y = (i / 7) as f64 * 0.53 - 1.5;
                Point::new(x, y, alpha * x + beta * y + gamma, 0.0)
            })
            .collect()
    }

    #[test]
    fn flat_plane_gives_zero_coeffs() {
        let c = plane_fit(&plane_points(0.0, 0.0, 0.0, 20)).unwrap();
        assert_relative_eq!(c.alpha, 0.0, epsilon = 1e-12);
        assert_relative_eq!(c.beta, 0.0, epsilon = 1e-12);
        assert_relative_eq!(c.gamma, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_plane_recovered() {
        let c = plane_fit(&plane_points(2.0, 3.0, 1.0, 25)).unwrap();
        assert_relative_eq!(c.alpha, 2.0, epsilon = 1e-9);
        assert_relative_eq!(c.beta, 3.0, epsilon = 1e-9);
        assert_relative_eq!(c.gamma, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn exact_plane_residual_vanishes() {
        let pts = plane_points(-0.7, 0.4, 2.5, 30);
        let c = plane_fit(&pts).unwrap();
        for p in &pts {
            let r = c.alpha * p.x + c.beta * p.y + c.gamma - p.z;
            assert!(r.abs() < 1e-9, "residual {r}");
        }
    }

    #[test]
    fn vertical_plane_is_degenerate() {
        let pts: Vec<Point> = (0..12)
            .map(|i| Point::new(5.0, (i % 4) as f64, (i / 4) as f64, 0.0))
            .collect();
        assert!(matches!(plane_fit(&pts), Err(GeometryError::Degenerate)));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<Point> = (0..10)
            .map(|i| Point::new(i as f64, 2.0 * i as f64, 0.0, 0.0))
            .collect();
        assert!(matches!(plane_fit(&pts), Err(GeometryError::Degenerate)));
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = plane_points(0.0, 0.0, 0.0, 2);
        assert!(matches!(
            plane_fit(&pts),
            Err(GeometryError::TooFewPoints(2))
        ));
    }

    #[test]
    fn flat_cloud_normals_are_up() {
        let cloud = PointCloud::from_points(plane_points(0.0, 0.0, -1.7, 49));
        let est = estimate_normals(&cloud, &NormalConfig { k: 8, ..Default::default() }).unwrap();
        assert_eq!(est.degenerate_fallbacks, 0);
        for n in &est.normals {
            assert_relative_eq!(n.nx, 0.0, epsilon = 1e-9);
            assert_relative_eq!(n.ny, 0.0, epsilon = 1e-9);
            assert_relative_eq!(n.nz, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn ramp_normals_have_expected_tilt() {
        // 45-degree ramp z = x: |nz| must be 1/sqrt(2) for both sign conventions.
        let cloud = PointCloud::from_points(plane_points(1.0, 0.0, 0.0, 49));
        for corrected in [false, true] {
            let est = estimate_normals(
                &cloud,
                &NormalConfig {
                    k: 10,
                    corrected_sign: corrected,
                },
            )
            .unwrap();
            for n in &est.normals {
                assert_relative_eq!(n.nz, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-6);
                assert!((n.norm() - 1.0).abs() < 1e-9);
                assert!(n.nz > 0.0);
            }
        }
    }

    #[test]
    fn sign_conventions_differ_only_in_xy_sign() {
        let cloud = PointCloud::from_points(plane_points(0.8, -0.3, 0.2, 49));
        let plain = estimate_normals(&cloud, &NormalConfig { k: 12, corrected_sign: false })
            .unwrap();
        let fixed = estimate_normals(&cloud, &NormalConfig { k: 12, corrected_sign: true })
            .unwrap();
        for (a, b) in plain.normals.iter().zip(&fixed.normals) {
            assert_relative_eq!(a.nx, -b.nx, epsilon = 1e-9);
            assert_relative_eq!(a.ny, -b.ny, epsilon = 1e-9);
            assert_relative_eq!(a.nz, b.nz, epsilon = 1e-12);
        }
    }

    #[test]
    fn vertical_pole_falls_back_to_up() {
        let pts: Vec<Point> = (0..20)
            .map(|i| Point::new(3.0, 4.0, i as f64 * 0.1, 0.0))
            .collect();
        let n = pts.len();
        let cloud = PointCloud::from_points(pts);
        let est = estimate_normals(&cloud, &NormalConfig { k: 5, ..Default::default() }).unwrap();
        assert_eq!(est.degenerate_fallbacks, n);
        assert!(est.normals.iter().all(|n| *n == Normal::UP));
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let pts: Vec<Point> = (0..300)
            .map(|i| {
                let x = (i % 17) as f64 * 0.41;
                let y = (i / 17) as f64 * 0.29;
                Point::new(x, y, 0.1 * x - 0.2 * y + (i as f64 * 0.7).sin() * 0.05, 0.0)
            })
            .collect();
        let cloud = PointCloud::from_points(pts);
        let cfg = NormalConfig::default();
        let a = estimate_normals(&cloud, &cfg).unwrap();
        let b = estimate_normals_seq(&cloud, &cfg).unwrap();
        assert_eq!(a.normals, b.normals);
    }
}
