//! Pillar-grid discretization and point feature augmentation.
//!
//! The environment `[-51.2, 51.2) x [-51.2, 51.2) x [-4, 4)` meters is split
//! into a 128x128 grid of 0.8 x 0.8 x 8 m pillars. Each retained point
//! carries 12 features
//! `{x, y, z, i, x_c, y_c, z_c, x_p, y_p, x_n, y_n, z_n}`:
//! the raw coordinates and intensity, the offsets from the mean of the
//! pillar's retained points, the offsets from the pillar center, and the
//! estimated unit normal. Pillars over the point cap are reduced by seeded
//! uniform sampling, and the mean offsets are computed after capping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Normal;
use crate::lidar_io::PointCloud;

#[derive(Debug, Error)]
pub enum PillarError {
    #[error("invalid grid config: {0}")]
    InvalidConfig(String),
    #[error("normals missing or wrong length: {got} normals for {points} points")]
    MissingNormals { got: usize, points: usize },
    #[error("cloud has no labels")]
    NoLabels,
    #[error("prediction map has {got} cells, grid expects {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("label vector length {got} does not match point count {points}")]
    LabelLength { got: usize, points: usize },
}

/// Grid geometry. Extents are half-open, `[min, max)`; a coordinate exactly
/// at the upper bound is out of range, which keeps bin arithmetic exact for
/// the 0.8 m pillar size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    /// Pillar footprint, meters (x, y).
    pub pillar_size: (f64, f64),
    /// Grid dimensions (rows, cols). Rows index y, columns index x.
    pub dims: (usize, usize),
    /// Maximum retained points per pillar.
    pub max_points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_range: (-51.2, 51.2),
            y_range: (-51.2, 51.2),
            z_range: (-4.0, 4.0),
            pillar_size: (0.8, 0.8),
            dims: (128, 128),
            max_points: 64,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), PillarError> {
        if self.max_points == 0 {
            return Err(PillarError::InvalidConfig("max_points must be >= 1".into()));
        }
        let (rows, cols) = self.dims;
        if rows == 0 || cols == 0 {
            return Err(PillarError::InvalidConfig("dims must be positive".into()));
        }
        let x_extent = self.x_range.1 - self.x_range.0;
        let y_extent = self.y_range.1 - self.y_range.0;
        if (x_extent / self.pillar_size.0 - cols as f64).abs() > 1e-9
            || (y_extent / self.pillar_size.1 - rows as f64).abs() > 1e-9
        {
            return Err(PillarError::InvalidConfig(format!(
                "extent/pillar_size must equal dims exactly: x {x_extent}/{} vs {cols}, y {y_extent}/{} vs {rows}",
                self.pillar_size.0, self.pillar_size.1
            )));
        }
        if self.z_range.1 <= self.z_range.0 {
            return Err(PillarError::InvalidConfig("empty z range".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    /// Half-open bin lookup along one axis. Returns `None` when out of range.
    /// The index is found against the representable bin edges
    /// `min + i * size`, so values exactly on an edge go to the upper bin.
    fn bin(value: f64, min: f64, size: f64, count: usize) -> Option<usize> {
        let mut i = ((value - min) / size).floor() as i64;
        let edge = |i: i64| min + i as f64 * size;
        while i >= 0 && value < edge(i) {
            i -= 1;
        }
        while value >= edge(i + 1) {
            i += 1;
        }
        if i < 0 || i as usize >= count {
            None
        } else {
            Some(i as usize)
        }
    }

    /// Pillar (row, col) for a coordinate, or `None` when x, y or z is out
    /// of range.
    pub fn pillar_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize)> {
        if z < self.z_range.0 || z >= self.z_range.1 {
            return None;
        }
        let col = Self::bin(x, self.x_range.0, self.pillar_size.0, self.dims.1)?;
        let row = Self::bin(y, self.y_range.0, self.pillar_size.1, self.dims.0)?;
        Some((row, col))
    }

    /// Center of pillar `(row, col)` in the x-y plane.
    pub fn pillar_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range.0 + (col as f64 + 0.5) * self.pillar_size.0,
            self.y_range.0 + (row as f64 + 0.5) * self.pillar_size.1,
        )
    }
}

/// The 12 per-point features, in the canonical order
/// `x, y, z, i, x_c, y_c, z_c, x_p, y_p, x_n, y_n, z_n`.
pub const FEATURES: usize = 12;
/// Feature count with the normal components dropped (ablation variant).
pub const FEATURES_NO_NORMALS: usize = 9;

/// One augmented point: raw values, mean offsets, center offsets, normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedPoint(pub [f64; FEATURES]);

/// Where an input point ended up during pillarization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    /// In range; `retained` is false when the per-pillar cap dropped it.
    Pillar {
        row: usize,
        col: usize,
        retained: bool,
    },
    OutOfRange,
}

/// One occupied pillar: retained augmented points and their source indices.
#[derive(Debug, Clone, Default)]
pub struct PillarCell {
    pub points: Vec<AugmentedPoint>,
    /// Original cloud index per retained point.
    pub source_indices: Vec<usize>,
    /// Point count before the cap.
    pub precap_count: usize,
}

/// Dense pillar grid with the point-to-pillar back map.
#[derive(Debug, Clone)]
pub struct PillarGrid {
    pub config: GridConfig,
    /// Row-major cells, `rows * cols` entries; vacant cells have no points.
    pub cells: Vec<PillarCell>,
    /// Placement per input point, same order as the source cloud.
    pub placements: Vec<Placement>,
    /// Indices of out-of-range input points.
    pub out_of_range: Vec<usize>,
}

impl PillarGrid {
    pub fn cell(&self, row: usize, col: usize) -> &PillarCell {
        &self.cells[row * self.config.dims.1 + col]
    }

    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize, &PillarCell)> {
        let cols = self.config.dims.1;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.points.is_empty())
            .map(move |(i, c)| (i / cols, i % cols, c))
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| !c.points.is_empty()).count()
    }
}

/// Bins the cloud into pillars and builds the augmented features.
/// `normals` must align with `cloud.points`. Per-pillar caps are enforced by
/// seeded uniform sampling without replacement; mean offsets are computed
/// over the retained points only.
pub fn pillarize(
    cloud: &PointCloud,
    normals: &[Normal],
    cfg: &GridConfig,
    seed: u64,
) -> Result<PillarGrid, PillarError> {
    cfg.validate()?;
    if normals.len() != cloud.len() {
        return Err(PillarError::MissingNormals {
            got: normals.len(),
            points: cloud.len(),
        });
    }
    let (rows, cols) = cfg.dims;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); rows * cols];
    let mut placements = vec![Placement::OutOfRange; cloud.len()];
    let mut out_of_range = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        match cfg.pillar_of(p.x, p.y, p.z) {
            Some((row, col)) => {
                members[row * cols + col].push(i);
                placements[i] = Placement::Pillar {
                    row,
                    col,
                    retained: true,
                };
            }
            None => {
                out_of_range.push(i);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = vec![PillarCell::default(); rows * cols];
    for (ci, idxs) in members.into_iter().enumerate() {
        if idxs.is_empty() {
            continue;
        }
        let precap = idxs.len();
        let retained: Vec<usize> = if precap > cfg.max_points {
            let chosen = rand::seq::index::sample(&mut rng, precap, cfg.max_points);
            let mut sel: Vec<usize> = chosen.iter().map(|c| idxs[c]).collect();
            sel.sort_unstable();
            for &i in &idxs {
                if !sel.contains(&i) {
                    if let Placement::Pillar { retained, .. } = &mut placements[i] {
                        *retained = false;
                    }
                }
            }
            sel
        } else {
            idxs
        };

        let nf = retained.len() as f64;
        let (mut mx, mut my, mut mz) = (0.0, 0.0, 0.0);
        for &i in &retained {
            let p = &cloud.points[i];
            mx += p.x;
            my += p.y;
            mz += p.z;
        }
        mx /= nf;
        my /= nf;
        mz /= nf;
        let (row, col) = (ci / cols, ci % cols);
        let (cx, cy) = cfg.pillar_center(row, col);
        let cell = &mut cells[ci];
        cell.precap_count = precap;
        cell.source_indices = retained.clone();
        cell.points = retained
            .iter()
            .map(|&i| {
                let p = &cloud.points[i];
                let n = &normals[i];
                AugmentedPoint([
                    p.x,
                    p.y,
                    p.z,
                    p.intensity,
                    p.x - mx,
                    p.y - my,
                    p.z - mz,
                    p.x - cx,
                    p.y - cy,
                    n.nx,
                    n.ny,
                    n.nz,
                ])
            })
            .collect();
    }

    Ok(PillarGrid {
        config: *cfg,
        cells,
        placements,
        out_of_range,
    })
}

/// Per-pillar binary ground truth with the ground-point fraction it was
/// derived from.
#[derive(Debug, Clone)]
pub struct PillarLabels {
    /// Row-major, `true` = ground. Vacant pillars are non-ground.
    pub ground: Vec<bool>,
    /// Ground-point fraction over retained points; 0 for vacant pillars.
    pub ground_fraction: Vec<f64>,
    pub dims: (usize, usize),
}

/// SemanticKITTI ground classes: road, parking, sidewalk, other-ground.
pub const DEFAULT_GROUND_CLASSES: [u16; 4] = [40, 44, 48, 49];

/// Derives pillar labels from per-point semantic classes: a pillar is ground
/// iff at least `threshold` (default 0.5) of its retained points carry a
/// ground class.
pub fn label_pillars(
    grid: &PillarGrid,
    labels: &[u16],
    ground_classes: &[u16],
    threshold: f64,
) -> Result<PillarLabels, PillarError> {
    if labels.is_empty() && !grid.placements.is_empty() {
        return Err(PillarError::NoLabels);
    }
    if labels.len() != grid.placements.len() {
        return Err(PillarError::LabelLength {
            got: labels.len(),
            points: grid.placements.len(),
        });
    }
    let cells = grid.config.cells();
    let mut ground = vec![false; cells];
    let mut fraction = vec![0.0; cells];
    for (ci, cell) in grid.cells.iter().enumerate() {
        if cell.points.is_empty() {
            continue;
        }
        let g = cell
            .source_indices
            .iter()
            .filter(|&&i| ground_classes.contains(&labels[i]))
            .count();
        let frac = g as f64 / cell.source_indices.len() as f64;
        fraction[ci] = frac;
        ground[ci] = frac >= threshold;
    }
    Ok(PillarLabels {
        ground,
        ground_fraction: fraction,
        dims: grid.config.dims,
    })
}

/// Per-point label propagated from a pillar prediction map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLabel {
    Ground,
    NonGround,
    /// Out of grid range; not scored.
    Unscored,
}

/// Each in-range point inherits its pillar's predicted label (capped-away
/// points included; the pillar assignment is pure geometry). Out-of-range
/// points are unscored.
pub fn propagate_to_points(
    prediction: &[bool],
    grid: &PillarGrid,
) -> Result<Vec<PointLabel>, PillarError> {
    if prediction.len() != grid.config.cells() {
        return Err(PillarError::ShapeMismatch {
            got: prediction.len(),
            expected: grid.config.cells(),
        });
    }
    let cols = grid.config.dims.1;
    Ok(grid
        .placements
        .iter()
        .map(|pl| match pl {
            Placement::Pillar { row, col, .. } => {
                if prediction[row * cols + col] {
                    PointLabel::Ground
                } else {
                    PointLabel::NonGround
                }
            }
            Placement::OutOfRange => PointLabel::Unscored,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_io::Point;

    fn up_normals(n: usize) -> Vec<Normal> {
        vec![Normal::UP; n]
    }

    fn cloud_of(coords: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud::from_points(
            coords
                .iter()
                .map(|&(x, y, z)| Point::new(x, y, z, 0.5))
                .collect(),
        )
    }

    #[test]
    fn origin_lands_in_center_cell() {
        let cfg = GridConfig::default();
        assert_eq!(cfg.pillar_of(0.0, 0.0, 0.0), Some((64, 64)));
    }

    #[test]
    fn boundary_conventions() {
        let cfg = GridConfig::default();
        assert_eq!(cfg.pillar_of(-51.2, -51.2, 0.0), Some((0, 0)));
        assert_eq!(cfg.pillar_of(51.2, 0.0, 0.0), None);
        assert_eq!(cfg.pillar_of(0.0, 51.2, 0.0), None);
        assert_eq!(cfg.pillar_of(0.0, 0.0, 4.0), None);
        assert_eq!(cfg.pillar_of(0.0, 0.0, -4.0), Some((64, 64)));
        assert_eq!(cfg.pillar_of(51.19, 51.19, 3.99), Some((127, 127)));
    }

    #[test]
    fn single_point_at_pillar_center_has_zero_offsets() {
        let cfg = GridConfig::default();
        let cloud = cloud_of(&[(-50.8, -50.8, 1.0)]);
        let grid = pillarize(&cloud, &up_normals(1), &cfg, 0).unwrap();
        let cell = grid.cell(0, 0);
        assert_eq!(cell.points.len(), 1);
        let f = cell.points[0].0;
        // x_p, y_p and the mean offsets all vanish.
        for idx in [4, 5, 6, 7, 8] {
            assert!(f[idx].abs() < 1e-9, "feature {idx} = {}", f[idx]);
        }
        assert_eq!(&f[9..12], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_offsets_center_to_zero_and_xp_bounded() {
        let cfg = GridConfig::default();
        let coords: Vec<(f64, f64, f64)> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0;
                (0.1 + 0.6 * t, 0.05 + 0.7 * t, -1.0 + 0.5 * t)
            })
            .collect();
        let cloud = cloud_of(&coords);
        let grid = pillarize(&cloud, &up_normals(40), &cfg, 0).unwrap();
        for (_, _, cell) in grid.occupied() {
            let n = cell.points.len() as f64;
            for fi in 4..7 {
                let mean: f64 = cell.points.iter().map(|p| p.0[fi]).sum::<f64>() / n;
                assert!(mean.abs() < 1e-9);
            }
            for p in &cell.points {
                assert!(p.0[7].abs() <= 0.4 + 1e-12);
                assert!(p.0[8].abs() <= 0.4 + 1e-12);
            }
        }
    }

    #[test]
    fn partition_and_backmap_consistency() {
        let cfg = GridConfig::default();
        let coords: Vec<(f64, f64, f64)> = (0..500)
            .map(|i| {
                let a = i as f64 * 0.7;
                (45.0 * (a.sin()), 45.0 * (a * 1.3).cos(), (a * 0.9).sin())
            })
            .collect();
        let cloud = cloud_of(&coords);
        let grid = pillarize(&cloud, &up_normals(500), &cfg, 0).unwrap();
        let precap_sum: usize = grid.cells.iter().map(|c| c.precap_count).sum();
        assert_eq!(precap_sum + grid.out_of_range.len(), cloud.len());
        for (i, pl) in grid.placements.iter().enumerate() {
            if let Placement::Pillar { row, col, retained } = pl {
                let cell = grid.cell(*row, *col);
                assert_eq!(cell.source_indices.contains(&i), *retained);
            }
        }
    }

    #[test]
    fn cap_enforced_and_deterministic() {
        let cfg = GridConfig {
            max_points: 8,
            ..Default::default()
        };
        // 50 points all in one pillar.
        let coords: Vec<(f64, f64, f64)> = (0..50)
            .map(|i| (0.1 + 0.001 * i as f64, 0.2, -1.0))
            .collect();
        let cloud = cloud_of(&coords);
        let a = pillarize(&cloud, &up_normals(50), &cfg, 7).unwrap();
        let b = pillarize(&cloud, &up_normals(50), &cfg, 7).unwrap();
        let cell_a = a.cell(64, 64);
        assert_eq!(cell_a.points.len(), 8);
        assert_eq!(cell_a.precap_count, 50);
        assert_eq!(cell_a.source_indices, b.cell(64, 64).source_indices);
        let c = pillarize(&cloud, &up_normals(50), &cfg, 8).unwrap();
        assert_ne!(cell_a.source_indices, c.cell(64, 64).source_indices);
        // Offsets are centered over the retained subset, not all 50 points.
        let n = cell_a.points.len() as f64;
        let mean: f64 = cell_a.points.iter().map(|p| p.0[4]).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn normals_length_checked() {
        let cloud = cloud_of(&[(0.0, 0.0, 0.0)]);
        assert!(matches!(
            pillarize(&cloud, &[], &GridConfig::default(), 0),
            Err(PillarError::MissingNormals { got: 0, points: 1 })
        ));
    }

    #[test]
    fn majority_labeling() {
        let cfg = GridConfig::default();
        // 3 road + 5 car in one pillar, 10 road in another, one vacant.
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            coords.push((0.1 + 0.01 * i as f64, 0.1, -1.0));
            labels.push(if i < 3 { 40 } else { 10 });
        }
        for i in 0..10 {
            coords.push((5.0 + 0.01 * i as f64, 5.0, -1.0));
            labels.push(40);
        }
        let cloud = cloud_of(&coords);
        let grid = pillarize(&cloud, &up_normals(18), &cfg, 0).unwrap();
        let pl = label_pillars(&grid, &labels, &DEFAULT_GROUND_CLASSES, 0.5).unwrap();
        let cols = cfg.dims.1;
        let mixed = cfg.pillar_of(0.1, 0.1, -1.0).unwrap();
        let road = cfg.pillar_of(5.0, 5.0, -1.0).unwrap();
        assert!(!pl.ground[mixed.0 * cols + mixed.1], "3/8 < 0.5");
        assert!(pl.ground[road.0 * cols + road.1]);
        // Vacant pillar stays non-ground.
        assert!(!pl.ground[0]);
    }

    #[test]
    fn propagate_checkerboard_and_unscored() {
        let cfg = GridConfig::default();
        let coords = vec![(0.1, 0.1, -1.0), (1.0, 0.1, -1.0), (0.1, 0.1, 9.0)];
        let cloud = cloud_of(&coords);
        let grid = pillarize(&cloud, &up_normals(3), &cfg, 0).unwrap();
        let mut pred = vec![false; cfg.cells()];
        let cols = cfg.dims.1;
        for r in 0..cfg.dims.0 {
            for c in 0..cfg.dims.1 {
                pred[r * cols + c] = (r + c) % 2 == 0;
            }
        }
        let out = propagate_to_points(&pred, &grid).unwrap();
        assert_eq!(out[0], PointLabel::Ground); // (64, 64): even parity
        assert_eq!(out[1], PointLabel::NonGround); // (64, 65): odd parity
        assert_eq!(out[2], PointLabel::Unscored); // z out of range

        let all = vec![true; cfg.cells()];
        let out = propagate_to_points(&all, &grid).unwrap();
        assert!(out[..2].iter().all(|l| *l == PointLabel::Ground));

        assert!(matches!(
            propagate_to_points(&[true], &grid),
            Err(PillarError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn label_errors() {
        let cloud = cloud_of(&[(0.0, 0.0, 0.0)]);
        let grid = pillarize(&cloud, &up_normals(1), &GridConfig::default(), 0).unwrap();
        assert!(label_pillars(&grid, &[], &DEFAULT_GROUND_CLASSES, 0.5).is_err());
    }
}
