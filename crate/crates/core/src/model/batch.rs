//! Dense pillar batches: the bridge from sparse pillar grids to tensors.

use super::ModelError;
use crate::neuralnet::{Scalar, Tensor};
use crate::pillars::{PillarGrid, FEATURES, FEATURES_NO_NORMALS};

/// Occupied pillars from one or more frames in one dense tensor.
///
/// `features` is `[P, max_points, F]` with padded slots zeroed; padded slots
/// never reach the network (the encoder packs valid rows before the linear
/// stage, and max-pooling sees only valid points).
#[derive(Debug, Clone)]
pub struct PillarBatch<T> {
    pub features: Tensor<T>,
    /// Valid point count per pillar, `1..=max_points`.
    pub valid: Vec<usize>,
    /// Grid cell per pillar.
    pub coords: Vec<(usize, usize)>,
    /// Frame boundaries over the pillar axis: frame `f` owns pillars
    /// `frames[f]..frames[f + 1]`. Always `frame_count() + 1` entries.
    pub frames: Vec<usize>,
    /// Grid dimensions (rows, cols) shared by every frame.
    pub dims: (usize, usize),
}

impl<T: Scalar> PillarBatch<T> {
    /// Densifies one pillar grid (one frame). `with_normals` keeps all 12
    /// features; otherwise the trailing normal components are dropped.
    pub fn from_grid(grid: &PillarGrid, with_normals: bool) -> Self {
        let f = if with_normals { FEATURES } else { FEATURES_NO_NORMALS };
        let max_points = grid.config.max_points;
        let occupied: Vec<_> = grid.occupied().collect();
        let p = occupied.len();
        let mut features = Tensor::zeros(&[p, max_points, f]);
        let mut valid = Vec::with_capacity(p);
        let mut coords = Vec::with_capacity(p);
        let data = features.as_mut_slice();
        for (i, (row, col, cell)) in occupied.into_iter().enumerate() {
            valid.push(cell.points.len());
            coords.push((row, col));
            for (j, point) in cell.points.iter().enumerate() {
                let off = (i * max_points + j) * f;
                for (k, slot) in data[off..off + f].iter_mut().enumerate() {
                    *slot = T::from_f64(point.0[k]);
                }
            }
        }
        Self {
            features,
            valid,
            coords,
            frames: vec![0, p],
            dims: grid.config.dims,
        }
    }

    /// Concatenates frames into one multi-frame batch. Grid dimensions,
    /// capacity, and feature width must agree.
    pub fn stack(batches: &[&PillarBatch<T>]) -> Result<PillarBatch<T>, ModelError> {
        let first = batches
            .first()
            .ok_or_else(|| ModelError::BadBatch("stack of zero batches".into()))?;
        let (max_points, f) = (first.max_points(), first.feature_count());
        let mut features = Vec::new();
        let mut valid = Vec::new();
        let mut coords = Vec::new();
        let mut frames = vec![0];
        for b in batches {
            if b.dims != first.dims || b.max_points() != max_points || b.feature_count() != f {
                return Err(ModelError::BadBatch(format!(
                    "stacked frames disagree: {:?}/{}x{} vs {:?}/{}x{}",
                    b.dims,
                    b.max_points(),
                    b.feature_count(),
                    first.dims,
                    max_points,
                    f
                )));
            }
            features.extend_from_slice(b.features.as_slice());
            valid.extend_from_slice(&b.valid);
            coords.extend_from_slice(&b.coords);
            for w in b.frames.windows(2) {
                frames.push(frames.last().unwrap() + (w[1] - w[0]));
            }
        }
        let p = valid.len();
        Ok(PillarBatch {
            features: Tensor::from_vec(&[p, max_points, f], features),
            valid,
            coords,
            frames,
            dims: first.dims,
        })
    }

    pub fn pillar_count(&self) -> usize {
        self.valid.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn max_points(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_count(&self) -> usize {
        self.features.shape()[2]
    }

    /// Structural checks: monotone frame boundaries covering all pillars,
    /// valid counts in `1..=max_points`, coordinates inside the grid, and
    /// padded slots zero.
    pub fn validate(&self) -> Result<(), ModelError> {
        let p = self.pillar_count();
        if self.features.shape()[0] != p || self.coords.len() != p {
            return Err(ModelError::BadBatch(format!(
                "pillar axis disagrees: {} features, {} valid, {} coords",
                self.features.shape()[0],
                p,
                self.coords.len()
            )));
        }
        if self.frames.first() != Some(&0)
            || self.frames.last() != Some(&p)
            || self.frames.windows(2).any(|w| w[0] > w[1])
        {
            return Err(ModelError::BadBatch(format!(
                "frame boundaries {:?} do not cover {} pillars",
                self.frames, p
            )));
        }
        let (n, f) = (self.max_points(), self.feature_count());
        let data = self.features.as_slice();
        for i in 0..p {
            let v = self.valid[i];
            if v == 0 || v > n {
                return Err(ModelError::BadBatch(format!(
                    "pillar {i} has {v} valid points of {n}"
                )));
            }
            let (row, col) = self.coords[i];
            if row >= self.dims.0 || col >= self.dims.1 {
                return Err(ModelError::BadBatch(format!(
                    "pillar {i} at ({row}, {col}) outside {:?}",
                    self.dims
                )));
            }
            let pad = &data[(i * n + v) * f..(i + 1) * n * f];
            if pad.iter().any(|&x| x != T::zero()) {
                return Err(ModelError::BadBatch(format!(
                    "pillar {i} has nonzero padding"
                )));
            }
        }
        Ok(())
    }

    /// Packs the valid rows into a `[sum(valid), F]` matrix plus per-pillar
    /// row offsets (`pillar_count() + 1` entries).
    pub fn packed(&self) -> (Tensor<T>, Vec<usize>) {
        let (n, f) = (self.max_points(), self.feature_count());
        let total: usize = self.valid.iter().sum();
        let mut rows = Vec::with_capacity(total * f);
        let mut offsets = Vec::with_capacity(self.pillar_count() + 1);
        offsets.push(0);
        let data = self.features.as_slice();
        for (i, &v) in self.valid.iter().enumerate() {
            let off = i * n * f;
            rows.extend_from_slice(&data[off..off + v * f]);
            offsets.push(offsets.last().unwrap() + v);
        }
        (Tensor::from_vec(&[total, f], rows), offsets)
    }
}
