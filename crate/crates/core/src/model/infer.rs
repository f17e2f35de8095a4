//! Single-scan inference: undersample, estimate normals, pillarize, encode,
//! run the network, and propagate pillar predictions back to points.

use std::time::Instant;

use serde::Serialize;

use crate::geometry::{estimate_normals, NormalConfig};
use crate::lidar_io::PointCloud;
use crate::neuralnet::layers::sigmoid;
use crate::neuralnet::Scalar;
use crate::pillars::{pillarize, propagate_to_points, GridConfig, PillarGrid, PointLabel};
use crate::sampling::{undersample, DEFAULT_RANGE_MAX, DEFAULT_SECTION_INTERVAL};

use super::batch::PillarBatch;
use super::net::GsecNet;
use super::ModelError;

#[derive(Debug, Clone)]
pub struct InferConfig {
    pub grid: GridConfig,
    pub normals: NormalConfig,
    /// Point budget for distribution-controlled undersampling; `None` feeds
    /// the scan through unreduced.
    pub budget: Option<usize>,
    /// Ring width for the undersampling histogram, meters.
    pub section_interval: f64,
    /// Undersampling range cutoff, meters.
    pub range_max: f64,
    /// Ground probability threshold on the sigmoid output.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            normals: NormalConfig::default(),
            budget: Some(100_000),
            section_interval: DEFAULT_SECTION_INTERVAL,
            range_max: DEFAULT_RANGE_MAX,
            threshold: 0.5,
            seed: 0,
        }
    }
}

/// Wall-clock seconds per stage, named as in [`crate::metrics::STAGES`].
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StageTimings {
    pub undersample_s: f64,
    pub normals_s: f64,
    pub pillarize_s: f64,
    pub encode_s: f64,
    pub forward_s: f64,
    pub propagate_s: f64,
}

impl StageTimings {
    pub fn total_s(&self) -> f64 {
        self.undersample_s
            + self.normals_s
            + self.pillarize_s
            + self.encode_s
            + self.forward_s
            + self.propagate_s
    }
}

/// Everything a caller needs downstream of one scan.
#[derive(Debug)]
pub struct InferOutput {
    /// The cloud the network actually saw (after any undersampling).
    pub cloud: PointCloud,
    /// Per-point labels over `cloud`; out-of-grid points are `Unscored`.
    pub point_labels: Vec<PointLabel>,
    /// Row-major ground decision per pillar.
    pub pillar_ground: Vec<bool>,
    /// Row-major ground probability per pillar.
    pub pillar_prob: Vec<f64>,
    /// The populated grid, for propagation or pillar-level scoring.
    pub grid: PillarGrid,
    pub degenerate_normals: usize,
    pub timings: StageTimings,
}

/// Runs the full pipeline on one scan.
pub fn infer<T: Scalar>(
    net: &mut GsecNet<T>,
    scan: &PointCloud,
    cfg: &InferConfig,
) -> Result<InferOutput, ModelError> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(ModelError::InvalidConfig(format!(
            "threshold {} outside [0, 1]",
            cfg.threshold
        )));
    }
    if cfg.grid.dims != net.config.dims {
        return Err(ModelError::InvalidConfig(format!(
            "grid dims {:?} vs model dims {:?}",
            cfg.grid.dims, net.config.dims
        )));
    }
    let mut t = StageTimings::default();

    let clock = Instant::now();
    let cloud = match cfg.budget {
        Some(budget) => undersample(
            scan,
            budget,
            cfg.section_interval,
            cfg.range_max,
            cfg.seed,
        )?,
        None => scan.clone(),
    };
    t.undersample_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let estimate = estimate_normals(&cloud, &cfg.normals)?;
    t.normals_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let grid = pillarize(&cloud, &estimate.normals, &cfg.grid, cfg.seed)?;
    let batch = PillarBatch::from_grid(&grid, net.config.with_normals);
    t.pillarize_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let map = net.encode_pillars(&batch, false)?;
    t.encode_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let logits = net.forward_map(&map, false)?;
    t.forward_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let prob: Vec<f64> = logits
        .as_slice()
        .iter()
        .map(|&z| sigmoid(z).to_f64())
        .collect();
    let ground: Vec<bool> = prob.iter().map(|&p| p >= cfg.threshold).collect();
    let point_labels = propagate_to_points(&ground, &grid)?;
    t.propagate_s = clock.elapsed().as_secs_f64();

    Ok(InferOutput {
        cloud,
        point_labels,
        pillar_ground: ground,
        pillar_prob: prob,
        grid,
        degenerate_normals: estimate.degenerate_fallbacks,
        timings: t,
    })
}
