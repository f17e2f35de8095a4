//! Frame processing shared by the subcommands: synthetic scene generation,
//! the scan -> pillar-tensor pipeline, and the `.pillars` artifact format.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gsecnet_core::blob::Blob;
use gsecnet_core::geometry::estimate_normals;
use gsecnet_core::lidar_io::{generate_scene, sample_scene_spec, PointCloud};
use gsecnet_core::model::PillarBatch;
use gsecnet_core::neuralnet::Tensor;
use gsecnet_core::pillars::{label_pillars, pillarize, PillarGrid, PillarLabels};
use gsecnet_core::sampling::undersample;

use crate::config::RunConfig;
use crate::{data, CliError};

/// Everything one frame contributes downstream of pillarization.
pub struct FrameArtifacts {
    pub batch: PillarBatch<f32>,
    /// Present when the input cloud carried semantic labels.
    pub labels: Option<PillarLabels>,
    pub grid: PillarGrid,
    /// The cloud the grid was built from (after undersampling).
    pub cloud: PointCloud,
}

/// Runs undersample -> normals -> pillarize -> label on one cloud. The
/// per-frame seed keeps sampling streams independent across frames.
pub fn process_cloud(
    config: &RunConfig,
    cloud: &PointCloud,
    frame_seed: u64,
) -> Result<FrameArtifacts, CliError> {
    let reduced = undersample(
        cloud,
        config.sampling.budget,
        config.sampling.section_interval,
        config.sampling.range_max,
        frame_seed,
    )
    .map_err(data)?;
    let estimate = estimate_normals(&reduced, &config.normal_config()).map_err(data)?;
    let grid = pillarize(&reduced, &estimate.normals, &config.grid, frame_seed).map_err(data)?;
    let labels = reduced
        .labels
        .as_ref()
        .map(|classes| {
            label_pillars(
                &grid,
                classes,
                &config.labels.ground_classes,
                config.labels.fraction_threshold,
            )
        })
        .transpose()
        .map_err(data)?;
    let batch = PillarBatch::from_grid(&grid, config.model.with_normals);
    Ok(FrameArtifacts {
        batch,
        labels,
        grid,
        cloud: reduced,
    })
}

/// Generates `scenes` labelled synthetic clouds: even indices flat ground,
/// odd indices tilted, obstacles drawn from the config seed.
pub fn synth_clouds(config: &RunConfig, scenes: usize) -> Result<Vec<PointCloud>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..scenes)
        .map(|i| {
            let spec = sample_scene_spec(&mut rng, i % 2 == 1);
            generate_scene(&spec, config.seed.wrapping_add(i as u64)).map_err(data)
        })
        .collect()
}

/// Serializes one processed frame as a `.pillars` tensor archive stamped
/// with the run-config hash and the frame seed.
pub fn write_pillars(
    path: &Path,
    frame: &FrameArtifacts,
    config_hash: u64,
    frame_seed: u64,
) -> Result<(), CliError> {
    let batch = &frame.batch;
    let mut blob = Blob::new(config_hash, frame_seed);
    blob.put_f32(
        "features",
        batch.features.shape(),
        batch.features.as_slice(),
    );
    let valid: Vec<u32> = batch.valid.iter().map(|&v| v as u32).collect();
    blob.put_u32("valid", &[valid.len()], &valid);
    let coords: Vec<u32> = batch
        .coords
        .iter()
        .flat_map(|&(r, c)| [r as u32, c as u32])
        .collect();
    blob.put_u32("coords", &[batch.coords.len(), 2], &coords);
    blob.put_u32("dims", &[2], &[batch.dims.0 as u32, batch.dims.1 as u32]);
    if let Some(labels) = &frame.labels {
        let ground: Vec<u8> = labels.ground.iter().map(|&g| g as u8).collect();
        blob.put_u8("label/ground", &[ground.len()], &ground);
        blob.put_f64(
            "label/fraction",
            &[labels.ground_fraction.len()],
            &labels.ground_fraction,
        );
    }
    blob.save(path).map_err(data)
}

/// Reads a `.pillars` artifact back. Returns the batch, the pillar labels
/// when stored, and the embedded config hash.
pub fn read_pillars(
    path: &Path,
) -> Result<(PillarBatch<f32>, Option<PillarLabels>, u64), CliError> {
    let blob = Blob::load(path).map_err(data)?;
    let context = |what: &str| format!("{}: {what}", path.display());
    let (shape, features) = blob
        .get_f32("features")
        .map_err(|e| CliError::Data(context(&e.to_string())))?;
    if shape.len() != 3 {
        return Err(CliError::Data(context("features must be rank 3")));
    }
    let (_, valid) = blob
        .get_u32("valid")
        .map_err(|e| CliError::Data(context(&e.to_string())))?;
    let (coord_shape, coords) = blob
        .get_u32("coords")
        .map_err(|e| CliError::Data(context(&e.to_string())))?;
    let (_, dims) = blob
        .get_u32("dims")
        .map_err(|e| CliError::Data(context(&e.to_string())))?;
    if coord_shape != [shape[0], 2] || valid.len() != shape[0] || dims.len() != 2 {
        return Err(CliError::Data(context("inconsistent tensor shapes")));
    }
    let dims = (dims[0] as usize, dims[1] as usize);
    let batch = PillarBatch {
        features: Tensor::from_vec(&shape, features),
        valid: valid.into_iter().map(|v| v as usize).collect(),
        coords: coords
            .chunks_exact(2)
            .map(|rc| (rc[0] as usize, rc[1] as usize))
            .collect(),
        frames: vec![0, shape[0]],
        dims,
    };
    batch
        .validate()
        .map_err(|e| CliError::Data(context(&e.to_string())))?;
    let labels = match blob.get_u8("label/ground") {
        Err(_) => None,
        Ok((_, ground)) => {
            let (_, fraction) = blob
                .get_f64("label/fraction")
                .map_err(|e| CliError::Data(context(&e.to_string())))?;
            if ground.len() != dims.0 * dims.1 || fraction.len() != ground.len() {
                return Err(CliError::Data(context("label length mismatch")));
            }
            Some(PillarLabels {
                ground: ground.into_iter().map(|g| g != 0).collect(),
                ground_fraction: fraction,
                dims,
            })
        }
    };
    Ok((batch, labels, blob.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pillars_artifact_round_trips() {
        let mut config = RunConfig::default();
        config.grid.pillar_size = (6.4, 6.4);
        config.grid.dims = (16, 16);
        config.grid.max_points = 8;
        config.sampling.budget = 1500;
        let cloud = synth_clouds(&config, 1).unwrap().remove(0);
        let frame = process_cloud(&config, &cloud, 3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000000.pillars");
        write_pillars(&path, &frame, config.hash(), 3).unwrap();
        let (batch, labels, hash) = read_pillars(&path).unwrap();

        assert_eq!(hash, config.hash());
        assert_eq!(batch.features.as_slice(), frame.batch.features.as_slice());
        assert_eq!(batch.valid, frame.batch.valid);
        assert_eq!(batch.coords, frame.batch.coords);
        assert_eq!(batch.dims, frame.batch.dims);
        let labels = labels.unwrap();
        let expected = frame.labels.unwrap();
        assert_eq!(labels.ground, expected.ground);
        assert_eq!(labels.ground_fraction, expected.ground_fraction);
    }

    #[test]
    fn unlabeled_cloud_serializes_without_labels() {
        let mut config = RunConfig::default();
        config.grid.pillar_size = (6.4, 6.4);
        config.grid.dims = (16, 16);
        config.grid.max_points = 8;
        config.sampling.budget = 800;
        let mut cloud = synth_clouds(&config, 1).unwrap().remove(0);
        cloud.labels = None;
        let frame = process_cloud(&config, &cloud, 0).unwrap();
        assert!(frame.labels.is_none());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pillars");
        write_pillars(&path, &frame, 1, 0).unwrap();
        let (_, labels, _) = read_pillars(&path).unwrap();
        assert!(labels.is_none());
    }
}
