//! Checkpoint persistence: model config, parameters, and running statistics
//! in one tensor archive.
//!
//! Values are stored as f64 regardless of the compute type — exact for both
//! f32 and f64 models — so a save/load round trip reproduces the weights
//! bitwise. Entry names mirror the visitation names under `param/` and
//! `buffer/` prefixes; the config travels as a JSON payload.

use std::path::Path;

use crate::blob::Blob;
use crate::neuralnet::{Scalar, Tensor};

use super::net::{GsecNet, ModelConfig};
use super::ModelError;

/// Writes `net` to `path`. `config_hash` ties the artifact to the run
/// configuration that produced it; `seed` records provenance.
pub fn save_checkpoint<T: Scalar>(
    net: &mut GsecNet<T>,
    path: &Path,
    config_hash: u64,
    seed: u64,
) -> Result<(), ModelError> {
    let mut blob = Blob::new(config_hash, seed);
    let config_json =
        serde_json::to_vec(&net.config).expect("model config always serializes");
    blob.put_u8("config", &[config_json.len()], &config_json);
    let put = |blob: &mut Blob, name: &str, t: &Tensor<T>| {
        let values: Vec<f64> = t.as_slice().iter().map(|&v| Scalar::to_f64(v)).collect();
        blob.put_f64(name, t.shape(), &values);
    };
    net.visit_params("", &mut |name, p| {
        put(&mut blob, &format!("param/{name}"), &p.value);
    });
    net.visit_buffers("", &mut |name, t| {
        put(&mut blob, &format!("buffer/{name}"), t);
    });
    blob.save(path)?;
    Ok(())
}

/// Reads a checkpoint back into a freshly constructed model. Returns the
/// model with the stored `config_hash`. Every stored tensor must match the
/// architecture implied by the stored config, and vice versa.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(GsecNet<T>, u64), ModelError> {
    let blob = Blob::load(path)?;
    let (_, config_json) = blob
        .get_u8("config")
        .map_err(|_| ModelError::CheckpointMismatch("missing config entry".into()))?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| ModelError::CheckpointMismatch(format!("config payload: {e}")))?;
    let mut net = GsecNet::new(config, blob.seed)?;

    let mut missing: Vec<String> = Vec::new();
    let mut fill = |name: String, t: &mut Tensor<T>| {
        let (dims, values) = match blob.get_f64(&name) {
            Ok(v) => v,
            Err(_) => {
                missing.push(name);
                return;
            }
        };
        if dims != t.shape() {
            missing.push(format!("{name} (stored {dims:?}, model {:?})", t.shape()));
            return;
        }
        for (dst, v) in t.as_mut_slice().iter_mut().zip(values) {
            *dst = T::from_f64(v);
        }
    };
    let mut loaded = 1; // the config entry
    net.visit_params("", &mut |name, p| {
        fill(format!("param/{name}"), &mut p.value);
        loaded += 1;
    });
    net.visit_buffers("", &mut |name, t| {
        fill(format!("buffer/{name}"), t);
        loaded += 1;
    });
    if !missing.is_empty() {
        return Err(ModelError::CheckpointMismatch(format!(
            "unloadable entries: {}",
            missing.join(", ")
        )));
    }
    if loaded != blob.len() {
        return Err(ModelError::CheckpointMismatch(format!(
            "checkpoint has {} entries, model consumed {loaded}",
            blob.len()
        )));
    }
    Ok((net, blob.config_hash))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::Normal;
    use crate::lidar_io::{Point, PointCloud};
    use crate::model::PillarBatch;
    use crate::pillars::{pillarize, GridConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            dims: (16, 16),
            max_points: 4,
            ..ModelConfig::default()
        }
    }

    fn small_batch(config: &ModelConfig) -> PillarBatch<f32> {
        let grid = GridConfig {
            x_range: (-6.4, 6.4),
            y_range: (-6.4, 6.4),
            dims: config.dims,
            max_points: config.max_points,
            ..GridConfig::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point> = (0..60)
            .map(|_| {
                Point::new(
                    r.gen_range(-6.0..6.0),
                    r.gen_range(-6.0..6.0),
                    r.gen_range(-1.0..1.0),
                    r.gen_range(0.0..1.0),
                )
            })
            .collect();
        let cloud = PointCloud::from_points(pts);
        let normals = vec![Normal::UP; cloud.len()];
        let grid = pillarize(&cloud, &normals, &grid, 3).unwrap();
        PillarBatch::from_grid(&grid, config.with_normals)
    }

    #[test]
    fn round_trip_preserves_logits_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = small_config();
        let batch = small_batch(&config);

        let mut net = GsecNet::<f32>::new(config, 11).unwrap();
        // A training pass moves the running statistics off their init values
        // so the round trip covers buffers, not just parameters.
        let _ = net.forward(&batch, true).unwrap();
        let before = net.forward(&batch, false).unwrap();
        save_checkpoint(&mut net, &path, 0xabcdef, 11).unwrap();

        let (mut restored, hash) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(hash, 0xabcdef);
        let after = restored.forward(&batch, false).unwrap();
        assert_eq!(before.as_slice(), after.as_slice());
    }

    #[test]
    fn files_are_byte_identical_across_saves() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let mut net = GsecNet::<f32>::new(small_config(), 3).unwrap();
        save_checkpoint(&mut net, &p1, 1, 3).unwrap();
        save_checkpoint(&mut net, &p2, 1, 3).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut net = GsecNet::<f32>::new(small_config(), 3).unwrap();
        save_checkpoint(&mut net, &path, 1, 3).unwrap();

        // Corrupt the stored config to a different ladder: every conv shape
        // disagrees with the stored tensors.
        let mut blob = Blob::load(&path).unwrap();
        let mut cfg = small_config();
        cfg.ladder = [64, 64, 128, 128];
        let json = serde_json::to_vec(&cfg).unwrap();
        blob.put_u8("config", &[json.len()], &json);
        blob.save(&path).unwrap();

        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(matches!(err, ModelError::CheckpointMismatch(_)), "{err}");
    }

    #[test]
    fn extra_entries_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut net = GsecNet::<f32>::new(small_config(), 3).unwrap();
        save_checkpoint(&mut net, &path, 1, 3).unwrap();
        let mut blob = Blob::load(&path).unwrap();
        blob.put_f64("param/stowaway", &[1], &[0.5]);
        blob.save(&path).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(matches!(err, ModelError::CheckpointMismatch(_)), "{err}");
    }
}
