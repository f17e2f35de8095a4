//! Scan and label file I/O plus a synthetic scene generator.
//!
//! Scan files follow the KITTI velodyne convention: four consecutive 32-bit
//! little-endian IEEE-754 values `(x, y, z, intensity)` per point, 16 bytes
//! total. Label files follow the SemanticKITTI convention: one 32-bit
//! little-endian unsigned integer per point with the semantic class in the
//! low 16 bits and the instance id in the high 16 bits.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal as GaussDist};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default semantic class assigned to synthetic ground points (SemanticKITTI "road").
pub const SYNTH_GROUND_CLASS: u16 = 40;
/// Default semantic class assigned to synthetic obstacle points (SemanticKITTI "car").
pub const SYNTH_OBSTACLE_CLASS: u16 = 10;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: byte length {len} is not divisible by {record} (truncated or not a scan file)")]
    Format {
        path: String,
        len: usize,
        record: usize,
    },
    #[error("label count {labels} does not match point count {points}")]
    LengthMismatch { labels: usize, points: usize },
}

/// A single LiDAR return. Coordinates in meters, intensity a unitless
/// reflectance in `[0, 1]`. All fields are finite after ingestion filtering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// An ordered point sequence with optional per-point semantic classes.
/// Order is preserved from the source file throughout the pipeline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point>) -> Self {
        Self {
            points,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points at `indices` (ascending), labels following their points.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Result of reading a scan: the cloud plus how many non-finite records were dropped.
#[derive(Debug, Clone)]
pub struct ScanRead {
    pub cloud: PointCloud,
    pub dropped_non_finite: usize,
}

/// Reads a KITTI-format binary scan. Non-finite points are dropped and counted.
pub fn read_scan(path: &Path) -> Result<ScanRead, IoError> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scan_bytes(&bytes, path)
}

fn parse_scan_bytes(bytes: &[u8], path: &Path) -> Result<ScanRead, IoError> {
    if bytes.len() % 16 != 0 {
        return Err(IoError::Format {
            path: path.display().to_string(),
            len: bytes.len(),
            record: 16,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut dropped = 0usize;
    for rec in bytes.chunks_exact(16) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
        let p = Point::new(f(0), f(4), f(8), f(12));
        if p.is_finite() {
            points.push(p);
        } else {
            dropped += 1;
        }
    }
    Ok(ScanRead {
        cloud: PointCloud::from_points(points),
        dropped_non_finite: dropped,
    })
}

/// Writes a cloud in KITTI scan format. Coordinates are narrowed to f32.
pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            buf.write_all(&(v as f32).to_le_bytes()).unwrap();
        }
    }
    std::fs::write(path, &buf).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a SemanticKITTI label file as bare semantic classes. Instance ids
/// (high 16 bits) are discarded.
pub fn read_label_classes(path: &Path) -> Result<Vec<u16>, IoError> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() % 4 != 0 {
        return Err(IoError::Format {
            path: path.display().to_string(),
            len: bytes.len(),
            record: 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|rec| {
            let raw = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]);
            (raw & 0xffff) as u16
        })
        .collect())
}

/// Reads a SemanticKITTI label file and attaches the semantic classes to
/// `cloud`. Point order is untouched.
pub fn read_labels(path: &Path, cloud: PointCloud) -> Result<PointCloud, IoError> {
    attach_labels(cloud, read_label_classes(path)?)
}

/// Attaches an already-decoded label vector, checking the length contract.
pub fn attach_labels(mut cloud: PointCloud, labels: Vec<u16>) -> Result<PointCloud, IoError> {
    if labels.len() != cloud.len() {
        return Err(IoError::LengthMismatch {
            labels: labels.len(),
            points: cloud.len(),
        });
    }
    cloud.labels = Some(labels);
    Ok(cloud)
}

/// Writes labels in SemanticKITTI format (instance bits zero).
pub fn write_labels(path: &Path, labels: &[u16]) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        buf.write_all(&(l as u32).to_le_bytes()).unwrap();
    }
    std::fs::write(path, &buf).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Axis-aligned box obstacle sitting on the ground plane.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxObstacle {
    /// Footprint center on the ground plane, meters.
    pub center: (f64, f64),
    /// Full extents (x, y, z), meters.
    pub extent: (f64, f64, f64),
    /// Surface sampling density, points per square meter. Must be > 0.
    pub density: f64,
}

/// Parameters for the synthetic scene generator.
///
/// Ground points are sampled on concentric rings (radius set by beam
/// elevation angles, azimuth stepped at `angular_resolution`) so the radial
/// density falls off with distance like a rotating LiDAR. Obstacles are box
/// surfaces; ground returns inside an obstacle footprint are shadowed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    /// Ground plane elevation at the origin, meters.
    pub ground_elevation: f64,
    /// Ground tilt, radians, about the y axis (slope along x) and x axis (slope along y).
    pub ground_tilt: (f64, f64),
    pub obstacles: Vec<BoxObstacle>,
    /// Gaussian sensor noise sigma on z, meters. Must be >= 0.
    pub noise_sigma: f64,
    /// Number of beams (rings).
    pub num_beams: usize,
    /// Azimuth step, radians.
    pub angular_resolution: f64,
    /// Semantic class for ground points.
    pub ground_class: u16,
    /// Semantic class for obstacle points.
    pub obstacle_class: u16,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            ground_elevation: -1.7,
            ground_tilt: (0.0, 0.0),
            obstacles: Vec::new(),
            noise_sigma: 0.02,
            num_beams: 48,
            angular_resolution: 0.6f64.to_radians(),
            ground_class: SYNTH_GROUND_CLASS,
            obstacle_class: SYNTH_OBSTACLE_CLASS,
        }
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Invalid(String),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(SceneError::Invalid(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.num_beams == 0 {
            return Err(SceneError::Invalid("num_beams must be > 0".into()));
        }
        if self.angular_resolution <= 0.0 {
            return Err(SceneError::Invalid(
                "angular resolution must be > 0".into(),
            ));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if o.density <= 0.0 {
                return Err(SceneError::Invalid(format!(
                    "obstacle {i}: density must be > 0, got {}",
                    o.density
                )));
            }
            if o.extent.0 <= 0.0 || o.extent.1 <= 0.0 || o.extent.2 <= 0.0 {
                return Err(SceneError::Invalid(format!(
                    "obstacle {i}: extents must be > 0"
                )));
            }
        }
        Ok(())
    }

    fn ground_z(&self, x: f64, y: f64) -> f64 {
        self.ground_elevation + self.ground_tilt.0.tan() * x + self.ground_tilt.1.tan() * y
    }
}

const SCENE_RANGE: f64 = 51.2;

fn in_footprint(x: f64, y: f64, o: &BoxObstacle) -> bool {
    (x - o.center.0).abs() <= o.extent.0 / 2.0 && (y - o.center.1).abs() <= o.extent.1 / 2.0
}

/// Generates a labeled synthetic scene. Pure function of `(spec, seed)`:
/// the same arguments always produce a bitwise-identical cloud.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloud, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = GaussDist::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut points = Vec::new();
    let mut labels = Vec::new();

    // Sensor sits at the frame origin; beam elevation angles spread between
    // 2 and 24 degrees below horizontal, giving ring radii from far to near.
    let sensor_height = (0.0 - spec.ground_elevation).max(0.5);
    let n = spec.num_beams;
    for b in 0..n {
        let t = if n == 1 { 0.0 } else { b as f64 / (n - 1) as f64 };
        let elevation = (2.0 + 22.0 * t).to_radians();
        let radius = sensor_height / elevation.tan();
        let steps = (std::f64::consts::TAU / spec.angular_resolution).floor() as usize;
        for s in 0..steps {
            let phi = s as f64 * spec.angular_resolution;
            let x = radius * phi.cos();
            let y = radius * phi.sin();
            if x.abs() >= SCENE_RANGE || y.abs() >= SCENE_RANGE {
                continue;
            }
            // Shadowed by an obstacle footprint: no ground return there.
            if spec.obstacles.iter().any(|o| in_footprint(x, y, o)) {
                continue;
            }
            let dz = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let z = spec.ground_z(x, y) + dz;
            let intensity = 0.25 + 0.1 * rng.gen::<f64>();
            points.push(Point::new(x, y, z, intensity));
            labels.push(spec.ground_class);
        }
    }

    for o in &spec.obstacles {
        sample_box(o, spec, &mut rng, &noise, &mut points, &mut labels);
    }

    Ok(PointCloud {
        points,
        labels: Some(labels),
    })
}

fn sample_box(
    o: &BoxObstacle,
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    noise: &GaussDist<f64>,
    points: &mut Vec<Point>,
    labels: &mut Vec<u16>,
) {
    let (cx, cy) = o.center;
    let (ex, ey, ez) = o.extent;
    let base = spec.ground_z(cx, cy);
    // Four side faces plus the top, sampled uniformly by area.
    let faces = [
        (ex * ez, 0usize), // y = cy - ey/2
        (ex * ez, 1),      // y = cy + ey/2
        (ey * ez, 2),      // x = cx - ex/2
        (ey * ez, 3),      // x = cx + ex/2
        (ex * ey, 4),      // top
    ];
    for (area, face) in faces {
        let count = (area * o.density).round().max(1.0) as usize;
        for _ in 0..count {
            let (u, v) = (rng.gen::<f64>(), rng.gen::<f64>());
            let (x, y, z) = match face {
                0 => (cx + (u - 0.5) * ex, cy - ey / 2.0, base + v * ez),
                1 => (cx + (u - 0.5) * ex, cy + ey / 2.0, base + v * ez),
                2 => (cx - ex / 2.0, cy + (u - 0.5) * ey, base + v * ez),
                3 => (cx + ex / 2.0, cy + (u - 0.5) * ey, base + v * ez),
                _ => (cx + (u - 0.5) * ex, cy + (v - 0.5) * ey, base + ez),
            };
            let dz = if spec.noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            if x.abs() >= SCENE_RANGE || y.abs() >= SCENE_RANGE {
                continue;
            }
            points.push(Point::new(x, y, z + dz, 0.55 + 0.1 * rng.gen::<f64>()));
            labels.push(spec.obstacle_class);
        }
    }
}

/// Draws a randomized desk-scale scene spec: ground flat or tilted up to
/// 5 degrees per axis, with 3-10 box obstacles scattered inside the scene
/// range. Deterministic for a fixed RNG state.
pub fn sample_scene_spec<R: Rng>(rng: &mut R, tilted: bool) -> SceneSpec {
    let ground_tilt = if tilted {
        (
            rng.gen_range(-5.0f64..5.0).to_radians(),
            rng.gen_range(-5.0f64..5.0).to_radians(),
        )
    } else {
        (0.0, 0.0)
    };
    let obstacles = (0..rng.gen_range(3..=10))
        .map(|_| BoxObstacle {
            center: (rng.gen_range(-35.0..35.0), rng.gen_range(-35.0..35.0)),
            extent: (
                rng.gen_range(0.8..4.0),
                rng.gen_range(0.8..4.0),
                rng.gen_range(0.8..2.5),
            ),
            density: rng.gen_range(40.0..120.0),
        })
        .collect();
    SceneSpec {
        ground_tilt,
        obstacles,
        ..SceneSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn scan_file(records: &[[f32; 4]]) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        for rec in records {
            for v in rec {
                f.write_all(&v.to_le_bytes()).unwrap();
            }
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn single_record_identity() {
        let f = scan_file(&[[1.0, 2.0, 3.0, 0.5]]);
        let r = read_scan(f.path()).unwrap();
        assert_eq!(r.cloud.len(), 1);
        assert_eq!(r.cloud.points[0], Point::new(1.0, 2.0, 3.0, 0.5));
        assert_eq!(r.dropped_non_finite, 0);
    }

    #[test]
    fn empty_file_empty_cloud() {
        let f = scan_file(&[]);
        let r = read_scan(f.path()).unwrap();
        assert!(r.cloud.is_empty());
    }

    #[test]
    fn nan_record_dropped_and_counted() {
        let f = scan_file(&[[f32::NAN, 0.0, 0.0, 0.0]]);
        let r = read_scan(f.path()).unwrap();
        assert!(r.cloud.is_empty());
        assert_eq!(r.dropped_non_finite, 1);
    }

    #[test]
    fn bad_length_is_format_error() {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(&[0u8; 15]).unwrap();
        f.flush().unwrap();
        assert!(matches!(
            read_scan(f.path()),
            Err(IoError::Format { len: 15, .. })
        ));
    }

    #[test]
    fn scan_round_trip_is_byte_exact() {
        let recs: Vec<[f32; 4]> = (0..57)
            .map(|i| {
                let v = i as f32;
                [v * 0.37 - 3.0, -v * 1.21, v * 0.05, (v / 57.0).fract()]
            })
            .collect();
        let f = scan_file(&recs);
        let original = std::fs::read(f.path()).unwrap();
        let r = read_scan(f.path()).unwrap();
        let out = NamedTempFile::new().unwrap();
        write_scan(out.path(), &r.cloud).unwrap();
        assert_eq!(std::fs::read(out.path()).unwrap(), original);
    }

    #[test]
    fn labels_attach_in_order() {
        let cloud = PointCloud::from_points(vec![
            Point::new(0.0, 0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0, 0.0),
        ]);
        let mut f = NamedTempFile::new().unwrap();
        for raw in [40u32, 10u32] {
            f.write_all(&raw.to_le_bytes()).unwrap();
        }
        f.flush().unwrap();
        let labelled = read_labels(f.path(), cloud).unwrap();
        assert_eq!(labelled.labels.unwrap(), vec![40, 10]);
    }

    #[test]
    fn instance_bits_are_discarded() {
        // 0x00010028: semantic class 40 (road), instance id 1.
        let cloud = PointCloud::from_points(vec![Point::new(0.0, 0.0, 0.0, 0.0)]);
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(&0x0001_0028u32.to_le_bytes()).unwrap();
        f.flush().unwrap();
        let labelled = read_labels(f.path(), cloud).unwrap();
        assert_eq!(labelled.labels.unwrap(), vec![40]);
    }

    #[test]
    fn label_count_mismatch_errors() {
        let cloud = PointCloud::from_points(vec![
            Point::new(0.0, 0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0, 0.0),
        ]);
        let mut f = NamedTempFile::new().unwrap();
        for raw in [40u32, 10, 44] {
            f.write_all(&raw.to_le_bytes()).unwrap();
        }
        f.flush().unwrap();
        assert!(matches!(
            read_labels(f.path(), cloud),
            Err(IoError::LengthMismatch {
                labels: 3,
                points: 2
            })
        ));
    }

    #[test]
    fn flat_noise_free_scene_is_all_ground_at_elevation() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            ground_elevation: -1.5,
            ..Default::default()
        };
        let cloud = generate_scene(&spec, 7).unwrap();
        assert!(!cloud.is_empty());
        let labels = cloud.labels.as_ref().unwrap();
        for (p, &l) in cloud.points.iter().zip(labels) {
            assert_eq!(p.z, -1.5);
            assert_eq!(l, SYNTH_GROUND_CLASS);
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let spec = SceneSpec {
            obstacles: vec![BoxObstacle {
                center: (10.0, 0.0),
                extent: (2.0, 2.0, 2.0),
                density: 40.0,
            }],
            ..Default::default()
        };
        let a = generate_scene(&spec, 123).unwrap();
        let b = generate_scene(&spec, 123).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn obstacle_points_confined_to_footprint() {
        let spec = SceneSpec {
            obstacles: vec![BoxObstacle {
                center: (10.0, 0.0),
                extent: (2.0, 2.0, 2.0),
                density: 40.0,
            }],
            noise_sigma: 0.0,
            ..Default::default()
        };
        let cloud = generate_scene(&spec, 5).unwrap();
        let labels = cloud.labels.as_ref().unwrap();
        let mut saw_obstacle = false;
        for (p, &l) in cloud.points.iter().zip(labels) {
            if l == SYNTH_OBSTACLE_CLASS {
                saw_obstacle = true;
                assert!(
                    (p.x - 10.0).abs() <= 1.0 + 1e-12 && p.y.abs() <= 1.0 + 1e-12,
                    "obstacle point outside footprint: {p:?}"
                );
            }
        }
        assert!(saw_obstacle);
    }

    #[test]
    fn scene_points_stay_in_range() {
        let cloud = generate_scene(&SceneSpec::default(), 99).unwrap();
        for p in &cloud.points {
            assert!(p.x.abs() < SCENE_RANGE && p.y.abs() < SCENE_RANGE);
        }
    }

    #[test]
    fn sampled_specs_are_deterministic_and_valid() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let tilted = sample_scene_spec(&mut a, true);
        assert_eq!(tilted, sample_scene_spec(&mut b, true));
        assert!((3..=10).contains(&tilted.obstacles.len()));
        assert!(tilted.ground_tilt.0 != 0.0 || tilted.ground_tilt.1 != 0.0);
        tilted.validate().unwrap();

        let flat = sample_scene_spec(&mut a, false);
        assert_eq!(flat.ground_tilt, (0.0, 0.0));
        flat.validate().unwrap();
        assert!(!generate_scene(&flat, 1).unwrap().is_empty());
    }
}
