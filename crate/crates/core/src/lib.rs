//! Pillar-based ground segmentation for rotating-LiDAR point clouds.
//!
//! The pipeline turns a raw scan into a per-point ground / non-ground
//! labelling:
//!
//! 1. [`lidar_io`] reads KITTI-style binary scans (or generates synthetic
//!    labelled scenes) into a [`lidar_io::PointCloud`].
//! 2. [`sampling`] reduces the cloud to a global point budget while keeping
//!    far-range density via section-weighted undersampling.
//! 3. [`geometry`] estimates per-point normals from k-NN plane fits.
//! 4. [`pillars`] discretizes the cloud into a 128x128 pillar grid of
//!    12-feature augmented points and derives pillar-level labels.
//! 5. [`model`] encodes pillars with a simplified PointNet, runs the
//!    depthwise-separable attention U-Net, and propagates pillar predictions
//!    back to points.
//! 6. [`metrics`] scores predictions and benchmarks the stages.
//!
//! Heavy inner loops (normal estimation, convolutions, batch training) run
//! on rayon when the `parallel` feature is enabled (default) and fall back
//! to sequential execution otherwise. Both paths accumulate in the same
//! order, so results are bitwise identical across the two builds.

pub mod blob;
pub mod geometry;
pub mod lidar_io;
pub mod metrics;
pub mod model;
pub mod neuralnet;
pub mod parallel;
pub mod pillars;
pub mod sampling;
