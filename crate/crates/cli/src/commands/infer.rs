//! `infer`: label one scan with a trained checkpoint.

use std::path::PathBuf;

use clap::Args;

use gsecnet_core::lidar_io::read_scan;
use gsecnet_core::model::{infer, load_checkpoint};
use gsecnet_core::pillars::{Placement, PointLabel};

use crate::config::RunConfig;
use crate::util::{hash_check, render_predictions, write_atomic};
use crate::{data, CliError};

#[derive(Args)]
pub struct InferArgs {
    /// KITTI-format .bin scan to label.
    #[arg(long, value_name = "FILE")]
    pub scan: PathBuf,
    /// Trained checkpoint (from `train`).
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Predictions destination; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn run(config: &RunConfig, args: &InferArgs, force: bool) -> Result<(), CliError> {
    let (mut net, stored) = load_checkpoint::<f32>(&args.checkpoint).map_err(data)?;
    let hash = config.hash();
    hash_check(
        &format!("checkpoint {}", args.checkpoint.display()),
        stored,
        hash,
        force,
    )?;
    let read = read_scan(&args.scan).map_err(data)?;
    let output = infer(&mut net, &read.cloud, &config.infer_config()).map_err(data)?;

    // Per-point rows: the pillar's ground probability, or 0.5 for points
    // outside the grid. With the default config the scan is fed unreduced,
    // so line i refers to input point i.
    let cols = output.grid.config.dims.1;
    let rows: Vec<(PointLabel, f64)> = output
        .grid
        .placements
        .iter()
        .zip(&output.point_labels)
        .map(|(placement, &label)| match placement {
            Placement::Pillar { row, col, .. } => (label, output.pillar_prob[row * cols + col]),
            Placement::OutOfRange => (PointLabel::Unscored, 0.5),
        })
        .collect();
    let text = render_predictions(stored, &rows);
    match &args.out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }

    let summary = format!(
        "{} points, {} pillars, {} out of range, {} degenerate normals; {:.1} ms \
         (undersample {:.1}, normals {:.1}, pillarize {:.1}, encode {:.1}, forward {:.1}, propagate {:.1})",
        output.cloud.len(),
        output.grid.occupied_count(),
        output.grid.out_of_range.len(),
        output.degenerate_normals,
        output.timings.total_s() * 1e3,
        output.timings.undersample_s * 1e3,
        output.timings.normals_s * 1e3,
        output.timings.pillarize_s * 1e3,
        output.timings.encode_s * 1e3,
        output.timings.forward_s * 1e3,
        output.timings.propagate_s * 1e3,
    );
    match &args.out {
        Some(path) => println!("{summary}\npredictions: {}", path.display()),
        // keep stdout clean for the prediction lines
        None => eprintln!("{summary}"),
    }
    Ok(())
}
