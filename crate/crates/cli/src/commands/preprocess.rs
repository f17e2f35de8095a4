//! `preprocess`: scans (plus optional labels) into `.pillars` artifacts.

use std::fs;
use std::path::PathBuf;

use clap::Args;

use gsecnet_core::lidar_io::{read_labels, read_scan};
use gsecnet_core::parallel;

use crate::config::RunConfig;
use crate::pipeline::{process_cloud, write_pillars};
use crate::util::list_ext_sorted;
use crate::{data, CliError};

#[derive(Args)]
pub struct PreprocessArgs {
    /// Directory of KITTI-format .bin scans.
    #[arg(long, value_name = "DIR")]
    pub scans: PathBuf,
    /// Directory of matching .label files (same stems); omit for unlabeled
    /// artifacts (usable for inference-style encoding, not training).
    #[arg(long, value_name = "DIR")]
    pub labels: Option<PathBuf>,
    /// Output directory for .pillars artifacts.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn run(config: &RunConfig, args: &PreprocessArgs) -> Result<(), CliError> {
    let scans = list_ext_sorted(&args.scans, "bin")?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let hash = config.hash();
    // Frames are independent; the summary prints in index order regardless
    // of how many workers ran.
    let results = parallel::map_indexed(scans.len(), |i| -> Result<String, CliError> {
        let scan_path = &scans[i];
        let stem = scan_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Data(format!("{}: bad file name", scan_path.display())))?;
        let read = read_scan(scan_path).map_err(data)?;
        let mut cloud = read.cloud;
        if let Some(label_dir) = &args.labels {
            let label_path = label_dir.join(format!("{stem}.label"));
            cloud = read_labels(&label_path, cloud).map_err(data)?;
        }
        let frame_seed = config.seed.wrapping_add(i as u64);
        let frame = process_cloud(config, &cloud, frame_seed)?;
        let out_path = args.out.join(format!("{stem}.pillars"));
        write_pillars(&out_path, &frame, hash, frame_seed)?;
        Ok(format!(
            "{stem}: {} points -> {} pillars ({} out of range{})",
            frame.cloud.len(),
            frame.grid.occupied_count(),
            frame.grid.out_of_range.len(),
            if read.dropped_non_finite > 0 {
                format!(", {} non-finite dropped", read.dropped_non_finite)
            } else {
                String::new()
            },
        ))
    });
    for line in results {
        println!("{}", line?);
    }
    println!(
        "wrote {} artifacts to {} (config hash {hash:016x})",
        scans.len(),
        args.out.display()
    );
    Ok(())
}
