//! `synth`: deterministic labelled scene generation.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use gsecnet_core::lidar_io::{write_labels, write_scan};

use crate::config::RunConfig;
use crate::pipeline::synth_clouds;
use crate::util::{write_atomic, write_via};
use crate::CliError;

#[derive(Args)]
pub struct SynthArgs {
    /// Number of scenes to generate (flat and tilted ground alternate).
    #[arg(long, value_name = "N")]
    pub scenes: usize,
    /// Output directory for scan/label pairs and the manifest.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ManifestEntry {
    scan: String,
    labels: String,
    points: usize,
}

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    scenes: usize,
    files: Vec<ManifestEntry>,
}

pub fn run(config: &RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    if args.scenes == 0 {
        return Err(CliError::Usage("--scenes must be at least 1".into()));
    }
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let clouds = synth_clouds(config, args.scenes)?;
    let mut files = Vec::with_capacity(clouds.len());
    for (i, cloud) in clouds.iter().enumerate() {
        let scan = format!("{i:06}.bin");
        let labels = format!("{i:06}.label");
        write_via(&args.out.join(&scan), |tmp| write_scan(tmp, cloud))?;
        let classes = cloud.labels.as_ref().expect("synthetic scenes are labelled");
        write_via(&args.out.join(&labels), |tmp| write_labels(tmp, classes))?;
        files.push(ManifestEntry {
            scan,
            labels,
            points: cloud.len(),
        });
    }
    let manifest = Manifest {
        config_hash: format!("{:016x}", config.hash()),
        seed: config.seed,
        scenes: args.scenes,
        files,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&args.out.join("manifest.json"), &json)?;
    let points: usize = manifest.files.iter().map(|f| f.points).sum();
    println!(
        "wrote {} scenes ({points} points) to {}",
        args.scenes,
        args.out.display()
    );
    Ok(())
}
