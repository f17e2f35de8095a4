//! `train`: fit the network on preprocessed or synthetic frames.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;

use gsecnet_core::model::{save_checkpoint, train, Frame, GsecNet};

use crate::config::RunConfig;
use crate::pipeline::{process_cloud, read_pillars, synth_clouds};
use crate::util::{hash_check, list_ext_sorted, write_atomic};
use crate::{data, CliError};

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of labelled .pillars artifacts (from `preprocess`).
    #[arg(long, value_name = "DIR", conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Train on this many in-memory synthetic scenes instead.
    #[arg(long, value_name = "N")]
    pub synth: Option<usize>,
    /// Checkpoint destination.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Training log (JSON lines); defaults to the checkpoint path with a
    /// .jsonl extension.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

fn load_frames(
    config: &RunConfig,
    args: &TrainArgs,
    force: bool,
) -> Result<Vec<Frame<f32>>, CliError> {
    match (&args.data, args.synth) {
        (Some(dir), None) => {
            let files = list_ext_sorted(dir, "pillars")?;
            let hash = config.hash();
            files
                .iter()
                .map(|path| {
                    let (batch, labels, stored) = read_pillars(path)?;
                    hash_check(
                        &format!("artifact {}", path.display()),
                        stored,
                        hash,
                        force,
                    )?;
                    let labels = labels.ok_or_else(|| {
                        CliError::Data(format!(
                            "{}: no labels; preprocess with --labels to train",
                            path.display()
                        ))
                    })?;
                    Ok((batch, labels))
                })
                .collect()
        }
        (None, Some(scenes)) => {
            if scenes == 0 {
                return Err(CliError::Usage("--synth must be at least 1".into()));
            }
            let clouds = synth_clouds(config, scenes)?;
            clouds
                .iter()
                .enumerate()
                .map(|(i, cloud)| {
                    let frame = process_cloud(config, cloud, config.seed.wrapping_add(i as u64))?;
                    let labels = frame.labels.expect("synthetic scenes are labelled");
                    Ok((frame.batch, labels))
                })
                .collect()
        }
        _ => Err(CliError::Usage(
            "exactly one of --data or --synth is required".into(),
        )),
    }
}

pub fn run(config: &RunConfig, args: &TrainArgs, force: bool) -> Result<(), CliError> {
    let frames = load_frames(config, args, force)?;
    let hash = config.hash();
    let mut net = GsecNet::<f32>::new(config.model_config(), config.seed).map_err(data)?;
    let train_config = config.train_config(Some(args.out.clone()));

    let mut log = Vec::new();
    let header = serde_json::json!({
        "event": "run",
        "config_hash": format!("{hash:016x}"),
        "seed": config.seed,
        "frames": frames.len(),
        "with_normals": config.model.with_normals,
    });
    log.extend_from_slice(header.to_string().as_bytes());
    log.push(b'\n');

    let clock = Instant::now();
    let report = train(&mut net, &frames, None, &train_config, &mut log).map_err(data)?;
    let seconds = clock.elapsed().as_secs_f64();

    if !args.out.exists() {
        // No epoch produced a defined validation score, so the loop never
        // checkpointed; persist the final state instead.
        save_checkpoint(&mut net, &args.out, hash, config.seed).map_err(data)?;
    }
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("jsonl"));
    write_atomic(&log_path, &log)?;

    let best = match (report.best_miou, report.best_epoch) {
        (Some(miou), Some(epoch)) => format!("best ground-IoU {miou:.4} at epoch {epoch}"),
        _ => "no defined validation score".into(),
    };
    println!(
        "trained {} steps over {} frames in {seconds:.1}s; {best}",
        report.steps,
        frames.len()
    );
    println!(
        "checkpoint: {} (config hash {hash:016x})",
        args.out.display()
    );
    println!("log: {}", log_path.display());
    Ok(())
}
