//! `eval`: score predictions against ground truth.
//!
//! Two modes: compare a predictions file against a truth file (another
//! predictions file or a SemanticKITTI .label file), or run a checkpoint
//! over a scan+label directory and score both pillar and point levels.

use std::path::{Path, PathBuf};

use clap::Args;

use gsecnet_core::lidar_io::{read_label_classes, read_labels, read_scan};
use gsecnet_core::metrics::{accumulate, ConfusionCounts, EvalReport};
use gsecnet_core::model::{infer, load_checkpoint};
use gsecnet_core::pillars::{label_pillars, PointLabel};

use crate::config::RunConfig;
use crate::util::{classes_to_truth, hash_check, list_ext_sorted, read_predictions};
use crate::{data, CliError};

#[derive(Args)]
pub struct EvalArgs {
    /// Predictions file (from `infer`).
    #[arg(long, value_name = "FILE", requires = "truth")]
    pub pred: Option<PathBuf>,
    /// Truth: a .label file or another predictions file.
    #[arg(long, value_name = "FILE", requires = "pred")]
    pub truth: Option<PathBuf>,
    /// Scan directory for checkpoint evaluation.
    #[arg(long, value_name = "DIR", requires_all = ["labels", "checkpoint"])]
    pub scans: Option<PathBuf>,
    /// Matching .label directory (same stems as the scans).
    #[arg(long, value_name = "DIR")]
    pub labels: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Emit the report as JSON instead of the aligned table.
    #[arg(long)]
    pub json: bool,
}

fn excluded_pairs(pred: &[PointLabel], truth: &[PointLabel]) -> u64 {
    pred.iter()
        .zip(truth)
        .filter(|(&p, &t)| p == PointLabel::Unscored || t == PointLabel::Unscored)
        .count() as u64
}

/// Predictions-file vs truth-file comparison; point level only.
fn eval_files(
    config: &RunConfig,
    pred_path: &Path,
    truth_path: &Path,
    force: bool,
) -> Result<EvalReport, CliError> {
    let pred = read_predictions(pred_path)?;
    let (truth, truth_hash) = if truth_path.extension().is_some_and(|e| e == "label") {
        let classes = read_label_classes(truth_path).map_err(data)?;
        (classes_to_truth(&classes, &config.labels), None)
    } else {
        let parsed = read_predictions(truth_path)?;
        (parsed.labels, parsed.config_hash)
    };
    if pred.labels.len() != truth.len() {
        return Err(CliError::Data(format!(
            "length mismatch: {} predictions vs {} truth labels",
            pred.labels.len(),
            truth.len()
        )));
    }
    if let (Some(a), Some(b)) = (pred.config_hash, truth_hash) {
        hash_check("prediction files", a, b, force)?;
    }
    let point = accumulate(&pred.labels, &truth).map_err(data)?;
    Ok(EvalReport {
        // file mode carries no pillar-level information
        pillar: ConfusionCounts::default(),
        point,
        excluded_points: excluded_pairs(&pred.labels, &truth),
        config_hash: pred.config_hash.unwrap_or_else(|| config.hash()),
    })
}

/// Checkpoint evaluation over a scan/label directory.
fn eval_checkpoint(
    config: &RunConfig,
    scans_dir: &Path,
    labels_dir: &Path,
    checkpoint: &Path,
    force: bool,
) -> Result<EvalReport, CliError> {
    let (mut net, stored) = load_checkpoint::<f32>(checkpoint).map_err(data)?;
    hash_check(
        &format!("checkpoint {}", checkpoint.display()),
        stored,
        config.hash(),
        force,
    )?;
    let scans = list_ext_sorted(scans_dir, "bin")?;
    let mut infer_config = config.infer_config();
    let mut pillar = ConfusionCounts::default();
    let mut point = ConfusionCounts::default();
    let mut excluded = 0u64;
    for (i, scan_path) in scans.iter().enumerate() {
        let stem = scan_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Data(format!("{}: bad file name", scan_path.display())))?;
        let cloud = read_scan(scan_path).map_err(data)?.cloud;
        let cloud = read_labels(&labels_dir.join(format!("{stem}.label")), cloud).map_err(data)?;
        infer_config.seed = config.seed.wrapping_add(i as u64);
        let output = infer(&mut net, &cloud, &infer_config).map_err(data)?;

        let classes = output.cloud.labels.as_ref().expect("labels attached above");
        let truth = classes_to_truth(classes, &config.labels);
        point += accumulate(&output.point_labels, &truth).map_err(data)?;
        excluded += excluded_pairs(&output.point_labels, &truth);

        let pillar_truth = label_pillars(
            &output.grid,
            classes,
            &config.labels.ground_classes,
            config.labels.fraction_threshold,
        )
        .map_err(data)?;
        let cols = output.grid.config.dims.1;
        for (row, col, _) in output.grid.occupied() {
            let idx = row * cols + col;
            pillar.tally(output.pillar_ground[idx], pillar_truth.ground[idx]);
        }
    }
    Ok(EvalReport {
        pillar,
        point,
        excluded_points: excluded,
        config_hash: stored,
    })
}

pub fn run(config: &RunConfig, args: &EvalArgs, force: bool) -> Result<(), CliError> {
    let report = match (&args.pred, &args.truth, &args.scans) {
        (Some(pred), Some(truth), None) => eval_files(config, pred, truth, force)?,
        (None, None, Some(scans)) => {
            let labels = args.labels.as_ref().expect("clap enforces --labels");
            let checkpoint = args.checkpoint.as_ref().expect("clap enforces --checkpoint");
            eval_checkpoint(config, scans, labels, checkpoint, force)?
        }
        _ => {
            return Err(CliError::Usage(
                "pass either --pred/--truth or --scans/--labels/--checkpoint".into(),
            ))
        }
    };
    if args.json {
        println!("{}", report.json());
    } else {
        print!("{}", report.table());
    }
    Ok(())
}
