//! Confusion-matrix scoring and wall-clock benchmarking.
//!
//! Ground is the positive class. The score set is accuracy, the single-class
//! intersection-over-union of ground, and F1. IoU and F1 become undefined when
//! no element on either side is ground; those cases carry an explicit `None`
//! rather than a substituted 0 or 1, so averages over many frames never drift.
//!
//! Benchmarking runs a staged pipeline against a monotonic clock, discards
//! warmup iterations, and reports per-stage mean/p50/p99 plus end-to-end
//! throughput and a machine descriptor.

use std::ops::{Add, AddAssign};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::pillars::PointLabel;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no scored elements")]
    EmptyCounts,
    #[error("{op}: {pred} predictions vs {truth} labels")]
    LengthMismatch {
        op: &'static str,
        pred: usize,
        truth: usize,
    },
    #[error("{op}: invalid parameter: {detail}")]
    InvalidParam { op: &'static str, detail: String },
}

/// Elementwise tallies with ground as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub true_positive: u64,
    pub true_negative: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }

    pub fn tally(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.true_positive += 1,
            (false, false) => self.true_negative += 1,
            (true, false) => self.false_positive += 1,
            (false, true) => self.false_negative += 1,
        }
    }
}

/// Partial counts from concurrent shards merge by addition.
impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, rhs: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            true_positive: self.true_positive + rhs.true_positive,
            true_negative: self.true_negative + rhs.true_negative,
            false_positive: self.false_positive + rhs.false_positive,
            false_negative: self.false_negative + rhs.false_negative,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: ConfusionCounts) {
        *self = *self + rhs;
    }
}

/// Tallies prediction/truth pairs, skipping pairs where either side is
/// unscored (out-of-range points, or cells excluded from truth).
pub fn accumulate(
    pred: &[PointLabel],
    truth: &[PointLabel],
) -> Result<ConfusionCounts, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            op: "accumulate",
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = match (p, t) {
            (PointLabel::Unscored, _) | (_, PointLabel::Unscored) => continue,
            (p, t) => (p == PointLabel::Ground, t == PointLabel::Ground),
        };
        counts.tally(p, t);
    }
    Ok(counts)
}

/// Derived scores. `ground_iou` is the single-class IoU of ground, reported
/// in some of the literature as "mIoU"; [`Scores::miou`] keeps that alias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub accuracy: f64,
    /// `TP / (TP + FP + FN)`; `None` when the denominator is zero.
    pub ground_iou: Option<f64>,
    /// `2 TP / (2 TP + FP + FN)`; `None` when the denominator is zero.
    pub f1: Option<f64>,
}

impl Scores {
    pub fn miou(&self) -> Option<f64> {
        self.ground_iou
    }
}

/// Computes accuracy, ground-IoU, and F1 from counts.
pub fn scores(c: &ConfusionCounts) -> Result<Scores, MetricsError> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let tp = c.true_positive as f64;
    let iou_den = c.true_positive + c.false_positive + c.false_negative;
    let f1_den = 2 * c.true_positive + c.false_positive + c.false_negative;
    Ok(Scores {
        accuracy: (tp + c.true_negative as f64) / total as f64,
        ground_iou: (iou_den > 0).then(|| tp / iou_den as f64),
        f1: (f1_den > 0).then(|| 2.0 * tp / f1_den as f64),
    })
}

/// Scores at both granularities for one evaluation run.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Counts over occupied pillars.
    pub pillar: ConfusionCounts,
    /// Counts over in-range points.
    pub point: ConfusionCounts,
    /// Points excluded from scoring because they fall outside the grid.
    pub excluded_points: u64,
    pub config_hash: u64,
}

impl EvalReport {
    /// Aligned human-readable table; undefined scores render as `undefined`.
    pub fn table(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
        }
        fn row(level: &str, c: &ConfusionCounts) -> String {
            match scores(c) {
                Ok(s) => format!(
                    "{level:<8} {:>10} {:>10} {:>10} {:>10} {:>9.4} {:>10} {:>9}",
                    c.true_positive,
                    c.true_negative,
                    c.false_positive,
                    c.false_negative,
                    s.accuracy,
                    opt(s.ground_iou),
                    opt(s.f1),
                ),
                Err(_) => format!("{level:<8} no scored elements"),
            }
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>10} {:>10} {:>10} {:>10} {:>9} {:>10} {:>9}\n",
            "level", "TP", "TN", "FP", "FN", "accuracy", "groundIoU", "F1"
        ));
        out.push_str(&row("pillar", &self.pillar));
        out.push('\n');
        out.push_str(&row("point", &self.point));
        out.push('\n');
        out.push_str(&format!(
            "out-of-range points excluded from scoring: {}\n",
            self.excluded_points
        ));
        out.push_str(&format!("config hash: {:016x}\n", self.config_hash));
        out
    }

    /// Machine-readable form: counts plus derived scores, `null` where
    /// undefined.
    pub fn json(&self) -> serde_json::Value {
        fn level(c: &ConfusionCounts) -> serde_json::Value {
            let derived = scores(c).ok();
            serde_json::json!({
                "counts": c,
                "scores": derived,
            })
        }
        serde_json::json!({
            "pillar": level(&self.pillar),
            "point": level(&self.point),
            "excluded_points": self.excluded_points,
            "config_hash": format!("{:016x}", self.config_hash),
        })
    }
}

/// Pipeline stages timed individually by [`bench`], in execution order.
pub const STAGES: [&str; 6] = [
    "undersample",
    "normals",
    "pillarize",
    "encode",
    "forward",
    "propagate",
];

/// A benchable pipeline: `begin_frame` prepares (untimed) frame state, then
/// the six stage methods run in [`STAGES`] order, each timed separately.
pub trait BenchPipeline {
    fn begin_frame(&mut self, frame: usize);
    fn undersample(&mut self);
    fn normals(&mut self);
    fn pillarize(&mut self);
    fn encode(&mut self);
    fn forward(&mut self);
    fn propagate(&mut self);
    fn config_hash(&self) -> u64 {
        0
    }
}

/// Sample statistics in seconds over all timed frame executions.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StageStats {
    pub mean_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
}

impl StageStats {
    fn from_samples(samples: &[f64]) -> StageStats {
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        StageStats {
            mean_s: samples.iter().sum::<f64>() / samples.len() as f64,
            p50_s: percentile(&sorted, 50.0),
            p99_s: percentile(&sorted, 99.0),
        }
    }
}

/// Nearest-rank percentile over an ascending-sorted sample set.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    /// Per-stage statistics in [`STAGES`] order.
    pub stages: Vec<(&'static str, StageStats)>,
    pub end_to_end: StageStats,
    /// Frames per second from the end-to-end mean.
    pub hz: f64,
    pub frames: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub machine: String,
    pub config_hash: u64,
}

impl BenchReport {
    /// Sum of per-stage means; within 10% of the end-to-end mean (the
    /// remainder is stage-accounting overhead).
    pub fn stage_mean_sum(&self) -> f64 {
        self.stages.iter().map(|(_, s)| s.mean_s).sum()
    }

    /// Aligned human-readable table, times in milliseconds.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>10}\n",
            "stage", "mean ms", "p50 ms", "p99 ms"
        ));
        for (name, s) in &self.stages {
            out.push_str(&format!(
                "{:<12} {:>10.4} {:>10.4} {:>10.4}\n",
                name,
                s.mean_s * 1e3,
                s.p50_s * 1e3,
                s.p99_s * 1e3,
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}\n",
            "end-to-end",
            self.end_to_end.mean_s * 1e3,
            self.end_to_end.p50_s * 1e3,
            self.end_to_end.p99_s * 1e3,
        ));
        out.push_str(&format!("throughput: {:.1} Hz\n", self.hz));
        out.push_str(&format!(
            "frames: {}  warmup: {}  repetitions: {}\n",
            self.frames, self.warmup, self.repetitions
        ));
        out.push_str(&format!("machine: {}\n", self.machine));
        out.push_str(&format!("config hash: {:016x}\n", self.config_hash));
        out
    }
}

/// Describes the host: architecture, OS, and logical CPU count.
pub fn machine_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(0, |n| n.get());
    format!(
        "{}-{}, {} logical cpus",
        std::env::consts::ARCH,
        std::env::consts::OS,
        threads
    )
}

/// Runs `warmup` untimed frame executions, then `reps` timed passes over
/// `frames` frames, timing each stage and the stage-to-stage total per frame.
pub fn bench<P: BenchPipeline>(
    pipeline: &mut P,
    frames: usize,
    warmup: usize,
    reps: usize,
) -> Result<BenchReport, MetricsError> {
    if reps == 0 {
        return Err(MetricsError::InvalidParam {
            op: "bench",
            detail: "repetitions must be positive".into(),
        });
    }
    if frames == 0 {
        return Err(MetricsError::InvalidParam {
            op: "bench",
            detail: "frame count must be positive".into(),
        });
    }
    let run_stage = |p: &mut P, stage: usize| match stage {
        0 => p.undersample(),
        1 => p.normals(),
        2 => p.pillarize(),
        3 => p.encode(),
        4 => p.forward(),
        _ => p.propagate(),
    };
    for i in 0..warmup {
        pipeline.begin_frame(i % frames);
        for stage in 0..STAGES.len() {
            run_stage(pipeline, stage);
        }
    }
    let mut stage_samples = vec![Vec::with_capacity(reps * frames); STAGES.len()];
    let mut total_samples = Vec::with_capacity(reps * frames);
    for _ in 0..reps {
        for frame in 0..frames {
            pipeline.begin_frame(frame);
            let start = Instant::now();
            for (stage, samples) in stage_samples.iter_mut().enumerate() {
                let t = Instant::now();
                run_stage(pipeline, stage);
                samples.push(t.elapsed().as_secs_f64());
            }
            total_samples.push(start.elapsed().as_secs_f64());
        }
    }
    let end_to_end = StageStats::from_samples(&total_samples);
    Ok(BenchReport {
        stages: STAGES
            .iter()
            .zip(&stage_samples)
            .map(|(&name, samples)| (name, StageStats::from_samples(samples)))
            .collect(),
        end_to_end,
        hz: 1.0 / end_to_end.mean_s,
        frames,
        warmup,
        repetitions: reps,
        machine: machine_descriptor(),
        config_hash: pipeline.config_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn labels(bits: &[u8]) -> Vec<PointLabel> {
        bits.iter()
            .map(|&b| {
                if b == 1 {
                    PointLabel::Ground
                } else {
                    PointLabel::NonGround
                }
            })
            .collect()
    }

    #[test]
    fn accumulate_tallies_all_quadrants() {
        let c = accumulate(&labels(&[1, 1, 1, 1]), &labels(&[1, 1, 1, 1])).unwrap();
        assert_eq!((c.true_positive, c.total()), (4, 4));

        let c = accumulate(&labels(&[1, 1, 1, 1]), &labels(&[0, 0, 0, 0])).unwrap();
        assert_eq!((c.false_positive, c.total()), (4, 4));

        let c = accumulate(&labels(&[1, 1, 1, 0, 0, 1]), &labels(&[1, 1, 1, 0, 1, 0])).unwrap();
        assert_eq!(c.true_positive, 3);
        assert_eq!(c.true_negative, 1);
        assert_eq!(c.false_positive, 1);
        assert_eq!(c.false_negative, 1);
    }

    #[test]
    fn accumulate_skips_unscored_on_either_side() {
        let mut pred = labels(&[1, 0, 1]);
        let mut truth = labels(&[1, 0, 0]);
        pred[2] = PointLabel::Unscored;
        let c = accumulate(&pred, &truth).unwrap();
        assert_eq!((c.true_positive, c.true_negative, c.total()), (1, 1, 2));

        truth[0] = PointLabel::Unscored;
        let c = accumulate(&pred, &truth).unwrap();
        assert_eq!((c.true_negative, c.total()), (1, 1));
    }

    #[test]
    fn accumulate_rejects_length_mismatch() {
        let err = accumulate(&labels(&[1]), &labels(&[1, 0])).unwrap_err();
        assert!(matches!(
            err,
            MetricsError::LengthMismatch { pred: 1, truth: 2, .. }
        ));
    }

    #[test]
    fn scores_follow_the_count_formulas() {
        let c = ConfusionCounts {
            true_positive: 3,
            true_negative: 1,
            false_positive: 1,
            false_negative: 1,
        };
        let s = scores(&c).unwrap();
        assert_relative_eq!(s.accuracy, 4.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(s.ground_iou.unwrap(), 0.6, max_relative = 1e-12);
        assert_relative_eq!(s.f1.unwrap(), 0.75, max_relative = 1e-12);
        assert_eq!(s.miou(), s.ground_iou);
    }

    #[test]
    fn perfect_prediction_scores_ones() {
        let c = ConfusionCounts {
            true_positive: 7,
            true_negative: 5,
            ..Default::default()
        };
        let s = scores(&c).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.ground_iou, Some(1.0));
        assert_eq!(s.f1, Some(1.0));
    }

    #[test]
    fn vacuous_positive_class_yields_undefined_sentinels() {
        let c = ConfusionCounts {
            true_negative: 5,
            ..Default::default()
        };
        let s = scores(&c).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.ground_iou, None);
        assert_eq!(s.f1, None);
    }

    #[test]
    fn empty_counts_error() {
        assert!(matches!(
            scores(&ConfusionCounts::default()),
            Err(MetricsError::EmptyCounts)
        ));
    }

    #[test]
    fn counts_merge_by_addition() {
        let mut a = ConfusionCounts {
            true_positive: 1,
            true_negative: 2,
            false_positive: 3,
            false_negative: 4,
        };
        let b = ConfusionCounts {
            true_positive: 10,
            true_negative: 20,
            false_positive: 30,
            false_negative: 40,
        };
        let sum = a + b;
        assert_eq!(sum.total(), 110);
        assert_eq!(sum.true_negative, 22);
        a += b;
        assert_eq!(a, sum);
    }

    #[test]
    fn percentile_uses_nearest_rank() {
        let sorted: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&sorted, 50.0), 50.0);
        assert_eq!(percentile(&sorted, 99.0), 99.0);
        assert_eq!(percentile(&sorted, 100.0), 100.0);
        assert_eq!(percentile(&[7.0], 50.0), 7.0);
    }

    struct SleepStub {
        frames_begun: usize,
    }

    impl BenchPipeline for SleepStub {
        fn begin_frame(&mut self, _frame: usize) {
            self.frames_begun += 1;
        }
        fn undersample(&mut self) {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        fn normals(&mut self) {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        fn pillarize(&mut self) {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        fn encode(&mut self) {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        fn forward(&mut self) {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        fn propagate(&mut self) {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        fn config_hash(&self) -> u64 {
            0xfeed
        }
    }

    #[test]
    fn bench_rejects_zero_repetitions_and_zero_frames() {
        let mut p = SleepStub { frames_begun: 0 };
        assert!(matches!(
            bench(&mut p, 2, 1, 0),
            Err(MetricsError::InvalidParam { .. })
        ));
        assert!(matches!(
            bench(&mut p, 0, 1, 3),
            Err(MetricsError::InvalidParam { .. })
        ));
    }

    #[test]
    fn bench_times_a_sleeping_stub() {
        let mut p = SleepStub { frames_begun: 0 };
        let report = bench(&mut p, 2, 2, 3).unwrap();
        assert_eq!(p.frames_begun, 2 + 6);
        assert_eq!(report.stages.len(), STAGES.len());
        for (name, s) in &report.stages {
            assert!(STAGES.contains(name));
            // Sleeps only overshoot: at least 1 ms, and well under 5 ms
            // unless the scheduler is pathological.
            assert!(s.mean_s >= 1e-3, "{name} mean {}", s.mean_s);
            assert!(s.mean_s < 5e-3, "{name} mean {}", s.mean_s);
            assert!(s.p50_s <= s.p99_s);
        }
        assert!(report.end_to_end.mean_s >= 6e-3);
        let ratio = report.stage_mean_sum() / report.end_to_end.mean_s;
        assert!((ratio - 1.0).abs() < 0.10, "stage sum ratio {ratio}");
        assert_relative_eq!(report.hz, 1.0 / report.end_to_end.mean_s, max_relative = 1e-12);
        assert_eq!(report.config_hash, 0xfeed);
        assert!(report.machine.contains("cpus"));
    }

    #[test]
    fn report_tables_render() {
        let eval = EvalReport {
            pillar: ConfusionCounts {
                true_positive: 3,
                true_negative: 1,
                false_positive: 1,
                false_negative: 1,
            },
            point: ConfusionCounts {
                true_negative: 5,
                ..Default::default()
            },
            excluded_points: 17,
            config_hash: 0xabcd,
        };
        let table = eval.table();
        assert!(table.contains("0.6667"));
        assert!(table.contains("undefined"));
        assert!(table.contains("excluded from scoring: 17"));
        let json = eval.json();
        assert_eq!(json["point"]["scores"]["ground_iou"], serde_json::Value::Null);
        assert_eq!(json["pillar"]["counts"]["true_positive"], 3);

        let mut p = SleepStub { frames_begun: 0 };
        let bench_table = bench(&mut p, 1, 0, 1).unwrap().table();
        assert!(bench_table.contains("end-to-end"));
        assert!(bench_table.contains("throughput"));
    }
}
