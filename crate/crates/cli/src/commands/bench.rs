//! `bench`: stage timings over synthetic frames with the real pipeline.

use clap::Args;

use gsecnet_core::geometry::{estimate_normals, Normal};
use gsecnet_core::lidar_io::PointCloud;
use gsecnet_core::metrics::{bench, BenchPipeline};
use gsecnet_core::model::{GsecNet, PillarBatch};
use gsecnet_core::neuralnet::Tensor;
use gsecnet_core::pillars::{pillarize, propagate_to_points, PillarGrid};
use gsecnet_core::sampling::undersample;

use crate::config::RunConfig;
use crate::pipeline::synth_clouds;
use crate::{data, CliError};

#[derive(Args)]
pub struct BenchArgs {
    /// Synthetic frames to cycle through.
    #[arg(long, value_name = "N", default_value_t = 2)]
    pub frames: usize,
    /// Untimed warmup passes.
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub warmup: usize,
    /// Timed repetitions over the frame set.
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub reps: usize,
    /// Emit the report as JSON instead of the aligned table.
    #[arg(long)]
    pub json: bool,
}

/// The real pipeline staged for timing. Stage methods run in fixed order per
/// frame, so each `expect` can only trip on conditions the pre-flight pass
/// already exercised.
struct Pipeline<'a> {
    config: &'a RunConfig,
    clouds: Vec<PointCloud>,
    net: GsecNet<f32>,
    logit_threshold: f32,
    hash: u64,
    current: usize,
    reduced: Option<PointCloud>,
    normals: Option<Vec<Normal>>,
    grid: Option<PillarGrid>,
    batch: Option<PillarBatch<f32>>,
    map: Option<Tensor<f32>>,
    logits: Option<Tensor<f32>>,
}

impl BenchPipeline for Pipeline<'_> {
    fn begin_frame(&mut self, frame: usize) {
        self.current = frame % self.clouds.len();
        self.reduced = None;
        self.normals = None;
        self.grid = None;
        self.batch = None;
        self.map = None;
        self.logits = None;
    }

    fn undersample(&mut self) {
        let s = &self.config.sampling;
        let reduced = undersample(
            &self.clouds[self.current],
            s.budget,
            s.section_interval,
            s.range_max,
            self.config.seed.wrapping_add(self.current as u64),
        )
        .expect("pre-flight validated undersampling");
        self.reduced = Some(reduced);
    }

    fn normals(&mut self) {
        let cloud = self.reduced.as_ref().expect("stage order");
        let estimate = estimate_normals(cloud, &self.config.normal_config())
            .expect("pre-flight validated normal estimation");
        self.normals = Some(estimate.normals);
    }

    fn pillarize(&mut self) {
        let cloud = self.reduced.as_ref().expect("stage order");
        let normals = self.normals.as_ref().expect("stage order");
        let grid = pillarize(
            cloud,
            normals,
            &self.config.grid,
            self.config.seed.wrapping_add(self.current as u64),
        )
        .expect("pre-flight validated pillarization");
        self.batch = Some(PillarBatch::from_grid(&grid, self.config.model.with_normals));
        self.grid = Some(grid);
    }

    fn encode(&mut self) {
        let batch = self.batch.as_ref().expect("stage order");
        let map = self
            .net
            .encode_pillars(batch, false)
            .expect("pre-flight validated encoding");
        self.map = Some(map);
    }

    fn forward(&mut self) {
        let map = self.map.as_ref().expect("stage order");
        let logits = self
            .net
            .forward_map(map, false)
            .expect("pre-flight validated the forward pass");
        self.logits = Some(logits);
    }

    fn propagate(&mut self) {
        let logits = self.logits.as_ref().expect("stage order");
        let grid = self.grid.as_ref().expect("stage order");
        let prediction: Vec<bool> = logits
            .as_slice()
            .iter()
            .map(|&v| v >= self.logit_threshold)
            .collect();
        propagate_to_points(&prediction, grid).expect("pre-flight validated propagation");
    }

    fn config_hash(&self) -> u64 {
        self.hash
    }
}

pub fn run(config: &RunConfig, args: &BenchArgs) -> Result<(), CliError> {
    if args.frames == 0 || args.reps == 0 {
        return Err(CliError::Usage(
            "--frames and --reps must be at least 1".into(),
        ));
    }
    let clouds = synth_clouds(config, args.frames)?;
    let net = GsecNet::<f32>::new(config.model_config(), config.seed).map_err(data)?;
    let threshold = config.infer.threshold;
    let logit_threshold = if threshold <= 0.0 {
        f32::NEG_INFINITY
    } else if threshold >= 1.0 {
        f32::INFINITY
    } else {
        (threshold / (1.0 - threshold)).ln() as f32
    };
    let mut pipeline = Pipeline {
        config,
        clouds,
        net,
        logit_threshold,
        hash: config.hash(),
        current: 0,
        reduced: None,
        normals: None,
        grid: None,
        batch: None,
        map: None,
        logits: None,
    };
    // Pre-flight: run every stage once through the fallible path so config
    // and data problems surface as proper errors, not timed-loop panics.
    crate::pipeline::process_cloud(config, &pipeline.clouds[0], config.seed)
        .and_then(|frame| {
            let map = pipeline.net.encode_pillars(&frame.batch, false).map_err(data)?;
            let logits = pipeline.net.forward_map(&map, false).map_err(data)?;
            let prediction: Vec<bool> = logits
                .as_slice()
                .iter()
                .map(|&v| v >= logit_threshold)
                .collect();
            propagate_to_points(&prediction, &frame.grid).map_err(data)?;
            Ok(())
        })?;

    let report = bench(&mut pipeline, args.frames, args.warmup, args.reps).map_err(data)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string(&report).expect("report serializes")
        );
    } else {
        print!("{}", report.table());
    }
    Ok(())
}
