//! Network assembly: pillar encoder, scatter, and the attention U-Net.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::PillarBatch;
use super::ModelError;
use crate::neuralnet::complexity::{self, ComplexityReport};
use crate::neuralnet::{
    Cbam, Conv2d, Dsc, Layer, LinearBnRelu, MaxPool2, NnError, Param, Scalar, Tensor,
    UpsampleBilinear2,
};
use crate::parallel;

/// Channel reduction inside the attention blocks.
pub const CBAM_REDUCTION: usize = 16;
/// Spatial-attention kernel size.
pub const CBAM_KERNEL: usize = 7;

/// Static architecture description.
///
/// `ladder` holds the output channels of the three encoder levels and the
/// bottleneck: level `l` maps `ladder[l-1]` (or the encoder width for level
/// 1) to `ladder[l]`. The decoder mirrors it, concatenating each upsampled
/// tensor with the skip of matching resolution: merges
/// `ladder[3]+ladder[2] -> ladder[2]`, `ladder[2]+ladder[1] -> ladder[1]`,
/// `ladder[1]+ladder[0] -> ladder[0]`, then a 1x1 head to one logit channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Use all 12 point features; `false` drops the 3 normal components.
    pub with_normals: bool,
    /// Pseudo-image channels produced by the pillar encoder.
    pub encoder_channels: usize,
    /// (enc1, enc2, enc3, bottleneck) output channels.
    pub ladder: [usize; 4],
    /// Attach CBAM after each encoder block.
    pub attention: bool,
    /// Grid (rows, cols); both divisible by 8 for three pool levels.
    pub dims: (usize, usize),
    /// Pillar point capacity; only used for the complexity accounting
    /// convention (dense batches are costed at full capacity).
    pub max_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            with_normals: true,
            encoder_channels: 64,
            ladder: [64, 64, 128, 256],
            attention: true,
            dims: (128, 128),
            max_points: 64,
        }
    }
}

impl ModelConfig {
    pub fn features(&self) -> usize {
        if self.with_normals {
            crate::pillars::FEATURES
        } else {
            crate::pillars::FEATURES_NO_NORMALS
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (rows, cols) = self.dims;
        if rows == 0 || cols == 0 || rows % 8 != 0 || cols % 8 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "grid dims {rows}x{cols} must be positive multiples of 8"
            )));
        }
        if self.encoder_channels == 0 || self.ladder.contains(&0) {
            return Err(ModelError::InvalidConfig("zero channel width".into()));
        }
        if self.max_points == 0 {
            return Err(ModelError::InvalidConfig("max_points must be >= 1".into()));
        }
        if self.attention && self.ladder[..3].iter().any(|&c| c < CBAM_REDUCTION) {
            return Err(ModelError::InvalidConfig(format!(
                "attention requires encoder widths >= {CBAM_REDUCTION}"
            )));
        }
        Ok(())
    }

    /// Spatial sizes along the forward pass: input, after each pool, then
    /// after each upsample.
    pub fn spatial_ladder(&self) -> [(usize, usize); 7] {
        let (r, c) = self.dims;
        [
            (r, c),
            (r / 2, c / 2),
            (r / 4, c / 4),
            (r / 8, c / 8),
            (r / 4, c / 4),
            (r / 2, c / 2),
            (r, c),
        ]
    }
}

/// Two chained depthwise-separable conv blocks.
#[derive(Debug, Clone)]
struct DoubleDsc<T> {
    first: Dsc<T>,
    second: Dsc<T>,
}

impl<T: Scalar> DoubleDsc<T> {
    fn new(in_channels: usize, out_channels: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            first: Dsc::new(in_channels, out_channels, rng),
            second: Dsc::new(out_channels, out_channels, rng),
        }
    }
}

impl<T: Scalar> Layer<T> for DoubleDsc<T> {
    fn forward(&mut self, input: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        let y = self.first.forward(input, training)?;
        self.second.forward(&y, training)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let g = self.second.backward(grad_out);
        self.first.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.first.visit_params(&format!("{prefix}.0"), visit);
        self.second.visit_params(&format!("{prefix}.1"), visit);
    }

    fn visit_buffers(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.first.visit_buffers(&format!("{prefix}.0"), visit);
        self.second.visit_buffers(&format!("{prefix}.1"), visit);
    }
}

/// Concatenates along the channel axis; shapes must agree elsewhere.
fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch mismatch");
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    let dst = out.as_mut_slice();
    let (sa, sb) = (a.as_slice(), b.as_slice());
    for s in 0..n {
        let dst_off = s * (ca + cb) * plane;
        dst[dst_off..dst_off + ca * plane]
            .copy_from_slice(&sa[s * ca * plane..(s + 1) * ca * plane]);
        dst[dst_off + ca * plane..dst_off + (ca + cb) * plane]
            .copy_from_slice(&sb[s * cb * plane..(s + 1) * cb * plane]);
    }
    out
}

/// Splits a channel-concatenated gradient back into its two parts.
fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = g.dims4();
    assert!(ca < c, "split at {ca} of {c} channels");
    let cb = c - ca;
    let plane = h * w;
    let mut a = Tensor::zeros(&[n, ca, h, w]);
    let mut b = Tensor::zeros(&[n, cb, h, w]);
    let src = g.as_slice();
    for s in 0..n {
        let src_off = s * c * plane;
        a.as_mut_slice()[s * ca * plane..(s + 1) * ca * plane]
            .copy_from_slice(&src[src_off..src_off + ca * plane]);
        b.as_mut_slice()[s * cb * plane..(s + 1) * cb * plane]
            .copy_from_slice(&src[src_off + ca * plane..src_off + c * plane]);
    }
    (a, b)
}

/// Routing state saved by `encode_pillars` for the backward pass.
struct EncodeSaved {
    /// Packed-row index chosen by the max, one per (pillar, channel).
    argmax: Vec<usize>,
    packed_rows: usize,
    frame_of_pillar: Vec<usize>,
    coords: Vec<(usize, usize)>,
    batch_frames: usize,
}

/// The assembled network. See the module docs for the dataflow; all state
/// needed by `backward` is captured by the layers during `forward`.
pub struct GsecNet<T: Scalar> {
    pub config: ModelConfig,
    encoder: LinearBnRelu<T>,
    enc1: DoubleDsc<T>,
    cbam1: Option<Cbam<T>>,
    pool1: MaxPool2,
    enc2: DoubleDsc<T>,
    cbam2: Option<Cbam<T>>,
    pool2: MaxPool2,
    enc3: DoubleDsc<T>,
    cbam3: Option<Cbam<T>>,
    pool3: MaxPool2,
    bottleneck: DoubleDsc<T>,
    up1: UpsampleBilinear2,
    dec1: DoubleDsc<T>,
    up2: UpsampleBilinear2,
    dec2: DoubleDsc<T>,
    up3: UpsampleBilinear2,
    dec3: DoubleDsc<T>,
    head: Conv2d<T>,
    encode_saved: Option<EncodeSaved>,
}

impl<T: Scalar> std::fmt::Debug for GsecNet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GsecNet")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> GsecNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let [l0, l1, l2, l3] = config.ladder;
        let ec = config.encoder_channels;
        let cbam = |c: usize, r: &mut ChaCha8Rng| {
            config
                .attention
                .then(|| Cbam::new(c, CBAM_REDUCTION, CBAM_KERNEL, r))
        };
        Ok(Self {
            encoder: LinearBnRelu::new(config.features(), ec, r),
            enc1: DoubleDsc::new(ec, l0, r),
            cbam1: cbam(l0, r),
            pool1: MaxPool2::new(),
            enc2: DoubleDsc::new(l0, l1, r),
            cbam2: cbam(l1, r),
            pool2: MaxPool2::new(),
            enc3: DoubleDsc::new(l1, l2, r),
            cbam3: cbam(l2, r),
            pool3: MaxPool2::new(),
            bottleneck: DoubleDsc::new(l2, l3, r),
            up1: UpsampleBilinear2::new(),
            dec1: DoubleDsc::new(l3 + l2, l2, r),
            up2: UpsampleBilinear2::new(),
            dec2: DoubleDsc::new(l2 + l1, l1, r),
            up3: UpsampleBilinear2::new(),
            dec3: DoubleDsc::new(l1 + l0, l0, r),
            head: Conv2d::new(l0, 1, 1, 1, true, r),
            config,
            encode_saved: None,
        })
    }

    /// Lifts each pillar's points through the per-point encoder, takes the
    /// max over each pillar's valid points, and scatters the pillar vectors
    /// to their cells: `[frames, channels, rows, cols]`, vacant cells zero.
    pub fn encode_pillars(
        &mut self,
        batch: &PillarBatch<T>,
        training: bool,
    ) -> Result<Tensor<T>, ModelError> {
        batch.validate()?;
        if batch.dims != self.config.dims {
            return Err(ModelError::BadBatch(format!(
                "batch grid {:?} vs model grid {:?}",
                batch.dims, self.config.dims
            )));
        }
        if batch.feature_count() != self.config.features() {
            return Err(ModelError::BadBatch(format!(
                "batch has {} features, model expects {}",
                batch.feature_count(),
                self.config.features()
            )));
        }
        let c = self.config.encoder_channels;
        let (rows, cols) = self.config.dims;
        let b = batch.frame_count();
        let p = batch.pillar_count();
        let mut out = Tensor::zeros(&[b, c, rows, cols]);
        let mut frame_of_pillar = vec![0usize; p];
        for f in 0..b {
            for i in batch.frames[f]..batch.frames[f + 1] {
                frame_of_pillar[i] = f;
            }
        }
        if p == 0 {
            self.encode_saved = Some(EncodeSaved {
                argmax: Vec::new(),
                packed_rows: 0,
                frame_of_pillar,
                coords: Vec::new(),
                batch_frames: b,
            });
            return Ok(out);
        }
        let (packed, offsets) = batch.packed();
        let feats = self.encoder.forward(&packed, training)?;
        let fs = feats.as_slice();

        // Per-pillar max over valid rows; ties keep the first row so the
        // backward routing is unambiguous.
        let pooled: Vec<(Vec<T>, Vec<usize>)> = parallel::map_indexed(p, |i| {
            let (lo, hi) = (offsets[i], offsets[i + 1]);
            let mut best = fs[lo * c..(lo + 1) * c].to_vec();
            let mut arg = vec![lo; c];
            for row in lo + 1..hi {
                for (ch, v) in fs[row * c..(row + 1) * c].iter().enumerate() {
                    if *v > best[ch] {
                        best[ch] = *v;
                        arg[ch] = row;
                    }
                }
            }
            (best, arg)
        });

        let plane = rows * cols;
        let dst = out.as_mut_slice();
        let mut argmax = Vec::with_capacity(p * c);
        for (i, (vec, arg)) in pooled.into_iter().enumerate() {
            let (row, col) = batch.coords[i];
            let base = frame_of_pillar[i] * c * plane + row * cols + col;
            for (ch, v) in vec.into_iter().enumerate() {
                dst[base + ch * plane] = v;
            }
            argmax.extend_from_slice(&arg);
        }
        self.encode_saved = Some(EncodeSaved {
            argmax,
            packed_rows: offsets[p],
            frame_of_pillar,
            coords: batch.coords.clone(),
            batch_frames: b,
        });
        Ok(out)
    }

    /// The dense half: pseudo-image in, logit map out.
    pub fn forward_map(&mut self, map: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        let s1 = self.enc1.forward(map, training)?;
        let s1 = match self.cbam1.as_mut() {
            Some(cb) => cb.forward(&s1, training)?,
            None => s1,
        };
        let x = self.pool1.forward(&s1, training)?;
        let s2 = self.enc2.forward(&x, training)?;
        let s2 = match self.cbam2.as_mut() {
            Some(cb) => cb.forward(&s2, training)?,
            None => s2,
        };
        let x = self.pool2.forward(&s2, training)?;
        let s3 = self.enc3.forward(&x, training)?;
        let s3 = match self.cbam3.as_mut() {
            Some(cb) => cb.forward(&s3, training)?,
            None => s3,
        };
        let x = self.pool3.forward(&s3, training)?;
        let x = self.bottleneck.forward(&x, training)?;
        let x = self.up1.forward(&x, training)?;
        let x = self.dec1.forward(&concat_channels(&x, &s3), training)?;
        let x = self.up2.forward(&x, training)?;
        let x = self.dec2.forward(&concat_channels(&x, &s2), training)?;
        let x = self.up3.forward(&x, training)?;
        let x = self.dec3.forward(&concat_channels(&x, &s1), training)?;
        self.head.forward(&x, training)
    }

    /// Full forward: encode, scatter, U-Net. Logits `[frames, 1, rows, cols]`.
    pub fn forward(
        &mut self,
        batch: &PillarBatch<T>,
        training: bool,
    ) -> Result<Tensor<T>, ModelError> {
        let map = self.encode_pillars(batch, training)?;
        Ok(self.forward_map(&map, training)?)
    }

    /// Backward through the U-Net only; returns the pseudo-image gradient.
    /// Each decoder gradient splits into the upsample path and a skip
    /// contribution that re-enters its encoder level after the pool.
    pub fn backward_map(&mut self, grad_logits: &Tensor<T>) -> Tensor<T> {
        let [_, l1, l2, l3] = self.config.ladder;
        let g = self.head.backward(grad_logits);
        let g = self.dec3.backward(&g);
        let (gu, gs1_skip) = split_channels(&g, l1);
        let g = self.up3.backward(&gu);
        let g = self.dec2.backward(&g);
        let (gu, gs2_skip) = split_channels(&g, l2);
        let g = self.up2.backward(&gu);
        let g = self.dec1.backward(&g);
        let (gu, gs3_skip) = split_channels(&g, l3);
        let g = self.up1.backward(&gu);
        let g = self.bottleneck.backward(&g);
        let mut gs3 = self.pool3.backward(&g);
        gs3.add_assign(&gs3_skip);
        let g = match self.cbam3.as_mut() {
            Some(cb) => cb.backward(&gs3),
            None => gs3,
        };
        let g = self.enc3.backward(&g);
        let mut gs2 = self.pool2.backward(&g);
        gs2.add_assign(&gs2_skip);
        let g = match self.cbam2.as_mut() {
            Some(cb) => cb.backward(&gs2),
            None => gs2,
        };
        let g = self.enc2.backward(&g);
        let mut gs1 = self.pool1.backward(&g);
        gs1.add_assign(&gs1_skip);
        let g = match self.cbam1.as_mut() {
            Some(cb) => cb.backward(&gs1),
            None => gs1,
        };
        self.enc1.backward(&g)
    }

    /// Backward through the full network from the logit gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) {
        let gmap = self.backward_map(grad_logits);
        let saved = self
            .encode_saved
            .take()
            .expect("backward before encode_pillars");
        if saved.packed_rows == 0 {
            return;
        }
        let c = self.config.encoder_channels;
        let (rows, cols) = self.config.dims;
        let plane = rows * cols;
        let gm = gmap.as_slice();
        let mut grad_packed = Tensor::zeros(&[saved.packed_rows, c]);
        let gp = grad_packed.as_mut_slice();
        for (i, &(row, col)) in saved.coords.iter().enumerate() {
            let base = saved.frame_of_pillar[i] * c * plane + row * cols + col;
            for ch in 0..c {
                gp[saved.argmax[i * c + ch] * c + ch] += gm[base + ch * plane];
            }
        }
        let _ = saved.batch_frames;
        self.encoder.backward(&grad_packed);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.grad.fill(T::zero()));
    }

    pub fn param_count(&mut self) -> u64 {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len() as u64);
        n
    }

    pub fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.encoder.visit_params(&p("encoder"), visit);
        self.enc1.visit_params(&p("enc1"), visit);
        if let Some(cb) = self.cbam1.as_mut() {
            cb.visit_params(&p("cbam1"), visit);
        }
        self.enc2.visit_params(&p("enc2"), visit);
        if let Some(cb) = self.cbam2.as_mut() {
            cb.visit_params(&p("cbam2"), visit);
        }
        self.enc3.visit_params(&p("enc3"), visit);
        if let Some(cb) = self.cbam3.as_mut() {
            cb.visit_params(&p("cbam3"), visit);
        }
        self.bottleneck.visit_params(&p("bottleneck"), visit);
        self.dec1.visit_params(&p("dec1"), visit);
        self.dec2.visit_params(&p("dec2"), visit);
        self.dec3.visit_params(&p("dec3"), visit);
        self.head.visit_params(&p("head"), visit);
    }

    pub fn visit_buffers(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.encoder.visit_buffers(&p("encoder"), visit);
        self.enc1.visit_buffers(&p("enc1"), visit);
        self.enc2.visit_buffers(&p("enc2"), visit);
        self.enc3.visit_buffers(&p("enc3"), visit);
        self.bottleneck.visit_buffers(&p("bottleneck"), visit);
        self.dec1.visit_buffers(&p("dec1"), visit);
        self.dec2.visit_buffers(&p("dec2"), visit);
        self.dec3.visit_buffers(&p("dec3"), visit);
        self.head.visit_buffers(&p("head"), visit);
    }

    /// Closed-form parameter and MAC accounting. The dense pillar encoder is
    /// costed at full capacity (`cells x max_points` rows); in practice only
    /// occupied pillars with valid points are computed, so the real encode
    /// cost is far lower — the convention matches dense reference
    /// implementations. Per-stage spatial sizes follow the pool ladder.
    pub fn complexity(&self) -> ComplexityReport {
        let cfg = &self.config;
        let [l0, l1, l2, l3] = cfg.ladder.map(|c| c as u64);
        let ec = cfg.encoder_channels as u64;
        let (rows, cols) = (cfg.dims.0 as u64, cfg.dims.1 as u64);
        let dense_rows = rows * cols * cfg.max_points as u64;
        let mut report = ComplexityReport::default();
        report.add(
            "encoder.linear",
            complexity::linear(cfg.features() as u64, ec, dense_rows, true),
        );
        report.add("encoder.bn", complexity::batch_norm(ec, dense_rows * ec));

        let double = |report: &mut ComplexityReport, name: &str, cin, cout, h, w| {
            report.add(&format!("{name}.0"), complexity::dsc(cin, cout, h, w));
            report.add(&format!("{name}.0.bn"), complexity::batch_norm(cout, cout * h * w));
            report.add(&format!("{name}.1"), complexity::dsc(cout, cout, h, w));
            report.add(&format!("{name}.1.bn"), complexity::batch_norm(cout, cout * h * w));
        };
        let cbam = |report: &mut ComplexityReport, name: &str, c, h, w| {
            report.add(
                name,
                complexity::cbam(c, CBAM_REDUCTION as u64, CBAM_KERNEL as u64, h, w),
            );
        };
        let (h1, w1) = (rows, cols);
        let (h2, w2) = (rows / 2, cols / 2);
        let (h3, w3) = (rows / 4, cols / 4);
        let (h4, w4) = (rows / 8, cols / 8);
        double(&mut report, "enc1", ec, l0, h1, w1);
        if cfg.attention {
            cbam(&mut report, "cbam1", l0, h1, w1);
        }
        double(&mut report, "enc2", l0, l1, h2, w2);
        if cfg.attention {
            cbam(&mut report, "cbam2", l1, h2, w2);
        }
        double(&mut report, "enc3", l1, l2, h3, w3);
        if cfg.attention {
            cbam(&mut report, "cbam3", l2, h3, w3);
        }
        double(&mut report, "bottleneck", l2, l3, h4, w4);
        report.add("up1", complexity::upsample_bilinear(l3, h3, w3));
        double(&mut report, "dec1", l3 + l2, l2, h3, w3);
        report.add("up2", complexity::upsample_bilinear(l2, h2, w2));
        double(&mut report, "dec2", l2 + l1, l1, h2, w2);
        report.add("up3", complexity::upsample_bilinear(l1, h1, w1));
        double(&mut report, "dec3", l1 + l0, l0, h1, w1);
        report.add("head", complexity::conv2d(l0, 1, 1, h1, w1, true));
        report
    }

    /// Parameters and MACs split between the pillar encoder and the U-Net.
    pub fn complexity_split(&self) -> ((u64, u64), (u64, u64)) {
        let report = self.complexity();
        let mut enc = (0, 0);
        let mut unet = (0, 0);
        for e in &report.entries {
            let bucket = if e.name.starts_with("encoder") {
                &mut enc
            } else {
                &mut unet
            };
            bucket.0 += e.params;
            bucket.1 += e.macs;
        }
        (enc, unet)
    }
}
