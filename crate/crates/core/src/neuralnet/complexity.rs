//! Closed-form parameter and multiply-accumulate accounting.
//!
//! Conventions: a MAC is one multiply-accumulate; bias additions,
//! comparisons (ReLU, max-pool) and activation evaluations are free.
//! Convolution costs are counted over the zero-padded input, matching a
//! brute-force implementation that materializes the padding, so the closed
//! forms equal instrumented multiply counts exactly. Batch norm and the
//! attention gates cost one multiply per element.

/// Cost of one named layer.
#[derive(Debug, Clone)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

/// Ordered per-layer cost listing with totals.
#[derive(Debug, Clone, Default)]
pub struct ComplexityReport {
    pub entries: Vec<LayerCost>,
}

impl ComplexityReport {
    pub fn add(&mut self, name: impl Into<String>, (params, macs): (u64, u64)) {
        self.entries.push(LayerCost {
            name: name.into(),
            params,
            macs,
        });
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// Aligned human-readable table with a totals row.
    pub fn table(&self) -> String {
        let name_w = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .chain(["layer".len(), "total".len()])
            .max()
            .unwrap_or(5);
        let mut out = format!("{:<name_w$}  {:>12}  {:>14}\n", "layer", "params", "macs");
        for e in &self.entries {
            out.push_str(&format!(
                "{:<name_w$}  {:>12}  {:>14}\n",
                e.name, e.params, e.macs
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>14}\n",
            "total",
            self.total_params(),
            self.total_macs()
        ));
        out
    }
}

/// Full convolution `cin -> cout`, square kernel `k`, producing `oh x ow`.
pub fn conv2d(cin: u64, cout: u64, k: u64, oh: u64, ow: u64, bias: bool) -> (u64, u64) {
    let weights = cout * cin * k * k;
    (weights + if bias { cout } else { 0 }, oh * ow * weights)
}

/// Depthwise convolution over `c` channels, square kernel `k`.
pub fn depthwise(c: u64, k: u64, oh: u64, ow: u64) -> (u64, u64) {
    (c * k * k, oh * ow * c * k * k)
}

/// Depthwise-separable convolution weights (3x3 depthwise + 1x1 pointwise,
/// both bias-free): `9 cin + cin cout` parameters and that many MACs per
/// output position. The following batch norm is counted separately.
pub fn dsc(cin: u64, cout: u64, oh: u64, ow: u64) -> (u64, u64) {
    let weights = 9 * cin + cin * cout;
    (weights, oh * ow * weights)
}

/// Linear layer applied to `rows` rows.
pub fn linear(in_f: u64, out_f: u64, rows: u64, bias: bool) -> (u64, u64) {
    (
        in_f * out_f + if bias { out_f } else { 0 },
        rows * in_f * out_f,
    )
}

/// Batch norm over `elements` values in `c` channels: scale-and-shift is one
/// multiply per element.
pub fn batch_norm(c: u64, elements: u64) -> (u64, u64) {
    (2 * c, elements)
}

/// Attention block on a `c x h x w` map: shared MLP over the two pooled
/// descriptors, the spatial convolution over the two pooled channels, and
/// one multiply per element for each of the two gates.
pub fn cbam(c: u64, reduction: u64, spatial_k: u64, h: u64, w: u64) -> (u64, u64) {
    let hidden = c / reduction;
    let mlp_params = (c * hidden + hidden) + (hidden * c + c);
    let (spatial_params, spatial_macs) = conv2d(2, 1, spatial_k, h, w, true);
    let mlp_macs = 2 * 2 * c * hidden;
    let gate_macs = 2 * c * h * w;
    (
        mlp_params + spatial_params,
        mlp_macs + spatial_macs + gate_macs,
    )
}

/// Bilinear upsample to `c x oh x ow`: four taps per output element.
pub fn upsample_bilinear(c: u64, oh: u64, ow: u64) -> (u64, u64) {
    (0, 4 * c * oh * ow)
}
