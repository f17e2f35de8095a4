//! Distribution-controlled undersampling.
//!
//! The x-y plane is split into square rings ("sections") of width `d` by
//! Chebyshev distance `l = max(|x|, |y|)` from the sensor. Sparse sections
//! get higher keep-weights, `s_j = 2*max(Sec) - Sec_j`, so far-range points
//! survive reduction to a global budget. The weights are turned into
//! per-section keep probabilities `p_j = min(1, lambda * s_j)` with `lambda`
//! solved by bisection so the expected kept total equals the budget.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lidar_io::PointCloud;

/// Default outer range, meters; matches the pillar grid extent.
pub const DEFAULT_RANGE_MAX: f64 = 51.2;
/// Default section interval, meters.
pub const DEFAULT_SECTION_INTERVAL: f64 = 0.8;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("histogram has no in-range points")]
    EmptyHistogram,
}

/// Per-section point tallies plus the point-to-section map.
#[derive(Debug, Clone)]
pub struct SectionHistogram {
    /// Section interval, meters.
    pub interval: f64,
    /// `counts[j]` = points whose Chebyshev distance falls in `[j*d, (j+1)*d)`.
    pub counts: Vec<usize>,
    /// Section index per input point; `None` for points at or beyond `range_max`.
    pub section_of: Vec<Option<usize>>,
    /// Number of excluded (out-of-range) points.
    pub excluded: usize,
}

impl SectionHistogram {
    pub fn in_range(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Keep-weights per section, anti-monotone in the counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionWeights {
    pub weights: Vec<f64>,
}

/// Bins points into square rings by `j = floor(max(|x|,|y|) / d)`.
/// Points with `l >= range_max` are excluded and counted.
pub fn build_sections(
    cloud: &PointCloud,
    d: f64,
    range_max: f64,
) -> Result<SectionHistogram, SamplingError> {
    if !(d > 0.0) {
        return Err(SamplingError::InvalidParam(format!(
            "section interval must be > 0, got {d}"
        )));
    }
    if !(range_max > 0.0) {
        return Err(SamplingError::InvalidParam(format!(
            "range_max must be > 0, got {range_max}"
        )));
    }
    let m = (range_max / d).ceil() as usize;
    let mut counts = vec![0usize; m];
    let mut section_of = Vec::with_capacity(cloud.len());
    let mut excluded = 0usize;
    for p in &cloud.points {
        let l = p.x.abs().max(p.y.abs());
        if l >= range_max {
            section_of.push(None);
            excluded += 1;
            continue;
        }
        let j = ((l / d).floor() as usize).min(m - 1);
        counts[j] += 1;
        section_of.push(Some(j));
    }
    Ok(SectionHistogram {
        interval: d,
        counts,
        section_of,
        excluded,
    })
}

/// `s_j = 2 * max(Sec) - Sec_j`. Sparse sections weigh more; the ordering is
/// strictly anti-monotone in the counts.
pub fn section_weights(hist: &SectionHistogram) -> Result<SectionWeights, SamplingError> {
    let max = *hist
        .counts
        .iter()
        .max()
        .ok_or(SamplingError::EmptyHistogram)?;
    if max == 0 {
        return Err(SamplingError::EmptyHistogram);
    }
    let weights = hist
        .counts
        .iter()
        .map(|&c| (2 * max - c) as f64)
        .collect();
    Ok(SectionWeights { weights })
}

/// Solves for `lambda` such that `sum_j min(1, lambda * s_j) * n_j = budget`
/// by bisection. Caller guarantees `budget <= sum n_j` and some `n_j > 0`.
fn waterfill_lambda(weights: &[f64], counts: &[usize], budget: usize) -> f64 {
    let expected = |lambda: f64| -> f64 {
        weights
            .iter()
            .zip(counts)
            .map(|(&s, &n)| (lambda * s).min(1.0) * n as f64)
            .sum()
    };
    // Upper bound: the smallest positive weight saturated means everything is kept.
    let min_w = weights
        .iter()
        .zip(counts)
        .filter(|(_, &n)| n > 0)
        .map(|(&s, _)| s)
        .fold(f64::INFINITY, f64::min);
    let mut lo = 0.0f64;
    let mut hi = 1.0 / min_w;
    let target = budget as f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Turns real-valued per-section quotas into integers summing to `budget`
/// (largest-remainder repair), capped at the section counts.
fn integer_quotas(real: &[f64], counts: &[usize], budget: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::with_capacity(real.len());
    let mut fracs: Vec<(usize, f64)> = Vec::new();
    let mut total = 0usize;
    for (j, (&x, &n)) in real.iter().zip(counts).enumerate() {
        let x = x.clamp(0.0, n as f64);
        let base = x.floor() as usize;
        keep.push(base.min(n));
        total += keep[j];
        if keep[j] < n {
            fracs.push((j, x - base as f64));
        }
    }
    // Largest fractional remainder first; ties resolved by ascending section index.
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut deficit = budget.saturating_sub(total);
    for (j, _) in fracs {
        if deficit == 0 {
            break;
        }
        if keep[j] < counts[j] {
            keep[j] += 1;
            deficit -= 1;
        }
    }
    keep
}

/// Reduces `cloud` to at most `budget` points, keeping sparse (far) sections
/// at higher rates. Clouds already within budget pass through unchanged.
/// Within a section the selection is uniform without replacement; the result
/// preserves input point order and labels follow their points. Points at or
/// beyond `range_max` are dropped when sampling takes place.
pub fn undersample(
    cloud: &PointCloud,
    budget: usize,
    d: f64,
    range_max: f64,
    seed: u64,
) -> Result<PointCloud, SamplingError> {
    if budget == 0 {
        return Err(SamplingError::InvalidParam("budget must be > 0".into()));
    }
    if cloud.len() <= budget {
        return Ok(cloud.clone());
    }
    let hist = build_sections(cloud, d, range_max)?;
    let weights = section_weights(&hist)?;
    let in_range = hist.in_range();
    if in_range <= budget {
        let keep: Vec<usize> = (0..cloud.len())
            .filter(|&i| hist.section_of[i].is_some())
            .collect();
        return Ok(cloud.subset(&keep));
    }

    let lambda = waterfill_lambda(&weights.weights, &hist.counts, budget);
    let real: Vec<f64> = weights
        .weights
        .iter()
        .zip(&hist.counts)
        .map(|(&s, &n)| (lambda * s).min(1.0) * n as f64)
        .collect();
    let quotas = integer_quotas(&real, &hist.counts, budget);

    // Points of each section, in input order.
    let m = hist.counts.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, sec) in hist.section_of.iter().enumerate() {
        if let Some(j) = *sec {
            members[j].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(budget);
    for (j, idxs) in members.iter().enumerate() {
        let q = quotas[j];
        if q >= idxs.len() {
            keep.extend_from_slice(idxs);
        } else if q > 0 {
            let chosen = rand::seq::index::sample(&mut rng, idxs.len(), q);
            keep.extend(chosen.iter().map(|c| idxs[c]));
        }
    }
    keep.sort_unstable();
    Ok(cloud.subset(&keep))
}

/// Plain uniform without-replacement undersampling to `budget` (the baseline
/// the controlled sampler is compared against). Preserves input order.
pub fn undersample_uniform(
    cloud: &PointCloud,
    budget: usize,
    seed: u64,
) -> Result<PointCloud, SamplingError> {
    if budget == 0 {
        return Err(SamplingError::InvalidParam("budget must be > 0".into()));
    }
    if cloud.len() <= budget {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = rand::seq::index::sample(&mut rng, cloud.len(), budget).into_vec();
    keep.sort_unstable();
    Ok(cloud.subset(&keep))
}
