//! Information measures over filters and layers.
//!
//! Continuous weights are converted to a discrete distribution by binning
//! their range into `bin_count` equal-width bins; the Shannon entropy (natural
//! log) of the bin occupancy is the information score. The L1 norm is the
//! classic magnitude criterion. Both rank the out-filters of a layer to find
//! "invalid" ones.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{LayerKind, LayerWeights};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum RangeMode {
    /// Bins span `[min, max]` of the values being scored.
    PerTensorMinMax,
    /// Bins span `[lo, hi]`; values outside are clamped into the edge bins.
    Fixed { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BinningConfig {
    pub bin_count: usize,
    pub range: RangeMode,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            bin_count: 10,
            range: RangeMode::PerTensorMinMax,
        }
    }
}

impl BinningConfig {
    pub fn with_bins(bin_count: usize) -> Self {
        Self {
            bin_count,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_count < 2 {
            return Err(Error::config("binning.bin_count", "must be at least 2"));
        }
        if let RangeMode::Fixed { lo, hi } = self.range {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config("binning.range", "fixed range needs finite lo < hi"));
            }
        }
        Ok(())
    }
}

/// Sum of absolute values.
pub fn l1_norm_filter(filter: &[f64]) -> f64 {
    filter.iter().map(|v| libm::fabs(*v)).sum()
}

/// Bin occupancy counts. A degenerate min-max range (all values equal) puts
/// everything in bin 0.
pub fn bin_counts(values: &[f64], cfg: &BinningConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Validation("cannot bin an empty set of values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("values to bin".into()));
    }
    let b = cfg.bin_count;
    let mut counts = vec![0usize; b];
    let (lo, hi) = match cfg.range {
        RangeMode::PerTensorMinMax => values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        RangeMode::Fixed { lo, hi } => (lo, hi),
    };
    if !(hi > lo) {
        counts[0] = values.len();
        return Ok(counts);
    }
    let width = hi - lo;
    for &v in values {
        let pos = (v - lo) / width * b as f64;
        let idx = if pos <= 0.0 { 0 } else { (pos as usize).min(b - 1) };
        counts[idx] += 1;
    }
    Ok(counts)
}

/// `-sum p log p` over normalised counts; empty bins contribute nothing.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * libm::log(p)
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Binned entropy of a set of values, in nats. Lies in `[0, ln(bin_count)]`.
pub fn entropy_of_values(values: &[f64], cfg: &BinningConfig) -> Result<f64> {
    Ok(entropy_of_counts(&bin_counts(values, cfg)?))
}

/// Entropy of one filter's weights.
pub fn filter_entropy(filter: &[f64], cfg: &BinningConfig) -> Result<f64> {
    entropy_of_values(filter, cfg)
}

/// Layer information as the sum of per-filter entropies. Conv layers only.
pub fn layer_info_sum(layer: &LayerWeights, cfg: &BinningConfig) -> Result<f64> {
    if layer.kind != LayerKind::Conv {
        return Err(Error::Kind {
            layer: layer.name.clone(),
            expected: "conv",
            found: layer.kind.as_str(),
        });
    }
    row_entropy_sum(layer, cfg)
}

pub(crate) fn row_entropy_sum(layer: &LayerWeights, cfg: &BinningConfig) -> Result<f64> {
    (0..layer.out_channels()).map(|j| filter_entropy(layer.filter(j), cfg)).sum()
}

/// Entropy of the whole layer's weights binned jointly.
pub fn layer_entropy(layer: &LayerWeights, cfg: &BinningConfig) -> Result<f64> {
    entropy_of_values(layer.weights.data(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Criterion {
    L1,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum Selector {
    /// The `floor(fraction * C)` lowest-scoring filters.
    BottomFraction { fraction: f64 },
    /// Filters scoring strictly below `threshold`.
    AbsoluteThreshold { threshold: f64 },
}

impl Selector {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Selector::BottomFraction { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                Err(Error::Domain(format!("bottom fraction {fraction} not in (0, 1)")))
            }
            Selector::AbsoluteThreshold { threshold } if !(threshold >= 0.0) => {
                Err(Error::Domain(format!("threshold {threshold} is negative")))
            }
            _ => Ok(()),
        }
    }
}

/// Per out-filter scores under a criterion.
pub fn filter_scores(layer: &LayerWeights, criterion: Criterion, cfg: &BinningConfig) -> Result<Vec<f64>> {
    (0..layer.out_channels())
        .map(|j| match criterion {
            Criterion::L1 => Ok(l1_norm_filter(layer.filter(j))),
            Criterion::Entropy => filter_entropy(layer.filter(j), cfg),
        })
        .collect()
}

/// Filter indices ordered by ascending score, ties by ascending index.
pub fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Marks invalid out-filters from precomputed scores.
pub fn select_invalid(scores: &[f64], selector: &Selector) -> Result<Vec<bool>> {
    selector.validate()?;
    let mut mask = vec![false; scores.len()];
    match *selector {
        Selector::BottomFraction { fraction } => {
            let k = libm::floor(fraction * scores.len() as f64) as usize;
            for &j in ascending_order(scores).iter().take(k) {
                mask[j] = true;
            }
        }
        Selector::AbsoluteThreshold { threshold } => {
            for (m, &s) in mask.iter_mut().zip(scores) {
                *m = s < threshold;
            }
        }
    }
    Ok(mask)
}

/// One flag per out-filter, `true` for filters judged invalid.
pub fn invalid_filter_mask(
    layer: &LayerWeights,
    criterion: Criterion,
    selector: &Selector,
    cfg: &BinningConfig,
) -> Result<Vec<bool>> {
    select_invalid(&filter_scores(layer, criterion, cfg)?, selector)
}

/// A finite discrete distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(Error::Validation("support and probabilities must be non-empty and equal length".into()));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Validation("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if libm::fabs(total - 1.0) > Self::SUM_TOLERANCE {
            return Err(Error::Validation(format!("probabilities sum to {total}")));
        }
        for (i, a) in support.iter().enumerate() {
            if support[i + 1..].contains(a) {
                return Err(Error::Validation(format!("support value {a} repeated")));
            }
        }
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn entropy(&self) -> f64 {
        entropy_of_probs(self.probs.iter().copied())
    }
}

fn entropy_of_probs(probs: impl Iterator<Item = f64>) -> f64 {
    probs.filter(|&p| p > 0.0).map(|p| -p * libm::log(p)).sum()
}

pub const MARGINAL_TOLERANCE: f64 = 1e-9;

/// `H(X, Y)` from a joint table `joint[i][j] = P(X = x_i, Y = y_j)`, after
/// checking the table's marginals against `x` and `y`.
pub fn joint_entropy(x: &DiscreteDistribution, y: &DiscreteDistribution, joint: &[Vec<f64>]) -> Result<f64> {
    if joint.len() != x.probs.len() || joint.iter().any(|r| r.len() != y.probs.len()) {
        return Err(Error::Validation(format!(
            "joint table must be {}x{}",
            x.probs.len(),
            y.probs.len()
        )));
    }
    if joint.iter().flatten().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::Validation("joint probabilities must be finite and non-negative".into()));
    }
    for (i, row) in joint.iter().enumerate() {
        let m: f64 = row.iter().sum();
        if libm::fabs(m - x.probs[i]) > MARGINAL_TOLERANCE {
            return Err(Error::Validation(format!("row marginal {i} is {m}, expected {}", x.probs[i])));
        }
    }
    for j in 0..y.probs.len() {
        let m: f64 = joint.iter().map(|r| r[j]).sum();
        if libm::fabs(m - y.probs[j]) > MARGINAL_TOLERANCE {
            return Err(Error::Validation(format!("column marginal {j} is {m}, expected {}", y.probs[j])));
        }
    }
    Ok(entropy_of_probs(joint.iter().flatten().copied()))
}
