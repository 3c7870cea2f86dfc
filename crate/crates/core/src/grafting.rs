//! Grafting operators: noise scions, internal filter transplant and external
//! layer blending with the entropy-driven coefficient.
//!
//! Every operator maps snapshots to snapshots and preserves the architecture
//! (layer names, kinds and shapes).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::criteria::{
    ascending_order, filter_scores, layer_entropy, row_entropy_sum, select_invalid, BinningConfig, Criterion, Selector,
};
use crate::model::{check_compatible, LayerKind, LayerWeights, ModelSnapshot};
use crate::rng::{gaussian_sample, Rng};
use crate::tensor::{blend_slice, linear_blend};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScionSource {
    Noise,
    Internal,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum Weighting {
    Adaptive,
    Fixed { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Granularity {
    /// Blend every filter of a layer.
    LayerLevel,
    /// Blend only the receiving network's invalid filters, each with the
    /// peer's filter at the same index.
    FilterLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InternalMode {
    /// The invalid filter becomes itself plus its donor.
    Add,
    /// The invalid filter becomes a copy of its donor.
    Replace,
}

/// How a layer's information is measured when the criterion is entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LayerMeasure {
    /// Entropy of all the layer's weights binned together.
    WholeLayer,
    /// Sum of the per-filter entropies.
    FilterSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GraftConfig {
    pub source: ScionSource,
    pub criterion: Criterion,
    /// `A` in `alpha = A * atan(c * (h_self - h_peer)) + 0.5`.
    pub alpha_scale: f64,
    /// `c` in the same formula.
    pub sharpness: f64,
    /// Noise scions use `sigma_t = noise_decay^t`.
    pub noise_decay: f64,
    pub selector: Selector,
    pub weighting: Weighting,
    pub granularity: Granularity,
    pub internal_mode: InternalMode,
    pub layer_measure: LayerMeasure,
}

impl Default for GraftConfig {
    fn default() -> Self {
        Self {
            source: ScionSource::External,
            criterion: Criterion::Entropy,
            alpha_scale: 0.25,
            sharpness: 50.0,
            noise_decay: 0.9,
            selector: Selector::BottomFraction { fraction: 0.2 },
            weighting: Weighting::Adaptive,
            granularity: Granularity::LayerLevel,
            internal_mode: InternalMode::Add,
            layer_measure: LayerMeasure::WholeLayer,
        }
    }
}

impl GraftConfig {
    pub fn validate(&self) -> Result<()> {
        let pi = core::f64::consts::PI;
        if !(self.alpha_scale > 0.0 && self.alpha_scale < 1.0 / pi) {
            return Err(Error::config("graft.alpha_scale", "must lie in (0, 1/pi)"));
        }
        if !(self.sharpness > 0.0) || !self.sharpness.is_finite() {
            return Err(Error::config("graft.sharpness", "must be positive"));
        }
        if !(self.noise_decay > 0.0 && self.noise_decay < 1.0) {
            return Err(Error::config("graft.noise_decay", "must lie in (0, 1)"));
        }
        if let Weighting::Fixed { alpha } = self.weighting {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::config("graft.weighting.alpha", "must lie in (0, 1)"));
            }
        }
        self.selector
            .validate()
            .map_err(|e| Error::config("graft.selector", format!("{e}")))
    }
}

/// `A * atan(c * (h_self - h_peer)) + 0.5`, the share of its own weights a
/// network keeps. Lies in `(0.5 - A*pi/2, 0.5 + A*pi/2)`.
pub fn adaptive_alpha(h_self: f64, h_peer: f64, alpha_scale: f64, sharpness: f64) -> f64 {
    alpha_scale * libm::atan(sharpness * (h_self - h_peer)) + 0.5
}

/// Noise standard deviation `a^t` at epoch `t`.
pub fn noise_sigma(t: usize, a: f64) -> Result<f64> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::config("graft.noise_decay", format!("{a} not in (0, 1)")));
    }
    Ok(libm::pow(a, t as f64))
}

/// The blend coefficient chosen for one layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlphaDecision {
    pub layer_name: String,
    pub h_self: f64,
    pub h_peer: f64,
    pub alpha: f64,
}

/// Layer information used to weigh one network against another.
pub fn layer_information(layer: &LayerWeights, cfg: &GraftConfig, bins: &BinningConfig) -> Result<f64> {
    match (cfg.criterion, cfg.layer_measure) {
        (Criterion::L1, _) => Ok(crate::criteria::l1_norm_filter(layer.weights.data())),
        (Criterion::Entropy, LayerMeasure::WholeLayer) => layer_entropy(layer, bins),
        (Criterion::Entropy, LayerMeasure::FilterSum) => row_entropy_sum(layer, bins),
    }
}

fn invalid_rows(layer: &LayerWeights, cfg: &GraftConfig, bins: &BinningConfig) -> Result<Vec<bool>> {
    select_invalid(&filter_scores(layer, cfg.criterion, bins)?, &cfg.selector)
}

/// Adds `N(0, sigma_t^2)` noise to the invalid filters of every conv layer.
pub fn graft_noise(
    model: &ModelSnapshot,
    epoch: usize,
    cfg: &GraftConfig,
    bins: &BinningConfig,
    rng: &mut Rng,
) -> Result<ModelSnapshot> {
    cfg.validate()?;
    let sigma = noise_sigma(epoch, cfg.noise_decay)?;
    let mut out = model.clone();
    for layer in out.layers.iter_mut().filter(|l| l.kind == LayerKind::Conv) {
        let mask = invalid_rows(layer, cfg, bins)?;
        let n = layer.weights.row_len();
        for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let noise = gaussian_sample(rng, 0.0, sigma, &[n])?;
            for (w, e) in layer.weights.row_mut(j).iter_mut().zip(noise.data()) {
                *w += e;
            }
        }
    }
    Ok(out)
}

/// Within each conv layer, grafts the i-th highest-scoring filter into the
/// i-th lowest-scoring invalid filter.
pub fn graft_internal(model: &ModelSnapshot, cfg: &GraftConfig, bins: &BinningConfig) -> Result<ModelSnapshot> {
    cfg.validate()?;
    let mut out = model.clone();
    for layer in out.layers.iter_mut().filter(|l| l.kind == LayerKind::Conv) {
        let scores = filter_scores(layer, cfg.criterion, bins)?;
        let mask = select_invalid(&scores, &cfg.selector)?;
        let order = ascending_order(&scores);
        let invalid: Vec<usize> = order.iter().copied().filter(|&j| mask[j]).collect();
        let c = scores.len();
        if invalid.len() > c - invalid.len() {
            return Err(Error::Graft(format!(
                "layer `{}` has {} invalid filters but only {} valid ones",
                layer.name,
                invalid.len(),
                c - invalid.len()
            )));
        }
        let source = layer.weights.clone();
        for (i, &dst) in invalid.iter().enumerate() {
            let donor = source.row(order[c - 1 - i]);
            let row = layer.weights.row_mut(dst);
            match cfg.internal_mode {
                InternalMode::Add => row.iter_mut().zip(donor).for_each(|(w, d)| *w += d),
                InternalMode::Replace => row.copy_from_slice(donor),
            }
        }
    }
    Ok(out)
}

/// Blends `me` with `peer` layer by layer: `alpha * me + (1 - alpha) * peer`
/// for weights and biases, with `alpha` from the layers' information (or the
/// fixed coefficient). Metadata of `me` is kept.
pub fn graft_external_pair(
    me: &ModelSnapshot,
    peer: &ModelSnapshot,
    cfg: &GraftConfig,
    bins: &BinningConfig,
) -> Result<(ModelSnapshot, Vec<AlphaDecision>)> {
    cfg.validate()?;
    check_compatible(me, peer)?;
    let mut out = me.clone();
    let mut decisions = Vec::with_capacity(me.layers.len());
    for (dst, (mine, theirs)) in out.layers.iter_mut().zip(me.layers.iter().zip(&peer.layers)) {
        let h_self = layer_information(mine, cfg, bins)?;
        let h_peer = layer_information(theirs, cfg, bins)?;
        let alpha = match cfg.weighting {
            Weighting::Adaptive => adaptive_alpha(h_self, h_peer, cfg.alpha_scale, cfg.sharpness),
            Weighting::Fixed { alpha } => alpha,
        };
        match cfg.granularity {
            Granularity::LayerLevel => {
                dst.weights = linear_blend(&mine.weights, &theirs.weights, alpha)?;
                dst.bias = linear_blend(&mine.bias, &theirs.bias, alpha)?;
            }
            Granularity::FilterLevel => {
                let mask = invalid_rows(mine, cfg, bins)?;
                for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    blend_slice(dst.weights.row_mut(j), theirs.weights.row(j), alpha);
                    blend_slice(dst.bias.row_mut(j), theirs.bias.row(j), alpha);
                }
            }
        }
        decisions.push(AlphaDecision {
            layer_name: mine.name.clone(),
            h_self,
            h_peer,
            alpha,
        });
    }
    Ok((out, decisions))
}
