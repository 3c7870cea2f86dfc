//! Analysis of trained snapshots: invalid-filter ratios, network information
//! and the overlap of invalid-filter locations between two networks.

use alloc::string::String;
use alloc::vec::Vec;

use crate::criteria::{
    filter_scores, layer_entropy, layer_info_sum, select_invalid, BinningConfig, Criterion, Selector,
};
use crate::model::{check_compatible, LayerKind, ModelSnapshot};
use crate::{Error, Result};

/// Threshold grid used when none is given.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThresholdRatio {
    pub threshold: f64,
    pub ratio: f64,
}

/// For each threshold, the fraction of conv filters (over all conv layers)
/// whose L1 norm is strictly below it. A model without conv layers scores 0.
pub fn invalid_ratio(model: &ModelSnapshot, thresholds: &[f64]) -> Result<Vec<ThresholdRatio>> {
    if thresholds.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::Domain("thresholds must be positive and finite".into()));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("thresholds must be sorted ascending".into()));
    }
    let bins = BinningConfig::default();
    let mut norms = Vec::new();
    for layer in model.conv_layers() {
        norms.extend(filter_scores(layer, Criterion::L1, &bins)?);
    }
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let below = norms.iter().filter(|&&n| n < threshold).count();
            let ratio = if norms.is_empty() {
                0.0
            } else {
                below as f64 / norms.len() as f64
            };
            ThresholdRatio { threshold, ratio }
        })
        .collect())
}

/// Sum of whole-layer entropies over every weight-bearing layer.
pub fn network_information(model: &ModelSnapshot, bins: &BinningConfig) -> Result<f64> {
    model.layers.iter().map(|l| layer_entropy(l, bins)).sum()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerIou {
    pub name: String,
    pub iou: f64,
}

/// Per conv layer, the intersection-over-union of the two networks' bottom
/// `fraction` filter sets under the L1 criterion. Two empty sets give 1.
pub fn invalid_location_iou(a: &ModelSnapshot, b: &ModelSnapshot, fraction: f64) -> Result<Vec<LayerIou>> {
    check_compatible(a, b)?;
    let selector = Selector::BottomFraction { fraction };
    selector.validate()?;
    let bins = BinningConfig::default();
    a.conv_layers()
        .zip(b.conv_layers())
        .map(|(la, lb)| {
            let ma = select_invalid(&filter_scores(la, Criterion::L1, &bins)?, &selector)?;
            let mb = select_invalid(&filter_scores(lb, Criterion::L1, &bins)?, &selector)?;
            let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
            let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count();
            let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            Ok(LayerIou {
                name: la.name.clone(),
                iou,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerDiagnostics {
    pub name: String,
    pub kind: LayerKind,
    pub filter_l1: Vec<f64>,
    pub filter_entropy: Vec<f64>,
    /// Sum of filter entropies; conv layers only.
    pub layer_info_sum: Option<f64>,
    pub layer_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReportMetadata {
    pub epoch: usize,
    pub worker_id: usize,
    pub tag: String,
    pub bin_count: usize,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiagnosticsReport {
    pub metadata: ReportMetadata,
    pub layers: Vec<LayerDiagnostics>,
    pub network_information: f64,
    pub invalid_ratio: Vec<ThresholdRatio>,
    pub iou: Option<Vec<LayerIou>>,
}

/// Full per-layer report. `peer` adds invalid-location IoU at `iou_fraction`.
pub fn analyze(
    model: &ModelSnapshot,
    peer: Option<&ModelSnapshot>,
    bins: &BinningConfig,
    thresholds: &[f64],
    iou_fraction: f64,
) -> Result<DiagnosticsReport> {
    model.validate()?;
    bins.validate()?;
    let layers = model
        .layers
        .iter()
        .map(|l| {
            Ok(LayerDiagnostics {
                name: l.name.clone(),
                kind: l.kind,
                filter_l1: filter_scores(l, Criterion::L1, bins)?,
                filter_entropy: filter_scores(l, Criterion::Entropy, bins)?,
                layer_info_sum: match l.kind {
                    LayerKind::Conv => Some(layer_info_sum(l, bins)?),
                    LayerKind::Dense => None,
                },
                layer_entropy: layer_entropy(l, bins)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let iou = peer.map(|p| invalid_location_iou(model, p, iou_fraction)).transpose()?;
    Ok(DiagnosticsReport {
        metadata: ReportMetadata {
            epoch: model.epoch,
            worker_id: model.worker_id,
            tag: model.tag.clone(),
            bin_count: bins.bin_count,
            config_hash: None,
        },
        network_information: network_information(model, bins)?,
        invalid_ratio: invalid_ratio(model, thresholds)?,
        layers,
        iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchSpec, LayerWeights};
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn zeroed() -> ModelSnapshot {
        let mut m = build_model(&ArchSpec::default(), 0).unwrap();
        for l in &mut m.layers {
            l.weights = Tensor::zeros(l.weights.shape()).unwrap();
        }
        m
    }

    // One conv layer of 1x1x1 filters holding the given values, plus a dense head.
    fn norms_model(norms: &[f64]) -> ModelSnapshot {
        let n = norms.len();
        ModelSnapshot::new(alloc::vec![
            LayerWeights::new(
                "conv1",
                LayerKind::Conv,
                Tensor::new(alloc::vec![n, 1, 1, 1], norms.to_vec()).unwrap(),
                Tensor::zeros(&[n]).unwrap()
            )
            .unwrap(),
            LayerWeights::new(
                "fc",
                LayerKind::Dense,
                Tensor::filled(&[2, n], 1.0).unwrap(),
                Tensor::zeros(&[2]).unwrap()
            )
            .unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn ratio_examples() {
        let r = invalid_ratio(&zeroed(), &DEFAULT_THRESHOLDS).unwrap();
        assert!(r.iter().all(|t| t.ratio == 1.0));
        let m = norms_model(&[0.0005, 0.002, 1.0, 2.0]);
        assert_eq!(invalid_ratio(&m, &[1e-3]).unwrap()[0].ratio, 0.25);
        assert_eq!(invalid_ratio(&m, &[1e-4]).unwrap()[0].ratio, 0.0);
        assert!(invalid_ratio(&m, &[1e-2, 1e-3]).is_err());
        assert!(invalid_ratio(&m, &[0.0]).is_err());
    }

    #[test]
    fn information_examples() {
        let bins = BinningConfig::default();
        let mut constant = zeroed();
        for l in &mut constant.layers {
            l.weights = Tensor::filled(l.weights.shape(), 0.3).unwrap();
        }
        assert_eq!(network_information(&constant, &bins).unwrap(), 0.0);

        let m = build_model(&ArchSpec::default(), 5).unwrap();
        let sum: f64 = m.layers.iter().map(|l| layer_entropy(l, &bins).unwrap()).sum();
        assert!((network_information(&m, &bins).unwrap() - sum).abs() < 1e-9);
    }

    #[test]
    fn iou_examples() {
        let a = norms_model(&[0.1, 0.2, 3.0, 4.0, 5.0]);
        let b = norms_model(&[5.0, 4.0, 3.0, 0.2, 0.1]);
        assert_eq!(invalid_location_iou(&a, &a, 0.4).unwrap()[0].iou, 1.0);
        assert_eq!(invalid_location_iou(&a, &b, 0.4).unwrap()[0].iou, 0.0);
        // floor(0.1 * 5) = 0 filters selected on both sides.
        assert_eq!(invalid_location_iou(&a, &b, 0.1).unwrap()[0].iou, 1.0);
    }

    #[test]
    fn report_fields() {
        let a = build_model(&ArchSpec::default(), 1).unwrap();
        let b = build_model(&ArchSpec::default(), 2).unwrap();
        let r = analyze(&a, Some(&b), &BinningConfig::default(), &DEFAULT_THRESHOLDS, 0.2).unwrap();
        assert_eq!(r.layers.len(), 3);
        assert_eq!(r.layers[0].filter_l1.len(), 16);
        assert!(r.layers[2].layer_info_sum.is_none());
        assert_eq!(r.iou.as_ref().unwrap().len(), 2);
        let total: f64 = r.layers.iter().map(|l| l.layer_entropy).sum();
        assert!((r.network_information - total).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn ratio_monotone_iou_symmetric_info_permutation_invariant(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = build_model(&ArchSpec::default(), s1).unwrap();
            let b = build_model(&ArchSpec::default(), s2).unwrap();
            let r = invalid_ratio(&a, &[0.5, 1.0, 2.0, 4.0, 8.0]).unwrap();
            prop_assert!(r.windows(2).all(|w| w[0].ratio <= w[1].ratio));
            prop_assert!(r.iter().all(|t| (0.0..=1.0).contains(&t.ratio)));
            prop_assert_eq!(
                invalid_location_iou(&a, &b, 0.2).unwrap(),
                invalid_location_iou(&b, &a, 0.2).unwrap()
            );

            let bins = BinningConfig::default();
            let mut permuted = a.clone();
            let layer = &mut permuted.layers[1];
            let order = Rng::new(s2).permutation(layer.out_channels());
            for (j, &src) in order.iter().enumerate() {
                layer.weights = layer.weights.with_row(j, a.layers[1].filter(src));
            }
            let h1 = network_information(&a, &bins).unwrap();
            let h2 = network_information(&permuted, &bins).unwrap();
            prop_assert!((h1 - h2).abs() < 1e-12);
        }
    }
}
