//! Magnitude pruning of convolution weights.
//!
//! A weight is removed when `|w| < threshold`; weights exactly at the
//! threshold survive. Biases and non-convolution layers are never pruned.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{count_macs, evaluate, InferenceConfig};
use crate::model::{LayerWeights, ModelGraph, CONV_LAYERS};
use crate::tensor::Tensor;

/// Fraction of entries with `|w| < threshold`.
pub fn prune_ratio(weights: &Tensor, threshold: f64) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    let removed = weights.data().iter().filter(|w| w.abs() < threshold).count();
    removed as f64 / weights.len() as f64
}

/// One layer with taps below `threshold` zeroed and marked removed.
pub fn prune_weights(w: &LayerWeights, threshold: f64) -> LayerWeights {
    let mut kernel = w.kernel.clone();
    let mut kept = vec![true; kernel.len()];
    for (i, (v, k)) in kernel.data_mut().iter_mut().zip(kept.iter_mut()).enumerate() {
        *k = w.is_kept(i) && v.abs() >= threshold;
        if !*k {
            *v = 0.0;
        }
    }
    LayerWeights {
        kernel,
        bias: w.bias.clone(),
        kept: Some(kept),
    }
}

/// Zeroes convolution weights below `threshold` and records them as removed.
/// A zero threshold returns the model unchanged.
pub fn prune_model(model: &ModelGraph, threshold: f64) -> Result<ModelGraph> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::invalid(format!("pruning threshold {threshold} must be >= 0")));
    }
    let mut out = model.clone();
    if threshold == 0.0 {
        return Ok(out);
    }
    for name in CONV_LAYERS {
        let pruned = prune_weights(model.weights(name), threshold);
        out.set_weights(name, pruned);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub threshold: f64,
    pub removed_fraction: BTreeMap<String, f64>,
    pub overall_removed_fraction: f64,
    pub mac_ratio: f64,
}

/// Removal statistics over the convolution layers at `threshold`.
pub fn prune_report(model: &ModelGraph, threshold: f64) -> Result<PruneReport> {
    let macs = count_macs(model, model.max_length, threshold)?;
    let mut removed_fraction = BTreeMap::new();
    let (mut removed, mut total) = (0usize, 0usize);
    for name in CONV_LAYERS {
        let w = model.weights(name);
        let r = w
            .kernel
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, v)| !w.is_kept(i) || v.abs() < threshold)
            .count();
        removed += r;
        total += w.kernel.len();
        removed_fraction.insert(name.to_string(), r as f64 / w.kernel.len() as f64);
    }
    Ok(PruneReport {
        threshold,
        removed_fraction,
        overall_removed_fraction: removed as f64 / total as f64,
        mac_ratio: macs.ratio(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub accuracy: f64,
    pub mac_ratio: f64,
}

/// `count` evenly spaced thresholds `start, start + step, ...`, computed by
/// multiplication so the grid does not drift.
pub fn threshold_grid(start: f64, step: f64, end: f64) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 || end < start || start < 0.0 {
        return Err(Error::invalid(format!(
            "threshold grid {start}:{step}:{end} is not ascending and non-negative"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

/// Default pruning grid: 0 to 0.15 in steps of 0.005 (31 thresholds).
pub fn default_thresholds() -> Vec<f64> {
    threshold_grid(0.0, 0.005, 0.15).expect("static grid")
}

/// Accuracy and MAC ratio at each threshold, evaluated with in-loop pruning
/// on top of `config`.
pub fn pruning_sweep(
    model: &ModelGraph,
    dataset: &Dataset,
    config: &InferenceConfig,
    thresholds: &[f64],
) -> Result<Vec<SweepRow>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds must be sorted ascending"));
    }
    thresholds
        .par_iter()
        .map(|&t| {
            let cfg = config.clone().with_threshold(t);
            Ok(SweepRow {
                threshold: t,
                accuracy: evaluate(model, dataset, &cfg)?,
                mac_ratio: count_macs(model, model.max_length, t)?.ratio(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelShape, Pool, CONV1, DENSE1, EMBEDDING};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_model(seed: u64, std: f64) -> ModelGraph {
        let shape = ModelShape {
            vocab_size: 12,
            dim: 6,
            kernel_sizes: [2, 3],
            filters: [8, 8],
            hidden: 5,
            num_classes: 2,
            max_length: 10,
            pool: Pool::Max,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, std).unwrap();
        ModelGraph::from_shape(&shape, |_, _, _| n.sample(&mut rng)).unwrap()
    }

    #[test]
    fn ratio_edges() {
        let t = Tensor::new(vec![4], vec![0.0, -0.5, 0.25, 1.0]).unwrap();
        assert_eq!(prune_ratio(&t, 0.0), 0.0);
        assert_eq!(prune_ratio(&t, 1.5), 1.0);
        assert_eq!(prune_ratio(&t, 0.5), 0.5);
    }

    #[test]
    fn zero_threshold_is_identity() {
        let m = gaussian_model(1, 0.05);
        assert_eq!(prune_model(&m, 0.0).unwrap(), m);
    }

    #[test]
    fn only_conv_kernels_pruned() {
        let m = gaussian_model(2, 0.05);
        let p = prune_model(&m, 0.03).unwrap();
        assert_eq!(p.weights(EMBEDDING), m.weights(EMBEDDING));
        assert_eq!(p.weights(DENSE1), m.weights(DENSE1));
        let (a, b) = (m.weights(CONV1), p.weights(CONV1));
        assert_eq!(a.bias, b.bias);
        let kept = b.kept.as_ref().unwrap();
        for ((orig, new), k) in a.kernel.data().iter().zip(b.kernel.data()).zip(kept) {
            if orig.abs() < 0.03 {
                assert!(!k && *new == 0.0);
            } else {
                assert!(*k && new == orig);
            }
        }
    }

    #[test]
    fn trained_scale_weights_all_removed_at_015() {
        // Trained conv weights sit well inside +-0.15.
        let mut m = gaussian_model(3, 0.02);
        for name in CONV_LAYERS {
            let mut w = m.weights(name).clone();
            w.kernel = w.kernel.map(|v| v.clamp(-0.149, 0.149));
            m.set_weights(name, w);
        }
        let r = prune_report(&prune_model(&m, 0.15).unwrap(), 0.0).unwrap();
        assert_eq!(r.overall_removed_fraction, 1.0);
        assert_eq!(r.mac_ratio, 0.0);
    }

    #[test]
    fn grid_has_31_points() {
        let g = default_thresholds();
        assert_eq!(g.len(), 31);
        assert_eq!(g[0], 0.0);
        assert!((g[30] - 0.15).abs() < 1e-12);
        assert!(threshold_grid(0.1, 0.0, 0.2).is_err());
    }

    #[test]
    fn report_monotone() {
        let m = gaussian_model(4, 0.05);
        let mut last = (0.0, 1.0);
        for t in default_thresholds() {
            let r = prune_report(&m, t).unwrap();
            assert!(r.overall_removed_fraction >= last.0);
            assert!(r.mac_ratio <= last.1);
            last = (r.overall_removed_fraction, r.mac_ratio);
        }
    }
}
