//! Experiment drivers: uniform-width sweeps over place subsets,
//! random-restart hill climbing for a minimal bit assignment, and the
//! quantization x pruning grid.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{count_macs, evaluate, ActivationRanges, InferenceConfig};
use crate::model::{BitAssignment, LayerWeights, ModelGraph, PlaceId, FULL_PRECISION, MIN_BITS};
use crate::quantization::{apply_assignment, quantize_weights, weight_grid, QuantSpec};
use crate::report::model_size;

/// Bit widths tried by the sweeps, widest first.
pub const DEFAULT_BITS: [u8; 10] = [32, 16, 8, 7, 6, 5, 4, 3, 2, 1];

/// A named set of places reduced together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceSet {
    pub label: String,
    pub places: Vec<PlaceId>,
}

impl PlaceSet {
    pub fn new(places: Vec<PlaceId>) -> Self {
        let label = match places.len() {
            0 => "none".to_string(),
            8 => "all places".to_string(),
            _ => places
                .iter()
                .map(|p| p.as_str())
                .collect::<Vec<_>>()
                .join("+"),
        };
        PlaceSet { label, places }
    }

    pub fn singletons() -> Vec<PlaceSet> {
        PlaceId::ALL.iter().map(|&p| PlaceSet::new(vec![p])).collect()
    }

    pub fn all() -> PlaceSet {
        PlaceSet::new(PlaceId::ALL.to_vec())
    }

    /// All 256 subsets in bitmask order; the empty subset is the float
    /// baseline.
    pub fn subsets() -> Vec<PlaceSet> {
        (0u32..256)
            .map(|mask| {
                PlaceSet::new(
                    PlaceId::ALL
                        .into_iter()
                        .filter(|p| mask & (1 << p.index()) != 0)
                        .collect(),
                )
            })
            .collect()
    }

    /// Parses a comma-separated list of `singletons`, `all`, `subsets` or
    /// `+`-joined place names.
    pub fn parse_list(spec: &str) -> Result<Vec<PlaceSet>> {
        let mut out = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "singletons" => out.extend(Self::singletons()),
                "all" => out.push(Self::all()),
                "subsets" => out.extend(Self::subsets()),
                names => out.push(PlaceSet::new(
                    names
                        .split('+')
                        .map(str::parse)
                        .collect::<Result<Vec<PlaceId>>>()?,
                )),
            }
        }
        Ok(out)
    }

    pub fn assignment(&self, bits: u8) -> Result<BitAssignment> {
        let mut a = BitAssignment::full_precision();
        for &p in &self.places {
            a.set(p, bits)?;
        }
        Ok(a)
    }
}

/// A model, the data to score it on, and how to quantize it. Quantized
/// layer weights are cached per `(place, bits)`, accuracies per assignment.
pub struct SearchContext<'a> {
    pub model: &'a ModelGraph,
    pub dataset: &'a Dataset,
    pub spec: QuantSpec,
    pub ranges: Option<&'a ActivationRanges>,
    pub pruning_threshold: f64,
    layers: Mutex<HashMap<(PlaceId, u8), Arc<LayerWeights>>>,
    scores: Mutex<HashMap<BitAssignment, f64>>,
}

impl<'a> SearchContext<'a> {
    pub fn new(
        model: &'a ModelGraph,
        dataset: &'a Dataset,
        spec: QuantSpec,
        ranges: Option<&'a ActivationRanges>,
    ) -> Self {
        SearchContext {
            model,
            dataset,
            spec,
            ranges,
            pruning_threshold: 0.0,
            layers: Mutex::new(HashMap::new()),
            scores: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_pruning_threshold(mut self, t: f64) -> Self {
        self.pruning_threshold = t;
        self
    }

    /// Model with weights quantized per `assignment`, and the matching config.
    pub fn materialize(&self, assignment: &BitAssignment) -> Result<(ModelGraph, InferenceConfig)> {
        let mut model = self.model.clone();
        for place in PlaceId::WEIGHTS {
            let bits = assignment.get(place);
            if bits == FULL_PRECISION {
                continue;
            }
            let cached = self.layers.lock().unwrap().get(&(place, bits)).cloned();
            let w = match cached {
                Some(w) => w,
                None => {
                    let src = self.model.weights(place.layer());
                    let grid = weight_grid(
                        src,
                        bits as u32,
                        self.spec,
                        self.ranges.and_then(|r| r.get(place)),
                    )?;
                    let w = Arc::new(quantize_weights(src, &grid));
                    self.layers.lock().unwrap().insert((place, bits), w.clone());
                    w
                }
            };
            model.weights.insert(place.layer().to_string(), w);
        }
        // Weights are already materialized above; this only builds the config.
        let act_only = PlaceId::WEIGHTS
            .into_iter()
            .try_fold(*assignment, |a, p| a.with(p, FULL_PRECISION))?;
        let (_, mut config) = apply_assignment(self.model, &act_only, self.spec, self.ranges)?;
        config.bit_assignment = Some(*assignment);
        config.pruning_threshold = self.pruning_threshold;
        Ok((model, config))
    }

    pub fn accuracy(&self, assignment: &BitAssignment) -> Result<f64> {
        if let Some(&a) = self.scores.lock().unwrap().get(assignment) {
            return Ok(a);
        }
        let (model, config) = self.materialize(assignment)?;
        let acc = evaluate(&model, self.dataset, &config)?;
        self.scores.lock().unwrap().insert(*assignment, acc);
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformRow {
    pub place_set: String,
    pub bits: u8,
    pub accuracy: f64,
}

/// Accuracy with every place of each set reduced to each bit width, all
/// other places at 32 bits. Rows are ordered by set, then bit width.
pub fn uniform_sweep(
    ctx: &SearchContext<'_>,
    bits_list: &[u8],
    place_sets: &[PlaceSet],
) -> Result<Vec<UniformRow>> {
    if place_sets.is_empty() {
        return Err(Error::invalid("no place sets given"));
    }
    let jobs: Vec<(&PlaceSet, u8)> = place_sets
        .iter()
        .flat_map(|s| bits_list.iter().map(move |&b| (s, b)))
        .collect();
    jobs.par_iter()
        .map(|&(set, bits)| {
            Ok(UniformRow {
                place_set: set.label.clone(),
                bits,
                accuracy: ctx.accuracy(&set.assignment(bits)?)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub place: PlaceId,
    pub tried_bits: u8,
    pub accuracy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart_index: usize,
    pub seed: u64,
    pub assignment: BitAssignment,
    pub accuracy: f64,
    pub model_size_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub assignment: BitAssignment,
    pub accuracy: f64,
    pub original_accuracy: f64,
    pub threshold_factor: f64,
    pub model_size_bytes: u64,
    pub model_size_bits: u64,
    pub restart_index: usize,
    pub place_order: Vec<PlaceId>,
    pub trace: Vec<TraceStep>,
    pub restarts: Vec<RestartSummary>,
    /// Accuracy of the chosen assignment on a held-out test split, when one
    /// was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillClimbConfig {
    /// Accept a width when `accuracy >= original_accuracy * threshold_factor`.
    pub threshold_factor: f64,
    pub restarts: usize,
    /// Restart `r` shuffles places with seed `seed + r`.
    pub seed: u64,
}

impl HillClimbConfig {
    /// 50 restarts, at most 0.2% relative accuracy loss.
    pub fn standard(seed: u64) -> Self {
        HillClimbConfig {
            threshold_factor: 0.998,
            restarts: 50,
            seed,
        }
    }
}

struct Restart {
    assignment: BitAssignment,
    accuracy: f64,
    original: f64,
    size_bits: u64,
    order: Vec<PlaceId>,
    trace: Vec<TraceStep>,
}

fn climb_once(ctx: &SearchContext<'_>, factor: f64, seed: u64) -> Result<Restart> {
    let mut prec = BitAssignment::full_precision();
    let original = ctx.accuracy(&prec)?;
    let target = original * factor;
    let mut order = PlaceId::ALL.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut trace = Vec::new();

    loop {
        let before = prec;
        for &place in &order {
            let current = prec.get(place);
            let mut accepted = false;
            for bits in MIN_BITS..=current {
                prec.set(place, bits)?;
                let acc = ctx.accuracy(&prec)?;
                let ok = acc >= target;
                trace.push(TraceStep {
                    place,
                    tried_bits: bits,
                    accuracy: acc,
                    accepted: ok,
                });
                if ok {
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                prec.set(place, current)?;
            }
        }
        if prec == before {
            break;
        }
    }
    Ok(Restart {
        assignment: prec,
        accuracy: ctx.accuracy(&prec)?,
        original,
        size_bits: model_size(ctx.model, &prec, false)?.total_bits,
        order,
        trace,
    })
}

/// Random-restart hill climbing for the smallest assignment whose accuracy
/// stays within `threshold_factor` of full precision. The best restart has
/// the smallest model, then the higher accuracy, then the lower index.
pub fn hill_climb(ctx: &SearchContext<'_>, cfg: &HillClimbConfig) -> Result<SearchOutcome> {
    if !(cfg.threshold_factor > 0.0 && cfg.threshold_factor <= 1.0) {
        return Err(Error::invalid(format!(
            "threshold factor {} outside (0, 1]",
            cfg.threshold_factor
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::invalid("at least one restart required"));
    }
    let runs: Vec<Restart> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| climb_once(ctx, cfg.threshold_factor, cfg.seed.wrapping_add(r as u64)))
        .collect::<Result<_>>()?;

    let best = (0..runs.len())
        .min_by(|&a, &b| {
            let (ra, rb) = (&runs[a], &runs[b]);
            ra.size_bits
                .cmp(&rb.size_bits)
                .then(rb.accuracy.total_cmp(&ra.accuracy))
                .then(a.cmp(&b))
        })
        .expect("at least one restart");
    let restarts = runs
        .iter()
        .enumerate()
        .map(|(i, r)| RestartSummary {
            restart_index: i,
            seed: cfg.seed.wrapping_add(i as u64),
            assignment: r.assignment,
            accuracy: r.accuracy,
            model_size_bits: r.size_bits,
        })
        .collect();
    let win = runs.into_iter().nth(best).expect("index in range");
    Ok(SearchOutcome {
        assignment: win.assignment,
        accuracy: win.accuracy,
        original_accuracy: win.original,
        threshold_factor: cfg.threshold_factor,
        model_size_bytes: win.size_bits.div_ceil(8),
        model_size_bits: win.size_bits,
        restart_index: best,
        place_order: win.order,
        trace: win.trace,
        restarts,
        test_accuracy: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub bits: u8,
    pub threshold: f64,
    pub accuracy: f64,
    pub mac_ratio: f64,
}

/// Every place at each bit width crossed with each pruning threshold.
/// Pruning applies to the quantized convolution weights.
pub fn quant_prune_grid(
    ctx: &SearchContext<'_>,
    bits_list: &[u8],
    thresholds: &[f64],
) -> Result<Vec<GridCell>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds must be sorted ascending"));
    }
    let cells: Vec<(u8, f64)> = bits_list
        .iter()
        .flat_map(|&b| thresholds.iter().map(move |&t| (b, t)))
        .collect();
    cells
        .par_iter()
        .map(|&(bits, threshold)| {
            let (model, config) = ctx.materialize(&BitAssignment::uniform(bits)?)?;
            let config = config.with_threshold(threshold);
            Ok(GridCell {
                bits,
                threshold,
                accuracy: evaluate(&model, ctx.dataset, &config)?,
                mac_ratio: count_macs(&model, model.max_length, threshold)?.ratio(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn place_set_counts() {
        assert_eq!(PlaceSet::singletons().len(), 8);
        assert_eq!(PlaceSet::subsets().len(), 256);
        assert_eq!(PlaceSet::parse_list("singletons,all").unwrap().len(), 9);
        let custom = PlaceSet::parse_list("conv1d_1+dense_1_a").unwrap();
        assert_eq!(custom[0].places, vec![PlaceId::Conv1d1, PlaceId::Dense1A]);
        assert_eq!(custom[0].label, "conv1d_1+dense_1_a");
        assert!(PlaceSet::parse_list("conv9").is_err());
        assert_eq!(PlaceSet::all().label, "all places");
    }

    #[test]
    fn place_set_assignment() {
        let a = PlaceSet::new(vec![PlaceId::Dense2]).assignment(3).unwrap();
        assert_eq!(a.get(PlaceId::Dense2), 3);
        assert_eq!(a.get(PlaceId::Embedding1), 32);
    }
}
