//! Forward pass with pruning-aware convolution, optional simulated
//! activation quantization, activation-range calibration, accuracy
//! evaluation and MAC accounting.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PADDING_INDEX};
use crate::error::{Error, Result};
use crate::model::{
    Activation, BitAssignment, LayerWeights, ModelGraph, PlaceId, Pool, CONV1, CONV2,
    CONV_LAYERS, DENSE1, DENSE2, EMBEDDING, FULL_PRECISION,
};
use crate::quantization::{Grid, QuantSpec, Range};
use crate::tensor::Tensor;

/// Calibrated `[min, max]` per place (normally the three activation places).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivationRanges(pub BTreeMap<PlaceId, Range>);

impl ActivationRanges {
    pub fn get(&self, place: PlaceId) -> Option<Range> {
        self.0.get(&place).copied()
    }

    pub fn insert(&mut self, place: PlaceId, range: Range) {
        self.0.insert(place, range);
    }

    fn merge(mut self, other: ActivationRanges) -> ActivationRanges {
        for (p, r) in other.0 {
            self.0
                .entry(p)
                .and_modify(|e| *e = e.union(&r))
                .or_insert(r);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub bit_assignment: Option<BitAssignment>,
    pub quant_spec: QuantSpec,
    pub activation_ranges: Option<ActivationRanges>,
    pub pruning_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            bit_assignment: None,
            quant_spec: QuantSpec::default(),
            activation_ranges: None,
            pruning_threshold: 0.0,
        }
    }
}

impl InferenceConfig {
    pub fn float() -> Self {
        Self::default()
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.pruning_threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_threshold(self.pruning_threshold)?;
        if let Some(a) = &self.bit_assignment {
            for place in PlaceId::ACTIVATIONS {
                if a.get(place) < FULL_PRECISION
                    && self
                        .activation_ranges
                        .as_ref()
                        .and_then(|r| r.get(place))
                        .is_none()
                {
                    return Err(Error::MissingRange(place));
                }
            }
        }
        Ok(())
    }

    /// Activation grids in `PlaceId::ACTIVATIONS` order.
    fn activation_grids(&self) -> Result<[Grid; 3]> {
        self.validate()?;
        let mut grids = [Grid::PassThrough; 3];
        if let Some(a) = &self.bit_assignment {
            for (g, place) in grids.iter_mut().zip(PlaceId::ACTIVATIONS) {
                let bits = a.get(place);
                if bits < FULL_PRECISION {
                    let range = self
                        .activation_ranges
                        .as_ref()
                        .and_then(|r| r.get(place))
                        .ok_or(Error::MissingRange(place))?;
                    *g = Grid::for_range(range, bits as u32, self.quant_spec)?;
                }
            }
        }
        Ok(grids)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::invalid(format!("pruning threshold {t} must be >= 0")));
    }
    Ok(())
}

/// Taps that take part in the convolution, grouped by output channel and
/// ordered input-channel outer, kernel position inner.
fn active_taps(w: &LayerWeights, threshold: f64) -> Vec<Vec<(usize, usize, f64)>> {
    let shape = w.kernel.shape();
    let (in_ch, out_ch, k) = (shape[0], shape[1], shape[2]);
    let mut taps = vec![Vec::new(); out_ch];
    for (o, list) in taps.iter_mut().enumerate() {
        for i in 0..in_ch {
            for t in 0..k {
                let flat = (i * out_ch + o) * k + t;
                let v = w.kernel.data()[flat];
                if w.is_kept(flat) && v.abs() >= threshold {
                    list.push((i, t, v));
                }
            }
        }
    }
    taps
}

/// `input` is `[len, in_ch]` row-major; returns `[len - k + 1, out_ch]`.
fn conv1d_raw(
    input: &[f64],
    len: usize,
    in_ch: usize,
    k: usize,
    taps: &[Vec<(usize, usize, f64)>],
    bias: &[f64],
) -> Vec<f64> {
    let out_ch = taps.len();
    let p = len + 1 - k;
    let mut out = vec![0.0; p * out_ch];
    for s in 0..p {
        for (o, list) in taps.iter().enumerate() {
            let mut acc = 0.0;
            for &(i, t, w) in list {
                acc += input[(s + t) * in_ch + i] * w;
            }
            out[s * out_ch + o] = acc + bias[o];
        }
    }
    out
}

/// 1D cross-correlation that skips every tap with `|w| < threshold`.
/// The bias is always added.
pub fn conv1d_pruned(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    threshold: f64,
) -> Result<Tensor> {
    check_threshold(threshold)?;
    let (&[len, in_ch], &[w_in, out_ch, k]) = (input.shape(), weights.shape()) else {
        return Err(Error::Shape(format!(
            "conv1d expects input [len, in_ch] and weights [in_ch, out_ch, k], got {:?} and {:?}",
            input.shape(),
            weights.shape()
        )));
    };
    if w_in != in_ch || bias.shape() != [out_ch] {
        return Err(Error::Shape(format!(
            "conv1d channel mismatch: input {:?}, weights {:?}, bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    if k == 0 || len < k {
        return Err(Error::Shape(format!(
            "input length {len} shorter than kernel {k}"
        )));
    }
    let lw = LayerWeights::new(weights.clone(), None);
    let taps = active_taps(&lw, threshold);
    let out = conv1d_raw(input.data(), len, in_ch, k, &taps, bias.data());
    Tensor::new(vec![len + 1 - k, out_ch], out)
}

fn activate(values: &mut [f64], act: Activation) {
    match act {
        Activation::Relu => {
            for v in values {
                if v.is_nan() || *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for v in values {
                *v = sigmoid(*v);
            }
        }
        Activation::Softmax => softmax(values),
        Activation::None => {}
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(values: &mut [f64]) {
    let m = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

fn dense(input: &[f64], w: &LayerWeights) -> Vec<f64> {
    let out_f = w.kernel.shape()[1];
    let mut acc = vec![0.0; out_f];
    for (i, &x) in input.iter().enumerate() {
        let row = w.kernel.row(i);
        for (a, &wv) in acc.iter_mut().zip(row) {
            *a += x * wv;
        }
    }
    if let Some(b) = &w.bias {
        for (a, &bv) in acc.iter_mut().zip(b.data()) {
            *a += bv;
        }
    }
    acc
}

/// Everything a forward pass needs beyond the model, resolved once.
struct Plan {
    taps: [Vec<Vec<(usize, usize, f64)>>; 2],
    grids: [Grid; 3],
}

impl Plan {
    fn new(model: &ModelGraph, config: &InferenceConfig) -> Result<Plan> {
        let grids = config.activation_grids()?;
        let t = config.pruning_threshold;
        Ok(Plan {
            taps: [
                active_taps(model.weights(CONV1), t),
                active_taps(model.weights(CONV2), t),
            ],
            grids,
        })
    }
}

/// Pads with `PADDING_INDEX` or truncates to `max_length`.
pub fn fit_length(tokens: &[usize], max_length: usize) -> Vec<usize> {
    let mut out: Vec<usize> = tokens.iter().copied().take(max_length).collect();
    out.resize(max_length, PADDING_INDEX);
    out
}

fn forward_planned(
    model: &ModelGraph,
    tokens: &[usize],
    plan: &Plan,
    mut record: Option<&mut ActivationRanges>,
) -> Result<Vec<f64>> {
    let vocab = model.vocab_size();
    let dim = model.embedding_dim();
    let emb = &model.weights(EMBEDDING).kernel;
    let len = model.max_length;
    let mut x = Vec::with_capacity(len * dim);
    for &tok in &fit_length(tokens, len) {
        if tok >= vocab {
            return Err(Error::TokenOutOfRange {
                token: tok,
                vocab_size: vocab,
            });
        }
        x.extend_from_slice(emb.row(tok));
    }

    let mut features = Vec::new();
    for (b, name) in CONV_LAYERS.into_iter().enumerate() {
        let w = model.weights(name);
        let k = w.kernel.shape()[2];
        let bias = w.bias.as_ref().expect("conv has bias").data();
        let mut y = conv1d_raw(&x, len, dim, k, &plan.taps[b], bias);
        activate(&mut y, model.activation(name));
        let place = PlaceId::ACTIVATIONS[b];
        if let Some(rec) = record.as_deref_mut() {
            if let Some(r) = Range::of(&y) {
                *rec = std::mem::take(rec).merge(ActivationRanges([(place, r)].into()));
            }
        }
        let grid = &plan.grids[b];
        if *grid != Grid::PassThrough {
            for v in &mut y {
                *v = grid.quantize(*v);
            }
        }
        let out_ch = bias.len();
        match model.pool {
            Pool::Max => {
                let mut pooled = vec![f64::NEG_INFINITY; out_ch];
                for row in y.chunks_exact(out_ch) {
                    for (p, &v) in pooled.iter_mut().zip(row) {
                        if v > *p {
                            *p = v;
                        }
                    }
                }
                features.extend(pooled);
            }
            Pool::None => features.extend(y),
        }
    }

    let mut h = dense(&features, model.weights(DENSE1));
    activate(&mut h, model.activation(DENSE1));
    if let Some(rec) = record {
        if let Some(r) = Range::of(&h) {
            *rec = std::mem::take(rec).merge(ActivationRanges([(PlaceId::Dense1A, r)].into()));
        }
    }
    let grid = &plan.grids[2];
    if *grid != Grid::PassThrough {
        for v in &mut h {
            *v = grid.quantize(*v);
        }
    }
    let mut out = dense(&h, model.weights(DENSE2));
    activate(&mut out, model.activation(DENSE2));
    Ok(out)
}

/// Class scores for one document: a single sigmoid probability for binary
/// models, a softmax distribution otherwise.
pub fn forward(model: &ModelGraph, tokens: &[usize], config: &InferenceConfig) -> Result<Tensor> {
    let plan = Plan::new(model, config)?;
    let out = forward_planned(model, tokens, &plan, None)?;
    Tensor::new(vec![out.len()], out)
}

/// Decision rule: sigmoid >= 0.5 is class 1; otherwise the first argmax.
pub fn decide(scores: &[f64]) -> usize {
    if scores.len() == 1 {
        return usize::from(scores[0] >= 0.5);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &ModelGraph, tokens: &[usize], config: &InferenceConfig) -> Result<usize> {
    Ok(decide(forward(model, tokens, config)?.data()))
}

/// Predicted class for every document, in dataset order.
pub fn predictions(
    model: &ModelGraph,
    dataset: &Dataset,
    config: &InferenceConfig,
) -> Result<Vec<usize>> {
    let plan = Plan::new(model, config)?;
    dataset
        .documents
        .par_iter()
        .map(|d| forward_planned(model, &d.tokens, &plan, None).map(|s| decide(&s)))
        .collect()
}

/// Fraction of documents classified correctly.
pub fn evaluate(model: &ModelGraph, dataset: &Dataset, config: &InferenceConfig) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let preds = predictions(model, dataset, config)?;
    let correct = preds
        .iter()
        .zip(&dataset.documents)
        .filter(|(p, d)| **p == d.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Exact min/max of each activation place over every position of every
/// document, with float activations and the given pruning threshold.
pub fn calibrate_activations(
    model: &ModelGraph,
    dataset: &Dataset,
    pruning_threshold: f64,
) -> Result<ActivationRanges> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot calibrate on an empty dataset"));
    }
    let config = InferenceConfig::float().with_threshold(pruning_threshold);
    let plan = Plan::new(model, &config)?;
    dataset
        .documents
        .par_iter()
        .map(|d| {
            let mut rec = ActivationRanges::default();
            forward_planned(model, &d.tokens, &plan, Some(&mut rec))?;
            Ok(rec)
        })
        .try_reduce(ActivationRanges::default, |a, b| Ok(a.merge(b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    /// Output positions `P`.
    pub positions: u64,
    pub total: u64,
    pub performed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub total_macs: u64,
    pub performed_macs: u64,
    pub per_layer: BTreeMap<String, LayerMacs>,
}

impl MacReport {
    pub fn ratio(&self) -> f64 {
        if self.total_macs == 0 {
            1.0
        } else {
            self.performed_macs as f64 / self.total_macs as f64
        }
    }
}

/// MACs of one convolution: total `P*H*W*M*N` with `H = 1`, performed
/// counting only taps that survive `threshold` (and any stored mask).
pub fn conv_layer_macs(w: &LayerWeights, input_length: usize, threshold: f64) -> Result<LayerMacs> {
    check_threshold(threshold)?;
    let &[in_ch, out_ch, k] = w.kernel.shape() else {
        return Err(Error::Shape("conv kernel must be rank 3".into()));
    };
    if input_length < k {
        return Err(Error::invalid(format!(
            "input length {input_length} shorter than kernel {k}"
        )));
    }
    let p = (input_length - k + 1) as u64;
    let kept_taps = w
        .kernel
        .data()
        .iter()
        .enumerate()
        .filter(|&(i, v)| w.is_kept(i) && v.abs() >= threshold)
        .count() as u64;
    Ok(LayerMacs {
        positions: p,
        total: p * (k * in_ch * out_ch) as u64,
        performed: p * kept_taps,
    })
}

pub fn count_macs(model: &ModelGraph, input_length: usize, threshold: f64) -> Result<MacReport> {
    let mut per_layer = BTreeMap::new();
    for name in CONV_LAYERS {
        per_layer.insert(
            name.to_string(),
            conv_layer_macs(model.weights(name), input_length, threshold)?,
        );
    }
    Ok(MacReport {
        total_macs: per_layer.values().map(|l| l.total).sum(),
        performed_macs: per_layer.values().map(|l| l.performed).sum(),
        per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: Vec<usize>, v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = tensor(vec![4, 1], &[1.0, -2.0, 3.5, 0.25]);
        let y = conv1d_pruned(&x, &tensor(vec![1, 1, 1], &[1.0]), &tensor(vec![1], &[0.0]), 0.0)
            .unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn small_tap_skipped() {
        let x = tensor(vec![3, 1], &[1.0, 2.0, 3.0]);
        let w = tensor(vec![1, 1, 2], &[0.5, 0.01]);
        let y = conv1d_pruned(&x, &w, &tensor(vec![1], &[0.1]), 0.02).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert!((y.data()[0] - 0.6).abs() < 1e-12);
        assert!((y.data()[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn boundary_weight_is_kept() {
        let x = tensor(vec![1, 1], &[2.0]);
        let y = conv1d_pruned(&x, &tensor(vec![1, 1, 1], &[-0.5]), &tensor(vec![1], &[0.0]), 0.5)
            .unwrap();
        assert_eq!(y.data(), &[-1.0]);
    }

    #[test]
    fn conv_errors() {
        let x = tensor(vec![2, 1], &[1.0, 2.0]);
        let w = tensor(vec![1, 1, 3], &[1.0, 1.0, 1.0]);
        let b = tensor(vec![1], &[0.0]);
        assert!(conv1d_pruned(&x, &w, &b, 0.0).is_err());
        let w2 = tensor(vec![1, 1, 1], &[1.0]);
        assert!(conv1d_pruned(&x, &w2, &b, -0.1).is_err());
        assert!(conv1d_pruned(&x, &tensor(vec![2, 1, 1], &[1.0, 1.0]), &b, 0.0).is_err());
    }

    fn random_model(seed: u64, classes: usize) -> ModelGraph {
        let shape = ModelShape {
            vocab_size: 20,
            dim: 5,
            kernel_sizes: [2, 3],
            filters: [4, 3],
            hidden: 6,
            num_classes: classes,
            max_length: 9,
            pool: Pool::Max,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelGraph::from_shape(&shape, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let shape = ModelShape {
            vocab_size: 10,
            dim: 3,
            kernel_sizes: [2, 3],
            filters: [2, 2],
            hidden: 4,
            num_classes: 4,
            max_length: 5,
            pool: Pool::Max,
        };
        let m = ModelGraph::zeros(&shape).unwrap();
        let y = forward(&m, &[1, 2, 3], &InferenceConfig::float()).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn outputs_are_distributions() {
        let m = random_model(3, 5);
        let y = forward(&m, &[1, 4, 7, 2], &InferenceConfig::float()).unwrap();
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let b = random_model(4, 2);
        let p = forward(&b, &[1, 4, 7, 2], &InferenceConfig::float()).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p.data()[0] > 0.0 && p.data()[0] < 1.0);
    }

    #[test]
    fn out_of_vocab_token() {
        let m = random_model(3, 2);
        assert!(matches!(
            forward(&m, &[25], &InferenceConfig::float()),
            Err(Error::TokenOutOfRange { token: 25, .. })
        ));
    }

    #[test]
    fn missing_ranges_rejected() {
        let m = random_model(3, 2);
        let cfg = InferenceConfig {
            bit_assignment: Some(BitAssignment::full_precision().with(PlaceId::Dense1A, 4).unwrap()),
            ..Default::default()
        };
        assert!(matches!(
            forward(&m, &[1], &cfg),
            Err(Error::MissingRange(PlaceId::Dense1A))
        ));
    }

    #[test]
    fn all_32_equals_float_bitwise() {
        let m = random_model(8, 3);
        let cfg = InferenceConfig {
            bit_assignment: Some(BitAssignment::full_precision()),
            ..Default::default()
        };
        let a = forward(&m, &[3, 1, 4, 1, 5], &cfg).unwrap();
        let b = forward(&m, &[3, 1, 4, 1, 5], &InferenceConfig::float()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn activation_above_range_is_clipped() {
        let m = random_model(5, 2);
        let docs = &[vec![1, 2, 3], vec![4, 5, 6, 7, 8]];
        let mut ranges = ActivationRanges::default();
        for p in PlaceId::ACTIVATIONS {
            ranges.insert(p, Range::new(0.0, 1e-3).unwrap());
        }
        // With 1 bit over [-1e-3, 1e-3] every non-negative activation lands on
        // the upper midpoint, however large it was.
        let cfg = InferenceConfig {
            bit_assignment: Some(BitAssignment::full_precision().with(PlaceId::Dense1A, 1).unwrap()),
            activation_ranges: Some(ranges),
            ..Default::default()
        };
        let a = forward(&m, &docs[0], &cfg).unwrap();
        let b = forward(&m, &docs[1], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_ranges() {
        let m = random_model(6, 2);
        let docs: Vec<_> = (0..6)
            .map(|i| crate::data::Document {
                tokens: vec![1 + i, 2 + i, 3 + 2 * i],
                label: i % 2,
            })
            .collect();
        let all = Dataset::new(docs.clone(), 2, 9, 20).unwrap();
        let part = Dataset::new(docs[..2].to_vec(), 2, 9, 20).unwrap();
        let one = Dataset::new(docs[..1].to_vec(), 2, 9, 20).unwrap();
        let r_all = calibrate_activations(&m, &all, 0.0).unwrap();
        let r_part = calibrate_activations(&m, &part, 0.0).unwrap();
        let r_one = calibrate_activations(&m, &one, 0.0).unwrap();
        for p in PlaceId::ACTIVATIONS {
            let (a, b) = (r_all.get(p).unwrap(), r_part.get(p).unwrap());
            assert!(a.contains(&b), "{p}");
            assert!(b.min >= 0.0, "relu codomain");
        }
        // A single document's range is its own min/max, so recording the
        // same document twice changes nothing.
        let twice = Dataset::new(vec![docs[0].clone(), docs[0].clone()], 2, 9, 20).unwrap();
        assert_eq!(calibrate_activations(&m, &twice, 0.0).unwrap(), r_one);
    }

    #[test]
    fn mac_formula() {
        let w = LayerWeights::new(Tensor::zeros(vec![35, 16, 2]).map(|_| 0.5), None);
        let r = conv_layer_macs(&w, 64, 0.0).unwrap();
        assert_eq!(r.total, 63 * 2 * 35 * 16);
        assert_eq!(r.total, 70_560);
        assert_eq!(r.performed, r.total);
        let none = conv_layer_macs(&w, 64, f64::INFINITY).unwrap();
        assert_eq!(none.performed, 0);
        assert!(conv_layer_macs(&w, 1, 0.0).is_err());
    }

    #[test]
    fn model_mac_ratio() {
        let m = random_model(2, 2);
        let full = count_macs(&m, 9, 0.0).unwrap();
        assert_eq!(full.ratio(), 1.0);
        assert_eq!(full.total_macs, 8 * 2 * 5 * 4 + 7 * 3 * 5 * 3);
        let none = count_macs(&m, 9, 2.0).unwrap();
        assert_eq!(none.performed_macs, 0);
    }

    #[test]
    fn decision_rule() {
        assert_eq!(decide(&[0.5]), 1);
        assert_eq!(decide(&[0.4999]), 0);
        assert_eq!(decide(&[0.2, 0.4, 0.4]), 1);
    }
}
