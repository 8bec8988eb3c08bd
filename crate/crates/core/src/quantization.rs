//! Simulated quantization: uniform bucket-midpoint reduction (symmetric or
//! asymmetric range placement) and dynamic fixed point with saturation.
//!
//! Quantized tensors stay real-valued. Each value is replaced by the real
//! number its integer code stands for; the codes themselves are exposed
//! through [`Grid::code`] for report and code generation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{ActivationRanges, InferenceConfig};
use crate::model::{BitAssignment, LayerWeights, ModelGraph, PlaceId, FULL_PRECISION};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        let r = Range { min, max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(Error::invalid(format!(
                "invalid range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn of(values: &[f64]) -> Option<Range> {
        let mut it = values.iter().copied();
        let first = it.next()?;
        Some(it.fold(Range { min: first, max: first }, |r, v| Range {
            min: r.min.min(v),
            max: r.max.max(v),
        }))
    }

    pub fn union(&self, other: &Range) -> Range {
        Range {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    pub fn contains(&self, other: &Range) -> bool {
        self.min <= other.min && other.max <= self.max
    }

    pub fn max_abs(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }

    /// `[-M, M]` with `M` the largest magnitude in the range.
    pub fn symmetric(&self) -> Range {
        let m = self.max_abs();
        Range { min: -m, max: m }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Zero offset: range `[-max|x|, max|x|]`.
    #[default]
    SymmetricInteger,
    /// Offset at the minimum: range `[min x, max x]`.
    AsymmetricInteger,
    /// Power-of-two step with fractional length chosen from the data.
    DynamicFixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuantSpec {
    pub scheme: Scheme,
}

impl QuantSpec {
    pub fn new(scheme: Scheme) -> Self {
        QuantSpec { scheme }
    }
}

/// JSON form of a quantization plan:
/// `{"scheme":"symmetric_integer","bits":{"embedding_1":5,...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentFile {
    pub scheme: Scheme,
    pub bits: BitAssignment,
}

/// Signed fixed-point format; representable values are
/// `2^-frac_bits * {-2^(total_bits-1), ..., 2^(total_bits-1) - 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u32,
    pub int_bits: i32,
    pub frac_bits: i32,
}

impl FixedPointFormat {
    pub fn new(total_bits: u32, int_bits: i32) -> Result<Self> {
        if !(1..=FULL_PRECISION as u32).contains(&total_bits) {
            return Err(Error::invalid(format!(
                "fixed-point total_bits {total_bits} outside 1..=32"
            )));
        }
        Ok(FixedPointFormat {
            total_bits,
            int_bits,
            frac_bits: total_bits as i32 - int_bits - 1,
        })
    }

    /// Format whose integer part just covers `max_abs`.
    pub fn for_max_abs(max_abs: f64, total_bits: u32) -> Result<Self> {
        Self::new(total_bits, int_bits_for_max_abs(max_abs))
    }

    pub fn step(&self) -> f64 {
        (-self.frac_bits as f64).exp2()
    }

    fn code_bounds(&self) -> (f64, f64) {
        let half = ((self.total_bits - 1) as f64).exp2();
        (-half, half - 1.0)
    }

    pub fn min_value(&self) -> f64 {
        self.code_bounds().0 * self.step()
    }

    pub fn max_value(&self) -> f64 {
        self.code_bounds().1 * self.step()
    }

    pub fn code(&self, x: f64) -> i64 {
        let (lo, hi) = self.code_bounds();
        // `round` is half-away-from-zero.
        (x / self.step()).round().clamp(lo, hi) as i64
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.code(x) as f64 * self.step()
    }
}

/// `ceil(log2(max|x|))`, or 0 when every value is zero.
pub fn int_bits_for(values: &[f64]) -> i32 {
    int_bits_for_max_abs(values.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

fn int_bits_for_max_abs(m: f64) -> i32 {
    if m == 0.0 || !m.is_finite() {
        return 0;
    }
    // log2 may be off by an ulp around exact powers of two; settle the
    // exponent with exact comparisons.
    let mut e = m.log2().ceil() as i32;
    while ((e - 1) as f64).exp2() >= m {
        e -= 1;
    }
    while (e as f64).exp2() < m {
        e += 1;
    }
    e
}

/// A concrete quantizer for one place: where its representable values lie.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Grid {
    /// 32 bits: values are left untouched.
    PassThrough,
    /// `2^bits` equal buckets over `range`, each represented by its midpoint.
    Bucket { range: Range, bits: u32 },
    Fixed(FixedPointFormat),
}

impl Grid {
    pub fn bucket(range: Range, bits: u32) -> Result<Grid> {
        check_bits(bits)?;
        range.validate()?;
        Ok(if bits == FULL_PRECISION as u32 {
            Grid::PassThrough
        } else {
            Grid::Bucket { range, bits }
        })
    }

    /// Grid for a weight tensor under `spec`, its range taken from `values`.
    pub fn for_values(values: &[f64], bits: u32, spec: QuantSpec) -> Result<Grid> {
        let observed = Range::of(values).ok_or_else(|| Error::invalid("empty tensor"))?;
        Self::for_range(observed, bits, spec)
    }

    /// Grid for an observed range (calibrated activations or weights).
    pub fn for_range(observed: Range, bits: u32, spec: QuantSpec) -> Result<Grid> {
        check_bits(bits)?;
        observed.validate()?;
        if bits == FULL_PRECISION as u32 {
            return Ok(Grid::PassThrough);
        }
        Ok(match spec.scheme {
            Scheme::SymmetricInteger => Grid::Bucket {
                range: observed.symmetric(),
                bits,
            },
            Scheme::AsymmetricInteger => Grid::Bucket {
                range: observed,
                bits,
            },
            Scheme::DynamicFixedPoint => {
                Grid::Fixed(FixedPointFormat::for_max_abs(observed.max_abs(), bits)?)
            }
        })
    }

    /// Integer code of `x`. Bucket codes are the odd integers
    /// `2*index + 1 - 2^bits`, so that `value = zero_point + code * scale`.
    pub fn code(&self, x: f64) -> Option<i64> {
        match *self {
            Grid::PassThrough => None,
            Grid::Bucket { range, bits } => {
                if range.min == range.max {
                    return Some(0);
                }
                let n = (bits as f64).exp2();
                let w = (range.max - range.min) / n;
                let clipped = x.clamp(range.min, range.max);
                let idx = ((clipped - range.min) / w).floor().clamp(0.0, n - 1.0);
                Some((2.0 * idx + 1.0 - n) as i64)
            }
            Grid::Fixed(f) => Some(f.code(x)),
        }
    }

    /// Real value per unit of code.
    pub fn scale(&self) -> f64 {
        match *self {
            Grid::PassThrough => 1.0,
            Grid::Bucket { range, bits } => 0.5 * (range.max - range.min) / (bits as f64).exp2(),
            Grid::Fixed(f) => f.step(),
        }
    }

    /// Real value of code 0 (centre of the bucket range).
    pub fn zero_point(&self) -> f64 {
        match *self {
            Grid::Bucket { range, .. } => 0.5 * range.min + 0.5 * range.max,
            _ => 0.0,
        }
    }

    pub fn value_of(&self, code: i64) -> f64 {
        self.zero_point() + code as f64 * self.scale()
    }

    pub fn quantize(&self, x: f64) -> f64 {
        match *self {
            Grid::PassThrough => x,
            Grid::Bucket { range, .. } if range.min == range.max => range.min,
            Grid::Bucket { .. } | Grid::Fixed(_) => {
                let code = self.code(x).expect("grid has codes");
                self.value_of(code)
            }
        }
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (1..=FULL_PRECISION as u32).contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(format!("bit width {bits} outside 1..=32")))
    }
}

/// Replaces each value by the midpoint of its bucket among `2^bits` equal
/// buckets over `range`, clipping out-of-range values first. 32 bits is the
/// identity.
pub fn bucket_quantize(values: &Tensor, bits: u32, range: Range) -> Result<Tensor> {
    let grid = Grid::bucket(range, bits)?;
    Ok(values.map(|x| grid.quantize(x)))
}

/// Range placement for `values`: `[min, max]` (asymmetric, also used for
/// fixed point) or `[-M, M]` (symmetric).
pub fn compute_range(values: &[f64], spec: QuantSpec) -> Result<Range> {
    let r = Range::of(values).ok_or_else(|| Error::invalid("cannot compute range of empty input"))?;
    Ok(match spec.scheme {
        Scheme::SymmetricInteger => r.symmetric(),
        Scheme::AsymmetricInteger | Scheme::DynamicFixedPoint => r,
    })
}

/// Dynamic fixed point: the fractional length is chosen so the integer part
/// covers `max|x|`, then each value is rounded to the step and saturated.
pub fn fixed_point_quantize(values: &Tensor, total_bits: u32) -> Result<Tensor> {
    let fmt = FixedPointFormat::new(total_bits, int_bits_for(values.data()))?;
    Ok(values.map(|x| fmt.quantize(x)))
}

/// Grid a weight place would use on `w`: from an explicit range override
/// when given, else from the kept kernel values and the bias.
pub fn weight_grid(
    w: &LayerWeights,
    bits: u32,
    spec: QuantSpec,
    override_range: Option<Range>,
) -> Result<Grid> {
    if let Some(r) = override_range {
        return Grid::for_range(r, bits, spec);
    }
    let kept = w
        .kernel
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| w.is_kept(*i))
        .map(|(_, v)| *v);
    let values: Vec<f64> = kept.chain(w.bias.iter().flat_map(|b| b.data().iter().copied())).collect();
    if values.is_empty() {
        return Ok(Grid::PassThrough);
    }
    Grid::for_values(&values, bits, spec)
}

/// Quantizes a layer's kernel and bias on one shared grid. Removed
/// (pruned) taps stay zero.
pub fn quantize_weights(w: &LayerWeights, grid: &Grid) -> LayerWeights {
    if *grid == Grid::PassThrough {
        return w.clone();
    }
    let mut kernel = w.kernel.map(|x| grid.quantize(x));
    if let Some(kept) = &w.kept {
        for (v, &k) in kernel.data_mut().iter_mut().zip(kept) {
            if !k {
                *v = 0.0;
            }
        }
    }
    LayerWeights {
        kernel,
        bias: w.bias.as_ref().map(|b| b.map(|x| grid.quantize(x))),
        kept: w.kept.clone(),
    }
}

/// Quantizes one place. A weight place rewrites that layer's kernel and
/// bias in a new model; an activation place records its bit width in the
/// returned config and needs a calibrated range. `ranges` may also carry
/// explicit ranges for weight places.
pub fn quantize_place(
    model: &ModelGraph,
    config: &InferenceConfig,
    place: PlaceId,
    bits: u8,
    spec: QuantSpec,
    ranges: Option<&ActivationRanges>,
) -> Result<(ModelGraph, InferenceConfig)> {
    let mut model = model.clone();
    let mut config = config.clone();
    config.quant_spec = spec;
    let mut assignment = config.bit_assignment.unwrap_or_default();
    assignment.set(place, bits)?;
    if bits == FULL_PRECISION {
        config.bit_assignment = Some(assignment);
        return Ok((model, config));
    }
    let explicit = ranges.and_then(|r| r.get(place));
    if place.is_activation() {
        let range = explicit.ok_or(Error::MissingRange(place))?;
        let mut merged = config.activation_ranges.take().unwrap_or_default();
        merged.insert(place, range);
        config.activation_ranges = Some(merged);
    } else {
        let layer = place.layer();
        let w = model.weights(layer);
        let grid = weight_grid(w, bits as u32, spec, explicit)?;
        let q = quantize_weights(w, &grid);
        model.weights.insert(layer.to_string(), Arc::new(q));
    }
    config.bit_assignment = Some(assignment);
    Ok((model, config))
}

/// Applies a full bit assignment: quantized weights materialized in the
/// returned model, activation widths and ranges in the returned config.
pub fn apply_assignment(
    model: &ModelGraph,
    assignment: &BitAssignment,
    spec: QuantSpec,
    ranges: Option<&ActivationRanges>,
) -> Result<(ModelGraph, InferenceConfig)> {
    let mut model = model.clone();
    for place in PlaceId::WEIGHTS {
        let bits = assignment.get(place);
        if bits == FULL_PRECISION {
            continue;
        }
        let layer = place.layer();
        let w = model.weights(layer);
        let grid = weight_grid(w, bits as u32, spec, ranges.and_then(|r| r.get(place)))?;
        let q = quantize_weights(w, &grid);
        model.weights.insert(layer.to_string(), Arc::new(q));
    }
    let mut act_ranges = ActivationRanges::default();
    for place in PlaceId::ACTIVATIONS {
        if assignment.get(place) < FULL_PRECISION {
            let r = ranges
                .and_then(|r| r.get(place))
                .ok_or(Error::MissingRange(place))?;
            act_ranges.insert(place, r);
        }
    }
    let config = InferenceConfig {
        bit_assignment: Some(*assignment),
        quant_spec: spec,
        activation_ranges: ranges.cloned().or(Some(act_ranges)),
        pruning_threshold: 0.0,
    };
    Ok((model, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn one_bit_two_midpoints() {
        let q = bucket_quantize(&t(&[0.0, 1.0]), 1, Range::new(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(q.data(), &[0.25, 0.75]);
    }

    #[test]
    fn two_bit_symmetric_example() {
        // width 0.5, index 2, midpoint -1 + 2.5 * 0.5
        let q = bucket_quantize(&t(&[0.1]), 2, Range::new(-1.0, 1.0).unwrap()).unwrap();
        assert_eq!(q.data(), &[0.25]);
    }

    #[test]
    fn max_maps_into_last_bucket_and_clipping() {
        let r = Range::new(0.0, 1.0).unwrap();
        let q = bucket_quantize(&t(&[1.0, 7.0, -3.0]), 2, r).unwrap();
        assert_eq!(q.data(), &[0.875, 0.875, 0.125]);
    }

    #[test]
    fn degenerate_range_is_constant() {
        let r = Range::new(0.5, 0.5).unwrap();
        let q = bucket_quantize(&t(&[0.5, 3.0, -1.0]), 3, r).unwrap();
        assert_eq!(q.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn thirty_two_bits_is_identity() {
        let v = t(&[0.123456789, -9.0, 42.0]);
        let q = bucket_quantize(&v, 32, Range::new(-1.0, 1.0).unwrap()).unwrap();
        assert_eq!(q, v);
    }

    #[test]
    fn bits_out_of_range_rejected() {
        let r = Range::new(0.0, 1.0).unwrap();
        assert!(bucket_quantize(&t(&[0.0]), 0, r).is_err());
        assert!(bucket_quantize(&t(&[0.0]), 33, r).is_err());
        assert!(Range::new(1.0, 0.0).is_err());
    }

    #[test]
    fn ranges() {
        let sym = QuantSpec::new(Scheme::SymmetricInteger);
        let asym = QuantSpec::new(Scheme::AsymmetricInteger);
        assert_eq!(compute_range(&[-1.0, 2.0], asym).unwrap(), Range { min: -1.0, max: 2.0 });
        assert_eq!(compute_range(&[-1.0, 2.0], sym).unwrap(), Range { min: -2.0, max: 2.0 });
        let z = compute_range(&[0.0], sym).unwrap();
        assert_eq!((z.min, z.max), (0.0, 0.0));
        assert!(compute_range(&[], sym).is_err());
    }

    #[test]
    fn int_bits() {
        assert_eq!(int_bits_for(&[1.0, -6.0]), 3);
        assert_eq!(int_bits_for(&[8.0]), 3);
        assert_eq!(int_bits_for(&[0.3, -0.1]), -1);
        assert_eq!(int_bits_for(&[0.0, 0.0]), 0);
        assert_eq!(int_bits_for(&[1.0]), 0);
        assert_eq!(int_bits_for(&[0.5]), -1);
        assert_eq!(int_bits_for(&[0.5000001]), 0);
    }

    #[test]
    fn fixed_point_example() {
        let q = fixed_point_quantize(&t(&[6.0, 0.1, 0.0]), 8).unwrap();
        // int_bits 3, frac_bits 4: round(1.6)/16
        assert_eq!(q.data()[1], 0.125);
        assert_eq!(q.data()[2], 0.0);
        assert_eq!(q.data()[0], 6.0);
    }

    #[test]
    fn fixed_point_saturates() {
        let f = FixedPointFormat::new(8, 3).unwrap();
        assert_eq!(f.frac_bits, 4);
        assert_eq!(f.quantize(100.0), 127.0 / 16.0);
        assert_eq!(f.quantize(-100.0), -128.0 / 16.0);
        // max|x| exactly a power of two saturates at the top code
        let q = fixed_point_quantize(&t(&[8.0]), 8).unwrap();
        assert_eq!(q.data()[0], 127.0 / 16.0);
    }

    #[test]
    fn fixed_point_negative_int_bits() {
        let q = fixed_point_quantize(&t(&[0.3, 0.01]), 4).unwrap();
        // int_bits -1, frac_bits 4, step 1/16
        assert_eq!(q.data(), &[5.0 / 16.0, 0.0]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let f = FixedPointFormat::new(8, 3).unwrap();
        assert_eq!(f.quantize(1.5 / 16.0), 2.0 / 16.0);
        assert_eq!(f.quantize(-1.5 / 16.0), -2.0 / 16.0);
    }

    #[test]
    fn codes_reconstruct_values() {
        let g = Grid::for_range(Range::new(-0.7, 1.3).unwrap(), 3, QuantSpec::new(Scheme::AsymmetricInteger)).unwrap();
        for i in 0..200 {
            let x = -1.0 + i as f64 * 0.0173;
            let c = g.code(x).unwrap();
            assert_eq!(c.rem_euclid(2), 1);
            assert!((-7..=7).contains(&c));
            assert_eq!(g.value_of(c), g.quantize(x));
        }
    }

    proptest! {
        #[test]
        fn error_bound_and_idempotence(
            lo in -10.0f64..10.0,
            span in 1e-3f64..20.0,
            bits in 1u32..=16,
            u in 0.0f64..=1.0,
        ) {
            let r = Range::new(lo, lo + span).unwrap();
            let g = Grid::bucket(r, bits).unwrap();
            let x = r.min + u * (r.max - r.min);
            let x = x.min(r.max);
            let q = g.quantize(x);
            let w = (r.max - r.min) / (bits as f64).exp2();
            prop_assert!((q - x).abs() <= w / 2.0, "x={x} q={q} w={w}");
            prop_assert_eq!(g.quantize(q), q);
        }

        #[test]
        fn cardinality(bits in 1u32..=6, xs in proptest::collection::vec(-2.0f64..2.0, 1..400)) {
            let r = Range::new(-1.5, 1.5).unwrap();
            let q = bucket_quantize(&Tensor::new(vec![xs.len()], xs).unwrap(), bits, r).unwrap();
            let mut distinct: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert!(distinct.len() <= 1usize << bits);
        }

        #[test]
        fn symmetric_grid_is_odd(bits in 1u32..=16, m in 0.01f64..10.0, u in 0.0f64..1.0) {
            let g = Grid::for_range(Range::new(-m, m).unwrap(), bits, QuantSpec::default()).unwrap();
            let x = u * m;
            let w = 2.0 * m / (bits as f64).exp2();
            let frac = (x + m) / w;
            prop_assume!((frac - frac.round()).abs() > 1e-9);
            prop_assert_eq!(g.quantize(x) + g.quantize(-x), 0.0);
        }

        #[test]
        fn fixed_point_32_near_identity(xs in proptest::collection::vec(-4.0f64..4.0, 1..50)) {
            let v = Tensor::new(vec![xs.len()], xs).unwrap();
            let frac = 32 - int_bits_for(v.data()) - 1;
            let q = fixed_point_quantize(&v, 32).unwrap();
            let bound = (-(frac as f64) - 1.0).exp2();
            for (a, b) in v.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() <= bound);
            }
        }
    }
}
