//! Storage accounting and table emission.
//!
//! Every weight place stores `param_count * bits / 8` bytes (fractional
//! bytes kept exactly); a layer's bias shares its kernel's width;
//! activation places cost nothing. Megabytes are `2^20` bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BitAssignment, ModelGraph, PlaceId, EMBEDDING, FULL_PRECISION};

pub const BYTES_PER_MB: f64 = 1_048_576.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSize {
    pub param_count: usize,
    pub bits: u8,
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub per_layer: BTreeMap<String, LayerSize>,
    /// Exact storage in bits.
    pub total_bits: u64,
    pub total_bytes: f64,
    pub total_mb: f64,
    /// Storage of the same model at 32 bits everywhere, nothing excluded.
    pub baseline_bytes: f64,
    /// `100 * (1 - total / baseline)`.
    pub reduction_percent: f64,
    /// `100 * embedding_bytes / total_bytes`.
    pub embedding_share_percent: f64,
}

/// Storage of `model` under `assignment`. With `exclude_pruned`, weights
/// removed by pruning cost nothing.
pub fn model_size(
    model: &ModelGraph,
    assignment: &BitAssignment,
    exclude_pruned: bool,
) -> Result<SizeReport> {
    let mut per_layer = BTreeMap::new();
    let mut total_bits = 0u64;
    let mut baseline_bits = 0u64;
    for place in PlaceId::WEIGHTS {
        let name = place.layer();
        let w = model
            .weights
            .get(name)
            .ok_or_else(|| Error::MissingPlace(place.to_string()))?;
        let bits = assignment.get(place);
        let all = w.param_count();
        let stored = if exclude_pruned {
            all - w.removed_count()
        } else {
            all
        };
        let layer_bits = stored as u64 * bits as u64;
        total_bits += layer_bits;
        baseline_bits += all as u64 * FULL_PRECISION as u64;
        per_layer.insert(
            name.to_string(),
            LayerSize {
                param_count: stored,
                bits,
                bytes: layer_bits as f64 / 8.0,
            },
        );
    }
    let total_bytes = total_bits as f64 / 8.0;
    let baseline_bytes = baseline_bits as f64 / 8.0;
    let embedding_bytes = per_layer[EMBEDDING].bytes;
    Ok(SizeReport {
        total_bits,
        total_bytes,
        total_mb: total_bytes / BYTES_PER_MB,
        baseline_bytes,
        reduction_percent: 100.0 * (1.0 - total_bytes / baseline_bytes),
        embedding_share_percent: if total_bytes > 0.0 {
            100.0 * embedding_bytes / total_bytes
        } else {
            0.0
        },
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<u8> for Cell {
    fn from(v: u8) -> Self {
        Cell::Int(v as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// A header plus rows; reals print with a fixed number of decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub decimals: usize,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            decimals: 6,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }

    fn check(&self) -> Result<()> {
        match self.rows.iter().position(|r| r.len() != self.columns.len()) {
            Some(i) => Err(Error::invalid(format!(
                "row {i} has {} cells, schema has {} columns",
                self.rows[i].len(),
                self.columns.len()
            ))),
            None => Ok(()),
        }
    }

    fn render(&self, cell: &Cell) -> String {
        match cell {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format!("{:.*}", self.decimals, v),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        self.check()?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| self.render(c)))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        self.check()?;
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|row| {
                let obj: serde_json::Map<String, serde_json::Value> = self
                    .columns
                    .iter()
                    .zip(row)
                    .map(|(k, c)| {
                        let v = match c {
                            Cell::Int(i) => serde_json::Value::from(*i),
                            // Round through the fixed decimal rendering.
                            Cell::Real(_) => self
                                .render(c)
                                .parse::<f64>()
                                .ok()
                                .and_then(serde_json::Number::from_f64)
                                .map_or(serde_json::Value::Null, serde_json::Value::Number),
                            Cell::Text(s) => serde_json::Value::from(s.as_str()),
                        };
                        (k.clone(), v)
                    })
                    .collect();
                serde_json::Value::Object(obj)
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)? + "\n")
    }
}

/// Writes `table` to `path` in the requested format.
pub fn emit_table(table: &Table, path: &Path, format: Format) -> Result<()> {
    let text = match format {
        Format::Csv => table.to_csv()?,
        Format::Json => table.to_json()?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses CSV text into its header and string rows.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;

    #[test]
    fn all_32_is_baseline() {
        let m = ModelGraph::zeros(&ModelShape::cnn_static(1000, 2, 20)).unwrap();
        let r = model_size(&m, &BitAssignment::full_precision(), false).unwrap();
        let params: usize = crate::model::parameter_counts(&m).values().sum();
        assert_eq!(r.total_bytes, 4.0 * params as f64);
        assert_eq!(r.total_bytes, r.baseline_bytes);
        assert_eq!(r.reduction_percent, 0.0);
    }

    #[test]
    fn size_is_linear_in_bits() {
        let m = ModelGraph::zeros(&ModelShape::cnn_static(777, 3, 20)).unwrap();
        let a = BitAssignment::from_pairs(
            &PlaceId::ALL.map(|p| (p, 1 + p.index() as u8 * 2)),
        )
        .unwrap();
        let doubled = BitAssignment::from_pairs(&PlaceId::ALL.map(|p| (p, 2 * a.get(p)))).unwrap();
        let s1 = model_size(&m, &a, false).unwrap();
        let s2 = model_size(&m, &doubled, false).unwrap();
        assert_eq!(s2.total_bytes, 2.0 * s1.total_bytes);
    }

    #[test]
    fn activation_places_cost_nothing() {
        let m = ModelGraph::zeros(&ModelShape::cnn_static(500, 2, 20)).unwrap();
        let base = BitAssignment::uniform(4).unwrap();
        let s1 = model_size(&m, &base, false).unwrap();
        let s2 = model_size(&m, &base.with(PlaceId::Dense1A, 32).unwrap(), false).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn pruned_weights_optionally_excluded() {
        let m = ModelGraph::from_shape(&ModelShape::cnn_static(50, 2, 10), |_, _, i| (i % 7) as f64 * 0.01)
            .unwrap();
        let p = crate::pruning::prune_model(&m, 0.035).unwrap();
        let a = BitAssignment::full_precision();
        let kept = model_size(&p, &a, false).unwrap();
        let excl = model_size(&p, &a, true).unwrap();
        assert_eq!(kept, model_size(&m, &a, false).unwrap());
        assert!(excl.total_bytes < kept.total_bytes);
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(&["threshold", "accuracy", "mac_ratio"]);
        assert_eq!(t.to_csv().unwrap(), "threshold,accuracy,mac_ratio\n");
        assert_eq!(t.to_json().unwrap(), "[]\n");
    }

    #[test]
    fn fixed_decimals_and_quoting() {
        let mut t = Table::new(&["place_set", "bits", "accuracy"]);
        t.push(vec!["conv1d_1+dense_1".into(), 5u8.into(), 0.8.into()]);
        t.push(vec!["a,b".into(), 32u8.into(), (1.0 / 3.0).into()]);
        assert_eq!(
            t.to_csv().unwrap(),
            "place_set,bits,accuracy\nconv1d_1+dense_1,5,0.800000\n\"a,b\",32,0.333333\n"
        );
        let j: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(j[1]["accuracy"], serde_json::json!(0.333333));
        t.push(vec![Cell::Int(1)]);
        assert!(t.to_csv().is_err());
    }

    #[test]
    fn emission_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(&["x", "y"]);
        for i in 0..20 {
            t.push(vec![Cell::Int(i), Cell::Real(i as f64 / 7.0)]);
        }
        for fmt in [Format::Csv, Format::Json] {
            let (a, b) = (dir.path().join("a"), dir.path().join("b"));
            emit_table(&t, &a, fmt).unwrap();
            emit_table(&t, &b, fmt).unwrap();
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }
}
