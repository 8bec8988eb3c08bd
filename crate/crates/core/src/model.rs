//! CNN-static topology, its on-disk format, and the quantizable places.
//!
//! The graph is fixed: `embedding_1` feeds two parallel convolution
//! branches (`conv1d_1`, `conv1d_2`), each optionally max-pooled over time,
//! concatenated, then `dense_1` and `dense_2`.
//!
//! On disk a model is a JSON manifest plus a headerless blob of
//! little-endian `f32` values. Layers appear in the blob in manifest order,
//! kernel first then bias.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBEDDING: &str = "embedding_1";
pub const CONV1: &str = "conv1d_1";
pub const CONV2: &str = "conv1d_2";
pub const DENSE1: &str = "dense_1";
pub const DENSE2: &str = "dense_2";

/// Weighted layers in topological order.
pub const WEIGHTED_LAYERS: [&str; 5] = [EMBEDDING, CONV1, CONV2, DENSE1, DENSE2];
pub const CONV_LAYERS: [&str; 2] = [CONV1, CONV2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LayerSpec {
    Embedding {
        vocab_size: usize,
        dim: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        activation: Activation,
    },
    GlobalMaxPool {},
    Concat {
        inputs: Vec<String>,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    /// Kernel and bias shapes for weighted layers.
    pub fn weight_shapes(&self) -> Option<(Vec<usize>, Option<Vec<usize>>)> {
        match *self {
            LayerSpec::Embedding { vocab_size, dim } => Some((vec![vocab_size, dim], None)),
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => Some((
                vec![in_channels, out_channels, kernel_size],
                Some(vec![out_channels]),
            )),
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => Some((vec![in_features, out_features], Some(vec![out_features]))),
            LayerSpec::GlobalMaxPool {} | LayerSpec::Concat { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    #[serde(flatten)]
    pub spec: LayerSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Max,
    None,
}

/// Stored parameters of one layer.
///
/// Convolution kernels are `[in_channels, out_channels, kernel_size]`,
/// dense kernels `[in_features, out_features]`, embeddings
/// `[vocab_size, dim]`. `kept` marks taps that survived pruning; removed
/// taps also hold explicit zeros in `kernel`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub kept: Option<Vec<bool>>,
}

impl LayerWeights {
    pub fn new(kernel: Tensor, bias: Option<Tensor>) -> Self {
        LayerWeights {
            kernel,
            bias,
            kept: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Whether kernel tap `i` (flat index) is still present.
    #[inline]
    pub fn is_kept(&self, i: usize) -> bool {
        self.kept.as_ref().is_none_or(|k| k[i])
    }

    pub fn removed_count(&self) -> usize {
        self.kept
            .as_ref()
            .map_or(0, |k| k.iter().filter(|&&b| !b).count())
    }
}

/// Sizes of a CNN-static instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub dim: usize,
    pub kernel_sizes: [usize; 2],
    pub filters: [usize; 2],
    pub hidden: usize,
    pub num_classes: usize,
    pub max_length: usize,
    pub pool: Pool,
}

impl ModelShape {
    /// 300-d embeddings, kernel sizes 2 and 3 with 128 filters each, a
    /// 128-unit hidden layer.
    pub fn cnn_static(vocab_size: usize, num_classes: usize, max_length: usize) -> Self {
        ModelShape {
            vocab_size,
            dim: 300,
            kernel_sizes: [2, 3],
            filters: [128, 128],
            hidden: 128,
            num_classes,
            max_length,
            pool: Pool::Max,
        }
    }

    pub fn output_units(&self) -> usize {
        if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        }
    }

    fn concat_width(&self) -> usize {
        match self.pool {
            Pool::Max => self.filters[0] + self.filters[1],
            Pool::None => (0..2)
                .map(|b| (self.max_length + 1).saturating_sub(self.kernel_sizes[b]) * self.filters[b])
                .sum(),
        }
    }

    pub fn layers(&self) -> Vec<Layer> {
        let out_act = if self.num_classes == 2 {
            Activation::Sigmoid
        } else {
            Activation::Softmax
        };
        let mut layers = vec![
            Layer {
                name: EMBEDDING.into(),
                spec: LayerSpec::Embedding {
                    vocab_size: self.vocab_size,
                    dim: self.dim,
                },
            },
            Layer {
                name: CONV1.into(),
                spec: LayerSpec::Conv1d {
                    in_channels: self.dim,
                    out_channels: self.filters[0],
                    kernel_size: self.kernel_sizes[0],
                    activation: Activation::Relu,
                },
            },
            Layer {
                name: CONV2.into(),
                spec: LayerSpec::Conv1d {
                    in_channels: self.dim,
                    out_channels: self.filters[1],
                    kernel_size: self.kernel_sizes[1],
                    activation: Activation::Relu,
                },
            },
        ];
        let concat_inputs = if self.pool == Pool::Max {
            for n in ["global_max_pooling1d_1", "global_max_pooling1d_2"] {
                layers.push(Layer {
                    name: n.into(),
                    spec: LayerSpec::GlobalMaxPool {},
                });
            }
            vec!["global_max_pooling1d_1".into(), "global_max_pooling1d_2".into()]
        } else {
            vec![CONV1.into(), CONV2.into()]
        };
        layers.push(Layer {
            name: "concatenate_1".into(),
            spec: LayerSpec::Concat {
                inputs: concat_inputs,
            },
        });
        layers.push(Layer {
            name: DENSE1.into(),
            spec: LayerSpec::Dense {
                in_features: self.concat_width(),
                out_features: self.hidden,
                activation: Activation::Relu,
            },
        });
        layers.push(Layer {
            name: DENSE2.into(),
            spec: LayerSpec::Dense {
                in_features: self.hidden,
                out_features: self.output_units(),
                activation: out_act,
            },
        });
        layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub weights: BTreeMap<String, Arc<LayerWeights>>,
    pub num_classes: usize,
    pub max_length: usize,
    pub pool: Pool,
}

impl ModelGraph {
    /// Builds a model of the given shape, filling every kernel and bias
    /// entry from `init(layer_name, is_bias, flat_index)`.
    pub fn from_shape(
        shape: &ModelShape,
        mut init: impl FnMut(&str, bool, usize) -> f64,
    ) -> Result<Self> {
        let layers = shape.layers();
        let mut weights = BTreeMap::new();
        for layer in &layers {
            if let Some((ks, bs)) = layer.spec.weight_shapes() {
                let name = layer.name.as_str();
                let kernel = Tensor::from_fn(ks, |i| init(name, false, i))?;
                let bias = bs.map(|s| Tensor::from_fn(s, |i| init(name, true, i))).transpose()?;
                weights.insert(layer.name.clone(), Arc::new(LayerWeights::new(kernel, bias)));
            }
        }
        let model = ModelGraph {
            layers,
            weights,
            num_classes: shape.num_classes,
            max_length: shape.max_length,
            pool: shape.pool,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn zeros(shape: &ModelShape) -> Result<Self> {
        Self::from_shape(shape, |_, _, _| 0.0)
    }

    pub fn layer(&self, name: &str) -> Result<&Layer> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Topology(format!("missing layer `{name}`")))
    }

    pub fn weights(&self, name: &str) -> &LayerWeights {
        &self.weights[name]
    }

    /// Replaces the stored parameters of one layer.
    pub fn set_weights(&mut self, name: &str, w: LayerWeights) {
        self.weights.insert(name.to_string(), Arc::new(w));
    }

    pub fn conv_kernel_size(&self, name: &str) -> usize {
        match self.layer(name).map(|l| &l.spec) {
            Ok(LayerSpec::Conv1d { kernel_size, .. }) => *kernel_size,
            _ => 0,
        }
    }

    pub fn activation(&self, name: &str) -> Activation {
        match self.layer(name).map(|l| &l.spec) {
            Ok(LayerSpec::Conv1d { activation, .. } | LayerSpec::Dense { activation, .. }) => {
                *activation
            }
            _ => Activation::None,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights(EMBEDDING).kernel.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.weights(EMBEDDING).kernel.shape()[1]
    }

    /// Checks topology, arities and stored weight shapes.
    pub fn validate(&self) -> Result<()> {
        let topo = |m: String| Err(Error::Topology(m));
        let mut names = std::collections::BTreeSet::new();
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return topo(format!("duplicate layer name `{}`", l.name));
            }
        }
        let (vocab, dim) = match self.layer(EMBEDDING)?.spec {
            LayerSpec::Embedding { vocab_size, dim } => (vocab_size, dim),
            _ => return topo(format!("`{EMBEDDING}` must be an embedding layer")),
        };
        let mut branch_width = 0;
        for name in CONV_LAYERS {
            match self.layer(name)?.spec {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel_size,
                    ..
                } => {
                    if in_channels != dim {
                        return topo(format!(
                            "`{name}` in_channels {in_channels} != embedding dim {dim}"
                        ));
                    }
                    if kernel_size == 0 || kernel_size > self.max_length {
                        return topo(format!(
                            "`{name}` kernel_size {kernel_size} incompatible with max_length {}",
                            self.max_length
                        ));
                    }
                    branch_width += match self.pool {
                        Pool::Max => out_channels,
                        Pool::None => (self.max_length - kernel_size + 1) * out_channels,
                    };
                }
                _ => return topo(format!("`{name}` must be a conv1d layer")),
            }
        }
        let pools = self
            .layers
            .iter()
            .filter(|l| matches!(l.spec, LayerSpec::GlobalMaxPool {}))
            .count();
        let expected_pools = if self.pool == Pool::Max { 2 } else { 0 };
        if pools != expected_pools {
            return topo(format!(
                "pool = {:?} requires {expected_pools} global_max_pool layers, found {pools}",
                self.pool
            ));
        }
        let concats: Vec<&Layer> = self
            .layers
            .iter()
            .filter(|l| matches!(l.spec, LayerSpec::Concat { .. }))
            .collect();
        match concats.as_slice() {
            [Layer {
                spec: LayerSpec::Concat { inputs },
                ..
            }] => {
                if inputs.len() != 2 || inputs.iter().any(|i| !names.contains(i.as_str())) {
                    return topo("concat must join the two branch outputs".into());
                }
            }
            _ => return topo("exactly one concat layer required".into()),
        }
        let hidden = match self.layer(DENSE1)?.spec {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                if in_features != branch_width {
                    return topo(format!(
                        "`{DENSE1}` in_features {in_features} != concatenated width {branch_width}"
                    ));
                }
                out_features
            }
            _ => return topo(format!("`{DENSE1}` must be a dense layer")),
        };
        match self.layer(DENSE2)?.spec {
            LayerSpec::Dense {
                in_features,
                out_features,
                activation,
            } => {
                if in_features != hidden {
                    return topo(format!(
                        "`{DENSE2}` in_features {in_features} != `{DENSE1}` out_features {hidden}"
                    ));
                }
                let (units, act) = if self.num_classes == 2 {
                    (1, Activation::Sigmoid)
                } else {
                    (self.num_classes, Activation::Softmax)
                };
                if self.num_classes < 2 || out_features != units || activation != act {
                    return topo(format!(
                        "`{DENSE2}` must have {units} output(s) with {act:?} for {} classes",
                        self.num_classes
                    ));
                }
            }
            _ => return topo(format!("`{DENSE2}` must be a dense layer")),
        }

        for layer in &self.layers {
            let Some((ks, bs)) = layer.spec.weight_shapes() else {
                continue;
            };
            if ks.iter().chain(bs.iter().flatten()).any(|&d| d == 0) {
                return Err(Error::Shape(format!(
                    "layer `{}` has an empty weight tensor",
                    layer.name
                )));
            }
            let w = self.weights.get(&layer.name).ok_or_else(|| {
                Error::Topology(format!("no weights stored for `{}`", layer.name))
            })?;
            if w.kernel.shape() != ks.as_slice() {
                return Err(Error::Shape(format!(
                    "`{}` kernel shape {:?}, expected {:?}",
                    layer.name,
                    w.kernel.shape(),
                    ks
                )));
            }
            if w.bias.as_ref().map(|b| b.shape().to_vec()) != bs {
                return Err(Error::Shape(format!("`{}` bias shape mismatch", layer.name)));
            }
            if let Some(k) = &w.kept {
                if k.len() != w.kernel.len() {
                    return Err(Error::Shape(format!("`{}` mask length mismatch", layer.name)));
                }
            }
        }
        if vocab == 0 {
            return topo("empty vocabulary".into());
        }
        Ok(())
    }
}

/// Per-layer parameter counts, biases included.
pub fn parameter_counts(model: &ModelGraph) -> BTreeMap<String, usize> {
    model
        .weights
        .iter()
        .map(|(name, w)| (name.clone(), w.param_count()))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    layers: Vec<Layer>,
    num_classes: usize,
    max_length: usize,
    weights_file: String,
    pool: Pool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_file: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    masked_layers: Vec<String>,
}

fn sibling(manifest_path: &Path, file: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(file)
}

pub fn load_model(manifest_path: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let blob_path = sibling(manifest_path, &manifest.weights_file);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::BlobLength {
            layer: manifest.weights_file.clone(),
            message: format!("{} bytes is not a whole number of f32 values", blob.len()),
        });
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut masks = match &manifest.mask_file {
        Some(f) => {
            let p = sibling(manifest_path, f);
            fs::read(&p).map_err(|e| Error::io(&p, e))?
        }
        None => Vec::new(),
    }
    .into_iter();

    let mut offset = 0usize;
    let mut weights = BTreeMap::new();
    let mut take = |layer: &str, shape: Vec<usize>| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if offset + n > floats.len() {
            return Err(Error::BlobLength {
                layer: layer.to_string(),
                message: format!(
                    "needs {} values at offset {offset}, blob holds {}",
                    n,
                    floats.len()
                ),
            });
        }
        let data = floats[offset..offset + n].iter().map(|&v| v as f64).collect();
        offset += n;
        Tensor::new(shape, data).map_err(|e| Error::BlobLength {
            layer: layer.to_string(),
            message: e.to_string(),
        })
    };
    let mut last = String::new();
    for layer in &manifest.layers {
        let Some((ks, bs)) = layer.spec.weight_shapes() else {
            continue;
        };
        let kernel = take(&layer.name, ks)?;
        let bias = bs.map(|s| take(&layer.name, s)).transpose()?;
        let mut w = LayerWeights::new(kernel, bias);
        if manifest.masked_layers.contains(&layer.name) {
            let mask: Vec<bool> = masks.by_ref().take(w.kernel.len()).map(|b| b != 0).collect();
            if mask.len() != w.kernel.len() {
                return Err(Error::Shape(format!("mask file too short for `{}`", layer.name)));
            }
            w.kept = Some(mask);
        }
        weights.insert(layer.name.clone(), Arc::new(w));
        last = layer.name.clone();
    }
    if offset != floats.len() {
        return Err(Error::BlobLength {
            layer: last,
            message: format!("{} trailing values after last layer", floats.len() - offset),
        });
    }
    let model = ModelGraph {
        layers: manifest.layers,
        weights,
        num_classes: manifest.num_classes,
        max_length: manifest.max_length,
        pool: manifest.pool,
    };
    model.validate()?;
    Ok(model)
}

/// Writes `<manifest_path>` and a sibling `<stem>.weights.bin` (plus
/// `<stem>.mask.bin` when any layer carries a pruning mask). Values are
/// narrowed to `f32`.
pub fn save_model(model: &ModelGraph, manifest_path: &Path, force: bool) -> Result<()> {
    model.validate()?;
    if manifest_path.exists() && !force {
        return Err(Error::AlreadyExists {
            path: manifest_path.to_path_buf(),
        });
    }
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let weights_file = format!("{stem}.weights.bin");
    let mut blob = Vec::new();
    let mut mask = Vec::new();
    let mut masked_layers = Vec::new();
    for layer in &model.layers {
        let Some(w) = model.weights.get(&layer.name) else {
            continue;
        };
        let tensors = std::iter::once(&w.kernel).chain(w.bias.as_ref());
        for v in tensors.flat_map(|t| t.data()) {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(k) = &w.kept {
            masked_layers.push(layer.name.clone());
            mask.extend(k.iter().map(|&b| b as u8));
        }
    }
    let mask_file = (!masked_layers.is_empty()).then(|| format!("{stem}.mask.bin"));
    let manifest = Manifest {
        layers: model.layers.clone(),
        num_classes: model.num_classes,
        max_length: model.max_length,
        weights_file: weights_file.clone(),
        pool: model.pool,
        mask_file: mask_file.clone(),
        masked_layers,
    };
    let blob_path = sibling(manifest_path, &weights_file);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    if let Some(f) = mask_file {
        let p = sibling(manifest_path, &f);
        fs::write(&p, mask).map_err(|e| Error::io(&p, e))?;
    }
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

/// One of the eight quantizable sites: five weight tensors and three
/// activation outputs (suffix `_a`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceId {
    #[serde(rename = "embedding_1")]
    Embedding1,
    #[serde(rename = "conv1d_1")]
    Conv1d1,
    #[serde(rename = "conv1d_1_a")]
    Conv1d1A,
    #[serde(rename = "conv1d_2")]
    Conv1d2,
    #[serde(rename = "conv1d_2_a")]
    Conv1d2A,
    #[serde(rename = "dense_1")]
    Dense1,
    #[serde(rename = "dense_1_a")]
    Dense1A,
    #[serde(rename = "dense_2")]
    Dense2,
}

impl PlaceId {
    pub const ALL: [PlaceId; 8] = [
        PlaceId::Embedding1,
        PlaceId::Conv1d1,
        PlaceId::Conv1d1A,
        PlaceId::Conv1d2,
        PlaceId::Conv1d2A,
        PlaceId::Dense1,
        PlaceId::Dense1A,
        PlaceId::Dense2,
    ];

    pub const WEIGHTS: [PlaceId; 5] = [
        PlaceId::Embedding1,
        PlaceId::Conv1d1,
        PlaceId::Conv1d2,
        PlaceId::Dense1,
        PlaceId::Dense2,
    ];

    pub const ACTIVATIONS: [PlaceId; 3] = [PlaceId::Conv1d1A, PlaceId::Conv1d2A, PlaceId::Dense1A];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_activation(self) -> bool {
        matches!(self, PlaceId::Conv1d1A | PlaceId::Conv1d2A | PlaceId::Dense1A)
    }

    /// Layer whose weights or activation outputs this place covers.
    pub fn layer(self) -> &'static str {
        match self {
            PlaceId::Embedding1 => EMBEDDING,
            PlaceId::Conv1d1 | PlaceId::Conv1d1A => CONV1,
            PlaceId::Conv1d2 | PlaceId::Conv1d2A => CONV2,
            PlaceId::Dense1 | PlaceId::Dense1A => DENSE1,
            PlaceId::Dense2 => DENSE2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PlaceId::Embedding1 => "embedding_1",
            PlaceId::Conv1d1 => "conv1d_1",
            PlaceId::Conv1d1A => "conv1d_1_a",
            PlaceId::Conv1d2 => "conv1d_2",
            PlaceId::Conv1d2A => "conv1d_2_a",
            PlaceId::Dense1 => "dense_1",
            PlaceId::Dense1A => "dense_1_a",
            PlaceId::Dense2 => "dense_2",
        }
    }

    /// Activation place fed by a layer's output, if any.
    pub fn activation_of(layer: &str) -> Option<PlaceId> {
        match layer {
            CONV1 => Some(PlaceId::Conv1d1A),
            CONV2 => Some(PlaceId::Conv1d2A),
            DENSE1 => Some(PlaceId::Dense1A),
            _ => None,
        }
    }

    /// Weight place for a layer.
    pub fn weights_of(layer: &str) -> Option<PlaceId> {
        PlaceId::WEIGHTS.into_iter().find(|p| p.layer() == layer)
    }
}

impl fmt::Display for PlaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlaceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlaceId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown place `{s}`")))
    }
}

pub const MIN_BITS: u8 = 1;
pub const FULL_PRECISION: u8 = 32;

/// Bit width for each of the eight places; 32 leaves a place untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitAssignment([u8; 8]);

impl BitAssignment {
    pub fn full_precision() -> Self {
        BitAssignment([FULL_PRECISION; 8])
    }

    pub fn uniform(bits: u8) -> Result<Self> {
        check_bits(bits)?;
        Ok(BitAssignment([bits; 8]))
    }

    pub fn from_pairs(pairs: &[(PlaceId, u8)]) -> Result<Self> {
        let mut seen = [false; 8];
        let mut out = [0u8; 8];
        for &(p, b) in pairs {
            check_bits(b)?;
            out[p.index()] = b;
            seen[p.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::MissingPlace(PlaceId::ALL[i].to_string()));
        }
        Ok(BitAssignment(out))
    }

    pub fn get(&self, place: PlaceId) -> u8 {
        self.0[place.index()]
    }

    pub fn set(&mut self, place: PlaceId, bits: u8) -> Result<()> {
        check_bits(bits)?;
        self.0[place.index()] = bits;
        Ok(())
    }

    pub fn with(mut self, place: PlaceId, bits: u8) -> Result<Self> {
        self.set(place, bits)?;
        Ok(self)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PlaceId, u8)> + '_ {
        PlaceId::ALL.into_iter().map(|p| (p, self.get(p)))
    }

    pub fn is_full_precision(&self) -> bool {
        self.0.iter().all(|&b| b == FULL_PRECISION)
    }
}

impl Default for BitAssignment {
    fn default() -> Self {
        Self::full_precision()
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=FULL_PRECISION).contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(format!("bit width {bits} outside 1..=32")))
    }
}

impl Serialize for BitAssignment {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<PlaceId, u8> = self.iter().collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BitAssignment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<PlaceId, u8>::deserialize(d)?;
        let pairs: Vec<(PlaceId, u8)> = map.into_iter().collect();
        BitAssignment::from_pairs(&pairs).map_err(serde::de::Error::custom)
    }
}
