//! C source emission with hard-coded weights.
//!
//! Convolution layers become functions whose channel and kernel loops are
//! fully unrolled: one `acc += ...` line per surviving tap, and pruned taps
//! do not appear in the text at all. Only the output-position loop remains.
//! Dense layers keep their loops over constant arrays. The embedding layer
//! is not emitted; `infer` takes the embedded document as input.
//!
//! Files: `<layer>_weights.h` per layer, plus `infer.h` and `infer.c`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ActivationRanges;
use crate::model::{
    Activation, BitAssignment, LayerSpec, LayerWeights, ModelGraph, PlaceId, Pool, CONV_LAYERS,
    DENSE1, DENSE2, EMBEDDING, FULL_PRECISION,
};
use crate::pruning::prune_model;
use crate::quantization::{quantize_weights, weight_grid, Grid, QuantSpec, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CType {
    #[default]
    Float,
    Double,
}

impl CType {
    fn name(self) -> &'static str {
        match self {
            CType::Float => "float",
            CType::Double => "double",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitConfig {
    pub bits: BitAssignment,
    pub spec: QuantSpec,
    pub pruning_threshold: f64,
    pub unroll: bool,
    /// Integer weight codes with one scale (and zero point) per place,
    /// instead of real literals.
    pub fixed_point: bool,
    /// Emitted verbatim as `#pragma <text>` at the top of unrolled bodies.
    pub pragma: Option<String>,
    pub c_type: CType,
}

impl Default for EmitConfig {
    fn default() -> Self {
        EmitConfig {
            bits: BitAssignment::full_precision(),
            spec: QuantSpec::default(),
            pruning_threshold: 0.0,
            unroll: true,
            fixed_point: false,
            pragma: None,
            c_type: CType::Float,
        }
    }
}

impl EmitConfig {
    fn validate(&self) -> Result<()> {
        if self.pruning_threshold.is_nan() || self.pruning_threshold < 0.0 {
            return Err(Error::invalid("pruning threshold must be >= 0"));
        }
        Ok(())
    }
}

/// Emitted files keyed by file name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EmittedSources {
    pub files: BTreeMap<String, String>,
}

impl EmittedSources {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in &self.files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.files.values().map(String::len).sum()
    }
}

/// Number of multiply-accumulate lines in emitted source.
pub fn count_terms(source: &str) -> usize {
    source
        .lines()
        .filter(|l| l.trim_start().starts_with("acc += "))
        .count()
}

/// Shortest round-trip literal.
fn lit(v: f64, ty: CType) -> String {
    let s = format!("{v:e}");
    let s = match ty {
        CType::Float => format!("{s}f"),
        CType::Double => s,
    };
    if v.is_sign_negative() {
        format!("({s})")
    } else {
        s
    }
}

/// Fixed-width literal, so a constant's text length never depends on its value.
fn wide_lit(v: f64) -> String {
    format!("{v:+.17e}")
}

fn upper(name: &str) -> String {
    name.to_ascii_uppercase()
}

/// The model exactly as the emitted code computes it: weights quantized per
/// `config.bits`, then convolution taps below the threshold removed. Also
/// returns the grid used for each weight place.
pub fn prepare(
    model: &ModelGraph,
    config: &EmitConfig,
    ranges: Option<&ActivationRanges>,
) -> Result<(ModelGraph, BTreeMap<PlaceId, Grid>)> {
    config.validate()?;
    let mut out = model.clone();
    let mut grids = BTreeMap::new();
    for place in PlaceId::WEIGHTS {
        let w = model.weights(place.layer());
        let grid = weight_grid(
            w,
            config.bits.get(place) as u32,
            config.spec,
            ranges.and_then(|r| r.get(place)),
        )?;
        out.set_weights(place.layer(), quantize_weights(w, &grid));
        grids.insert(place, grid);
    }
    let out = prune_model(&out, config.pruning_threshold)?;
    Ok((out, grids))
}

fn header_open(out: &mut String, name: &str) {
    let guard = format!("{}_WEIGHTS_H", upper(name));
    let _ = writeln!(out, "/* {name}: generated, do not edit. */");
    let _ = writeln!(out, "#ifndef {guard}");
    let _ = writeln!(out, "#define {guard}");
    let _ = writeln!(out);
    let _ = writeln!(out, "#include <stdint.h>");
    let _ = writeln!(out, "#include \"infer.h\"");
    let _ = writeln!(out);
}

fn header_close(out: &mut String, name: &str) {
    let _ = writeln!(out, "#endif /* {}_WEIGHTS_H */", upper(name));
}

fn scale_defines(out: &mut String, name: &str, grid: &Grid) {
    let up = upper(name);
    let _ = writeln!(out, "#define {up}_SCALE {}", wide_lit(grid.scale()));
    if let Grid::Fixed(f) = grid {
        let _ = writeln!(out, "#define {up}_SHIFT {}", f.frac_bits);
    }
    if grid.zero_point() != 0.0 {
        let _ = writeln!(out, "#define {up}_ZERO_POINT {}", wide_lit(grid.zero_point()));
    }
}

/// Renders a flat array as a C initializer list, `per_line` values per line.
fn initializer(values: &[String], per_line: usize) -> String {
    values
        .chunks(per_line.max(1))
        .map(|c| format!("    {}", c.join(", ")))
        .collect::<Vec<_>>()
        .join(",\n")
}

struct Values<'a> {
    grid: &'a Grid,
    fixed: bool,
    ty: CType,
}

impl Values<'_> {
    fn is_fixed(&self) -> bool {
        self.fixed && *self.grid != Grid::PassThrough
    }

    fn element_type(&self) -> &'static str {
        if self.is_fixed() {
            "int32_t"
        } else {
            "data_t"
        }
    }

    fn render(&self, v: f64) -> String {
        if self.is_fixed() {
            self.grid.code(v).expect("fixed grid has codes").to_string()
        } else {
            lit(v, self.ty)
        }
    }

    /// Real value of an array element, as a C expression.
    fn decode(&self, name: &str, elem: &str) -> String {
        if !self.is_fixed() {
            return elem.to_string();
        }
        let up = upper(name);
        if self.grid.zero_point() != 0.0 {
            format!("((data_t){elem} * {up}_SCALE + {up}_ZERO_POINT)")
        } else {
            format!("((data_t){elem} * {up}_SCALE)")
        }
    }
}

/// Header for one conv or dense layer. `weights` must already be
/// quantized (on `grid`) and pruned; removed taps are left out.
pub fn emit_layer(
    name: &str,
    spec: &LayerSpec,
    weights: &LayerWeights,
    grid: &Grid,
    input_length: usize,
    config: &EmitConfig,
) -> Result<String> {
    let vals = Values {
        grid,
        fixed: config.fixed_point,
        ty: config.c_type,
    };
    let mut out = String::new();
    let up = upper(name);
    match *spec {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel_size,
            ..
        } => {
            if input_length < kernel_size {
                return Err(Error::invalid(format!(
                    "input length {input_length} shorter than kernel {kernel_size}"
                )));
            }
            let p = input_length - kernel_size + 1;
            header_open(&mut out, name);
            let _ = writeln!(out, "#define {up}_IN_LEN {input_length}");
            let _ = writeln!(out, "#define {up}_IN_CH {in_channels}");
            let _ = writeln!(out, "#define {up}_OUT_CH {out_channels}");
            let _ = writeln!(out, "#define {up}_KERNEL {kernel_size}");
            let _ = writeln!(out, "#define {up}_OUT_LEN {p}");
            if vals.is_fixed() {
                scale_defines(&mut out, name, grid);
            }
            let _ = writeln!(out);
            let bias = weights.bias.as_ref().expect("conv has bias").data();
            let rendered: Vec<String> = bias.iter().map(|&b| vals.render(b)).collect();
            let _ = writeln!(
                out,
                "static const {} {name}_bias[{out_channels}] = {{\n{}\n}};\n",
                vals.element_type(),
                initializer(&rendered, 8)
            );
            if config.unroll {
                emit_conv_unrolled(&mut out, name, weights, &vals, p, config);
            } else {
                emit_conv_looped(&mut out, name, weights, &vals, p, config);
            }
            header_close(&mut out, name);
        }
        LayerSpec::Dense {
            in_features,
            out_features,
            ..
        } => {
            header_open(&mut out, name);
            let _ = writeln!(out, "#define {up}_IN {in_features}");
            let _ = writeln!(out, "#define {up}_OUT {out_features}");
            if vals.is_fixed() {
                scale_defines(&mut out, name, grid);
            }
            let _ = writeln!(out);
            let ty = vals.element_type();
            let kernel: Vec<String> = weights.kernel.data().iter().map(|&v| vals.render(v)).collect();
            let _ = writeln!(
                out,
                "static const {ty} {name}_kernel[{}] = {{\n{}\n}};\n",
                in_features * out_features,
                initializer(&kernel, out_features.min(8))
            );
            let bias: Vec<String> = weights
                .bias
                .as_ref()
                .expect("dense has bias")
                .data()
                .iter()
                .map(|&v| vals.render(v))
                .collect();
            let _ = writeln!(
                out,
                "static const {ty} {name}_bias[{out_features}] = {{\n{}\n}};\n",
                initializer(&bias, 8)
            );
            let _ = writeln!(
                out,
                "static void {name}(const data_t in[{in_features}], data_t out[{out_features}])\n{{"
            );
            let _ = writeln!(out, "    for (int o = 0; o < {out_features}; ++o) {{");
            let _ = writeln!(out, "        data_t acc = 0;");
            let _ = writeln!(out, "        for (int i = 0; i < {in_features}; ++i)");
            let _ = writeln!(
                out,
                "            acc += in[i] * {};",
                vals.decode(name, &format!("{name}_kernel[i * {out_features} + o]"))
            );
            let _ = writeln!(
                out,
                "        out[o] = acc + {};",
                vals.decode(name, &format!("{name}_bias[o]"))
            );
            let _ = writeln!(out, "    }}\n}}\n");
            header_close(&mut out, name);
        }
        LayerSpec::Embedding { .. } => {
            return Err(Error::Unsupported(format!(
                "`{name}`: embedding layers are not emitted"
            )))
        }
        _ => {
            return Err(Error::Unsupported(format!(
                "`{name}`: layer has no weights to emit"
            )))
        }
    }
    Ok(out)
}

fn kept_taps(w: &LayerWeights, o: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    let &[in_ch, out_ch, k] = w.kernel.shape() else {
        unreachable!("conv kernel is rank 3")
    };
    (0..in_ch).flat_map(move |i| {
        (0..k).filter_map(move |t| {
            let flat = (i * out_ch + o) * k + t;
            w.is_kept(flat).then(|| (i, t, w.kernel.data()[flat]))
        })
    })
}

fn emit_conv_unrolled(
    out: &mut String,
    name: &str,
    w: &LayerWeights,
    vals: &Values<'_>,
    p: usize,
    config: &EmitConfig,
) {
    let &[in_ch, out_ch, _] = w.kernel.shape() else {
        unreachable!()
    };
    let in_len = p + w.kernel.shape()[2] - 1;
    let asym = vals.is_fixed() && vals.grid.zero_point() != 0.0;
    let _ = writeln!(
        out,
        "static void {name}(const data_t in[{in_len}][{in_ch}], data_t out[{p}][{out_ch}])\n{{"
    );
    let _ = writeln!(out, "    for (int s = 0; s < {p}; ++s) {{");
    if let Some(pr) = &config.pragma {
        let _ = writeln!(out, "#pragma {pr}");
    }
    let _ = writeln!(out, "        data_t acc;");
    if asym {
        let _ = writeln!(out, "        data_t zsum;");
    }
    for o in 0..out_ch {
        let _ = writeln!(out, "        acc = 0;");
        if asym {
            let _ = writeln!(out, "        zsum = 0;");
        }
        for (i, t, v) in kept_taps(w, o) {
            let _ = writeln!(out, "        acc += in[s + {t}][{i}] * {};", vals.render(v));
            if asym {
                let _ = writeln!(out, "        zsum += in[s + {t}][{i}];");
            }
        }
        let bias = vals.decode(name, &format!("{name}_bias[{o}]"));
        let up = upper(name);
        let sum = match (vals.is_fixed(), asym) {
            (false, _) => "acc".to_string(),
            (true, false) => format!("acc * {up}_SCALE"),
            (true, true) => format!("acc * {up}_SCALE + zsum * {up}_ZERO_POINT"),
        };
        let _ = writeln!(out, "        out[s][{o}] = {sum} + {bias};");
    }
    let _ = writeln!(out, "    }}\n}}\n");
}

fn emit_conv_looped(
    out: &mut String,
    name: &str,
    w: &LayerWeights,
    vals: &Values<'_>,
    p: usize,
    config: &EmitConfig,
) {
    let &[in_ch, out_ch, k] = w.kernel.shape() else {
        unreachable!()
    };
    let in_len = p + k - 1;
    let kernel: Vec<String> = w.kernel.data().iter().map(|&v| vals.render(v)).collect();
    let kept: Vec<String> = (0..w.kernel.len())
        .map(|i| u8::from(w.is_kept(i)).to_string())
        .collect();
    let _ = writeln!(
        out,
        "static const {} {name}_kernel[{}] = {{\n{}\n}};\n",
        vals.element_type(),
        in_ch * out_ch * k,
        initializer(&kernel, k)
    );
    let _ = writeln!(
        out,
        "static const uint8_t {name}_kept[{}] = {{\n{}\n}};\n",
        in_ch * out_ch * k,
        initializer(&kept, k.max(16))
    );
    let _ = writeln!(
        out,
        "static void {name}(const data_t in[{in_len}][{in_ch}], data_t out[{p}][{out_ch}])\n{{"
    );
    let _ = writeln!(out, "    for (int s = 0; s < {p}; ++s) {{");
    let _ = writeln!(out, "        for (int o = 0; o < {out_ch}; ++o) {{");
    let _ = writeln!(out, "            data_t acc = 0;");
    if let Some(pr) = &config.pragma {
        let _ = writeln!(out, "#pragma {pr}");
    }
    let _ = writeln!(out, "            for (int i = 0; i < {in_ch}; ++i) {{");
    let _ = writeln!(out, "                for (int t = 0; t < {k}; ++t) {{");
    let _ = writeln!(out, "                    if ({name}_kept[(i * {out_ch} + o) * {k} + t])");
    let _ = writeln!(
        out,
        "                        acc += in[s + t][i] * {};",
        vals.decode(name, &format!("{name}_kernel[(i * {out_ch} + o) * {k} + t]"))
    );
    let _ = writeln!(out, "                }}\n            }}");
    let _ = writeln!(
        out,
        "            out[s][o] = acc + {};",
        vals.decode(name, &format!("{name}_bias[o]"))
    );
    let _ = writeln!(out, "        }}\n    }}\n}}\n");
}

fn activation_grid(
    place: PlaceId,
    config: &EmitConfig,
    ranges: Option<&ActivationRanges>,
) -> Result<Grid> {
    let bits = config.bits.get(place);
    if bits == FULL_PRECISION {
        return Ok(Grid::PassThrough);
    }
    let r = ranges
        .and_then(|r| r.get(place))
        .ok_or(Error::MissingRange(place))?;
    Grid::for_range(r, bits as u32, config.spec)
}

fn quant_call(grid: &Grid, x: &str) -> Option<String> {
    match grid {
        Grid::PassThrough => None,
        Grid::Bucket { range, bits } => Some(format!(
            "{x} = q_bucket({x}, {:e}, {:e}, {:e});",
            range.min,
            range.max,
            (*bits as f64).exp2()
        )),
        Grid::Fixed(f) => Some(format!(
            "{x} = q_fixed({x}, {:e}, {:e}, {:e});",
            f.step(),
            f.min_value() / f.step(),
            f.max_value() / f.step()
        )),
    }
}

fn activation_stmt(act: Activation, x: &str) -> Option<String> {
    match act {
        Activation::Relu => Some(format!("if (!({x} > 0)) {x} = 0;")),
        Activation::Sigmoid => Some(format!("{x} = (data_t)(1.0 / (1.0 + exp(-(double){x})));")),
        Activation::None => None,
        Activation::Softmax => None,
    }
}

/// `infer.h`: the data type and the entry point.
pub fn emit_infer_header(model: &ModelGraph, config: &EmitConfig) -> String {
    let len = model.max_length;
    let dim = model.embedding_dim();
    let classes = model.weights(DENSE2).kernel.shape()[1];
    let mut out = String::new();
    let _ = writeln!(out, "/* generated, do not edit. */");
    let _ = writeln!(out, "#ifndef INFER_H\n#define INFER_H\n");
    let _ = writeln!(out, "typedef {} data_t;\n", config.c_type.name());
    let _ = writeln!(out, "#define INFER_IN_LEN {len}");
    let _ = writeln!(out, "#define INFER_IN_DIM {dim}");
    let _ = writeln!(out, "#define INFER_OUT {classes}\n");
    let _ = writeln!(
        out,
        "void infer(const data_t in[INFER_IN_LEN][INFER_IN_DIM], data_t scores[INFER_OUT]);\n"
    );
    let _ = writeln!(out, "#endif /* INFER_H */");
    out
}

/// `infer.c`: the top-level function chaining the emitted layers, with
/// activation quantization, pooling and the output nonlinearity.
pub fn emit_infer(
    model: &ModelGraph,
    config: &EmitConfig,
    ranges: Option<&ActivationRanges>,
) -> Result<String> {
    config.validate()?;
    let len = model.max_length;
    let grids: Vec<Grid> = PlaceId::ACTIVATIONS
        .iter()
        .map(|&p| activation_grid(p, config, ranges))
        .collect::<Result<_>>()?;
    let hidden = model.weights(DENSE1).kernel.shape()[1];
    let concat = model.weights(DENSE1).kernel.shape()[0];
    let classes = model.weights(DENSE2).kernel.shape()[1];

    let mut out = String::new();
    let _ = writeln!(out, "/* generated, do not edit. */");
    let _ = writeln!(out, "#include <math.h>\n#include <stdint.h>\n");
    let _ = writeln!(out, "#include \"infer.h\"");
    for name in [CONV_LAYERS[0], CONV_LAYERS[1], DENSE1, DENSE2] {
        let _ = writeln!(out, "#include \"{name}_weights.h\"");
    }
    let _ = writeln!(out);
    let need_bucket = grids.iter().any(|g| matches!(g, Grid::Bucket { .. }));
    let need_fixed = grids.iter().any(|g| matches!(g, Grid::Fixed(_)));
    if need_bucket {
        out.push_str(
            "static data_t q_bucket(double x, double lo, double hi, double n)\n{\n\
             \x20   double w, idx, code;\n\
             \x20   if (lo == hi)\n        return (data_t)lo;\n\
             \x20   w = (hi - lo) / n;\n\
             \x20   if (x < lo)\n        x = lo;\n\
             \x20   if (x > hi)\n        x = hi;\n\
             \x20   idx = floor((x - lo) / w);\n\
             \x20   if (idx < 0)\n        idx = 0;\n\
             \x20   if (idx > n - 1)\n        idx = n - 1;\n\
             \x20   code = 2.0 * idx + 1.0 - n;\n\
             \x20   return (data_t)((0.5 * lo + 0.5 * hi) + code * (0.5 * (hi - lo) / n));\n}\n\n",
        );
    }
    if need_fixed {
        out.push_str(
            "static data_t q_fixed(double x, double step, double lo, double hi)\n{\n\
             \x20   double c = round(x / step);\n\
             \x20   if (c < lo)\n        c = lo;\n\
             \x20   if (c > hi)\n        c = hi;\n\
             \x20   return (data_t)(c * step);\n}\n\n",
        );
    }

    let _ = writeln!(
        out,
        "void infer(const data_t in[INFER_IN_LEN][INFER_IN_DIM], data_t scores[INFER_OUT])\n{{"
    );
    let mut decls = Vec::new();
    for name in CONV_LAYERS {
        let (k, ch) = conv_dims(model, name);
        decls.push(format!("    static data_t {name}_out[{}][{ch}];", len - k + 1));
    }
    decls.push(format!("    data_t features[{concat}];"));
    decls.push(format!("    data_t hidden[{hidden}];"));
    decls.push("    int s, o, f = 0;".into());
    for d in decls {
        let _ = writeln!(out, "{d}");
    }
    let _ = writeln!(out);
    for (b, name) in CONV_LAYERS.into_iter().enumerate() {
        let (k, ch) = conv_dims(model, name);
        let p = len - k + 1;
        let x = format!("{name}_out[s][o]");
        let _ = writeln!(out, "    {name}(in, {name}_out);");
        let _ = writeln!(out, "    for (s = 0; s < {p}; ++s) {{");
        let _ = writeln!(out, "        for (o = 0; o < {ch}; ++o) {{");
        if let Some(a) = activation_stmt(model.activation(name), &x) {
            let _ = writeln!(out, "            {a}");
        }
        if let Some(q) = quant_call(&grids[b], &x) {
            let _ = writeln!(out, "            {q}");
        }
        let _ = writeln!(out, "        }}\n    }}");
        match model.pool {
            Pool::Max => {
                let _ = writeln!(out, "    for (o = 0; o < {ch}; ++o) {{");
                let _ = writeln!(out, "        data_t m = {name}_out[0][o];");
                let _ = writeln!(out, "        for (s = 1; s < {p}; ++s)");
                let _ = writeln!(out, "            if ({name}_out[s][o] > m)");
                let _ = writeln!(out, "                m = {name}_out[s][o];");
                let _ = writeln!(out, "        features[f++] = m;\n    }}");
            }
            Pool::None => {
                let _ = writeln!(out, "    for (s = 0; s < {p}; ++s)");
                let _ = writeln!(out, "        for (o = 0; o < {ch}; ++o)");
                let _ = writeln!(out, "            features[f++] = {name}_out[s][o];");
            }
        }
        let _ = writeln!(out);
    }
    let _ = writeln!(out, "    {DENSE1}(features, hidden);");
    let _ = writeln!(out, "    for (o = 0; o < {hidden}; ++o) {{");
    if let Some(a) = activation_stmt(model.activation(DENSE1), "hidden[o]") {
        let _ = writeln!(out, "        {a}");
    }
    if let Some(q) = quant_call(&grids[2], "hidden[o]") {
        let _ = writeln!(out, "        {q}");
    }
    let _ = writeln!(out, "    }}\n");
    let _ = writeln!(out, "    {DENSE2}(hidden, scores);");
    match model.activation(DENSE2) {
        Activation::Softmax => {
            let _ = writeln!(out, "    {{\n        double m = scores[0], sum = 0;");
            let _ = writeln!(out, "        for (o = 1; o < {classes}; ++o)");
            let _ = writeln!(out, "            if (scores[o] > m)\n                m = scores[o];");
            let _ = writeln!(out, "        for (o = 0; o < {classes}; ++o) {{");
            let _ = writeln!(out, "            scores[o] = (data_t)exp(scores[o] - m);");
            let _ = writeln!(out, "            sum += scores[o];\n        }}");
            let _ = writeln!(out, "        for (o = 0; o < {classes}; ++o)");
            let _ = writeln!(out, "            scores[o] = (data_t)(scores[o] / sum);\n    }}");
        }
        act => {
            if let Some(a) = activation_stmt(act, "scores[o]") {
                let _ = writeln!(out, "    for (o = 0; o < {classes}; ++o)\n        {a}");
            }
        }
    }
    let _ = writeln!(out, "    (void)f;\n}}");
    Ok(out)
}

fn conv_dims(model: &ModelGraph, name: &str) -> (usize, usize) {
    let s = model.weights(name).kernel.shape();
    (s[2], s[1])
}

/// Every file for `model`: one header per conv/dense layer plus `infer.h`
/// and `infer.c`.
pub fn emit_model(
    model: &ModelGraph,
    config: &EmitConfig,
    ranges: Option<&ActivationRanges>,
) -> Result<EmittedSources> {
    let (prepared, grids) = prepare(model, config, ranges)?;
    let mut files = BTreeMap::new();
    for layer in &prepared.layers {
        if layer.name == EMBEDDING || layer.spec.weight_shapes().is_none() {
            continue;
        }
        let place = PlaceId::weights_of(&layer.name).expect("weighted layer has a place");
        let text = emit_layer(
            &layer.name,
            &layer.spec,
            prepared.weights(&layer.name),
            &grids[&place],
            prepared.max_length,
            config,
        )?;
        files.insert(format!("{}_weights.h", layer.name), text);
    }
    files.insert("infer.h".into(), emit_infer_header(&prepared, config));
    files.insert("infer.c".into(), emit_infer(&prepared, config, ranges)?);
    Ok(EmittedSources { files })
}

/// Whether `scheme` stores a zero point next to its scale.
pub fn has_zero_point(scheme: Scheme) -> bool {
    scheme == Scheme::AsymmetricInteger
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::conv_layer_macs;
    use crate::tensor::Tensor;

    fn conv_spec(i: usize, o: usize, k: usize) -> LayerSpec {
        LayerSpec::Conv1d {
            in_channels: i,
            out_channels: o,
            kernel_size: k,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn unit_conv_one_term() {
        let w = LayerWeights::new(
            Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
            Some(Tensor::new(vec![1], vec![0.0]).unwrap()),
        );
        let src = emit_layer("toy", &conv_spec(1, 1, 1), &w, &Grid::PassThrough, 4, &EmitConfig::default())
            .unwrap();
        assert_eq!(count_terms(&src), 1);
        assert!(src.contains("acc += in[s + 0][0] * 1e0f;"));
    }

    #[test]
    fn pruned_tap_absent() {
        let mut w = LayerWeights::new(
            Tensor::new(vec![1, 2, 2], vec![0.5, 0.01, -0.3, 0.2]).unwrap(),
            Some(Tensor::new(vec![2], vec![0.1, 0.0]).unwrap()),
        );
        w.kept = Some(vec![true, false, true, true]);
        let src = emit_layer("c", &conv_spec(1, 2, 2), &w, &Grid::PassThrough, 5, &EmitConfig::default())
            .unwrap();
        let macs = conv_layer_macs(&w, 5, 0.0).unwrap();
        assert_eq!(count_terms(&src) as u64, macs.performed / macs.positions);
        assert!(!src.contains("1e-2"));
    }

    #[test]
    fn embedding_not_emitted() {
        let w = LayerWeights::new(Tensor::zeros(vec![3, 2]), None);
        let spec = LayerSpec::Embedding { vocab_size: 3, dim: 2 };
        assert!(matches!(
            emit_layer("embedding_1", &spec, &w, &Grid::PassThrough, 4, &EmitConfig::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn negative_literals_parenthesized() {
        assert_eq!(lit(-0.25, CType::Float), "(-2.5e-1f)");
        assert_eq!(lit(3.0, CType::Double), "3e0");
    }
}
