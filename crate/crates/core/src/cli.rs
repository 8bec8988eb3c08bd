//! Command-line driver. Every subcommand writes its outputs and a
//! `run_manifest.json` into `--out`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::codegen::{emit_model, CType, EmitConfig};
use crate::data::{load_dataset, load_embeddings, load_vocab, Dataset, EmbeddingOptions};
use crate::fixture::{generate, FixtureConfig};
use crate::inference::{calibrate_activations, count_macs, evaluate, ActivationRanges};
use crate::model::{load_model, save_model, BitAssignment, LayerWeights, ModelGraph, EMBEDDING};
use crate::pruning::{prune_model, prune_report, pruning_sweep, threshold_grid};
use crate::quantization::{apply_assignment, AssignmentFile, QuantSpec, Scheme};
use crate::report::{emit_table, model_size, Cell, Format, Table};
use crate::search::{
    hill_climb, quant_prune_grid, uniform_sweep, HillClimbConfig, PlaceSet, SearchContext,
};

pub const SEED_ENV: &str = "QUANTPRUNE_SEED";

#[derive(Debug, Parser)]
#[command(name = "quantprune", version, about = "Quantize, prune and search bit widths for text CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overwrite existing model files.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Symmetric,
    Asymmetric,
    FixedPoint,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Symmetric => Scheme::SymmetricInteger,
            SchemeArg::Asymmetric => Scheme::AsymmetricInteger,
            SchemeArg::FixedPoint => Scheme::DynamicFixedPoint,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Replace the embedding matrix with vectors from this text file.
    #[arg(long, requires = "vocab")]
    pub embeddings: Option<PathBuf>,
    /// Vocabulary for `--embeddings`, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantArgs {
    /// Bit assignment JSON (`{"scheme": ..., "bits": {place: bits}}` or a
    /// bare place-to-bits map).
    #[arg(long, conflicts_with = "bits")]
    pub assignment: Option<PathBuf>,
    /// Uniform bit width for every place.
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long, value_enum, default_value = "symmetric")]
    pub scheme: SchemeArg,
    #[command(flatten)]
    pub ranges: RangeArgs,
}

#[derive(Debug, Args)]
pub struct RangeArgs {
    /// Calibrated ranges JSON, as written by `calibrate`.
    #[arg(long)]
    pub ranges: Option<PathBuf>,
    /// Calibrate activation ranges on this corpus instead.
    #[arg(long, conflicts_with = "ranges")]
    pub calibration_dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Accuracy of a (possibly quantized and pruned) model on a corpus.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Record activation ranges over a corpus.
    Calibrate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Write a model with quantized weights, plus the assignment used.
    Quantize {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        quant: QuantArgs,
    },
    /// Prune convolution weights, or sweep thresholds with `--thresholds`.
    Prune {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, conflicts_with = "thresholds")]
        threshold: Option<f64>,
        /// `start:step:end`; needs `--dataset`.
        #[arg(long, value_parser = parse_thresholds, requires = "dataset")]
        thresholds: Option<Thresholds>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Uniform bit-width sweep over place sets.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_bits, default_value = "32,16,8,7,6,5,4,3,2,1")]
        bits: BitList,
        /// Comma-separated: `singletons`, `all`, `subsets`, or `place+place`.
        #[arg(long, default_value = "singletons,all")]
        places: String,
        #[arg(long, value_enum, default_value = "symmetric")]
        scheme: SchemeArg,
        #[command(flatten)]
        ranges: RangeArgs,
    },
    /// Quantization x pruning accuracy grid.
    Grid {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_bits, default_value = "32,16,8,7,6,5,4,3,2,1")]
        bits: BitList,
        #[arg(long, value_parser = parse_thresholds, default_value = "0:0.005:0.15")]
        thresholds: Thresholds,
        #[arg(long, value_enum, default_value = "symmetric")]
        scheme: SchemeArg,
        #[command(flatten)]
        ranges: RangeArgs,
    },
    /// Hill-climbing search for per-place bit widths.
    Search {
        #[command(flatten)]
        model: ModelArgs,
        /// Corpus the search scores against.
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out corpus to report the chosen assignment on.
        #[arg(long)]
        test_dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        restarts: usize,
        /// Allowed relative accuracy loss.
        #[arg(long, default_value_t = 0.002)]
        accuracy_budget: f64,
        #[arg(long, value_enum, default_value = "symmetric")]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        #[command(flatten)]
        ranges: RangeArgs,
    },
    /// Model storage under a bit assignment.
    Size {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "bits")]
        assignment: Option<PathBuf>,
        #[arg(long)]
        bits: Option<u8>,
        /// Removed (pruned) weights cost nothing.
        #[arg(long)]
        exclude_pruned: bool,
    },
    /// Emit C sources with hard-coded weights.
    Emit {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        /// Integer weight codes with per-place scale constants.
        #[arg(long)]
        fixed_point: bool,
        /// Keep the channel and kernel loops instead of unrolling them.
        #[arg(long)]
        no_unroll: bool,
        /// Text for a `#pragma` line in each unrolled body.
        #[arg(long)]
        pragma: Option<String>,
        #[arg(long, value_enum, default_value = "float")]
        c_type: CTypeArg,
    },
    /// Generate the synthetic corpus and a trained toy model.
    Fixture {
        #[arg(long, default_value_t = FixtureConfig::default().epochs)]
        epochs: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CTypeArg {
    Float,
    Double,
}

#[derive(Debug, Clone)]
pub struct Thresholds(pub Vec<f64>);

#[derive(Debug, Clone)]
pub struct BitList(pub Vec<u8>);

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts[..] else {
        return Err("expected start:step:end".into());
    };
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
    threshold_grid(num(a)?, num(b)?, num(c)?)
        .map(Thresholds)
        .map_err(|e| e.to_string())
}

fn parse_bits(s: &str) -> Result<BitList, String> {
    let bits = s
        .split(',')
        .map(|b| {
            let v: u8 = b.trim().parse().map_err(|e| format!("`{b}`: {e}"))?;
            if (1..=32).contains(&v) {
                Ok(v)
            } else {
                Err(format!("bit width {v} outside 1..=32"))
            }
        })
        .collect::<Result<Vec<_>, String>>()?;
    if bits.is_empty() {
        return Err("empty bit list".into());
    }
    Ok(BitList(bits))
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    seed: u64,
    input_hashes: BTreeMap<String, String>,
    tool_version: &'static str,
}

/// Input files read during a run, hashed into the manifest.
#[derive(Default)]
struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn track(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.0
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn model(&mut self, args: &ModelArgs, seed: u64) -> anyhow::Result<ModelGraph> {
        let mut model = load_model(&args.model)?;
        self.track(&args.model)?;
        for blob in model_blobs(&args.model)? {
            self.track(&blob)?;
        }
        if let (Some(emb), Some(vocab)) = (&args.embeddings, &args.vocab) {
            self.track(emb)?;
            self.track(vocab)?;
            let vocab: HashMap<String, usize> = load_vocab(vocab)?;
            let opts = EmbeddingOptions {
                seed,
                ..EmbeddingOptions::default()
            };
            let matrix = load_embeddings(emb, &vocab, &opts)?;
            let current = model.weights(EMBEDDING).kernel.shape().to_vec();
            if matrix.vectors.shape() != current.as_slice() {
                bail!(
                    "embeddings are {:?} but the model expects {:?}",
                    matrix.vectors.shape(),
                    current
                );
            }
            model.set_weights(EMBEDDING, LayerWeights::new(matrix.vectors, None));
        }
        Ok(model)
    }

    fn dataset(&mut self, path: &Path) -> anyhow::Result<Dataset> {
        let ds = load_dataset(path)?;
        self.track(path)?;
        Ok(ds)
    }

    fn ranges(
        &mut self,
        args: &RangeArgs,
        model: &ModelGraph,
        threshold: f64,
    ) -> anyhow::Result<Option<ActivationRanges>> {
        if let Some(p) = &args.ranges {
            self.track(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let r: ActivationRanges =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            return Ok(Some(r));
        }
        if let Some(p) = &args.calibration_dataset {
            let ds = self.dataset(p)?;
            return Ok(Some(calibrate_activations(model, &ds, threshold)?));
        }
        Ok(None)
    }

    fn assignment(
        &mut self,
        file: Option<&Path>,
        bits: Option<u8>,
        scheme: Scheme,
    ) -> anyhow::Result<(BitAssignment, QuantSpec)> {
        if let Some(p) = file {
            self.track(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            if let Ok(f) = serde_json::from_str::<AssignmentFile>(&text) {
                return Ok((f.bits, QuantSpec::new(f.scheme)));
            }
            let a: BitAssignment =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            return Ok((a, QuantSpec::new(scheme)));
        }
        let a = match bits {
            Some(b) => BitAssignment::uniform(b)?,
            None => BitAssignment::full_precision(),
        };
        Ok((a, QuantSpec::new(scheme)))
    }
}

fn model_blobs(manifest: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let text = fs::read_to_string(manifest)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    Ok(["weights_file", "mask_file"]
        .iter()
        .filter_map(|k| v.get(k).and_then(|f| f.as_str()))
        .map(|f| dir.join(f))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(clap::Error),
    Run(anyhow::Error),
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn main_with(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli, argv.into_iter().skip(1).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli, args: Vec<String>) -> anyhow::Result<()> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = cli.jobs {
            if j == 0 {
                bail!("--jobs must be at least 1");
            }
            b = b.num_threads(j);
        }
        b.build()?
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut inputs = Inputs::default();
    let name = pool.install(|| execute(&cli, &mut inputs))?;
    write_json(
        &cli.out.join("run_manifest.json"),
        &RunManifest {
            command: name.to_string(),
            args,
            seed: cli.seed,
            input_hashes: inputs.0,
            tool_version: env!("CARGO_PKG_VERSION"),
        },
    )
}

fn execute(cli: &Cli, inputs: &mut Inputs) -> anyhow::Result<&'static str> {
    let out = &cli.out;
    let seed = cli.seed;
    match &cli.command {
        Command::Evaluate {
            model,
            dataset,
            quant,
            threshold,
        } => {
            let model = inputs.model(model, seed)?;
            let ds = inputs.dataset(dataset)?;
            let ranges = inputs.ranges(&quant.ranges, &model, *threshold)?;
            let (a, spec) = inputs.assignment(quant.assignment.as_deref(), quant.bits, quant.scheme.into())?;
            let (qm, cfg) = apply_assignment(&model, &a, spec, ranges.as_ref())?;
            let cfg = cfg.with_threshold(*threshold);
            let accuracy = evaluate(&qm, &ds, &cfg)?;
            let macs = count_macs(&qm, qm.max_length, *threshold)?;
            #[derive(Serialize)]
            struct Evaluation {
                accuracy: f64,
                documents: usize,
                assignment: BitAssignment,
                pruning_threshold: f64,
                total_macs: u64,
                performed_macs: u64,
            }
            write_json(
                &out.join("evaluation.json"),
                &Evaluation {
                    accuracy,
                    documents: ds.len(),
                    assignment: a,
                    pruning_threshold: *threshold,
                    total_macs: macs.total_macs,
                    performed_macs: macs.performed_macs,
                },
            )?;
            println!("accuracy {accuracy:.6}");
            Ok("evaluate")
        }
        Command::Calibrate {
            model,
            dataset,
            threshold,
        } => {
            let model = inputs.model(model, seed)?;
            let ds = inputs.dataset(dataset)?;
            let ranges = calibrate_activations(&model, &ds, *threshold)?;
            write_json(&out.join("ranges.json"), &ranges)?;
            Ok("calibrate")
        }
        Command::Quantize { model, quant } => {
            let model = inputs.model(model, seed)?;
            let ranges = inputs.ranges(&quant.ranges, &model, 0.0)?;
            let (a, spec) = inputs.assignment(quant.assignment.as_deref(), quant.bits, quant.scheme.into())?;
            let (qm, cfg) = apply_assignment(&model, &a, spec, ranges.as_ref())?;
            save_model(&qm, &out.join("model.json"), cli.force)?;
            write_json(
                &out.join("assignment.json"),
                &AssignmentFile {
                    scheme: spec.scheme,
                    bits: a,
                },
            )?;
            write_json(&out.join("inference_config.json"), &cfg)?;
            Ok("quantize")
        }
        Command::Prune {
            model,
            threshold,
            thresholds,
            dataset,
        } => {
            let model = inputs.model(model, seed)?;
            if let Some(ts) = thresholds {
                let path = dataset.as_ref().expect("clap requires --dataset");
                let ds = inputs.dataset(path)?;
                let rows = pruning_sweep(&model, &ds, &Default::default(), &ts.0)?;
                let mut table = Table::new(&["threshold", "accuracy", "mac_ratio"]);
                for r in rows {
                    table.push(vec![r.threshold.into(), r.accuracy.into(), r.mac_ratio.into()]);
                }
                emit_table(&table, &out.join("pruning_sweep.csv"), Format::Csv)?;
            } else {
                let t = threshold.unwrap_or(0.0);
                let pruned = prune_model(&model, t)?;
                save_model(&pruned, &out.join("model.json"), cli.force)?;
                write_json(&out.join("prune_report.json"), &prune_report(&pruned, t)?)?;
            }
            Ok("prune")
        }
        Command::Sweep {
            model,
            dataset,
            bits,
            places,
            scheme,
            ranges,
        } => {
            let model = inputs.model(model, seed)?;
            let ds = inputs.dataset(dataset)?;
            let ranges = inputs.ranges(ranges, &model, 0.0)?;
            let sets = PlaceSet::parse_list(places)?;
            let ctx = SearchContext::new(&model, &ds, QuantSpec::new((*scheme).into()), ranges.as_ref());
            let rows = uniform_sweep(&ctx, &bits.0, &sets)?;
            let mut table = Table::new(&["place_set", "bits", "accuracy"]);
            for r in rows {
                table.push(vec![r.place_set.into(), r.bits.into(), r.accuracy.into()]);
            }
            emit_table(&table, &out.join("sweep.csv"), Format::Csv)?;
            Ok("sweep")
        }
        Command::Grid {
            model,
            dataset,
            bits,
            thresholds,
            scheme,
            ranges,
        } => {
            let model = inputs.model(model, seed)?;
            let ds = inputs.dataset(dataset)?;
            let ranges = inputs.ranges(ranges, &model, 0.0)?;
            let ctx = SearchContext::new(&model, &ds, QuantSpec::new((*scheme).into()), ranges.as_ref());
            let cells = quant_prune_grid(&ctx, &bits.0, &thresholds.0)?;
            let mut table = Table::new(&["bits", "threshold", "accuracy", "mac_ratio"]);
            for c in cells {
                table.push(vec![c.bits.into(), c.threshold.into(), c.accuracy.into(), c.mac_ratio.into()]);
            }
            emit_table(&table, &out.join("grid.csv"), Format::Csv)?;
            Ok("grid")
        }
        Command::Search {
            model,
            dataset,
            test_dataset,
            restarts,
            accuracy_budget,
            scheme,
            threshold,
            ranges,
        } => {
            if !(0.0..1.0).contains(accuracy_budget) {
                bail!("--accuracy-budget must lie in [0, 1)");
            }
            let model = inputs.model(model, seed)?;
            let ds = inputs.dataset(dataset)?;
            let ranges = inputs.ranges(ranges, &model, *threshold)?;
            let ctx = SearchContext::new(&model, &ds, QuantSpec::new((*scheme).into()), ranges.as_ref())
                .with_pruning_threshold(*threshold);
            let cfg = HillClimbConfig {
                threshold_factor: 1.0 - accuracy_budget,
                restarts: *restarts,
                seed,
            };
            let mut outcome = hill_climb(&ctx, &cfg)?;
            if let Some(p) = test_dataset {
                let test = inputs.dataset(p)?;
                let (qm, c) = ctx.materialize(&outcome.assignment)?;
                outcome.test_accuracy = Some(evaluate(&qm, &test, &c)?);
            }
            write_json(&out.join("search.json"), &outcome)?;
            write_json(
                &out.join("assignment.json"),
                &AssignmentFile {
                    scheme: ctx.spec.scheme,
                    bits: outcome.assignment,
                },
            )?;
            Ok("search")
        }
        Command::Size {
            model,
            assignment,
            bits,
            exclude_pruned,
        } => {
            let args = ModelArgs {
                model: model.clone(),
                embeddings: None,
                vocab: None,
            };
            let model = inputs.model(&args, seed)?;
            let (a, _) = inputs.assignment(assignment.as_deref(), *bits, Scheme::SymmetricInteger)?;
            let report = model_size(&model, &a, *exclude_pruned)?;
            let mut table = Table::new(&["layer", "param_count", "bits", "bytes"]);
            for (name, l) in &report.per_layer {
                table.push(vec![
                    name.as_str().into(),
                    Cell::Int(l.param_count as i64),
                    l.bits.into(),
                    l.bytes.into(),
                ]);
            }
            emit_table(&table, &out.join("size.csv"), Format::Csv)?;
            write_json(&out.join("size.json"), &report)?;
            println!(
                "{:.4} MB, {:.2}% reduction, embedding {:.2}%",
                report.total_mb, report.reduction_percent, report.embedding_share_percent
            );
            Ok("size")
        }
        Command::Emit {
            model,
            quant,
            threshold,
            fixed_point,
            no_unroll,
            pragma,
            c_type,
        } => {
            let model = inputs.model(model, seed)?;
            let ranges = inputs.ranges(&quant.ranges, &model, 0.0)?;
            let (a, spec) = inputs.assignment(quant.assignment.as_deref(), quant.bits, quant.scheme.into())?;
            let config = EmitConfig {
                bits: a,
                spec,
                pruning_threshold: *threshold,
                unroll: !no_unroll,
                fixed_point: *fixed_point,
                pragma: pragma.clone(),
                c_type: match c_type {
                    CTypeArg::Float => CType::Float,
                    CTypeArg::Double => CType::Double,
                },
            };
            emit_model(&model, &config, ranges.as_ref())?.write_to(out)?;
            Ok("emit")
        }
        Command::Fixture { epochs } => {
            let cfg = FixtureConfig {
                seed,
                epochs: *epochs,
                ..FixtureConfig::default()
            };
            let fx = generate(&cfg)?;
            fx.write_to(out, cli.force)?;
            let ranges = calibrate_activations(&fx.model, &fx.train, 0.0)?;
            write_json(&out.join("ranges.json"), &ranges)?;
            Ok("fixture")
        }
    }
}
