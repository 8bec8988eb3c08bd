//! Desk-scale synthetic sentiment corpus and a small trained model.
//!
//! Tokens 1..=10 carry positive sentiment, 11..=20 negative, the rest are
//! neutral filler. Each document mixes filler with sentiment words of a
//! single polarity, which is also its label. A tiny SGD trainer fits the
//! convolution and dense layers on top of fixed random embeddings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{save_dataset, Dataset, Document, Split, PADDING_INDEX};
use crate::error::{Error, Result};
use crate::model::{save_model, Activation, ModelGraph, ModelShape, Pool, CONV_LAYERS, DENSE1, DENSE2, EMBEDDING};

pub const FIXTURE_SEED: u64 = 20_180_412;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub dim: usize,
    pub max_length: usize,
    pub filters: usize,
    pub hidden: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: FIXTURE_SEED,
            vocab_size: 60,
            dim: 8,
            max_length: 16,
            filters: 8,
            hidden: 8,
            train: 800,
            validation: 200,
            test: 400,
            epochs: 20,
            learning_rate: 0.05,
        }
    }
}

const POSITIVE: std::ops::RangeInclusive<usize> = 1..=10;
const NEGATIVE: std::ops::RangeInclusive<usize> = 11..=20;
const SENTIMENT_SHIFT: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: ModelGraph,
    pub vocab: Vec<String>,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Token strings, indexed by token id.
pub fn vocabulary(size: usize) -> Vec<String> {
    (0..size)
        .map(|i| match i {
            PADDING_INDEX => "<pad>".to_string(),
            i if POSITIVE.contains(&i) => format!("pos{i:02}"),
            i if NEGATIVE.contains(&i) => format!("neg{i:02}"),
            i => format!("tok{i:02}"),
        })
        .collect()
}

fn document(rng: &mut ChaCha8Rng, cfg: &FixtureConfig) -> Document {
    let label = rng.gen_range(0..2usize);
    let len = rng.gen_range(4..=cfg.max_length);
    let sentiment = rng.gen_range(1..=3usize).min(len);
    let polar = if label == 1 { POSITIVE } else { NEGATIVE };
    let mut tokens: Vec<usize> = (0..len)
        .map(|_| rng.gen_range(NEGATIVE.end() + 1..cfg.vocab_size))
        .collect();
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    for &s in &slots[..sentiment] {
        tokens[s] = rng.gen_range(polar.clone());
    }
    Document { tokens, label }
}

fn corpus(rng: &mut ChaCha8Rng, n: usize, cfg: &FixtureConfig, split: Split) -> Result<Dataset> {
    let docs = (0..n).map(|_| document(rng, cfg)).collect();
    let mut ds = Dataset::new(docs, 2, cfg.max_length, cfg.vocab_size)?;
    ds.split = Some(split);
    Ok(ds)
}

/// Rounds through `f32` so the value survives the on-disk format unchanged.
fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

/// Trainable parameters, flat and row-major in the model's layouts.
struct Params {
    conv: [(Vec<f64>, Vec<f64>, usize); 2],
    d1: (Vec<f64>, Vec<f64>),
    d2: (Vec<f64>, Vec<f64>),
}

struct Trainer<'a> {
    cfg: &'a FixtureConfig,
    emb: &'a [f64],
    p: Params,
}

impl Trainer<'_> {
    fn embed(&self, tokens: &[usize]) -> Vec<f64> {
        let d = self.cfg.dim;
        let mut x = vec![0.0; self.cfg.max_length * d];
        for (s, &tok) in tokens.iter().take(self.cfg.max_length).enumerate() {
            x[s * d..(s + 1) * d].copy_from_slice(&self.emb[tok * d..(tok + 1) * d]);
        }
        x
    }

    /// One SGD step on a single document; returns the predicted probability.
    fn step(&mut self, doc: &Document, lr: f64) -> f64 {
        let cfg = self.cfg;
        let (d, l, f, h) = (cfg.dim, cfg.max_length, cfg.filters, cfg.hidden);
        let x = self.embed(&doc.tokens);

        let mut feats = Vec::with_capacity(2 * f);
        let mut argmax = Vec::with_capacity(2 * f);
        for (w, b, k) in &self.p.conv {
            let positions = l - k + 1;
            for o in 0..f {
                let mut best = (f64::NEG_INFINITY, 0);
                for s in 0..positions {
                    let mut acc = b[o];
                    for i in 0..d {
                        for t in 0..*k {
                            acc += x[(s + t) * d + i] * w[(i * f + o) * k + t];
                        }
                    }
                    if acc > best.0 {
                        best = (acc, s);
                    }
                }
                feats.push(best.0.max(0.0));
                argmax.push(best);
            }
        }
        let (w1, b1) = &self.p.d1;
        let hid: Vec<f64> = (0..h)
            .map(|j| (b1[j] + (0..2 * f).map(|i| feats[i] * w1[i * h + j]).sum::<f64>()).max(0.0))
            .collect();
        let (w2, b2) = &self.p.d2;
        let z = b2[0] + (0..h).map(|j| hid[j] * w2[j]).sum::<f64>();
        let prob = 1.0 / (1.0 + (-z).exp());

        let dz = prob - doc.label as f64;
        let dh: Vec<f64> = (0..h)
            .map(|j| if hid[j] > 0.0 { w2[j] * dz } else { 0.0 })
            .collect();
        let df: Vec<f64> = (0..2 * f)
            .map(|i| (0..h).map(|j| w1[i * h + j] * dh[j]).sum())
            .collect();

        let (w2, b2) = &mut self.p.d2;
        for j in 0..h {
            w2[j] -= lr * hid[j] * dz;
        }
        b2[0] -= lr * dz;
        let (w1, b1) = &mut self.p.d1;
        for i in 0..2 * f {
            for j in 0..h {
                w1[i * h + j] -= lr * feats[i] * dh[j];
            }
        }
        for j in 0..h {
            b1[j] -= lr * dh[j];
        }
        for (branch, (w, b, k)) in self.p.conv.iter_mut().enumerate() {
            for o in 0..f {
                let (val, s) = argmax[branch * f + o];
                let g = df[branch * f + o];
                if val <= 0.0 || g == 0.0 {
                    continue;
                }
                for i in 0..d {
                    for t in 0..*k {
                        w[(i * f + o) * *k + t] -= lr * x[(s + t) * d + i] * g;
                    }
                }
                b[o] -= lr * g;
            }
        }
        prob
    }
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

/// Generates the corpus splits and trains the model, deterministically in
/// `cfg.seed`.
pub fn generate(cfg: &FixtureConfig) -> Result<Fixture> {
    if cfg.vocab_size <= NEGATIVE.end() + 1 || cfg.max_length < 4 {
        return Err(Error::invalid("fixture vocabulary or length too small"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = corpus(&mut rng, cfg.train, cfg, Split::Train)?;
    let validation = corpus(&mut rng, cfg.validation, cfg, Split::Validation)?;
    let test = corpus(&mut rng, cfg.test, cfg, Split::Test)?;

    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let mut emb: Vec<f64> = (0..cfg.vocab_size * cfg.dim)
        .map(|_| f32_exact(normal.sample(&mut rng)))
        .collect();
    // Sentiment words lean along a shared direction, as in pretrained vectors.
    let axis: Vec<f64> = (0..cfg.dim).map(|_| normal.sample(&mut rng)).collect();
    let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
    for tok in POSITIVE.chain(NEGATIVE) {
        let sign = if POSITIVE.contains(&tok) { 1.0 } else { -1.0 };
        for (j, a) in axis.iter().enumerate() {
            let v = &mut emb[tok * cfg.dim + j];
            *v = f32_exact(*v + sign * SENTIMENT_SHIFT * a / norm);
        }
    }
    emb[PADDING_INDEX * cfg.dim..(PADDING_INDEX + 1) * cfg.dim].fill(0.0);

    let shape = ModelShape {
        vocab_size: cfg.vocab_size,
        dim: cfg.dim,
        kernel_sizes: [2, 3],
        filters: [cfg.filters; 2],
        hidden: cfg.hidden,
        num_classes: 2,
        max_length: cfg.max_length,
        pool: Pool::Max,
    };
    let (d, f, h) = (cfg.dim, cfg.filters, cfg.hidden);
    let conv = |rng: &mut ChaCha8Rng, k: usize| (glorot(rng, d * f * k, d * k, f), vec![0.0; f], k);
    let params = Params {
        conv: [conv(&mut rng, 2), conv(&mut rng, 3)],
        d1: (glorot(&mut rng, 2 * f * h, 2 * f, h), vec![0.0; h]),
        d2: (glorot(&mut rng, h, h, 1), vec![0.0]),
    };
    let mut trainer = Trainer {
        cfg,
        emb: &emb,
        p: params,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            trainer.step(&train.documents[i], cfg.learning_rate);
        }
    }

    let p = trainer.p;
    let model = ModelGraph::from_shape(&shape, |name, is_bias, i| {
        let v = match (name, is_bias) {
            (EMBEDDING, _) => emb[i],
            (n, false) if n == CONV_LAYERS[0] => p.conv[0].0[i],
            (n, true) if n == CONV_LAYERS[0] => p.conv[0].1[i],
            (n, false) if n == CONV_LAYERS[1] => p.conv[1].0[i],
            (n, true) if n == CONV_LAYERS[1] => p.conv[1].1[i],
            (DENSE1, false) => p.d1.0[i],
            (DENSE1, true) => p.d1.1[i],
            (DENSE2, false) => p.d2.0[i],
            (DENSE2, true) => p.d2.1[i],
            _ => 0.0,
        };
        f32_exact(v)
    })?;
    debug_assert_eq!(model.activation(DENSE2), Activation::Sigmoid);
    Ok(Fixture {
        model,
        vocab: vocabulary(cfg.vocab_size),
        train,
        validation,
        test,
    })
}

impl Fixture {
    /// Writes `model.json` (+ blobs), `train.jsonl`, `validation.jsonl`,
    /// `test.jsonl`, `vocab.txt` and `embeddings.txt` into `dir`.
    pub fn write_to(&self, dir: &Path, force: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_model(&self.model, &dir.join("model.json"), force)?;
        save_dataset(&self.train, &dir.join("train.jsonl"))?;
        save_dataset(&self.validation, &dir.join("validation.jsonl"))?;
        save_dataset(&self.test, &dir.join("test.jsonl"))?;
        let vocab_path = dir.join("vocab.txt");
        fs::write(&vocab_path, self.vocab.join("\n") + "\n").map_err(|e| Error::io(&vocab_path, e))?;
        let emb = &self.model.weights(EMBEDDING).kernel;
        let mut text = String::new();
        for (i, word) in self.vocab.iter().enumerate().skip(1) {
            text.push_str(word);
            for v in emb.row(i) {
                let _ = write!(text, " {v}");
            }
            text.push('\n');
        }
        let emb_path = dir.join("embeddings.txt");
        fs::write(&emb_path, text).map_err(|e| Error::io(&emb_path, e))
    }

    pub fn vocab_map(&self) -> HashMap<String, usize> {
        self.vocab.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{evaluate, InferenceConfig};

    #[test]
    fn trains_to_high_accuracy() {
        let fx = generate(&FixtureConfig::default()).unwrap();
        let acc = evaluate(&fx.model, &fx.test, &InferenceConfig::float()).unwrap();
        assert!(acc >= 0.9, "fixture accuracy {acc}");
    }

    #[test]
    fn deterministic() {
        let cfg = FixtureConfig {
            epochs: 1,
            ..FixtureConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn labels_follow_sentiment_words() {
        let fx = generate(&FixtureConfig {
            epochs: 0,
            ..FixtureConfig::default()
        })
        .unwrap();
        for doc in &fx.train.documents {
            let pos = doc.tokens.iter().any(|t| POSITIVE.contains(t));
            let neg = doc.tokens.iter().any(|t| NEGATIVE.contains(t));
            assert_eq!(doc.label == 1, pos && !neg);
        }
    }
}
