//! Corpus, vocabulary and embedding ingestion, plus train/validation/test
//! splitting.
//!
//! Corpora are JSON-lines files of pre-tokenized documents:
//!
//! ```text
//! {"tokens":[12,7,431],"label":1}
//! ```
//!
//! An optional sidecar `<stem>.manifest.json` next to the corpus declares
//! `vocab_size`, `num_classes` and `max_length`; without it those are
//! inferred from the data.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token index reserved for padding. Its embedding row is all zeros.
pub const PADDING_INDEX: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub max_length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub documents: Vec<Document>,
    pub num_classes: usize,
    pub max_length: usize,
    pub vocab_size: usize,
    pub split: Option<Split>,
}

impl Dataset {
    /// Builds a dataset and checks every document against the declared sizes.
    pub fn new(
        documents: Vec<Document>,
        num_classes: usize,
        max_length: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        let ds = Dataset {
            documents,
            num_classes,
            max_length,
            vocab_size,
            split: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.documents.is_empty() {
            return Err(Error::invalid("dataset has no documents"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        for (i, doc) in self.documents.iter().enumerate() {
            check_document(doc, &self.manifest()).map_err(|msg| {
                Error::invalid(format!("document {i}: {msg}"))
            })?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            max_length: self.max_length,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// A dataset with the same metadata holding the documents at `indices`.
    pub fn subset(&self, indices: &[usize], split: Option<Split>) -> Dataset {
        Dataset {
            documents: indices.iter().map(|&i| self.documents[i].clone()).collect(),
            num_classes: self.num_classes,
            max_length: self.max_length,
            vocab_size: self.vocab_size,
            split,
        }
    }
}

fn check_document(doc: &Document, m: &DatasetManifest) -> std::result::Result<(), String> {
    if let Some(&t) = doc.tokens.iter().find(|&&t| t >= m.vocab_size) {
        return Err(format!(
            "token index {t} out of range for vocabulary of size {}",
            m.vocab_size
        ));
    }
    if doc.label >= m.num_classes {
        return Err(format!(
            "label {} out of range for {} classes",
            doc.label, m.num_classes
        ));
    }
    if doc.tokens.len() > m.max_length {
        return Err(format!(
            "document length {} exceeds max_length {}",
            doc.tokens.len(),
            m.max_length
        ));
    }
    Ok(())
}

/// Path of the optional sidecar manifest for a corpus file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Loads a JSON-lines corpus, reading the sidecar manifest when present.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let sidecar = sidecar_path(path);
    let manifest = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        Some(serde_json::from_str::<DatasetManifest>(&text)?)
    } else {
        None
    };
    load_dataset_with(path, manifest.as_ref())
}

/// Loads a JSON-lines corpus against explicit metadata. Without metadata the
/// vocabulary size, class count and max length are inferred.
pub fn load_dataset_with(path: &Path, manifest: Option<&DatasetManifest>) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut documents = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(m) = manifest {
            if let Some(&t) = doc.tokens.iter().find(|&&t| t >= m.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: m.vocab_size,
                });
            }
            check_document(&doc, m).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            })?;
        }
        documents.push(doc);
    }
    if documents.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no documents".into(),
        });
    }
    let m = match manifest {
        Some(m) => *m,
        None => DatasetManifest {
            vocab_size: documents
                .iter()
                .flat_map(|d| d.tokens.iter().copied())
                .max()
                .map_or(1, |t| t + 1),
            num_classes: documents.iter().map(|d| d.label + 1).max().unwrap_or(0).max(2),
            max_length: documents.iter().map(|d| d.tokens.len()).max().unwrap_or(0),
        },
    };
    Dataset::new(documents, m.num_classes, m.max_length, m.vocab_size)
}

/// Writes the corpus as JSON lines plus its sidecar manifest.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in &dataset.documents {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let text = serde_json::to_string_pretty(&dataset.manifest())?;
    fs::write(&sidecar, text + "\n").map_err(|e| Error::io(&sidecar, e))
}

/// Reads a vocabulary file: one token per line, line number is the index.
pub fn load_vocab(path: &Path) -> Result<HashMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, tok)| (tok.to_string(), i))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vectors: Tensor,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingOptions {
    pub seed: u64,
    /// Unknown-word rows are drawn uniformly from `[-unknown_scale, unknown_scale]`.
    pub unknown_scale: f64,
    pub padding_index: Option<usize>,
}

impl Default for EmbeddingOptions {
    fn default() -> Self {
        EmbeddingOptions {
            seed: 0,
            unknown_scale: 0.25,
            padding_index: Some(PADDING_INDEX),
        }
    }
}

/// Loads whitespace-separated text embeddings (`token v1 ... vD` per line)
/// into a `[vocab_size, dim]` matrix indexed by `vocab`.
pub fn load_embeddings(
    path: &Path,
    vocab: &HashMap<String, usize>,
    opts: &EmbeddingOptions,
) -> Result<EmbeddingMatrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let vocab_size = vocab.values().copied().max().map_or(0, |m| m + 1);
    let mut dim: Option<usize> = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab_size];

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("unreadable decimal `{s}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d = *dim.get_or_insert(values.len());
        if values.len() != d || d == 0 {
            return Err(Error::Dimension {
                path: path.to_path_buf(),
                line: line_no,
                expected: d,
                found: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("non-finite value {v}"),
            });
        }
        if let Some(&row) = vocab.get(token) {
            if rows[row].is_none() {
                rows[row] = Some(values);
            }
        }
    }

    let dim = dim.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "no embedding vectors".into(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let s = opts.unknown_scale;
    let mut data = Vec::with_capacity(vocab_size * dim);
    for (i, row) in rows.into_iter().enumerate() {
        if Some(i) == opts.padding_index {
            data.extend(std::iter::repeat_n(0.0, dim));
            continue;
        }
        match row {
            Some(v) => data.extend(v),
            None => data.extend((0..dim).map(|_| rng.gen_range(-s..=s))),
        }
    }
    Ok(EmbeddingMatrix {
        vectors: Tensor::new(vec![vocab_size, dim], data)?,
        dim,
    })
}

/// One cross-validation fold: a held-out test part and the remaining
/// documents split into train and a 10% validation carve-out.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Fraction of training documents held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Splits into `k` shuffled folds of near-equal size (sizes differ by at
/// most one).
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = dataset.len();
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    if k > n {
        return Err(Error::invalid(format!(
            "k = {k} exceeds document count {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let (start, end) = (f * n / k, (f + 1) * n / k);
        let mut test: Vec<usize> = order[start..end].to_vec();
        let rest: Vec<usize> = order[..start].iter().chain(&order[end..]).copied().collect();
        let (mut train, mut val) =
            carve_validation(rest, seed.wrapping_add(1 + f as u64));
        test.sort_unstable();
        train.sort_unstable();
        val.sort_unstable();
        folds.push(Fold {
            train: dataset.subset(&train, Some(Split::Train)),
            validation: dataset.subset(&val, Some(Split::Validation)),
            test: dataset.subset(&test, Some(Split::Test)),
        });
    }
    Ok(folds)
}

/// Holds out a seeded 10% of `dataset` for validation, returning
/// `(train, validation)`.
pub fn train_validation_split(dataset: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let (mut train, mut val) = carve_validation((0..dataset.len()).collect(), seed);
    train.sort_unstable();
    val.sort_unstable();
    (
        dataset.subset(&train, Some(Split::Train)),
        dataset.subset(&val, Some(Split::Validation)),
    )
}

fn carve_validation(mut idx: Vec<usize>, seed: u64) -> (Vec<usize>, Vec<usize>) {
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (idx.len() as f64 * VALIDATION_FRACTION).round() as usize;
    let val = idx.split_off(idx.len() - n_val);
    (idx, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn toy(n: usize) -> Dataset {
        let docs = (0..n)
            .map(|i| Document {
                tokens: vec![1 + i % 5],
                label: i % 2,
            })
            .collect();
        Dataset::new(docs, 2, 4, 8).unwrap()
    }

    #[test]
    fn loads_minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"tokens\":[0,1],\"label\":0}\n{\"tokens\":[2],\"label\":1}\n",
        );
        let ds = load_dataset(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.num_classes >= 2);
        assert_eq!(ds.max_length, 2);
        assert_eq!(ds.vocab_size, 3);
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"tokens\":[0],\"label\":0}\n{\"tokens\":[-1],\"label\":0}\n",
        );
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn token_at_vocab_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "{\"tokens\":[18767],\"label\":0}\n");
        let m = DatasetManifest {
            vocab_size: 18767,
            num_classes: 2,
            max_length: 64,
        };
        assert!(matches!(
            load_dataset_with(&p, Some(&m)),
            Err(Error::TokenOutOfRange { token: 18767, .. })
        ));
        let p = write(dir.path(), "d.jsonl", "{\"tokens\":[18766],\"label\":0}\n");
        assert!(load_dataset_with(&p, Some(&m)).is_ok());
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(7);
        let p = dir.path().join("t.jsonl");
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.documents, ds.documents);
        assert_eq!(back.manifest(), ds.manifest());
    }

    #[test]
    fn embeddings_known_rows_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.txt", "a 0.5 -1.25 3\nb 1e-3 2 0.0\n");
        let vocab: HashMap<String, usize> =
            [("a".to_string(), 0), ("b".to_string(), 1)].into_iter().collect();
        let opts = EmbeddingOptions {
            padding_index: None,
            ..Default::default()
        };
        let m = load_embeddings(&p, &vocab, &opts).unwrap();
        assert_eq!(m.vectors.shape(), &[2, 3]);
        assert_eq!(m.vectors.data(), &[0.5, -1.25, 3.0, 1e-3, 2.0, 0.0]);
    }

    #[test]
    fn unknown_rows_are_seeded_and_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.txt", "a 0.5 -1.25 3\n");
        let vocab: HashMap<String, usize> = [("<pad>", 0), ("a", 1), ("zzz", 2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let opts = EmbeddingOptions {
            seed: 11,
            ..Default::default()
        };
        let m1 = load_embeddings(&p, &vocab, &opts).unwrap();
        let m2 = load_embeddings(&p, &vocab, &opts).unwrap();
        let bits = |m: &EmbeddingMatrix| m.vectors.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m1), bits(&m2));
        assert_eq!(m1.vectors.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(m1.vectors.row(1), &[0.5, -1.25, 3.0]);
        assert!(m1.vectors.row(2).iter().all(|v| (-0.25..=0.25).contains(v)));
        let other = load_embeddings(&p, &vocab, &EmbeddingOptions { seed: 12, ..opts }).unwrap();
        assert_ne!(other.vectors.row(2), m1.vectors.row(2));
    }

    #[test]
    fn short_embedding_line_is_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let full: Vec<String> = (0..300).map(|i| format!("{}", i as f64 / 1000.0)).collect();
        let short = &full[..299];
        let text = format!("a {}\nb {}\n", full.join(" "), short.join(" "));
        let p = write(dir.path(), "e.txt", &text);
        let vocab: HashMap<String, usize> =
            [("a".to_string(), 0), ("b".to_string(), 1)].into_iter().collect();
        match load_embeddings(&p, &vocab, &EmbeddingOptions::default()) {
            Err(Error::Dimension {
                line: 2,
                expected: 300,
                found: 299,
                ..
            }) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn unreadable_decimal() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.txt", "a 0,5 1\n");
        let vocab: HashMap<String, usize> = [("a".to_string(), 0)].into_iter().collect();
        assert!(matches!(
            load_embeddings(&p, &vocab, &EmbeddingOptions::default()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn ten_folds_of_ten() {
        let folds = make_folds(&toy(10), 10, 3).unwrap();
        assert_eq!(folds.len(), 10);
        for f in &folds {
            assert_eq!(f.test.len(), 1);
            assert_eq!(f.train.len() + f.validation.len(), 9);
            assert_eq!(f.validation.len(), 1);
        }
    }

    #[test]
    fn fold_sizes_balanced_for_mr_count() {
        let folds = make_folds(&toy(10662), 10, 1).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "{sizes:?}");
        assert_eq!(sizes.iter().sum::<usize>(), 10662);
    }

    #[test]
    fn k_larger_than_documents_is_error() {
        assert!(make_folds(&toy(3), 4, 0).is_err());
        assert!(make_folds(&toy(3), 1, 0).is_err());
    }

    #[test]
    fn folds_deterministic_and_partition() {
        // Documents carry distinct token lists so membership can be compared.
        let docs = (0..53)
            .map(|i| Document {
                tokens: vec![i],
                label: i % 2,
            })
            .collect();
        let ds = Dataset::new(docs, 2, 1, 53).unwrap();
        let ids = |d: &Dataset| d.documents.iter().map(|x| x.tokens[0]).collect::<Vec<_>>();
        let a = make_folds(&ds, 5, 9).unwrap();
        let b = make_folds(&ds, 5, 9).unwrap();
        let mut seen = BTreeSet::new();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(ids(&fa.test), ids(&fb.test));
            assert_eq!(ids(&fa.validation), ids(&fb.validation));
            for t in ids(&fa.test) {
                assert!(seen.insert(t), "token {t} in two test folds");
            }
            let mut all: Vec<usize> = ids(&fa.train);
            all.extend(ids(&fa.validation));
            all.extend(ids(&fa.test));
            all.sort_unstable();
            assert_eq!(all, (0..53).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), 53);
    }
}
