//! Deterministic synthetic multilingual corpora.
//!
//! Each language owns a disjoint token-id range and a first-order Markov
//! chain over that range, so documents have real sequential structure
//! while language identity stays decidable per token. A common
//! "punctuation" range, disjoint from every language, is shared: each
//! position emits a shared token with the language's `shared_fraction`
//! probability. Shared tokens classify as non-words.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::seeds::{derive_seed, rng_for};

/// One synthetic language: a token range plus chain parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub label: String,
    /// Token-id range `[lo, hi)`, disjoint from every other language.
    pub range: (u32, u32),
    /// Seed of the bigram transition table.
    pub transition_seed: u64,
    /// Per-position probability of emitting a shared token, in `[0, 0.2]`.
    pub shared_fraction: f64,
}

impl SyntheticLanguageSpec {
    pub fn width(&self) -> u32 {
        self.range.1.saturating_sub(self.range.0)
    }
}

/// A set of mutually disjoint language specs plus the shared range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: u32,
    /// Shared "punctuation" range `[lo, hi)`, disjoint from all languages.
    pub shared_range: (u32, u32),
    pub languages: Vec<SyntheticLanguageSpec>,
}

impl CorpusConfig {
    /// Partition `[shared_width, vocab)` evenly among `labels`, reserving
    /// `[0, shared_width)` as the shared range. Transition seeds are
    /// derived from `seed` per label.
    pub fn evenly_split(
        vocab_size: u32,
        labels: &[&str],
        shared_width: u32,
        shared_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("at least one language required".to_string()));
        }
        let usable = vocab_size.saturating_sub(shared_width);
        let per_lang = usable / labels.len() as u32;
        let mut languages = Vec::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            let lo = shared_width + i as u32 * per_lang;
            let hi = if i + 1 == labels.len() {
                vocab_size
            } else {
                lo + per_lang
            };
            languages.push(SyntheticLanguageSpec {
                label: label.to_string(),
                range: (lo, hi),
                transition_seed: derive_seed(seed, &format!("transitions/{label}")),
                shared_fraction,
            });
        }
        let config = CorpusConfig {
            vocab_size,
            shared_range: (0, shared_width),
            languages,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let (slo, shi) = self.shared_range;
        if slo > shi || shi > self.vocab_size {
            return Err(Error::Config(format!(
                "shared range [{slo}, {shi}) is not inside the vocabulary"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for spec in &self.languages {
            if spec.label.is_empty() {
                return Err(Error::Config(
                    "language label must not be empty".to_string(),
                ));
            }
            if !seen.insert(spec.label.clone()) {
                return Err(Error::Config(format!(
                    "duplicate language label {}",
                    spec.label
                )));
            }
            let (lo, hi) = spec.range;
            if lo >= hi || hi > self.vocab_size {
                return Err(Error::Config(format!(
                    "language {} range [{lo}, {hi}) is not inside the vocabulary",
                    spec.label
                )));
            }
            if spec.width() < 8 {
                return Err(Error::Config(format!(
                    "language {} range must span at least 8 tokens",
                    spec.label
                )));
            }
            if !(0.0..=0.2).contains(&spec.shared_fraction) {
                return Err(Error::Config(format!(
                    "language {} shared_fraction {} outside [0, 0.2]",
                    spec.label, spec.shared_fraction
                )));
            }
            if spec.shared_fraction > 0.0 && slo == shi {
                return Err(Error::Config(format!(
                    "language {} emits shared tokens but the shared range is empty",
                    spec.label
                )));
            }
            if lo < shi && slo < hi {
                return Err(Error::Config(format!(
                    "language {} range overlaps the shared range",
                    spec.label
                )));
            }
        }
        for (a, b) in self
            .languages
            .iter()
            .enumerate()
            .flat_map(|(i, a)| self.languages[i + 1..].iter().map(move |b| (a, b)))
        {
            if a.range.0 < b.range.1 && b.range.0 < a.range.1 {
                return Err(Error::Config(format!(
                    "language ranges {} and {} overlap",
                    a.label, b.label
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<&str> {
        self.languages.iter().map(|s| s.label.as_str()).collect()
    }

    pub fn spec(&self, label: &str) -> Option<&SyntheticLanguageSpec> {
        self.languages.iter().find(|s| s.label == label)
    }

    /// Classify one token: its language's label, or `None` for shared and
    /// otherwise-unassigned ids (non-words). Total over the vocabulary.
    pub fn classify_token(&self, token: u32) -> Result<Option<&str>> {
        if token >= self.vocab_size {
            return Err(Error::Input(format!(
                "token id {token} out of range (vocab_size = {})",
                self.vocab_size
            )));
        }
        for spec in &self.languages {
            if token >= spec.range.0 && token < spec.range.1 {
                return Ok(Some(&spec.label));
            }
        }
        Ok(None)
    }
}

/// Which split a bundle represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Validation,
}

/// Per-language document lists for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusBundle {
    pub config: CorpusConfig,
    pub seed: u64,
    pub split: SplitTag,
    pub docs: BTreeMap<String, Vec<Vec<u32>>>,
}

impl CorpusBundle {
    pub fn total_docs(&self) -> usize {
        self.docs.values().map(Vec::len).sum()
    }
}

/// Row-stochastic bigram table in cumulative form, for sampling.
struct TransitionTable {
    lo: u32,
    cdf_rows: Vec<Vec<f64>>,
}

impl TransitionTable {
    /// Softmax of scaled Gaussian logits per row; scale 2.0 gives rows
    /// with entropy well below uniform, so there is real structure for a
    /// model to learn.
    fn build(spec: &SyntheticLanguageSpec) -> Self {
        let width = spec.width() as usize;
        let mut rng = rng_for(spec.transition_seed, "transition-table");
        let normal = rand_distr::Normal::new(0.0, 1.0).expect("valid normal");
        let mut cdf_rows = Vec::with_capacity(width);
        for _ in 0..width {
            let logits: Vec<f64> = (0..width)
                .map(|_| 2.0 * rand_distr::Distribution::sample(&normal, &mut rng))
                .collect();
            let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut row: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = row.iter().sum();
            let mut cum = 0.0;
            for v in &mut row {
                cum += *v / sum;
                *v = cum;
            }
            cdf_rows.push(row);
        }
        TransitionTable {
            lo: spec.range.0,
            cdf_rows,
        }
    }

    fn next<R: Rng>(&self, state: u32, rng: &mut R) -> u32 {
        let row = &self.cdf_rows[(state - self.lo) as usize];
        let u: f64 = rng.random();
        let idx = row.partition_point(|&c| c < u).min(row.len() - 1);
        self.lo + idx as u32
    }
}

/// Generate documents for every language with a first-order Markov chain
/// over its range. Position 0 is always an in-language token; every later
/// position emits a shared token with probability `shared_fraction`,
/// otherwise the chain advances. Deterministic per `(config, counts,
/// doc_len, seed)`.
pub fn sample_corpus(
    config: &CorpusConfig,
    docs_per_lang: &BTreeMap<String, usize>,
    doc_len: usize,
    seed: u64,
) -> Result<CorpusBundle> {
    config.validate()?;
    if doc_len < 2 {
        return Err(Error::Config("doc_len must be at least 2".to_string()));
    }
    for label in docs_per_lang.keys() {
        if config.spec(label).is_none() {
            return Err(Error::Config(format!("unknown language label {label}")));
        }
    }

    let mut docs = BTreeMap::new();
    for spec in &config.languages {
        let count = docs_per_lang.get(&spec.label).copied().unwrap_or(0);
        let table = TransitionTable::build(spec);
        let mut rng = rng_for(seed, &format!("corpus/{}", spec.label));
        let (slo, shi) = config.shared_range;
        let mut lang_docs = Vec::with_capacity(count);
        for _ in 0..count {
            let mut doc = Vec::with_capacity(doc_len);
            let mut state = spec.range.0 + rng.random_range(0..spec.width());
            doc.push(state);
            for _ in 1..doc_len {
                if spec.shared_fraction > 0.0 && rng.random::<f64>() < spec.shared_fraction {
                    doc.push(slo + rng.random_range(0..shi - slo));
                } else {
                    state = table.next(state, &mut rng);
                    doc.push(state);
                }
            }
            lang_docs.push(doc);
        }
        docs.insert(spec.label.clone(), lang_docs);
    }

    Ok(CorpusBundle {
        config: config.clone(),
        seed,
        split: SplitTag::Full,
        docs,
    })
}

/// Split each language's documents into disjoint train/validation parts.
/// The train side gets `floor(n · train_fraction)` documents, clamped so
/// both sides stay non-empty.
pub fn split(
    bundle: &CorpusBundle,
    train_fraction: f64,
    seed: u64,
) -> Result<(CorpusBundle, CorpusBundle)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} must be strictly between 0 and 1"
        )));
    }
    let mut train_docs = BTreeMap::new();
    let mut val_docs = BTreeMap::new();
    for (label, docs) in &bundle.docs {
        let n = docs.len();
        if n < 2 {
            return Err(Error::Input(format!(
                "language {label} has {n} documents, need at least 2 to split"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_for(seed, &format!("split/{label}"));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
        let mut train_idx: Vec<usize> = order[..n_train].to_vec();
        let mut val_idx: Vec<usize> = order[n_train..].to_vec();
        train_idx.sort_unstable();
        val_idx.sort_unstable();
        train_docs.insert(
            label.clone(),
            train_idx
                .iter()
                .map(|&i| docs[i].clone())
                .collect::<Vec<_>>(),
        );
        val_docs.insert(
            label.clone(),
            val_idx.iter().map(|&i| docs[i].clone()).collect::<Vec<_>>(),
        );
    }
    let mk = |split: SplitTag, docs| CorpusBundle {
        config: bundle.config.clone(),
        seed: bundle.seed,
        split,
        docs,
    };
    Ok((
        mk(SplitTag::Train, train_docs),
        mk(SplitTag::Validation, val_docs),
    ))
}

// ---------------------------------------------------------------------------
// Files: one document per line, whitespace-separated token ids, plus a
// JSON manifest naming the per-split files.

pub fn save_docs(path: &Path, docs: &[Vec<u32>]) -> Result<()> {
    let mut text = String::new();
    for doc in docs {
        let line = doc
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        text.push_str(&line);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn load_docs(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|_| {
                    Error::Format(format!(
                        "{}:{}: `{tok}` is not a token id",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Manifest tying together the config, seed, and per-split token files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: CorpusConfig,
    /// split name -> language label -> file path relative to the manifest.
    pub splits: BTreeMap<String, BTreeMap<String, String>>,
}

pub fn save_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let manifest: CorpusManifest = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest.config.validate()?;
    Ok(manifest)
}

/// Load all documents of one split, keyed by language.
pub fn load_split(
    manifest_path: &Path,
    manifest: &CorpusManifest,
    split: &str,
) -> Result<BTreeMap<String, Vec<Vec<u32>>>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let files = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::Input(format!("manifest has no `{split}` split")))?;
    let mut out = BTreeMap::new();
    for (label, file) in files {
        out.insert(label.clone(), load_docs(&base.join(file))?);
    }
    Ok(out)
}

/// Generate, split, and write a corpus directory; returns the manifest
/// path. Layout: `corpus.json` plus `train_<label>.txt` /
/// `validation_<label>.txt` per language.
pub fn write_corpus_dir(
    dir: &Path,
    config: &CorpusConfig,
    docs_per_lang: &BTreeMap<String, usize>,
    doc_len: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<PathBuf> {
    let full = sample_corpus(config, docs_per_lang, doc_len, seed)?;
    let (train, validation) = split(&full, train_fraction, seed)?;

    let mut splits: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for (tag, bundle) in [("train", &train), ("validation", &validation)] {
        let mut files = BTreeMap::new();
        for (label, docs) in &bundle.docs {
            let file = format!("{tag}_{label}.txt");
            save_docs(&dir.join(&file), docs)?;
            files.insert(label.clone(), file);
        }
        splits.insert(tag.to_string(), files);
    }

    let manifest = CorpusManifest {
        seed,
        config: config.clone(),
        splits,
    };
    let manifest_path = dir.join("corpus.json");
    save_manifest(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_lang_config(shared_fraction: f64) -> CorpusConfig {
        CorpusConfig::evenly_split(64, &["A", "B"], 4, shared_fraction, 99).unwrap()
    }

    fn counts(a: usize, b: usize) -> BTreeMap<String, usize> {
        [("A".to_string(), a), ("B".to_string(), b)]
            .into_iter()
            .collect()
    }

    #[test]
    fn zero_shared_fraction_stays_in_range() {
        let config = two_lang_config(0.0);
        let bundle = sample_corpus(&config, &counts(10, 10), 32, 1).unwrap();
        for spec in &config.languages {
            for doc in &bundle.docs[&spec.label] {
                assert!(doc.iter().all(|&t| t >= spec.range.0 && t < spec.range.1));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = two_lang_config(0.05);
        let a = sample_corpus(&config, &counts(5, 5), 16, 7).unwrap();
        let b = sample_corpus(&config, &counts(5, 5), 16, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_corpus(&config, &counts(5, 5), 16, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_and_lengths_are_exact() {
        let config = two_lang_config(0.05);
        let bundle = sample_corpus(&config, &counts(50, 50), 64, 3).unwrap();
        assert_eq!(bundle.total_docs(), 100);
        for docs in bundle.docs.values() {
            assert_eq!(docs.len(), 50);
            assert!(docs.iter().all(|d| d.len() == 64));
        }
    }

    #[test]
    fn shared_tokens_land_in_shared_range() {
        let config = two_lang_config(0.2);
        let bundle = sample_corpus(&config, &counts(20, 0), 64, 5).unwrap();
        let spec = config.spec("A").unwrap();
        let mut saw_shared = false;
        for doc in &bundle.docs["A"] {
            for &t in doc {
                let in_lang = t >= spec.range.0 && t < spec.range.1;
                let in_shared = t < 4;
                assert!(in_lang || in_shared);
                saw_shared |= in_shared;
            }
        }
        assert!(
            saw_shared,
            "fraction 0.2 over 1260 positions must emit shared tokens"
        );
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let mut config = two_lang_config(0.0);
        config.languages[1].range = (config.languages[0].range.1 - 2, 64);
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let mut config = two_lang_config(0.0);
        config.languages[0].range = (2, 34);
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn narrow_range_rejected() {
        let mut config = two_lang_config(0.0);
        config.languages[0].range = (4, 11);
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn classification_is_total() {
        let config = two_lang_config(0.05);
        let mut counts = BTreeMap::new();
        for t in 0..config.vocab_size {
            let label = config.classify_token(t).unwrap();
            *counts.entry(label.map(str::to_string)).or_insert(0usize) += 1;
        }
        assert_eq!(counts[&None], 4);
        assert_eq!(counts[&Some("A".to_string())], 30);
        assert_eq!(counts[&Some("B".to_string())], 30);
        assert!(config.classify_token(64).is_err());
    }

    #[test]
    fn split_partitions_each_language() {
        let config = two_lang_config(0.05);
        let bundle = sample_corpus(&config, &counts(50, 50), 16, 11).unwrap();
        let (train, val) = split(&bundle, 0.8, 4).unwrap();
        for label in ["A", "B"] {
            assert_eq!(train.docs[label].len(), 40);
            assert_eq!(val.docs[label].len(), 10);
            let mut union: Vec<Vec<u32>> = train.docs[label].clone();
            union.extend(val.docs[label].clone());
            union.sort();
            let mut orig = bundle.docs[label].clone();
            orig.sort();
            assert_eq!(union, orig);
        }
        let (train2, _) = split(&bundle, 0.8, 4).unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn split_needs_two_docs() {
        let config = two_lang_config(0.05);
        let bundle = sample_corpus(&config, &counts(1, 5), 16, 11).unwrap();
        assert!(split(&bundle, 0.5, 0).is_err());
    }

    #[test]
    fn doc_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.txt");
        let docs = vec![vec![1, 2, 3], vec![9, 8]];
        save_docs(&path, &docs).unwrap();
        assert_eq!(load_docs(&path).unwrap(), docs);
        std::fs::write(&path, "1 2 x\n").unwrap();
        assert!(matches!(load_docs(&path), Err(Error::Format(_))));
    }

    #[test]
    fn corpus_dir_round_trips_and_is_reproducible() {
        let config = two_lang_config(0.05);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let manifest_a =
            write_corpus_dir(dir_a.path(), &config, &counts(10, 10), 16, 0.8, 42).unwrap();
        let manifest_b =
            write_corpus_dir(dir_b.path(), &config, &counts(10, 10), 16, 0.8, 42).unwrap();
        assert_eq!(
            std::fs::read(&manifest_a).unwrap(),
            std::fs::read(&manifest_b).unwrap()
        );

        let manifest = load_manifest(&manifest_a).unwrap();
        let train = load_split(&manifest_a, &manifest, "train").unwrap();
        let val = load_split(&manifest_a, &manifest, "validation").unwrap();
        assert_eq!(train["A"].len(), 8);
        assert_eq!(val["A"].len(), 2);
        assert!(load_split(&manifest_a, &manifest, "test").is_err());
    }
}
