//! Language-specific neuron sets.
//!
//! Detection turns per-document importance into a labelled set: a neuron
//! belongs to the set when its score clears the per-document threshold in
//! at least `ceil(p · n)` of the corpus documents. The threshold is the
//! `q`-quantile of that document's scores for the neuron's layer and
//! matrix kind, which keeps the rule scale-free across layers whose score
//! magnitudes differ; an absolute threshold can be configured instead.
//! Zero scores never count as important.
//!
//! The module also provides the set algebra, the (asymmetric) overlap
//! ratio, per-layer activation counts, and stratified random baselines
//! with exactly matched per-(layer, kind) cardinalities.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::importance::{self, ImportanceMap};
use crate::model::{MatrixKind, ModelConfig, NeuronId, TransformerWeights};
use crate::seeds::rng_for;

/// When a neuron counts as "important" for one document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    /// Per-document, per-layer, per-kind score quantile in `(0, 1)`.
    pub quantile: f64,
    /// Fraction of corpus documents the neuron must clear, in `(0, 1]`;
    /// `1.0` requires every document.
    pub doc_fraction: f64,
    /// When set, use this absolute score threshold instead of the
    /// quantile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absolute_epsilon: Option<f64>,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            quantile: 0.95,
            doc_fraction: 1.0,
            absolute_epsilon: None,
        }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config(format!(
                "quantile {} must be strictly inside (0, 1)",
                self.quantile
            )));
        }
        if !(self.doc_fraction > 0.0 && self.doc_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "doc_fraction {} must be in (0, 1]",
                self.doc_fraction
            )));
        }
        if let Some(eps) = self.absolute_epsilon {
            if !(eps.is_finite() && eps >= 0.0) {
                return Err(Error::Config(format!(
                    "absolute_epsilon {eps} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Threshold for one score slice (nearest-rank quantile).
    pub fn slice_threshold(&self, scores: &[f64]) -> f64 {
        if let Some(eps) = self.absolute_epsilon {
            return eps;
        }
        let mut sorted: Vec<f64> = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let rank = (self.quantile * sorted.len() as f64).ceil() as usize;
        sorted[rank.clamp(1, sorted.len()) - 1]
    }

    /// Importance test against a slice threshold. In quantile mode a zero
    /// score is never important, whatever the threshold.
    pub fn is_important(&self, score: f64, threshold: f64) -> bool {
        if self.absolute_epsilon.is_some() {
            score >= threshold
        } else {
            score >= threshold && score > 0.0
        }
    }

    /// Documents required out of `n`.
    pub fn docs_required(&self, n: usize) -> usize {
        ((self.doc_fraction * n as f64).ceil() as usize).clamp(1, n)
    }
}

/// Where a neuron set came from; enough to re-derive the member list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Detected {
        policy: ThresholdPolicy,
        corpus_hash: String,
        n_docs: usize,
    },
    RandomMatched {
        seed: u64,
        reference: String,
    },
    Algebra {
        expr: String,
    },
    Note {
        text: String,
    },
}

/// A labelled set of neurons of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSet {
    pub label: String,
    pub model_hash: String,
    pub provenance: Provenance,
    pub members: BTreeSet<NeuronId>,
}

impl NeuronSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: &NeuronId) -> bool {
        self.members.contains(id)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for id in &self.members {
            id.validate(config)?;
        }
        Ok(())
    }

    /// Member count per `(layer, kind)` stratum.
    pub fn stratum_counts(&self) -> BTreeMap<(usize, MatrixKind), usize> {
        let mut counts = BTreeMap::new();
        for id in &self.members {
            *counts.entry((id.layer, id.kind)).or_insert(0) += 1;
        }
        counts
    }

    /// Members restricted to the given strata.
    pub fn restrict_to_strata(
        &self,
        strata: &BTreeSet<(usize, MatrixKind)>,
        label: String,
    ) -> NeuronSet {
        NeuronSet {
            label,
            model_hash: self.model_hash.clone(),
            provenance: Provenance::Algebra {
                expr: format!("restrict({})", self.label),
            },
            members: self
                .members
                .iter()
                .filter(|id| strata.contains(&(id.layer, id.kind)))
                .copied()
                .collect(),
        }
    }
}

fn check_same_model(a: &NeuronSet, b: &NeuronSet) -> Result<()> {
    if a.model_hash != b.model_hash {
        return Err(Error::ModelMismatch(format!(
            "sets {} and {} belong to different models",
            a.label, b.label
        )));
    }
    Ok(())
}

/// Detect the neurons consistently important across a corpus.
pub fn detect(
    weights: &TransformerWeights,
    corpus: &[Vec<u32>],
    policy: &ThresholdPolicy,
    label: &str,
) -> Result<NeuronSet> {
    policy.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".to_string()));
    }
    let maps: Vec<ImportanceMap> = corpus
        .par_iter()
        .map(|doc| importance::imp_all(weights, doc))
        .collect::<Result<_>>()?;

    let mut counts: BTreeMap<NeuronId, usize> = BTreeMap::new();
    for map in &maps {
        for layer in 0..weights.config.n_layers {
            for kind in MatrixKind::ALL {
                let slice = map.kind_scores(layer, kind);
                let threshold = policy.slice_threshold(slice);
                for (index, &score) in slice.iter().enumerate() {
                    if policy.is_important(score, threshold) {
                        *counts.entry(NeuronId::new(layer, kind, index)).or_insert(0) += 1;
                    }
                }
            }
        }
    }

    let needed = policy.docs_required(corpus.len());
    let members: BTreeSet<NeuronId> = counts
        .into_iter()
        .filter(|&(_, c)| c >= needed)
        .map(|(id, _)| id)
        .collect();

    Ok(NeuronSet {
        label: label.to_string(),
        model_hash: weights.model_hash(),
        provenance: Provenance::Detected {
            policy: *policy,
            corpus_hash: importance::corpus_hash(corpus),
            n_docs: corpus.len(),
        },
        members,
    })
}

/// Overlap ratio `|x ∩ y| / |y|`. Asymmetric: the denominator is `|y|`.
pub fn overlap(x: &NeuronSet, y: &NeuronSet) -> Result<f64> {
    check_same_model(x, y)?;
    if y.is_empty() {
        return Err(Error::UndefinedRatio(format!(
            "overlap denominator set {} is empty",
            y.label
        )));
    }
    let shared = x.members.intersection(&y.members).count();
    Ok(shared as f64 / y.len() as f64)
}

pub fn union(a: &NeuronSet, b: &NeuronSet, label: &str) -> Result<NeuronSet> {
    check_same_model(a, b)?;
    Ok(NeuronSet {
        label: label.to_string(),
        model_hash: a.model_hash.clone(),
        provenance: Provenance::Algebra {
            expr: format!("union({}, {})", a.label, b.label),
        },
        members: a.members.union(&b.members).copied().collect(),
    })
}

pub fn intersection(a: &NeuronSet, b: &NeuronSet, label: &str) -> Result<NeuronSet> {
    check_same_model(a, b)?;
    Ok(NeuronSet {
        label: label.to_string(),
        model_hash: a.model_hash.clone(),
        provenance: Provenance::Algebra {
            expr: format!("intersection({}, {})", a.label, b.label),
        },
        members: a.members.intersection(&b.members).copied().collect(),
    })
}

pub fn difference(a: &NeuronSet, b: &NeuronSet, label: &str) -> Result<NeuronSet> {
    check_same_model(a, b)?;
    Ok(NeuronSet {
        label: label.to_string(),
        model_hash: a.model_hash.clone(),
        provenance: Provenance::Algebra {
            expr: format!("difference({}, {})", a.label, b.label),
        },
        members: a.members.difference(&b.members).copied().collect(),
    })
}

/// Per-layer activity of a set on one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveCounts {
    pub per_layer: Vec<LayerActivity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerActivity {
    pub attention: usize,
    pub ffn: usize,
}

impl ActiveCounts {
    pub fn total(&self) -> usize {
        self.per_layer.iter().map(|l| l.attention + l.ffn).sum()
    }
}

/// Count, per layer and structure, the set members whose importance on
/// this document clears the policy threshold. "Active" reuses the
/// detection rule; no second definition is introduced.
pub fn count_active(
    weights: &TransformerWeights,
    set: &NeuronSet,
    doc: &[u32],
    policy: &ThresholdPolicy,
) -> Result<ActiveCounts> {
    policy.validate()?;
    set.validate(&weights.config)?;
    let map = importance::imp_all(weights, doc)?;

    let mut thresholds: BTreeMap<(usize, MatrixKind), f64> = BTreeMap::new();
    let mut per_layer = vec![
        LayerActivity {
            attention: 0,
            ffn: 0
        };
        weights.config.n_layers
    ];
    for id in &set.members {
        let threshold = *thresholds
            .entry((id.layer, id.kind))
            .or_insert_with(|| policy.slice_threshold(map.kind_scores(id.layer, id.kind)));
        if policy.is_important(map.score(id), threshold) {
            if id.kind.is_attention() {
                per_layer[id.layer].attention += 1;
            } else {
                per_layer[id.layer].ffn += 1;
            }
        }
    }
    Ok(ActiveCounts { per_layer })
}

/// Candidate pool for matched random sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SampleScope {
    /// Every valid neuron of the model.
    Model,
    /// All indices inside the given `(layer, kind)` strata.
    Strata(BTreeSet<(usize, MatrixKind)>),
    /// Exactly these candidate neurons.
    Explicit(BTreeSet<NeuronId>),
}

impl SampleScope {
    fn candidates(&self, config: &ModelConfig, layer: usize, kind: MatrixKind) -> Vec<NeuronId> {
        match self {
            SampleScope::Model => (0..kind.dim(config))
                .map(|i| NeuronId::new(layer, kind, i))
                .collect(),
            SampleScope::Strata(strata) => {
                if strata.contains(&(layer, kind)) {
                    (0..kind.dim(config))
                        .map(|i| NeuronId::new(layer, kind, i))
                        .collect()
                } else {
                    Vec::new()
                }
            }
            SampleScope::Explicit(ids) => ids
                .iter()
                .filter(|id| id.layer == layer && id.kind == kind)
                .copied()
                .collect(),
        }
    }
}

/// Uniform sample without replacement, stratified per `(layer, kind)`,
/// matching the reference's per-stratum member counts exactly.
/// Deterministic per seed.
pub fn sample_random_matched(
    config: &ModelConfig,
    reference: &NeuronSet,
    scope: &SampleScope,
    seed: u64,
) -> Result<NeuronSet> {
    reference.validate(config)?;
    let mut rng = rng_for(seed, "matched-sample");
    let mut members = BTreeSet::new();
    for ((layer, kind), count) in reference.stratum_counts() {
        let candidates = scope.candidates(config, layer, kind);
        if candidates.len() < count {
            return Err(Error::Sampling(format!(
                "stratum (layer {layer}, kind {kind}) needs {count} neurons but the scope \
                 offers {}",
                candidates.len()
            )));
        }
        let picked = rand::seq::index::sample(&mut rng, candidates.len(), count);
        for idx in picked.iter() {
            members.insert(candidates[idx]);
        }
    }
    Ok(NeuronSet {
        label: format!("random-matched({})", reference.label),
        model_hash: reference.model_hash.clone(),
        provenance: Provenance::RandomMatched {
            seed,
            reference: reference.label.clone(),
        },
        members,
    })
}

pub fn save_set(path: &Path, set: &NeuronSet) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(set)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_set(path: &Path) -> Result<NeuronSet> {
    serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
