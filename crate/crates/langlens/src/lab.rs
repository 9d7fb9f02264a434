//! Structured deactivation experiments.
//!
//! Layers are partitioned into an understanding prefix `U`, a generation
//! suffix `G`, and the task-solving middle `S`. A deactivation
//! configuration switches four region/structure scopes independently:
//! all kinds in `U`, attention kinds in `S`, FFN kinds in `S`, and all
//! kinds in `G`. The selected neurons come either from a language's
//! detected set or from a random baseline with exactly matching
//! per-(layer, kind) counts.
//!
//! Evaluation measures held-out perplexity per language before and after
//! masking. Per-language performance change is `Δ = before − after`
//! (perplexity is lower-is-better, so negative means degradation), and
//! the single summary metric is `Δ_pivot − Δ_others`: large and positive
//! when a deactivation selectively harms the non-pivot languages.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{sample_random_matched, NeuronSet, SampleScope};
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::{
    forward, nll_sum, rms_norm, DeactivationMask, MatrixKind, ModelConfig, TransformerWeights,
};

/// Split of layers into understanding / task-solving / generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub n_layers: usize,
    pub n_under: usize,
    pub n_gen: usize,
}

impl LayerPartition {
    pub fn understanding(&self) -> Range<usize> {
        0..self.n_under
    }

    pub fn task_solving(&self) -> Range<usize> {
        self.n_under..self.n_layers - self.n_gen
    }

    pub fn generation(&self) -> Range<usize> {
        self.n_layers - self.n_gen..self.n_layers
    }
}

/// Build a partition, requiring a non-empty task-solving region.
pub fn partition(config: &ModelConfig, n_under: usize, n_gen: usize) -> Result<LayerPartition> {
    if n_under + n_gen >= config.n_layers {
        return Err(Error::Config(format!(
            "n_under ({n_under}) + n_gen ({n_gen}) must leave at least one task-solving \
             layer out of {}",
            config.n_layers
        )));
    }
    Ok(LayerPartition {
        n_layers: config.n_layers,
        n_under,
        n_gen,
    })
}

/// Where the deactivated neurons come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum NeuronSource {
    LangSpecific,
    RandomMatched { seed: u64 },
}

/// Four independent region/structure switches plus the neuron source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeactivationConfig {
    pub under: bool,
    pub s_attn: bool,
    pub s_ffn: bool,
    pub gen: bool,
    pub source: NeuronSource,
    /// Language whose neuron set is deactivated; carried for reporting.
    pub target_lang: String,
}

impl DeactivationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.under || self.s_attn || self.s_ffn || self.gen) {
            return Err(Error::Config(
                "at least one of under/s_attn/s_ffn/gen must be enabled".to_string(),
            ));
        }
        Ok(())
    }

    /// The `(layer, kind)` strata this configuration switches on.
    pub fn strata(&self, partition: &LayerPartition) -> BTreeSet<(usize, MatrixKind)> {
        let mut strata = BTreeSet::new();
        if self.under {
            for layer in partition.understanding() {
                for kind in MatrixKind::ALL {
                    strata.insert((layer, kind));
                }
            }
        }
        if self.s_attn {
            for layer in partition.task_solving() {
                for kind in MatrixKind::ATTENTION {
                    strata.insert((layer, kind));
                }
            }
        }
        if self.s_ffn {
            for layer in partition.task_solving() {
                for kind in MatrixKind::FFN {
                    strata.insert((layer, kind));
                }
            }
        }
        if self.gen {
            for layer in partition.generation() {
                for kind in MatrixKind::ALL {
                    strata.insert((layer, kind));
                }
            }
        }
        strata
    }

    /// Stable one-line description, used as the `config` column in
    /// reports.
    pub fn column_label(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let source = match self.source {
            NeuronSource::LangSpecific => "lang-spec".to_string(),
            NeuronSource::RandomMatched { seed } => format!("random(seed={seed})"),
        };
        format!(
            "under={},s_attn={},s_ffn={},gen={},source={},target={}",
            onoff(self.under),
            onoff(self.s_attn),
            onoff(self.s_ffn),
            onoff(self.gen),
            source,
            self.target_lang
        )
    }
}

/// A selected mask plus warnings for on-flag scopes that contributed
/// nothing (allowed, but worth surfacing).
#[derive(Debug, Clone)]
pub struct SelectedMask {
    pub mask: DeactivationMask,
    pub empty_scopes: Vec<String>,
}

/// Restrict a neuron set to the configuration's scopes, optionally
/// replacing members by a count-matched random sample within the same
/// scopes.
pub fn select_config_neurons(
    config: &ModelConfig,
    set: &NeuronSet,
    partition: &LayerPartition,
    dcfg: &DeactivationConfig,
) -> Result<SelectedMask> {
    dcfg.validate()?;
    if partition.n_layers != config.n_layers {
        return Err(Error::Config(format!(
            "partition covers {} layers, model has {}",
            partition.n_layers, config.n_layers
        )));
    }
    set.validate(config)?;

    let strata = dcfg.strata(partition);
    let scoped = set.restrict_to_strata(&strata, format!("{}∩scope", set.label));

    let mut empty_scopes = Vec::new();
    let mut check = |name: &str, enabled: bool, pred: &dyn Fn(usize, MatrixKind) -> bool| {
        if enabled && !scoped.members.iter().any(|id| pred(id.layer, id.kind)) {
            empty_scopes.push(format!("scope `{name}` is on but contributes no neurons"));
        }
    };
    check("under", dcfg.under, &|l, _| {
        partition.understanding().contains(&l)
    });
    check("s_attn", dcfg.s_attn, &|l, k| {
        partition.task_solving().contains(&l) && k.is_attention()
    });
    check("s_ffn", dcfg.s_ffn, &|l, k| {
        partition.task_solving().contains(&l) && k.is_ffn()
    });
    check("gen", dcfg.gen, &|l, _| partition.generation().contains(&l));

    let members = match dcfg.source {
        NeuronSource::LangSpecific => scoped.members,
        NeuronSource::RandomMatched { seed } => {
            let sampled =
                sample_random_matched(config, &scoped, &SampleScope::Strata(strata), seed)?;
            sampled.members
        }
    };

    Ok(SelectedMask {
        mask: members.into_iter().collect(),
        empty_scopes,
    })
}

/// Corpus-level perplexity: `exp(total nll / total scored positions)`.
pub fn perplexity(weights: &TransformerWeights, docs: &[Vec<u32>]) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Input("empty evaluation corpus".to_string()));
    }
    for doc in docs {
        if doc.len() < 2 {
            return Err(Error::Input(
                "evaluation documents need at least 2 tokens".to_string(),
            ));
        }
    }
    let parts: Vec<(f64, usize)> = docs
        .par_iter()
        .map(|doc| {
            let trace = forward(weights, doc, None)?;
            Ok(nll_sum(&trace.logits, doc))
        })
        .collect::<Result<_>>()?;
    let (total, positions) = parts
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (ds, dn)| (s + ds, n + dn));
    Ok((total / positions as f64).exp())
}

/// Per-language evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageEval {
    pub label: String,
    pub ppl_before: f64,
    pub ppl_after: f64,
    /// Performance change `ppl_before − ppl_after`; negative means the
    /// mask degraded this language.
    pub perf_delta: f64,
}

/// Before/after evaluation of one deactivation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pivot: String,
    pub languages: Vec<LanguageEval>,
    pub delta_pivot: f64,
    pub delta_others: f64,
    pub delta: f64,
}

/// The summary metric: pivot performance change minus the mean non-pivot
/// performance change.
pub fn delta_metric(delta_pivot: f64, delta_others: f64) -> f64 {
    delta_pivot - delta_others
}

/// Evaluate a mask on per-language held-out corpora.
pub fn evaluate(
    weights: &TransformerWeights,
    mask: &DeactivationMask,
    eval_corpora: &BTreeMap<String, Vec<Vec<u32>>>,
    pivot: &str,
) -> Result<EvalReport> {
    if !eval_corpora.contains_key(pivot) {
        return Err(Error::Input(format!(
            "pivot language {pivot} has no corpus"
        )));
    }
    if eval_corpora.len() < 2 {
        return Err(Error::Input(
            "need at least one non-pivot language to evaluate".to_string(),
        ));
    }
    for (label, docs) in eval_corpora {
        if docs.is_empty() {
            return Err(Error::Input(format!(
                "language {label} has an empty corpus"
            )));
        }
    }
    let masked = weights.with_mask(mask)?;

    let mut languages = Vec::with_capacity(eval_corpora.len());
    for (label, docs) in eval_corpora {
        let ppl_before = perplexity(weights, docs)?;
        let ppl_after = perplexity(&masked, docs)?;
        languages.push(LanguageEval {
            label: label.clone(),
            ppl_before,
            ppl_after,
            perf_delta: ppl_before - ppl_after,
        });
    }

    let delta_pivot = languages
        .iter()
        .find(|l| l.label == pivot)
        .expect("pivot checked above")
        .perf_delta;
    let others: Vec<f64> = languages
        .iter()
        .filter(|l| l.label != pivot)
        .map(|l| l.perf_delta)
        .collect();
    let delta_others = others.iter().sum::<f64>() / others.len() as f64;

    Ok(EvalReport {
        pivot: pivot.to_string(),
        languages,
        delta_pivot,
        delta_others,
        delta: delta_metric(delta_pivot, delta_others),
    })
}

/// Label used for tokens outside every language range.
pub const NON_WORD: &str = "non-word";

/// Language composition of one residual-stream state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatios {
    pub layer: usize,
    /// Fractions per language label plus [`NON_WORD`]; they sum to 1.
    pub fractions: BTreeMap<String, f64>,
}

/// Decode every captured residual state through the final norm and
/// unembedding to its argmax token, classify the token, and report the
/// per-layer language fractions.
pub fn probe_language_ratio(
    weights: &TransformerWeights,
    doc: &[u32],
    classifier: &CorpusConfig,
) -> Result<Vec<LayerRatios>> {
    classifier.validate()?;
    if classifier.vocab_size as usize != weights.config.vocab_size {
        return Err(Error::Input(format!(
            "classifier covers {} token ids, model vocabulary has {}",
            classifier.vocab_size, weights.config.vocab_size
        )));
    }
    let trace = forward(weights, doc, None)?;
    let positions = doc.len() as f64;

    let mut out = Vec::with_capacity(trace.h.len());
    for (layer, h) in trace.h.iter().enumerate() {
        let z = rms_norm(h, &weights.final_norm);
        let logits = z.dot(&weights.unembed);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for label in classifier.labels() {
            counts.insert(label.to_string(), 0);
        }
        counts.insert(NON_WORD.to_string(), 0);
        for row in logits.rows() {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            let label = classifier
                .classify_token(best as u32)?
                .unwrap_or(NON_WORD)
                .to_string();
            *counts.get_mut(&label).expect("all labels pre-seeded") += 1;
        }
        let fractions = counts
            .into_iter()
            .map(|(label, c)| (label, c as f64 / positions))
            .collect();
        out.push(LayerRatios { layer, fractions });
    }
    Ok(out)
}

/// One evaluated grid entry of the partition search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub n_under: usize,
    pub n_gen: usize,
    pub mask_size: usize,
    pub delta_pivot: f64,
    pub delta_target: f64,
    pub delta: f64,
}

/// Grid-search outcome: all evaluated rows, skipped entries, the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub rows: Vec<TuneRow>,
    pub skipped: Vec<SkippedEntry>,
    pub best: LayerPartition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub n_under: usize,
    pub n_gen: usize,
    pub reason: String,
}

/// `true` when `a` beats `b`: larger delta, ties broken by smaller
/// `n_under`, then smaller `n_gen`.
pub fn tune_row_beats(a: &TuneRow, b: &TuneRow) -> bool {
    if a.delta != b.delta {
        return a.delta > b.delta;
    }
    if a.n_under != b.n_under {
        return a.n_under < b.n_under;
    }
    a.n_gen < b.n_gen
}

/// Grid-search the partition sizes: for each valid `(n_under, n_gen)`,
/// deactivate the set inside the understanding region only and measure
/// the delta metric on pivot + target validation corpora. Invalid grid
/// entries are skipped with a recorded reason.
pub fn tune_partition(
    weights: &TransformerWeights,
    set: &NeuronSet,
    grid: &[(usize, usize)],
    validation: &BTreeMap<String, Vec<Vec<u32>>>,
    pivot: &str,
    target: &str,
) -> Result<TuneReport> {
    if grid.is_empty() {
        return Err(Error::Config("empty partition grid".to_string()));
    }
    if pivot == target {
        return Err(Error::Config(
            "pivot and target language must differ".to_string(),
        ));
    }
    for label in [pivot, target] {
        if !validation.contains_key(label) {
            return Err(Error::Input(format!(
                "validation corpus missing language {label}"
            )));
        }
    }
    let corpora: BTreeMap<String, Vec<Vec<u32>>> = [
        (pivot.to_string(), validation[pivot].clone()),
        (target.to_string(), validation[target].clone()),
    ]
    .into_iter()
    .collect();

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &(n_under, n_gen) in grid {
        let part = match partition(&weights.config, n_under, n_gen) {
            Ok(p) => p,
            Err(e) => {
                skipped.push(SkippedEntry {
                    n_under,
                    n_gen,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let dcfg = DeactivationConfig {
            under: true,
            s_attn: false,
            s_ffn: false,
            gen: false,
            source: NeuronSource::LangSpecific,
            target_lang: target.to_string(),
        };
        let selected = select_config_neurons(&weights.config, set, &part, &dcfg)?;
        let report = evaluate(weights, &selected.mask, &corpora, pivot)?;
        let delta_target = report
            .languages
            .iter()
            .find(|l| l.label == target)
            .expect("target present")
            .perf_delta;
        rows.push(TuneRow {
            n_under,
            n_gen,
            mask_size: selected.mask.len(),
            delta_pivot: report.delta_pivot,
            delta_target,
            delta: report.delta,
        });
    }

    let best_row = rows
        .iter()
        .fold(None::<&TuneRow>, |best, row| match best {
            Some(b) if !tune_row_beats(row, b) => Some(b),
            _ => Some(row),
        })
        .ok_or_else(|| Error::Config("no valid grid entries".to_string()))?;
    let best = partition(&weights.config, best_row.n_under, best_row.n_gen)?;

    Ok(TuneReport {
        rows,
        skipped,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::Provenance;
    use crate::model::{test_config, NeuronId};

    fn model() -> TransformerWeights {
        TransformerWeights::init_random(test_config(), 17).unwrap()
    }

    fn manual_set(w: &TransformerWeights, ids: &[NeuronId]) -> NeuronSet {
        NeuronSet {
            label: "B".to_string(),
            model_hash: w.model_hash(),
            provenance: Provenance::Note {
                text: "fixture".to_string(),
            },
            members: ids.iter().copied().collect(),
        }
    }

    #[test]
    fn partition_region_sizes() {
        let mut config = test_config();
        config.n_layers = 32;
        let p = partition(&config, 8, 2).unwrap();
        assert_eq!(p.task_solving().len(), 22);
        let p = partition(&config, 6, 3).unwrap();
        assert_eq!(p.task_solving().len(), 23);
        assert_eq!(p.understanding(), 0..6);
        assert_eq!(p.generation(), 29..32);
        assert!(partition(&config, 30, 2).is_err());
    }

    fn four_layer_model() -> TransformerWeights {
        let mut config = test_config();
        config.n_layers = 4;
        TransformerWeights::init_random(config, 23).unwrap()
    }

    #[test]
    fn full_scope_selects_whole_set() {
        let w = four_layer_model();
        let ids: Vec<NeuronId> = vec![
            NeuronId::new(0, MatrixKind::Q, 1),
            NeuronId::new(1, MatrixKind::Up, 5),
            NeuronId::new(2, MatrixKind::O, 3),
            NeuronId::new(3, MatrixKind::Down, 9),
        ];
        let set = manual_set(&w, &ids);
        let part = partition(&w.config, 1, 1).unwrap();
        let dcfg = DeactivationConfig {
            under: true,
            s_attn: true,
            s_ffn: true,
            gen: true,
            source: NeuronSource::LangSpecific,
            target_lang: "B".to_string(),
        };
        let selected = select_config_neurons(&w.config, &set, &part, &dcfg).unwrap();
        assert_eq!(selected.mask.len(), set.len());
        assert!(selected.empty_scopes.is_empty());
    }

    #[test]
    fn under_only_scope_can_be_empty() {
        let w = four_layer_model();
        let set = manual_set(&w, &[NeuronId::new(2, MatrixKind::Up, 5)]);
        let part = partition(&w.config, 1, 1).unwrap();
        let dcfg = DeactivationConfig {
            under: true,
            s_attn: false,
            s_ffn: false,
            gen: false,
            source: NeuronSource::LangSpecific,
            target_lang: "B".to_string(),
        };
        let selected = select_config_neurons(&w.config, &set, &part, &dcfg).unwrap();
        assert!(selected.mask.is_empty());
        assert_eq!(selected.empty_scopes.len(), 1);
    }

    #[test]
    fn s_attn_scope_keeps_only_attention_kinds_in_s() {
        let w = four_layer_model();
        let ids: Vec<NeuronId> = vec![
            NeuronId::new(0, MatrixKind::Q, 1),  // U
            NeuronId::new(1, MatrixKind::Q, 2),  // S, attention
            NeuronId::new(1, MatrixKind::Up, 3), // S, ffn
            NeuronId::new(2, MatrixKind::V, 4),  // S, attention
            NeuronId::new(3, MatrixKind::K, 5),  // G
        ];
        let set = manual_set(&w, &ids);
        let part = partition(&w.config, 1, 1).unwrap();
        let dcfg = DeactivationConfig {
            under: false,
            s_attn: true,
            s_ffn: false,
            gen: false,
            source: NeuronSource::LangSpecific,
            target_lang: "B".to_string(),
        };
        let selected = select_config_neurons(&w.config, &set, &part, &dcfg).unwrap();
        let members: Vec<NeuronId> = selected.mask.iter().copied().collect();
        assert_eq!(members, vec![ids[1], ids[3]]);
        for id in &members {
            assert!(part.task_solving().contains(&id.layer));
            assert!(id.kind.is_attention());
        }
    }

    #[test]
    fn no_flags_is_a_usage_error() {
        let dcfg = DeactivationConfig {
            under: false,
            s_attn: false,
            s_ffn: false,
            gen: false,
            source: NeuronSource::LangSpecific,
            target_lang: "B".to_string(),
        };
        assert!(matches!(dcfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn random_source_matches_counts_inside_scope() {
        let w = four_layer_model();
        let ids: Vec<NeuronId> = (0..6)
            .map(|i| NeuronId::new(1, MatrixKind::Up, i))
            .chain((0..3).map(|i| NeuronId::new(2, MatrixKind::Q, i)))
            .chain([NeuronId::new(0, MatrixKind::Q, 0)]) // outside scope
            .collect();
        let set = manual_set(&w, &ids);
        let part = partition(&w.config, 1, 1).unwrap();
        let mut dcfg = DeactivationConfig {
            under: false,
            s_attn: true,
            s_ffn: true,
            gen: false,
            source: NeuronSource::LangSpecific,
            target_lang: "B".to_string(),
        };
        let lang = select_config_neurons(&w.config, &set, &part, &dcfg).unwrap();
        dcfg.source = NeuronSource::RandomMatched { seed: 5 };
        let random = select_config_neurons(&w.config, &set, &part, &dcfg).unwrap();

        let strata = dcfg.strata(&part);
        let count_by = |mask: &DeactivationMask| {
            let mut m: BTreeMap<(usize, MatrixKind), usize> = BTreeMap::new();
            for id in mask.iter() {
                assert!(strata.contains(&(id.layer, id.kind)), "mask escaped scope");
                *m.entry((id.layer, id.kind)).or_insert(0) += 1;
            }
            m
        };
        assert_eq!(count_by(&lang.mask), count_by(&random.mask));
        assert_eq!(lang.mask.len(), 9);
    }

    fn eval_corpora() -> BTreeMap<String, Vec<Vec<u32>>> {
        [
            ("A".to_string(), vec![vec![1, 2, 3, 4], vec![5, 6, 7]]),
            ("B".to_string(), vec![vec![8, 9, 10, 1], vec![2, 4, 6]]),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn empty_mask_gives_zero_delta() {
        let w = model();
        let report = evaluate(&w, &DeactivationMask::new(), &eval_corpora(), "A").unwrap();
        for lang in &report.languages {
            assert_eq!(lang.ppl_before, lang.ppl_after);
            assert_eq!(lang.perf_delta, 0.0);
        }
        assert_eq!(report.delta, 0.0);
    }

    #[test]
    fn delta_arithmetic_matches_published_rows() {
        assert_eq!(delta_metric(-0.5, -7.9), 7.4);
        assert_eq!(delta_metric(0.2, -8.0), 8.2);
    }

    #[test]
    fn evaluate_validates_inputs() {
        let w = model();
        let mask = DeactivationMask::new();
        let mut corpora = eval_corpora();
        assert!(evaluate(&w, &mask, &corpora, "C").is_err());
        corpora.get_mut("B").unwrap().clear();
        assert!(evaluate(&w, &mask, &corpora, "A").is_err());
        let only_pivot: BTreeMap<String, Vec<Vec<u32>>> =
            [("A".to_string(), vec![vec![1, 2]])].into_iter().collect();
        assert!(evaluate(&w, &mask, &only_pivot, "A").is_err());
    }

    fn classifier() -> CorpusConfig {
        // Model vocabulary is 11: shared [0,2), A = [2,10), B unused.
        CorpusConfig {
            vocab_size: 11,
            shared_range: (0, 2),
            languages: vec![crate::corpus::SyntheticLanguageSpec {
                label: "A".to_string(),
                range: (2, 10),
                transition_seed: 0,
                shared_fraction: 0.1,
            }],
        }
    }

    #[test]
    fn probe_fractions_sum_to_one() {
        let w = model();
        let ratios = probe_language_ratio(&w, &[1, 5, 9, 3, 2, 8, 10, 0], &classifier()).unwrap();
        assert_eq!(ratios.len(), w.config.n_layers + 1);
        for layer in &ratios {
            let sum: f64 = layer.fractions.values().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn probe_single_position_is_indicator() {
        let w = model();
        let ratios = probe_language_ratio(&w, &[4], &classifier()).unwrap();
        for layer in &ratios {
            let mut ones = 0;
            for &v in layer.fractions.values() {
                assert!(v == 0.0 || v == 1.0);
                ones += (v == 1.0) as usize;
            }
            assert_eq!(ones, 1);
        }
    }

    #[test]
    fn probe_is_deterministic() {
        let w = model();
        let doc = [1, 5, 9, 3];
        let a = probe_language_ratio(&w, &doc, &classifier()).unwrap();
        let b = probe_language_ratio(&w, &doc, &classifier()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tune_tie_breaks_prefer_small_regions() {
        let mk = |n_under, n_gen, delta| TuneRow {
            n_under,
            n_gen,
            mask_size: 0,
            delta_pivot: 0.0,
            delta_target: 0.0,
            delta,
        };
        assert!(tune_row_beats(&mk(1, 1, 2.0), &mk(1, 1, 1.0)));
        assert!(tune_row_beats(&mk(1, 2, 1.0), &mk(2, 1, 1.0)));
        assert!(tune_row_beats(&mk(1, 1, 1.0), &mk(1, 2, 1.0)));
    }

    #[test]
    fn tune_single_valid_entry_is_forced() {
        let w = four_layer_model();
        let set = manual_set(
            &w,
            &[
                NeuronId::new(0, MatrixKind::Up, 1),
                NeuronId::new(1, MatrixKind::Up, 2),
            ],
        );
        let validation = eval_corpora();
        let report = tune_partition(&w, &set, &[(1, 1), (3, 1)], &validation, "A", "B").unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.best.n_under, 1);
        assert_eq!(report.best.n_gen, 1);
    }

    #[test]
    fn tune_best_matches_exhaustive_recomputation() {
        let w = four_layer_model();
        let set = manual_set(
            &w,
            &[
                NeuronId::new(0, MatrixKind::Up, 1),
                NeuronId::new(0, MatrixKind::Q, 2),
                NeuronId::new(1, MatrixKind::Down, 3),
                NeuronId::new(2, MatrixKind::V, 4),
            ],
        );
        let validation = eval_corpora();
        let grid = [(1, 1), (1, 2), (2, 1), (2, 2), (3, 2)];
        let report = tune_partition(&w, &set, &grid, &validation, "A", "B").unwrap();
        assert_eq!(report.skipped.len(), 2);

        let mut best: Option<&TuneRow> = None;
        for row in &report.rows {
            if best.map(|b| tune_row_beats(row, b)).unwrap_or(true) {
                best = Some(row);
            }
        }
        let best = best.unwrap();
        assert_eq!(
            (report.best.n_under, report.best.n_gen),
            (best.n_under, best.n_gen)
        );
    }
}
