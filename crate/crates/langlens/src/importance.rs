//! Neuron importance scoring.
//!
//! The importance of a neuron for a document is the Frobenius norm of the
//! change in its sub-structure's residual-branch output when the neuron
//! is zeroed, with the sub-structure's input held fixed. Two routes
//! compute it:
//!
//! * **Deactivation oracles** ([`imp_oracle_sub`], [`imp_oracle_layer`])
//!   zero one neuron and rerun the affected computation. Slow but
//!   definitionally direct; everything else is tested against them.
//! * **Batched formulas** ([`imp_ffn_parallel`], [`imp_v_parallel`],
//!   [`imp_qk_parallel`]) compute every score of a layer from one
//!   forward pass. The FFN and V/O formulas are algebraically exact: the
//!   output change from zeroing neuron `k` is the rank-1 matrix
//!   `h_ffn[:,k] ⊗ w_down[k,:]` (resp. `concat[:,k] ⊗ wo[k,:]`), whose
//!   norm factors into a column norm times a row norm. The Q/K formula
//!   scores the change in attention probabilities and approximates the
//!   full output change.
//!
//! Per layer there are three independent score vectors. Zeroing column
//! `k` of `w_gate` or `w_up`, or row `k` of `w_down`, all force
//! `h_ffn[:,k] = 0`, so GATE/UP/DOWN share one vector. Zeroing `wv[:,k]`
//! and `wo[k,:]` remove the same rank-1 output term, so V/O share one.
//! Zeroing `wq[:,k]` and `wk[:,k]` delete the same rank-1 term of
//! `Q·Kᵀ`, so Q/K share one.

use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::model::{
    self, forward, ForwardTrace, MatrixKind, ModelConfig, NeuronId, TransformerWeights,
};
use crate::seeds::sha256_hex;

/// Per-layer, per-matrix-kind importance scores for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub model_hash: String,
    pub doc_hash: String,
    pub layers: Vec<LayerImportance>,
}

/// The three independent score vectors of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    /// Length `d_mid`; shared by Q and K.
    pub qk: Vec<f64>,
    /// Length `d_mid`; shared by V and O.
    pub vo: Vec<f64>,
    /// Length `d_inter`; shared by GATE, UP, and DOWN.
    pub ffn: Vec<f64>,
}

impl ImportanceMap {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Scores for one matrix kind of one layer.
    pub fn kind_scores(&self, layer: usize, kind: MatrixKind) -> &[f64] {
        let l = &self.layers[layer];
        match kind {
            MatrixKind::Q | MatrixKind::K => &l.qk,
            MatrixKind::V | MatrixKind::O => &l.vo,
            MatrixKind::Gate | MatrixKind::Up | MatrixKind::Down => &l.ffn,
        }
    }

    pub fn score(&self, id: &NeuronId) -> f64 {
        self.kind_scores(id.layer, id.kind)[id.index]
    }

    /// Stored score count (each shared vector counted once).
    pub fn stored_entries(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.qk.len() + l.vo.len() + l.ffn.len())
            .sum()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::Format(format!(
                "importance map has {} layers, model has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.qk.len() != config.d_mid()
                || layer.vo.len() != config.d_mid()
                || layer.ffn.len() != config.d_inter
            {
                return Err(Error::Format(format!("layer {i} score lengths are wrong")));
            }
            for v in layer.qk.iter().chain(&layer.vo).chain(&layer.ffn) {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::Format(format!(
                        "layer {i} contains a negative or non-finite score"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Hash of a document in its canonical text form (space-joined ids).
pub fn doc_hash(doc: &[u32]) -> String {
    let text = doc
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    sha256_hex(text.as_bytes())
}

/// Hash of an ordered document collection.
pub fn corpus_hash(docs: &[Vec<u32>]) -> String {
    let joined = docs
        .iter()
        .map(|d| doc_hash(d))
        .collect::<Vec<_>>()
        .join(",");
    sha256_hex(joined.as_bytes())
}

fn check_layer(weights: &TransformerWeights, layer: usize) -> Result<()> {
    if layer >= weights.config.n_layers {
        return Err(Error::Input(format!(
            "layer {layer} out of range (n_layers = {})",
            weights.config.n_layers
        )));
    }
    Ok(())
}

fn frob_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Sub-structure oracle computed against an existing trace of the same
/// weights and document.
pub fn oracle_sub_from_trace(
    weights: &TransformerWeights,
    trace: &ForwardTrace,
    neuron: &NeuronId,
) -> Result<f64> {
    neuron.validate(&weights.config)?;
    let mut masked = weights.layers[neuron.layer].clone();
    masked.zero_neuron(neuron.kind, neuron.index);

    if neuron.kind.is_ffn() {
        let (_, ffn_out) = model::ffn_sub_forward(&masked, &trace.ffn_in[neuron.layer]);
        Ok(frob_diff(&ffn_out, &trace.ffn_out[neuron.layer]))
    } else {
        let (_, _, attn_out) = model::attn_sub_forward(
            &masked,
            &trace.attn_in[neuron.layer],
            weights.config.n_heads,
            weights.config.d_head,
        );
        Ok(frob_diff(&attn_out, &trace.attn_out[neuron.layer]))
    }
}

/// Norm of the sub-structure output change when `neuron` is zeroed, with
/// the sub-structure input held fixed (attention output for Q/K/V/O, FFN
/// output for GATE/UP/DOWN).
pub fn imp_oracle_sub(weights: &TransformerWeights, doc: &[u32], neuron: &NeuronId) -> Result<f64> {
    let trace = forward(weights, doc, None)?;
    oracle_sub_from_trace(weights, &trace, neuron)
}

/// Full-layer oracle against an existing trace: rerun the neuron's layer
/// from the captured `h[i]` with the neuron zeroed and compare `h[i+1]`.
pub fn oracle_layer_from_trace(
    weights: &TransformerWeights,
    trace: &ForwardTrace,
    neuron: &NeuronId,
) -> Result<f64> {
    neuron.validate(&weights.config)?;
    let mut layer = weights.layers[neuron.layer].clone();
    layer.zero_neuron(neuron.kind, neuron.index);
    let config = &weights.config;

    let h = &trace.h[neuron.layer];
    let x = model::rms_norm(h, &layer.norm_attn);
    let (_, _, attn_out) = model::attn_sub_forward(&layer, &x, config.n_heads, config.d_head);
    let h_mid = h + &attn_out;
    let y = model::rms_norm(&h_mid, &layer.norm_ffn);
    let (_, ffn_out) = model::ffn_sub_forward(&layer, &y);
    let h_next = &h_mid + &ffn_out;

    Ok(frob_diff(&h_next, &trace.h[neuron.layer + 1]))
}

/// Norm of the change in the hidden state after the neuron's layer, with
/// the layer input held fixed. For FFN neurons this equals
/// [`imp_oracle_sub`] exactly: attention runs before the FFN, so the
/// residual contribution cancels. For attention neurons it additionally
/// includes the perturbation's path through the layer's own FFN.
pub fn imp_oracle_layer(
    weights: &TransformerWeights,
    doc: &[u32],
    neuron: &NeuronId,
) -> Result<f64> {
    let trace = forward(weights, doc, None)?;
    oracle_layer_from_trace(weights, &trace, neuron)
}

/// `score[k] = ‖left[:,k]‖ · ‖right[k,:]‖` for every column/row pair:
/// the Frobenius norm of the rank-1 matrix `left[:,k] ⊗ right[k,:]`.
fn rank1_norms(left: &Array2<f64>, right: &Array2<f64>) -> Vec<f64> {
    let n = left.ncols();
    let mut col_sq = vec![0.0; n];
    for row in left.rows() {
        for (k, v) in row.iter().enumerate() {
            col_sq[k] += v * v;
        }
    }
    (0..n)
        .map(|k| {
            let row_norm = right.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            col_sq[k].sqrt() * row_norm
        })
        .collect()
}

/// Batched FFN importance from a trace.
pub fn ffn_parallel_from_trace(
    weights: &TransformerWeights,
    trace: &ForwardTrace,
    layer: usize,
) -> Result<Vec<f64>> {
    check_layer(weights, layer)?;
    Ok(rank1_norms(
        &trace.h_ffn[layer],
        &weights.layers[layer].w_down,
    ))
}

/// All FFN neuron importances of one layer in a single batched pass:
/// `score[k] = ‖h_ffn[:,k]‖ · ‖w_down[k,:]‖`. Covers UP, and because
/// zeroing the matching GATE column or DOWN row forces the same
/// `h_ffn[k] = 0`, also GATE and DOWN.
pub fn imp_ffn_parallel(
    weights: &TransformerWeights,
    doc: &[u32],
    layer: usize,
) -> Result<Vec<f64>> {
    check_layer(weights, layer)?;
    let trace = forward(weights, doc, None)?;
    ffn_parallel_from_trace(weights, &trace, layer)
}

/// Batched V/O importance from a trace.
pub fn v_parallel_from_trace(
    weights: &TransformerWeights,
    trace: &ForwardTrace,
    layer: usize,
) -> Result<Vec<f64>> {
    check_layer(weights, layer)?;
    Ok(rank1_norms(
        &trace.attn_concat[layer],
        &weights.layers[layer].wo,
    ))
}

/// All V importances of one layer, batched: zeroing `wv[:,k]` changes the
/// attention output by `(P·V[:,k]) ⊗ wo[k,:]`, and `P·V[:,k]` is column
/// `k` of the captured concatenated head outputs. Zeroing `wo[k,:]`
/// removes the same term, so the vector covers O as well.
pub fn imp_v_parallel(weights: &TransformerWeights, doc: &[u32], layer: usize) -> Result<Vec<f64>> {
    check_layer(weights, layer)?;
    let trace = forward(weights, doc, None)?;
    v_parallel_from_trace(weights, &trace, layer)
}

/// Q and K score vectors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QkScores {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
}

/// Batched Q/K importance from a trace.
pub fn qk_parallel_from_trace(
    weights: &TransformerWeights,
    trace: &ForwardTrace,
    layer: usize,
) -> Result<QkScores> {
    check_layer(weights, layer)?;
    let config = &weights.config;
    let lw = &weights.layers[layer];
    let x = &trace.attn_in[layer];
    let q = x.dot(&lw.wq);
    let k = x.dot(&lw.wk);
    let l = x.nrows();
    let d_head = config.d_head;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();

    let mut scores = vec![0.0; config.d_mid()];
    for g in 0..config.n_heads {
        let lo = g * d_head;
        let hi = lo + d_head;
        let qg = q.slice(s![.., lo..hi]);
        let kg = k.slice(s![.., lo..hi]);
        let raw = qg.dot(&kg.t());
        let probs = &trace.attn_probs[layer][g];
        for c in 0..d_head {
            let global = lo + c;
            // Remove the neuron's rank-1 contribution to the raw scores,
            // rescale, and re-softmax under the same causal mask.
            let mut perturbed = Array2::zeros((l, l));
            for i in 0..l {
                for j in 0..l {
                    perturbed[[i, j]] = (raw[[i, j]] - q[[i, global]] * k[[j, global]]) * inv_sqrt;
                }
            }
            model::causal_softmax_inplace(&mut perturbed);
            scores[global] = frob_diff(&perturbed, probs);
        }
    }

    // Zeroing wq[:,k] and zeroing wk[:,k] delete the same rank-1 term of
    // Q·Kᵀ, so the K vector equals the Q vector.
    Ok(QkScores {
        k: scores.clone(),
        q: scores,
    })
}

/// All Q and K importances of one layer, batched: for each neuron, the
/// Frobenius norm of the change in the causal attention probabilities
/// when the neuron's rank-1 score contribution is removed.
///
/// This approximates the full attention-output change (it does not weight
/// by V or the output projection); its fidelity against the full-layer
/// oracle is reported, not asserted.
pub fn imp_qk_parallel(
    weights: &TransformerWeights,
    doc: &[u32],
    layer: usize,
) -> Result<QkScores> {
    check_layer(weights, layer)?;
    let trace = forward(weights, doc, None)?;
    qk_parallel_from_trace(weights, &trace, layer)
}

/// Full importance map from an existing trace.
pub fn imp_all_from_trace(
    weights: &TransformerWeights,
    trace: &ForwardTrace,
) -> Result<ImportanceMap> {
    let mut layers = Vec::with_capacity(weights.config.n_layers);
    for layer in 0..weights.config.n_layers {
        let qk = qk_parallel_from_trace(weights, trace, layer)?;
        layers.push(LayerImportance {
            qk: qk.q,
            vo: v_parallel_from_trace(weights, trace, layer)?,
            ffn: ffn_parallel_from_trace(weights, trace, layer)?,
        });
    }
    Ok(ImportanceMap {
        model_hash: weights.model_hash(),
        doc_hash: doc_hash(&trace.tokens),
        layers,
    })
}

/// Importance of every neuron in every layer for one document, assembled
/// from the batched per-layer operations.
pub fn imp_all(weights: &TransformerWeights, doc: &[u32]) -> Result<ImportanceMap> {
    let trace = forward(weights, doc, None)?;
    imp_all_from_trace(weights, &trace)
}

/// Element-wise mean importance over a corpus; the doc hash covers the
/// whole corpus.
pub fn imp_corpus_mean(weights: &TransformerWeights, docs: &[Vec<u32>]) -> Result<ImportanceMap> {
    if docs.is_empty() {
        return Err(Error::Input("empty corpus".to_string()));
    }
    let maps: Vec<ImportanceMap> = docs
        .iter()
        .map(|doc| imp_all(weights, doc))
        .collect::<Result<_>>()?;
    let mut layers = maps[0].layers.clone();
    for map in &maps[1..] {
        for (acc, layer) in layers.iter_mut().zip(&map.layers) {
            for (a, b) in acc.qk.iter_mut().zip(&layer.qk) {
                *a += b;
            }
            for (a, b) in acc.vo.iter_mut().zip(&layer.vo) {
                *a += b;
            }
            for (a, b) in acc.ffn.iter_mut().zip(&layer.ffn) {
                *a += b;
            }
        }
    }
    let n = docs.len() as f64;
    for layer in &mut layers {
        for v in layer
            .qk
            .iter_mut()
            .chain(layer.vo.iter_mut())
            .chain(layer.ffn.iter_mut())
        {
            *v /= n;
        }
    }
    Ok(ImportanceMap {
        model_hash: weights.model_hash(),
        doc_hash: corpus_hash(docs),
        layers,
    })
}

// ---------------------------------------------------------------------------
// Serialization: plain JSON below 10^4 stored scores, the weight-file
// binary convention above it.

#[derive(Serialize, Deserialize)]
struct ImportanceMeta {
    model_hash: String,
    doc_hash: String,
    n_layers: usize,
}

const JSON_SCORE_LIMIT: usize = 10_000;

/// Serialize an importance map; the format depends on size.
pub fn importance_to_bytes(map: &ImportanceMap) -> Vec<u8> {
    if map.stored_entries() < JSON_SCORE_LIMIT {
        let mut bytes = serde_json::to_vec_pretty(map).expect("map serializes");
        bytes.push(b'\n');
        return bytes;
    }
    let mut tensors = Vec::new();
    for (i, layer) in map.layers.iter().enumerate() {
        tensors.push((
            format!("layers.{i}.qk"),
            vec![layer.qk.len()],
            layer.qk.clone(),
        ));
        tensors.push((
            format!("layers.{i}.vo"),
            vec![layer.vo.len()],
            layer.vo.clone(),
        ));
        tensors.push((
            format!("layers.{i}.ffn"),
            vec![layer.ffn.len()],
            layer.ffn.clone(),
        ));
    }
    model::encode_container(
        &ImportanceMeta {
            model_hash: map.model_hash.clone(),
            doc_hash: map.doc_hash.clone(),
            n_layers: map.layers.len(),
        },
        &tensors,
    )
}

/// Parse either serialization of an importance map.
pub fn importance_from_bytes(bytes: &[u8]) -> Result<ImportanceMap> {
    if let Ok(map) = serde_json::from_slice::<ImportanceMap>(bytes) {
        return Ok(map);
    }
    let (meta, mut tensors): (ImportanceMeta, _) = model::decode_container(bytes)?;
    let mut layers = Vec::with_capacity(meta.n_layers);
    for i in 0..meta.n_layers {
        let mut take = |name: String| -> Result<Vec<f64>> {
            tensors
                .remove(&name)
                .map(|(_, data)| data)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        layers.push(LayerImportance {
            qk: take(format!("layers.{i}.qk"))?,
            vo: take(format!("layers.{i}.vo"))?,
            ffn: take(format!("layers.{i}.ffn"))?,
        });
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unknown tensor name {name}")));
    }
    Ok(ImportanceMap {
        model_hash: meta.model_hash,
        doc_hash: meta.doc_hash,
        layers,
    })
}

pub fn save_importance(path: &Path, map: &ImportanceMap) -> Result<()> {
    write_atomic(path, &importance_to_bytes(map))
}

pub fn load_importance(path: &Path) -> Result<ImportanceMap> {
    importance_from_bytes(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Comparison helpers.

/// Largest entrywise relative deviation between two score vectors.
///
/// Entries are compared as `|a-b| / max(|a|, |b|, floor)` with
/// `floor = 1e-6 ×` the joint maximum magnitude: below that level both
/// values sit in the rounding noise of the computations being compared,
/// where a bare ratio would only amplify noise. Identically zero vectors
/// deviate by zero.
pub fn max_relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "vectors must have equal length");
    let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let floor = scale * 1e-6;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Spearman rank correlation with average ranks for ties.
///
/// Returns `None` when either input is constant or shorter than 2.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "vectors must have equal length");
    if a.len() < 2 {
        return None;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite scores"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_config;

    fn setup() -> (TransformerWeights, Vec<u32>) {
        let w = TransformerWeights::init_random(test_config(), 11).unwrap();
        let doc: Vec<u32> = vec![1, 9, 2, 8, 3, 7];
        (w, doc)
    }

    #[test]
    fn zero_neuron_scores_zero_everywhere() {
        let (mut w, doc) = setup();
        for kind in MatrixKind::ALL {
            let id = NeuronId::new(0, kind, 2);
            w.zero_neuron(&id);
            assert_eq!(imp_oracle_sub(&w, &doc, &id).unwrap(), 0.0, "{kind}");
            assert_eq!(imp_oracle_layer(&w, &doc, &id).unwrap(), 0.0, "{kind}");
            let map = imp_all(&w, &doc).unwrap();
            assert_eq!(map.score(&id), 0.0, "{kind}");
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let (w, doc) = setup();
        let bad = NeuronId::new(0, MatrixKind::Up, 16);
        assert!(imp_oracle_sub(&w, &doc, &bad).is_err());
        assert!(imp_ffn_parallel(&w, &doc, 2).is_err());
        assert!(imp_v_parallel(&w, &doc, 9).is_err());
        assert!(imp_qk_parallel(&w, &doc, 9).is_err());
    }

    #[test]
    fn ffn_closed_form_on_handmade_model() {
        // Single position with h_ffn[0] = 3 against w_down row [2, 0]:
        // zeroing UP column 0 changes the FFN output by exactly [6, 0].
        let config = ModelConfig {
            n_layers: 1,
            d_model: 2,
            n_heads: 1,
            d_head: 2,
            d_inter: 2,
            vocab_size: 4,
            max_seq_len: 4,
        };
        let mut w = TransformerWeights::init_random(config, 0).unwrap();
        // Silence attention so the FFN input is the embedding row itself.
        w.layers[0].wv.fill(0.0);
        w.layers[0].wo.fill(0.0);
        w.tok_emb.fill(0.0);
        w.tok_emb[[1, 0]] = 1.0;
        w.pos_emb.fill(0.0);
        // The normalized FFN input row is [y0, 0].
        let y0 = 1.0 / (0.5 + crate::model::RMS_EPS).sqrt();
        let g = 10.0;
        w.layers[0].w_gate.fill(0.0);
        w.layers[0].w_gate[[0, 0]] = g / y0;
        w.layers[0].w_up.fill(0.0);
        w.layers[0].w_up[[0, 0]] = 3.0 / (crate::model::silu(g) * y0);
        w.layers[0].w_down.fill(0.0);
        w.layers[0].w_down[[0, 0]] = 2.0;

        let doc = vec![1u32];
        let trace = forward(&w, &doc, None).unwrap();
        let h_ffn = trace.h_ffn[0][[0, 0]];
        assert!((h_ffn - 3.0).abs() < 1e-9, "h_ffn = {h_ffn}");

        let id = NeuronId::new(0, MatrixKind::Up, 0);
        let oracle = imp_oracle_sub(&w, &doc, &id).unwrap();
        assert!((oracle - 6.0).abs() < 1e-8, "oracle = {oracle}");
        let par = imp_ffn_parallel(&w, &doc, 0).unwrap();
        assert!((par[0] - 6.0).abs() < 1e-8, "parallel = {}", par[0]);
    }

    #[test]
    fn ffn_parallel_matches_oracle_sweep() {
        let (w, doc) = setup();
        let trace = forward(&w, &doc, None).unwrap();
        for layer in 0..w.config.n_layers {
            let par = ffn_parallel_from_trace(&w, &trace, layer).unwrap();
            for kind in MatrixKind::FFN {
                let oracle: Vec<f64> = (0..w.config.d_inter)
                    .map(|k| {
                        oracle_sub_from_trace(&w, &trace, &NeuronId::new(layer, kind, k)).unwrap()
                    })
                    .collect();
                let dev = max_relative_deviation(&par, &oracle);
                assert!(dev <= 1e-9, "layer {layer} kind {kind}: deviation {dev}");
            }
        }
    }

    #[test]
    fn v_parallel_matches_oracle_sweep() {
        let (w, doc) = setup();
        let trace = forward(&w, &doc, None).unwrap();
        for layer in 0..w.config.n_layers {
            let par = v_parallel_from_trace(&w, &trace, layer).unwrap();
            for kind in [MatrixKind::V, MatrixKind::O] {
                let oracle: Vec<f64> = (0..w.config.d_mid())
                    .map(|k| {
                        oracle_sub_from_trace(&w, &trace, &NeuronId::new(layer, kind, k)).unwrap()
                    })
                    .collect();
                let dev = max_relative_deviation(&par, &oracle);
                assert!(dev <= 1e-9, "layer {layer} kind {kind}: deviation {dev}");
            }
        }
    }

    #[test]
    fn ffn_sub_oracle_equals_layer_oracle() {
        let (w, doc) = setup();
        for k in [0, 5, 15] {
            let id = NeuronId::new(1, MatrixKind::Up, k);
            let sub = imp_oracle_sub(&w, &doc, &id).unwrap();
            let layer = imp_oracle_layer(&w, &doc, &id).unwrap();
            assert!(
                (sub - layer).abs() <= 1e-12 * sub.max(1.0),
                "sub {sub} vs layer {layer}"
            );
        }
    }

    #[test]
    fn doubling_w_down_doubles_ffn_scores() {
        let (w, doc) = setup();
        let base = imp_ffn_parallel(&w, &doc, 0).unwrap();
        let mut scaled = w.clone();
        scaled.layers[0].w_down.mapv_inplace(|v| 2.0 * v);
        let twice = imp_ffn_parallel(&scaled, &doc, 0).unwrap();
        for (a, b) in base.iter().zip(twice.iter()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn tripling_wo_triples_vo_scores() {
        let (w, doc) = setup();
        let base = imp_v_parallel(&w, &doc, 1).unwrap();
        let mut scaled = w.clone();
        scaled.layers[1].wo.mapv_inplace(|v| 3.0 * v);
        let tripled = imp_v_parallel(&scaled, &doc, 1).unwrap();
        for (a, b) in base.iter().zip(tripled.iter()) {
            assert!((3.0 * a - b).abs() <= 1e-14 * b.abs());
        }
    }

    #[test]
    fn qk_zero_column_scores_zero() {
        let (mut w, doc) = setup();
        w.layers[0].wq.column_mut(3).fill(0.0);
        w.layers[0].wk.column_mut(3).fill(0.0);
        let scores = imp_qk_parallel(&w, &doc, 0).unwrap();
        assert_eq!(scores.q[3], 0.0);
        assert_eq!(scores.k[3], scores.q[3]);
    }

    #[test]
    fn single_position_attention_is_degenerate() {
        let (w, _) = setup();
        let scores = imp_qk_parallel(&w, &[4], 0).unwrap();
        assert!(scores.q.iter().all(|&s| s == 0.0));
        assert!(scores.k.iter().all(|&s| s == 0.0));
    }

    /// Per-neuron reference for the Q/K formula: physically zero the
    /// projection column, recompute the probabilities from scratch, and
    /// take the norm of the probability change.
    fn qk_loop_reference(
        w: &TransformerWeights,
        trace: &ForwardTrace,
        layer: usize,
        kind: MatrixKind,
        neuron: usize,
    ) -> f64 {
        let mut lw = w.layers[layer].clone();
        lw.zero_neuron(kind, neuron);
        let (probs, _, _) = model::attn_sub_forward(
            &lw,
            &trace.attn_in[layer],
            w.config.n_heads,
            w.config.d_head,
        );
        let mut total = 0.0;
        for (head, orig) in probs.iter().zip(&trace.attn_probs[layer]) {
            let d = frob_diff(head, orig);
            total += d * d;
        }
        total.sqrt()
    }

    #[test]
    fn qk_batched_matches_explicit_loop() {
        let (w, doc) = setup();
        let trace = forward(&w, &doc, None).unwrap();
        for layer in 0..w.config.n_layers {
            let batched = qk_parallel_from_trace(&w, &trace, layer).unwrap();
            for (vector, kind) in [(&batched.q, MatrixKind::Q), (&batched.k, MatrixKind::K)] {
                let looped: Vec<f64> = (0..w.config.d_mid())
                    .map(|k| qk_loop_reference(&w, &trace, layer, kind, k))
                    .collect();
                let dev = max_relative_deviation(vector, &looped);
                assert!(dev <= 1e-9, "layer {layer} kind {kind}: deviation {dev}");
            }
        }
    }

    #[test]
    fn map_is_reproducible_and_consistent() {
        let (w, doc) = setup();
        let a = imp_all(&w, &doc).unwrap();
        let b = imp_all(&w, &doc).unwrap();
        assert_eq!(a, b);
        a.validate(&w.config).unwrap();
        for layer in 0..w.config.n_layers {
            assert_eq!(
                a.kind_scores(layer, MatrixKind::Gate),
                a.kind_scores(layer, MatrixKind::Up)
            );
            assert_eq!(
                a.kind_scores(layer, MatrixKind::Up),
                a.kind_scores(layer, MatrixKind::Down)
            );
            assert_eq!(
                a.kind_scores(layer, MatrixKind::V),
                a.kind_scores(layer, MatrixKind::O)
            );
        }
    }

    #[test]
    fn map_with_zero_ffn_weights_has_zero_ffn_scores() {
        let (mut w, doc) = setup();
        for layer in &mut w.layers {
            layer.w_gate.fill(0.0);
            layer.w_up.fill(0.0);
            layer.w_down.fill(0.0);
        }
        let map = imp_all(&w, &doc).unwrap();
        for layer in &map.layers {
            assert!(layer.ffn.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spot_scores_match_oracles() {
        let (w, doc) = setup();
        let map = imp_all(&w, &doc).unwrap();
        let trace = forward(&w, &doc, None).unwrap();
        let mut rng = crate::seeds::rng_for(5, "spot");
        use rand::Rng;
        for _ in 0..50 {
            let layer = rng.random_range(0..w.config.n_layers);
            let kind = [
                MatrixKind::V,
                MatrixKind::O,
                MatrixKind::Gate,
                MatrixKind::Up,
                MatrixKind::Down,
            ][rng.random_range(0..5)];
            let index = rng.random_range(0..kind.dim(&w.config));
            let id = NeuronId::new(layer, kind, index);
            let oracle = oracle_sub_from_trace(&w, &trace, &id).unwrap();
            let score = map.score(&id);
            let dev = max_relative_deviation(&[score], &[oracle]);
            assert!(dev <= 1e-9, "{id}: map {score} oracle {oracle}");
        }
    }

    #[test]
    fn importance_round_trips_both_formats() {
        let (w, doc) = setup();
        let map = imp_all(&w, &doc).unwrap();
        assert!(map.stored_entries() < JSON_SCORE_LIMIT);
        let json = importance_to_bytes(&map);
        assert_eq!(json[0], b'{');
        assert_eq!(importance_from_bytes(&json).unwrap(), map);

        // Replicate layers until the binary path triggers.
        let mut big = map.clone();
        while big.stored_entries() < JSON_SCORE_LIMIT {
            big.layers.extend(map.layers.iter().cloned());
        }
        let bin = importance_to_bytes(&big);
        assert_ne!(bin[0], b'{');
        assert_eq!(importance_from_bytes(&bin).unwrap(), big);
    }

    #[test]
    fn corpus_mean_averages() {
        let (w, doc) = setup();
        let single = imp_all(&w, &doc).unwrap();
        let mean = imp_corpus_mean(&w, &[doc.clone(), doc.clone()]).unwrap();
        for (a, b) in single.layers.iter().zip(mean.layers.iter()) {
            for (x, y) in a.ffn.iter().zip(b.ffn.iter()) {
                assert!((x - y).abs() <= 1e-15);
            }
        }
        assert!(imp_corpus_mean(&w, &[]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        let rho = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.5, 2.0, 3.0]).unwrap();
        assert!(rho > 0.8);
    }

    #[test]
    fn relative_deviation_helper() {
        assert_eq!(max_relative_deviation(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(max_relative_deviation(&[1.0], &[1.0]), 0.0);
        assert!(max_relative_deviation(&[1.0], &[1.0 + 1e-8]) > 1e-9);
        // A discrepancy far below the vector scale is treated as noise.
        assert!(max_relative_deviation(&[1.0, 1e-14], &[1.0, 2e-14]) < 1e-7);
    }
}
